import math
import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cofrgenet.blocks import ModelConfig
from cofrgenet.module import Parameter
from cofrgenet.training import (AdamW, Corpus, FreezeViolation, NonFiniteLossError, TrainConfig, TrainState,
                                encode, evaluate_perplexity, load_corpus, sample_batch, train, train_step,
                                unfreeze_iter, unigram_entropy)

TINY = ModelConfig(vocab=256, n_layers=1, p=8, l_max=16, heads=2, L=2, d=3)


def tiny_cfg(**kw):
    base = dict(total_iters=64, batch_size=4, seq_len=16, eval_stride=8, eval_tokens=256, model=TINY)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def corpus():
    return load_corpus()


# --- schedule ----------------------------------------------------------------------

@pytest.mark.parametrize("k, expected", [(0, 0), (1, 500), (2, 750), (3, 875)])
def test_unfreeze_examples(k, expected):
    assert unfreeze_iter(k, 1000) == expected


def test_unfreeze_rejects_negative_depth():
    with pytest.raises(ValueError):
        unfreeze_iter(-1, 100)


@given(st.integers(0, 16), st.integers(1, 10**7))
def test_active_span_is_floor(k, t):
    start = unfreeze_iter(k, t)
    assert 0 <= start <= t
    assert t - start == t // 2**k
    assert start == math.ceil(t * (1 - 2.0**-k)) or t > 2**50  # float ceil agrees where exact


def test_config_requires_every_depth_to_unfreeze():
    with pytest.raises(ValueError, match="never unfreeze"):
        tiny_cfg(total_iters=15)
    tiny_cfg(total_iters=15, schedule=False)
    with pytest.raises(ValueError, match="l_max"):
        tiny_cfg(seq_len=32)


# --- data --------------------------------------------------------------------------

def test_encode_bytes():
    np.testing.assert_array_equal(encode("ab"), [97, 98])


def test_load_corpus(tmp_path):
    f = tmp_path / "c.txt"
    f.write_bytes(bytes(range(256)) * 40)
    a, b = load_corpus(f), load_corpus(f)
    np.testing.assert_array_equal(a.train, b.train)
    assert a.train.size == int(0.9 * 10240) and a.train.size + a.val.size == 10240
    np.testing.assert_array_equal(np.concatenate([a.train, a.val]), np.tile(np.arange(256), 40))
    (tmp_path / "empty").write_bytes(b"")
    with pytest.raises(ValueError, match="empty"):
        load_corpus(tmp_path / "empty")


def test_one_mebibyte_loads_quickly(tmp_path):
    f = tmp_path / "big.bin"
    f.write_bytes(np.random.default_rng(0).integers(0, 256, 2**20, dtype=np.uint8).tobytes())
    t0 = time.perf_counter()
    c = load_corpus(f)
    assert time.perf_counter() - t0 < 1.0
    assert c.train.max() < 256


def test_bundled_corpus(corpus):
    assert 400_000 < corpus.train.size + corpus.val.size < 700_000
    assert 0 < unigram_entropy(corpus.val) < math.log(256)


def test_unigram_entropy_uniform():
    assert unigram_entropy(np.arange(256)) == pytest.approx(math.log(256))


def test_sample_batch_windows():
    ids = np.arange(100)
    b = sample_batch(ids, 5, 10, np.random.default_rng(0))
    assert b.shape == (5, 11)
    assert (np.diff(b, axis=1) == 1).all()


# --- optimizer ---------------------------------------------------------------------

def test_adamw_first_step_and_decay():
    w = Parameter(np.array([1.0, -2.0]), decay=True)
    b = Parameter(np.array([1.0]))
    opt = AdamW([("w", w), ("b", b)], lr=0.1, weight_decay=0.5, grad_clip=None)
    w.grad = np.array([3.0, -0.5])
    b.grad = np.array([2.0])
    opt.step(["w", "b"])
    # bias-corrected first Adam step moves each entry by lr * sign(g)
    np.testing.assert_allclose(w.data, np.array([1.0, -2.0]) * 0.95 - 0.1 * np.sign([3.0, -0.5]), rtol=1e-6)
    np.testing.assert_allclose(b.data, [0.9], rtol=1e-6)


def test_adamw_clips_global_norm_and_keeps_mask():
    mask = np.triu(np.ones((3, 3)))
    u = Parameter(np.ones((3, 3)), mask=mask)
    opt = AdamW([("u", u)], lr=0.01, grad_clip=1.0)
    u.grad = np.full((3, 3), 100.0)
    norm = opt.step(["u"])
    assert norm == pytest.approx(300.0)
    assert (np.tril(u.data, -1) == 0).all()
    np.testing.assert_allclose(opt.m["u"], 0.1 * np.full((3, 3), 100.0 / 300.0))


def test_adamw_ignores_inactive():
    a = Parameter(np.ones(2))
    opt = AdamW([("a", a)])
    a.grad = np.ones(2)
    opt.step([])
    np.testing.assert_array_equal(a.data, 1.0)
    assert opt.steps["a"] == 0


# --- training loop -----------------------------------------------------------------

def test_frozen_rows_bit_identical_before_unfreeze(corpus):
    cfg = tiny_cfg(verify_freeze=True)
    state = TrainState.create(cfg)
    init = {n: p.data.copy() for n, p in state.model.named_parameters()}
    depth = {n: p.depth for n, p in state.model.named_parameters()}
    while state.iteration < cfg.total_iters:
        train_step(state, sample_batch(corpus.train, 4, 16, state.rng))
        for n, p in state.model.named_parameters():
            if state.iteration <= unfreeze_iter(depth[n], cfg.total_iters):
                np.testing.assert_array_equal(p.data, init[n], err_msg=n)
    for n, p in state.model.named_parameters():
        assert not np.array_equal(p.data, init[n]), f"{n} never trained"
        assert state.optimizer.steps[n] == cfg.total_iters - unfreeze_iter(depth[n], cfg.total_iters)


def test_verify_freeze_detects_violation(corpus, monkeypatch):
    from cofrgenet import training

    state = TrainState.create(tiny_cfg(verify_freeze=True))
    snap = training._snapshot_frozen(state)
    assert snap and all(p.depth >= 1 for n, p in state.model.named_parameters() if n in snap)
    # an optimizer that ignores the schedule must be caught
    monkeypatch.setattr(TrainState, "active_names", lambda self, iteration=None: list(self.optimizer.params))
    train_step(state, sample_batch(corpus.train, 4, 16, state.rng))
    with pytest.raises(FreezeViolation):
        training._verify_frozen(state, snap)


def test_schedule_off_trains_everything_from_start(corpus):
    state = TrainState.create(tiny_cfg(schedule=False))
    train_step(state, sample_batch(corpus.train, 4, 16, state.rng))
    assert all(v == 1 for v in state.optimizer.steps.values())
    assert state.active_depths() == [0, 1, 2, 3]


def test_loss_decreases_on_small_text():
    text = np.frombuffer((b"the quick brown fox jumps over the lazy dog. " * 2300)[:100 * 1024], dtype=np.uint8)
    ids = text.astype(np.int64)
    c = Corpus(ids[:90000], ids[90000:])
    state = TrainState.create(tiny_cfg(total_iters=200, lr=3e-3))
    res = train(state, c)
    assert np.mean(res.losses[-10:]) < res.losses[0]
    assert res.iterations == 200


def test_ranges_are_monotone(corpus):
    state = TrainState.create(tiny_cfg())
    prev = None
    for _ in range(20):
        train_step(state, sample_batch(corpus.train, 4, 16, state.rng))
        now = {n: (t.lo.copy(), t.hi.copy()) for n, t in state.model.named_trackers()}
        if prev:
            for n, (lo, hi) in now.items():
                assert (lo <= prev[n][0]).all() and (hi >= prev[n][1]).all()
        prev = now


def test_identical_seeds_identical_trajectories(corpus):
    runs = [train(TrainState.create(tiny_cfg(seed=5)), corpus).losses for _ in range(2)]
    assert runs[0] == runs[1]
    other = train(TrainState.create(tiny_cfg(seed=6)), corpus).losses
    assert other != runs[0]


def test_metrics_csv(tmp_path, corpus):
    state = TrainState.create(tiny_cfg())
    train(state, corpus, tmp_path)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "iter,loss,lr,active_depths"
    assert len(lines) == 65
    assert lines[1].split(",")[0] == "0" and lines[1].endswith(",0")
    assert lines[-1].endswith(",0;1;2;3")
    assert (tmp_path / "checkpoint.cfgn").exists()


def test_nonfinite_loss_aborts_with_range_dump(corpus):
    state = TrainState.create(tiny_cfg())
    state.model.head.data[0, 0] = np.nan
    with pytest.raises(NonFiniteLossError, match=r"ladder ranges:\n.*tracker.*min="):
        train_step(state, sample_batch(corpus.train, 4, 16, state.rng))


def test_float32_training_runs(corpus):
    state = TrainState.create(tiny_cfg(dtype="float32"))
    loss = train_step(state, sample_batch(corpus.train, 4, 16, state.rng))
    assert math.isfinite(loss)
    assert all(p.dtype == np.float32 for p in state.model.parameters())


# --- perplexity --------------------------------------------------------------------

class Uniform:
    def __init__(self, vocab):
        self.vocab = vocab

    def __call__(self, x):
        return np.zeros(x.shape + (self.vocab,))


class PeriodicCopy:
    """Predicts the token ``period`` steps back when that token is in the window."""

    def __init__(self, vocab, period, confidence=4.0):
        self.vocab, self.period, self.confidence = vocab, period, confidence

    def __call__(self, x):
        out = np.zeros(x.shape + (self.vocab,))
        n = x.shape[-1]
        for i in range(n):
            src = i + 1 - self.period
            if src >= 0:
                out[0, i, x[0, src]] = self.confidence
        return out


def _log_softmax(z):
    z = z - z.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def full_context_ppl(model, ids):
    nll = 0.0
    for j in range(1, len(ids)):
        nll -= _log_softmax(model(ids[None, :j])[0, -1])[ids[j]]
    return math.exp(nll / (len(ids) - 1))


def test_uniform_logits_give_vocab_perplexity():
    ids = np.random.default_rng(0).integers(0, 65, 500)
    assert evaluate_perplexity(Uniform(65), ids, 8, 16) == pytest.approx(65, abs=1e-6)


def test_stride_equal_to_window_is_disjoint_windows():
    rng = np.random.default_rng(1)
    ids = np.tile(rng.integers(0, 20, 12), 10)
    model = PeriodicCopy(20, 12)
    got = evaluate_perplexity(model, ids, 16, 16)
    nll, n = 0.0, 0
    for begin in range(0, len(ids) - 1, 16):
        end = min(begin + 16, len(ids) - 1)
        lp = _log_softmax(model(ids[None, begin:end])[0])
        nll -= lp[np.arange(end - begin), ids[begin + 1:end + 1]].sum()
        n += end - begin
    assert got == pytest.approx(math.exp(nll / n), rel=1e-12)


def test_strided_is_no_better_than_full_context():
    rng = np.random.default_rng(2)
    ids = np.tile(rng.integers(0, 30, 12), 25)[:300]
    model = PeriodicCopy(30, 12)
    full = full_context_ppl(model, ids)
    strided = evaluate_perplexity(model, ids, 8, 16)
    assert strided >= full
    assert strided > full * 1.01  # windows only 8..16 long really lose the 12-back source sometimes


def test_short_text_is_single_window():
    ids = np.array([1, 2, 3, 4])
    assert evaluate_perplexity(Uniform(10), ids, 4, 16) == pytest.approx(10)
    with pytest.raises(ValueError):
        evaluate_perplexity(Uniform(10), np.array([1]), 4, 16)
    with pytest.raises(ValueError, match="stride"):
        evaluate_perplexity(Uniform(10), ids, 17, 16)


def test_evaluation_restores_tracker_modes(corpus):
    state = TrainState.create(tiny_cfg())
    evaluate_perplexity(state.model, corpus.val[:100], 8, 16)
    assert all(t.mode == "recording" for _, t in state.model.named_trackers())
