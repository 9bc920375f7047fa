"""Byte-level causal language-model training with a dyadic unfreeze schedule.

Ladder rows feeding partial denominator ``a_k`` (``depth`` k >= 1) stay at
their initial values until iteration ``unfreeze_iter(k, t)``; everything else
(depth 0) trains from the first step.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .blocks import CausalLM, ModelConfig
from .checkpoint import CheckpointError, read_container, write_container
from .module import Module

VOCAB = 256
METRICS_COLUMNS = ("iter", "loss", "lr", "active_depths")


# --- data ------------------------------------------------------------------------

@dataclass(frozen=True)
class Corpus:
    train: np.ndarray
    val: np.ndarray
    vocab: int = VOCAB


def bundled_corpus_path() -> Path:
    return Path(str(resources.files("cofrgenet") / "data" / "shakespeare.txt"))


def encode(text) -> np.ndarray:
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def decode(ids) -> str:
    return bytes(int(i) for i in ids).decode("utf-8", errors="replace")


def load_corpus(path=None, train_fraction: float = 0.9) -> Corpus:
    """Bytes of ``path`` (the bundled text when None), split by prefix."""
    path = Path(path) if path else bundled_corpus_path()
    ids = encode(path.read_bytes())
    if ids.size == 0:
        raise ValueError(f"corpus {path} is empty")
    cut = int(ids.size * train_fraction)
    return Corpus(ids[:cut], ids[cut:])


def unigram_entropy(ids) -> float:
    """Entropy in nats of the empirical byte distribution: the best any context-free model can score."""
    counts = np.bincount(np.asarray(ids), minlength=VOCAB).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


# --- schedule --------------------------------------------------------------------

def unfreeze_iter(k: int, t: int) -> int:
    """First iteration at which depth-``k`` parameters update: ``ceil(t (1 - 2^-k))``."""
    if k < 0:
        raise ValueError(f"depth must be >= 0, got {k}")
    if k == 0:
        return 0
    return -(-t * (2**k - 1) // 2**k)


@dataclass(frozen=True)
class TrainConfig:
    total_iters: int = 2000
    batch_size: int = 16
    seq_len: int = 64
    lr: float = 3e-4
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    grad_clip: float = 1.0
    schedule: bool = True
    seed: int = 0
    dtype: str = "float64"
    eval_stride: int = 32
    eval_tokens: int = 4096
    verify_freeze: bool = False
    checkpoint_every: int = 0
    corpus: str = ""
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.seq_len > self.model.l_max:
            raise ValueError(f"seq_len {self.seq_len} exceeds model l_max {self.model.l_max}")
        if not 1 <= self.eval_stride <= self.seq_len:
            raise ValueError(f"eval_stride must be in 1..seq_len, got {self.eval_stride}")
        if self.schedule and self.total_iters < 2 ** (self.model.d + 1):
            raise ValueError(f"total_iters {self.total_iters} < 2^(d+1) = {2 ** (self.model.d + 1)}: "
                             "the deepest ladder rows would never unfreeze")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def activation_iter(self, depth: int) -> int:
        return unfreeze_iter(depth, self.total_iters) if self.schedule else 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelConfig(**d.get("model", {}))
        return cls(**d)


# --- optimizer -------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay and per-parameter step counts.

    A parameter's moments and bias correction start from zero at its first
    update, so groups unfrozen late begin with fresh statistics.
    """

    def __init__(self, named_params, lr=3e-4, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.1,
                 grad_clip: float | None = 1.0):
        self.params = dict(named_params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.weight_decay, self.grad_clip = weight_decay, grad_clip
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.steps = {n: 0 for n in self.params}

    def step(self, active) -> float:
        """Update parameters named in ``active`` from their ``.grad``; returns the pre-clip grad norm."""
        active = set(active)  # iterate in registration order: set order varies with hash seeding
        grads = {n: p.grad for n, p in self.params.items() if n in active and p.grad is not None}
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
        scale = 1.0
        if self.grad_clip and norm > self.grad_clip:
            scale = self.grad_clip / norm
        b1, b2 = self.betas
        for n, g in grads.items():
            p = self.params[n]
            g = g * scale
            self.steps[n] += 1
            t = self.steps[n]
            self.m[n] = b1 * self.m[n] + (1 - b1) * g
            self.v[n] = b2 * self.v[n] + (1 - b2) * g * g
            mhat = self.m[n] / (1 - b1**t)
            vhat = self.v[n] / (1 - b2**t)
            if p.decay and self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
            if p.mask is not None:
                p.data *= p.mask
        return norm


# --- state -----------------------------------------------------------------------

class NonFiniteLossError(RuntimeError):
    pass


class FreezeViolation(AssertionError):
    pass


@dataclass
class TrainState:
    cfg: TrainConfig
    model: CausalLM
    optimizer: AdamW
    rng: np.random.Generator
    iteration: int = 0

    @classmethod
    def create(cls, cfg: TrainConfig) -> "TrainState":
        init_rng = np.random.default_rng(cfg.seed)
        model = CausalLM(cfg.model, init_rng)
        model.astype(np.dtype(cfg.dtype))
        opt = AdamW(model.named_parameters(), cfg.lr, (cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay,
                    grad_clip=cfg.grad_clip)
        return cls(cfg, model, opt, np.random.default_rng([cfg.seed, 1]))

    def active_names(self, iteration: int | None = None) -> list[str]:
        it = self.iteration if iteration is None else iteration
        return [n for n, p in self.optimizer.params.items() if self.cfg.activation_iter(p.depth) <= it]

    def active_depths(self) -> list[int]:
        return sorted({p.depth for n, p in self.optimizer.params.items() if n in set(self.active_names())})


def sample_batch(ids: np.ndarray, batch: int, l: int, rng: np.random.Generator) -> np.ndarray:
    """``batch`` random windows of ``l + 1`` tokens."""
    if ids.size < l + 1:
        raise ValueError(f"need at least {l + 1} tokens, have {ids.size}")
    starts = rng.integers(0, ids.size - l, size=batch)
    return np.stack([ids[s: s + l + 1] for s in starts])


def range_dump(model: Module) -> str:
    lines = []
    for name, t in model.named_trackers():
        lo, hi = t.bounds()
        lines.append(f"  {name}: min={np.array2string(lo, precision=4)} max={np.array2string(hi, precision=4)}")
    return "\n".join(lines)


def train_step(state: TrainState, batch: np.ndarray) -> float:
    """One optimizer step on ``batch`` (``[B, l+1]`` token ids); returns the loss."""
    model = state.model
    active = set(state.active_names())
    for n, p in state.optimizer.params.items():
        p.requires_grad = n in active
        p.grad = None
    model.set_range_mode("recording")
    with ad.Tape() as tape:
        loss = model.loss(batch[:, :-1], batch[:, 1:])
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteLossError(f"non-finite loss {value} at iteration {state.iteration}; ladder ranges:\n"
                                 + range_dump(model))
    tape.backward(loss)
    state.optimizer.step(active)
    for p in state.optimizer.params.values():
        p.grad = None
    state.iteration += 1
    return value


# --- evaluation ------------------------------------------------------------------

def _logits(model, x: np.ndarray) -> np.ndarray:
    out = model(x[None, :])
    return np.asarray(getattr(out, "data", out), dtype=np.float64)[0]


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class _clipping:
    """Switch trackers to clipping for the duration of an evaluation."""

    def __init__(self, model):
        self.model = model

    def __enter__(self):
        trackers = getattr(self.model, "named_trackers", lambda: [])()
        self.modes = [(t, t.mode) for _, t in trackers]
        for t, _ in self.modes:
            t.mode = "clipping"

    def __exit__(self, *exc):
        for t, mode in self.modes:
            t.mode = mode


def evaluate_perplexity(model, ids, stride: int, l: int) -> float:
    """Strided sliding-window perplexity.

    Windows of up to ``l`` inputs start every ``stride`` tokens; each scores
    only the targets not already scored by an earlier window, so every
    target is predicted exactly once with at least ``l - stride`` tokens of
    context (except near the start).
    """
    ids = np.asarray(ids, dtype=np.int64)
    if not 1 <= stride <= l:
        raise ValueError(f"stride must be in 1..l={l}, got {stride}")
    n_targets = ids.size - 1
    if n_targets < 1:
        raise ValueError("need at least two tokens to score")
    total, scored, prev_end = 0.0, 0, 0
    with _clipping(model):
        for begin in range(0, n_targets, stride):
            end = min(begin + l, n_targets)
            logp = _log_softmax(_logits(model, ids[begin:end]))
            skip = prev_end - begin
            targets = ids[begin + 1 + skip: end + 1]
            total -= float(logp[np.arange(skip, end - begin), targets].sum())
            scored += targets.size
            prev_end = end
            if end == n_targets:
                break
    return math.exp(total / scored)


def evaluate_loss(model, ids, cfg: TrainConfig) -> float:
    """Mean next-token loss on up to ``cfg.eval_tokens`` validation tokens (strided windows)."""
    ids = np.asarray(ids)[: cfg.eval_tokens + 1]
    return math.log(evaluate_perplexity(model, ids, cfg.eval_stride, cfg.seq_len))


# --- loop ------------------------------------------------------------------------

@dataclass
class TrainResult:
    losses: list[float]
    val_loss: float
    iterations: int


def _snapshot_frozen(state: TrainState) -> dict[str, tuple[int, np.ndarray]]:
    return {n: (state.cfg.activation_iter(p.depth), p.data.copy())
            for n, p in state.optimizer.params.items() if state.cfg.activation_iter(p.depth) > state.iteration}


def _verify_frozen(state: TrainState, snap) -> None:
    for n, (start, init) in snap.items():
        if state.iteration <= start and not np.array_equal(state.optimizer.params[n].data, init):
            raise FreezeViolation(f"{n} changed before its unfreeze iteration {start} "
                                  f"(now at iteration {state.iteration})")


def train(state: TrainState, corpus: Corpus, out_dir=None,
          log: Callable[[str], None] | None = None, log_every: int = 100) -> TrainResult:
    """Run until ``cfg.total_iters``; resumes from ``state.iteration``.

    With ``out_dir`` set, appends to ``metrics.csv`` and writes
    ``checkpoint.cfgn`` at the end (and every ``checkpoint_every`` steps).
    """
    cfg = state.cfg
    writer, fh = None, None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics = out_dir / "metrics.csv"
        new = not metrics.exists() or metrics.stat().st_size == 0
        fh = open(metrics, "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(METRICS_COLUMNS)
    snap = _snapshot_frozen(state) if cfg.verify_freeze else {}
    losses = []
    try:
        while state.iteration < cfg.total_iters:
            depths = ";".join(str(d) for d in state.active_depths())
            it = state.iteration
            loss = train_step(state, sample_batch(corpus.train, cfg.batch_size, cfg.seq_len, state.rng))
            losses.append(loss)
            if snap:
                _verify_frozen(state, snap)
            if writer is not None:
                writer.writerow([it, repr(loss), repr(cfg.lr), depths])
            if log and (state.iteration % log_every == 0 or state.iteration == cfg.total_iters):
                log(f"iter {state.iteration:6d}  loss {loss:.4f}  active depths {depths}")
            if out_dir is not None and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
                fh.flush()
                save_checkpoint(out_dir / "checkpoint.cfgn", state)
    finally:
        if fh is not None:
            fh.close()
    val = evaluate_loss(state.model, corpus.val, cfg)
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint.cfgn", state)
    return TrainResult(losses, val, state.iteration)


# --- checkpoints -----------------------------------------------------------------

def save_checkpoint(path, state: TrainState) -> None:
    arrays = {}
    for n, p in state.optimizer.params.items():
        arrays[f"param/{n}"] = p.data
        arrays[f"adam.m/{n}"] = state.optimizer.m[n]
        arrays[f"adam.v/{n}"] = state.optimizer.v[n]
    for n, t in state.model.named_trackers():
        for key, value in t.state().items():
            arrays[f"tracker/{n}/{key}"] = value
    meta = {"config": state.cfg.to_dict(), "iteration": state.iteration,
            "rng": state.rng.bit_generator.state, "adam_steps": state.optimizer.steps}
    write_container(path, meta, arrays)


def load_checkpoint(path) -> TrainState:
    """Rebuild a complete :class:`TrainState`; nothing is returned unless every array is present."""
    meta, arrays = read_container(path)
    try:
        cfg = TrainConfig.from_dict(meta["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid config in header: {exc}") from None
    state = TrainState.create(cfg)
    opt = state.optimizer
    for n, p in opt.params.items():
        for key in (f"param/{n}", f"adam.m/{n}", f"adam.v/{n}"):
            if key not in arrays:
                raise CheckpointError(f"{path}: checkpoint lacks array {key!r}")
            if arrays[key].shape != p.shape:
                raise CheckpointError(f"{path}: {key} has shape {arrays[key].shape}, model expects {p.shape}")
        p.data = arrays[f"param/{n}"].copy()
        opt.m[n] = arrays[f"adam.m/{n}"].copy()
        opt.v[n] = arrays[f"adam.v/{n}"].copy()
        opt.steps[n] = int(meta["adam_steps"][n])
    for n, t in state.model.named_trackers():
        keys = [f"tracker/{n}/{k}" for k in ("lo", "hi", "count")]
        if any(k not in arrays for k in keys):
            raise CheckpointError(f"{path}: checkpoint lacks range-tracker state for {n}")
        t.load_state(dict(zip(("lo", "hi", "count"), (arrays[k] for k in keys))))
    state.rng.bit_generator.state = meta["rng"]
    state.iteration = int(meta["iteration"])
    return state
