"""``cofrgenet`` command line: train, eval, generate, gradcheck, identities, params, bench.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import sys
from pathlib import Path

import numpy as np

from . import cfcore, checks
from .blocks import VARIANTS, CausalLM, ModelConfig
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config, reference
from .ladders import count_parameters

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class Reporter:
    """Prints lines and mirrors them to ``OUT/<command>.txt`` when an output directory is set."""

    def __init__(self, out: Path | None, name: str):
        self.lines = []
        self.path = out / f"{name}.txt" if out else None

    def __call__(self, line: str = "") -> None:
        print(line, flush=True)
        self.lines.append(line)

    def close(self) -> None:
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("\n".join(self.lines) + "\n")


def _checkpoint_path(explicit: str, out: Path | None) -> Path:
    path = Path(explicit) if explicit else (out / "checkpoint.cfgn" if out else None)
    if path is None:
        raise UsageError("no checkpoint given: set the checkpoint key or pass --out DIR")
    if not path.exists():
        raise UsageError(f"checkpoint {path} not found")
    return path


def _baseline_count(model: ModelConfig) -> int:
    base = dataclasses.replace(model, variant="baseline")
    return CausalLM(base, np.random.default_rng(0)).n_parameters()


# --- commands --------------------------------------------------------------------

def cmd_train(run: RunConfig, out: Path | None, report: Reporter, resume: bool = False) -> int:
    from .training import TrainState, load_checkpoint, load_corpus, train, unigram_entropy

    cfg = run.train
    ckpt = out / "checkpoint.cfgn" if out else None
    if resume:
        if ckpt is None or not ckpt.exists():
            raise UsageError("--resume needs an existing OUT/checkpoint.cfgn")
        state = load_checkpoint(ckpt)
        if "train.total_iters" in run.values:
            state.cfg = dataclasses.replace(state.cfg, total_iters=cfg.total_iters)
        cfg = state.cfg
        report(f"resuming from iteration {state.iteration}")
    else:
        state = TrainState.create(cfg)
    corpus = load_corpus(cfg.corpus or None)
    n, base = state.model.n_parameters(), _baseline_count(cfg.model)
    report(f"variant {cfg.model.variant}: {n} parameters (baseline at this shape: {base}, ratio {n / base:.3f})")
    report(f"corpus: {corpus.train.size} train / {corpus.val.size} val bytes")
    result = train(state, corpus, out, log=report)
    report(f"val loss {result.val_loss:.4f} (uniform {math.log(256):.4f}, "
           f"unigram entropy {unigram_entropy(corpus.val):.4f})")
    if out:
        report(f"wrote {out / 'metrics.csv'} and {out / 'checkpoint.cfgn'}")
    return EXIT_OK


def cmd_eval(run: RunConfig, out: Path | None, report: Reporter) -> int:
    from .training import evaluate_perplexity, load_checkpoint, load_corpus

    ev = run.section("eval")
    state = load_checkpoint(_checkpoint_path(ev.checkpoint, out))
    corpus = load_corpus(state.cfg.corpus or None)
    ids = corpus.val[: ev.tokens + 1] if ev.tokens else corpus.val
    stride = ev.stride or state.cfg.eval_stride
    if stride > state.cfg.seq_len:
        raise UsageError(f"eval.stride {stride} exceeds the trained seq_len {state.cfg.seq_len}")
    ppl = evaluate_perplexity(state.model, ids, stride, state.cfg.seq_len)
    report(f"iteration {state.iteration}: val loss {math.log(ppl):.4f}  perplexity {ppl:.3f} "
           f"({ids.size} bytes, window {state.cfg.seq_len}, stride {stride})")
    return EXIT_OK


def cmd_generate(run: RunConfig, out: Path | None, report: Reporter) -> int:
    from .training import decode, encode, load_checkpoint

    gen = run.section("generate")
    state = load_checkpoint(_checkpoint_path(gen.checkpoint, out))
    ids = state.model.generate(encode(gen.prompt), gen.n_tokens, gen.temperature, np.random.default_rng(run.seed))
    report(decode(ids))
    return EXIT_OK


def cmd_gradcheck(run: RunConfig, out: Path | None, report: Reporter) -> int:
    gc = run.section("gradcheck")
    ok = True
    sweep = checks.cf_gradient_sweep(gc.depths, gc.draws, run.seed, gc.h, grad_fn=cfcore.cf_grad)
    for d, err in sweep.items():
        passed = err <= gc.tol
        ok &= passed
        report(f"{'PASS' if passed else 'FAIL'} fraction gradient d={d}: max rel err {err:.3e} ({gc.draws} draws)")
    if gc.modules:
        for name, err in checks.module_suite(run.seed).items():
            passed = err <= gc.tol
            ok &= passed
            report(f"{'PASS' if passed else 'FAIL'} module {name}: max rel err {err:.3e}")
    report("gradcheck " + ("passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_FAIL


def cmd_identities(run: RunConfig, out: Path | None, report: Reporter) -> int:
    ic = run.section("identities")
    ok = True
    examples = [("K_2(1,1)", cfcore.continuant([1, 1]), 2.0),
                ("K_3(1,2,3)", cfcore.continuant([1, 2, 3]), 10.0),
                ("det tridiag(2,3)", cfcore.tridiagonal_determinant([2, 3]), 7.0)]
    for label, got, want in examples:
        passed = abs(got - want) <= 1e-12
        ok &= passed
        report(f"{'PASS' if passed else 'FAIL'} {label} = {got:g} (expected {want:g})")
    res = checks.identity_sweep(ic.max_depth, ic.draws, run.seed)
    passed = res <= checks.IDENTITY_TOL
    ok &= passed
    report(f"{'PASS' if passed else 'FAIL'} continuant cross-product identity, 0<=k<=d<={ic.max_depth}: "
           f"max rel residual {res:.3e}")
    det = checks.determinant_sweep(ic.max_depth, ic.det_draws, run.seed)
    passed = det <= checks.DET_TOL
    ok &= passed
    report(f"{'PASS' if passed else 'FAIL'} tridiagonal determinant vs recursion, k<={ic.max_depth}: "
           f"max rel error {det:.3e}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_params(run: RunConfig, out: Path | None, report: Reporter) -> int:
    m = run.model
    shape = dict(p=m.p, l=m.l_max, L=m.L, d=m.d, alpha=m.alpha)
    report(f"shape: p={m.p} l={m.l_max} L={m.L} d={m.d} alpha={m.alpha} heads={m.heads} "
           f"n_layers={m.n_layers} vocab={m.vocab}")
    report(f"{'component':<10} {'exact':>10} {'scale':>10} {'ratio':>7}")
    for kind in ("attention", "cattnu", "cattnm", "ffn", "cffn"):
        c = count_parameters(kind, heads=m.heads, **shape)
        report(f"{kind:<10} {c.exact:>10d} {c.scale:>10.0f} {c.ratio:>7.3f}")
    report("")
    base = _baseline_count(m)
    report(f"{'model':<12} {'params':>10} {'vs baseline':>12}")
    for variant in VARIANTS:
        n = CausalLM(dataclasses.replace(m, variant=variant), np.random.default_rng(0)).n_parameters()
        report(f"{variant:<12} {n:>10d} {n / base:>12.3f}")
    return EXIT_OK


def cmd_bench(run: RunConfig, out: Path | None, report: Reporter) -> int:
    from .bench import run_bench

    bc = run.section("bench")
    rep = run_bench(bc.d, bc.L, bc.batch, bc.warmup, bc.repeats, seed=run.seed)
    for line in rep.lines():
        report(line)
    ok = rep.counts_ok and (bc.d == 1 or rep.faster)
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "generate": cmd_generate,
    "gradcheck": cmd_gradcheck,
    "identities": cmd_identities,
    "params": cmd_params,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value config file")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                        help="override one key (repeatable)")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--out", metavar="DIR", help="output directory for metrics, checkpoints, reports")

    parser = argparse.ArgumentParser(prog="cofrgenet", description=__doc__.splitlines()[0])
    parser.add_argument("--config-reference", action="store_true", help="print every config key and exit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    helps = {
        "train": "train a byte-level language model",
        "eval": "strided perplexity of a checkpoint on the validation split",
        "generate": "sample text from a checkpoint",
        "gradcheck": "finite-difference checks of every analytic gradient",
        "identities": "continuant identity and determinant sweeps",
        "params": "exact and scale parameter counts per variant",
        "bench": "continuant vs literal kernel timing and division counts",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, parents=[common], help=text, description=text)
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.cfgn")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config_reference:
        sys.stdout.write(reference())
        return EXIT_OK
    if not args.command:
        parser.print_usage(sys.stderr)
        print("cofrgenet: error: a command is required", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out) if args.out else None
    report = Reporter(out, args.command)
    try:
        run = load_config(args.config, args.set, args.seed)
        kwargs = {"resume": args.resume} if args.command == "train" else {}
        code = COMMANDS[args.command](run, out, report, **kwargs)
    except (ConfigError, UsageError, CheckpointError) as exc:
        print(f"cofrgenet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeError, ArithmeticError) as exc:
        print(f"cofrgenet {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    finally:
        report.close()
    return code


if __name__ == "__main__":
    sys.exit(main())
