"""Flat ``section.key = value`` configuration with fail-closed parsing.

A config file is a list of assignments, one per line::

    # comment
    seed = 3
    model.variant = cofrgenet-f
    [train]            # sets the prefix for the lines that follow
    total_iters = 500

Values are parsed according to the type of the documented default; unknown
keys and unparsable values raise :class:`ConfigError`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .blocks import VARIANTS, ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    checkpoint: str = ""
    stride: int = 0
    tokens: int = 4096


@dataclass(frozen=True)
class GenerateConfig:
    checkpoint: str = ""
    prompt: str = "ROMEO:"
    n_tokens: int = 200
    temperature: float = 0.8


@dataclass(frozen=True)
class GradcheckConfig:
    depths: tuple = (1, 3, 5, 7)
    draws: int = 1000
    h: float = 1e-6
    tol: float = 1e-5
    modules: bool = True


@dataclass(frozen=True)
class IdentitiesConfig:
    max_depth: int = 8
    draws: int = 1000
    det_draws: int = 200


@dataclass(frozen=True)
class BenchConfig:
    d: int = 7
    L: int = 8
    batch: int = 4096
    warmup: int = 10
    repeats: int = 100


_TRAIN_FIELDS = [f for f in dataclasses.fields(TrainConfig) if f.name not in ("model", "seed")]

SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "generate": GenerateConfig,
    "gradcheck": GradcheckConfig,
    "identities": IdentitiesConfig,
    "bench": BenchConfig,
}

HELP = {
    "seed": "seed for initialisation, batch sampling and generation",
    "model.variant": "one of " + ", ".join(sorted(VARIANTS)),
    "model.vocab": "vocabulary size (bytes: 256)",
    "model.n_layers": "number of residual blocks",
    "model.p": "embedding width",
    "model.l_max": "maximum sequence length",
    "model.heads": "heads in baseline attention",
    "model.alpha": "baseline FFN expansion factor",
    "model.L": "ladders per ensemble",
    "model.d": "ladder depth (1..16)",
    "model.epsilon": "pole-guard minimum denominator magnitude",
    "model.impl": "continued-fraction kernel: continuant or literal",
    "train.total_iters": "optimizer steps t; depth-k ladder rows unfreeze at ceil(t(1-2^-k))",
    "train.batch_size": "sequences per step",
    "train.seq_len": "tokens per training sequence (<= model.l_max)",
    "train.lr": "constant learning rate",
    "train.weight_decay": "decoupled weight decay on matrices",
    "train.beta1": "first-moment decay",
    "train.beta2": "second-moment decay",
    "train.grad_clip": "global gradient-norm clip (0 disables)",
    "train.schedule": "dyadic unfreeze schedule on/off",
    "train.dtype": "float64 or float32",
    "train.eval_stride": "stride of the validation sliding window",
    "train.eval_tokens": "validation tokens scored after training",
    "train.verify_freeze": "assert frozen rows stay bit-identical (slower)",
    "train.checkpoint_every": "also checkpoint every N steps (0: only at the end)",
    "train.corpus": "path of a text/byte corpus (empty: bundled Shakespeare)",
    "eval.checkpoint": "checkpoint to evaluate (default: OUT/checkpoint.cfgn)",
    "eval.stride": "sliding-window stride (0: the trained eval_stride)",
    "eval.tokens": "validation tokens to score (0: all)",
    "generate.checkpoint": "checkpoint to sample from (default: OUT/checkpoint.cfgn)",
    "generate.prompt": "prompt text",
    "generate.n_tokens": "bytes to generate",
    "generate.temperature": "sampling temperature (<= 0: greedy)",
    "gradcheck.depths": "comma-separated depths for the fraction-gradient sweep",
    "gradcheck.draws": "random draws per depth",
    "gradcheck.h": "central-difference step",
    "gradcheck.tol": "maximum relative error",
    "gradcheck.modules": "also check every block and the assembled model",
    "identities.max_depth": "largest d for the cross-product identity",
    "identities.draws": "random draws per depth",
    "identities.det_draws": "random draws per size for the determinant form",
    "bench.d": "ladder depth",
    "bench.L": "ladders",
    "bench.batch": "rows per evaluation",
    "bench.warmup": "untimed warmup runs",
    "bench.repeats": "timed runs (median reported)",
}


def _fields(section: str):
    if section == "train":
        return _TRAIN_FIELDS
    return dataclasses.fields(SECTIONS[section])


def _default(f):
    return f.default_factory() if f.default is dataclasses.MISSING else f.default


def _parse(key: str, raw: str, like):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(like).__name__}") from None
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        raw = raw[1:-1]
    return raw


def known_keys() -> dict[str, object]:
    keys = {"seed": 0}
    for section in SECTIONS:
        for f in _fields(section):
            keys[f"{section}.{f.name}"] = _default(f)
    return keys


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    values: dict = field(default_factory=dict)

    def section(self, name: str):
        kwargs = {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith(name + ".")}
        try:
            if name == "train":
                return TrainConfig(seed=self.seed, model=self.section("model"), **kwargs)
            return SECTIONS[name](**kwargs)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def train(self) -> TrainConfig:
        return self.section("train")

    @property
    def model(self) -> ModelConfig:
        return self.section("model")


def parse_assignments(lines, source: str = "<overrides>") -> dict[str, str]:
    out, prefix = {}, ""
    for no, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if text.startswith("[") and text.endswith("]"):
            prefix = text[1:-1].strip()
            if prefix and prefix not in SECTIONS:
                raise ConfigError(f"{source}:{no}: unknown section [{prefix}]")
            prefix = prefix + "." if prefix else ""
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{no}: expected key = value, got {text!r}")
        key, value = (s.strip() for s in text.split("=", 1))
        out[prefix + key if "." not in key else key] = value
    return out


def load_config(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    """Merge file, ``--set`` overrides and ``--seed`` (later wins); reject unknown keys."""
    raw = {}
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        raw.update(parse_assignments(text.splitlines(), str(path)))
    raw.update(parse_assignments(overrides))
    known = known_keys()
    values = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r} (see --config-reference)")
        values[key] = _parse(key, value, known[key])
    run_seed = values.pop("seed", 0)
    if seed is not None:
        run_seed = seed
    cfg = RunConfig(run_seed, values)
    for name in SECTIONS:
        if name != "train":  # train's cross-field checks run when a command asks for it
            cfg.section(name)
    return cfg


def reference() -> str:
    """Every accepted key with its default and meaning."""
    lines = ["# cofrgenet configuration keys (key = default  # meaning)"]
    current = None
    for key, default in known_keys().items():
        section = key.split(".", 1)[0] if "." in key else ""
        if section != current:
            lines.append("")
            current = section
        if isinstance(default, tuple):
            shown = ",".join(str(v) for v in default)
        elif isinstance(default, bool):
            shown = str(default).lower()
        else:
            shown = str(default)
        lines.append(f"{key} = {shown}  # {HELP.get(key, '')}")
    return "\n".join(lines) + "\n"
