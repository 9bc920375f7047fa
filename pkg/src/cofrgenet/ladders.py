"""Linear combinations of continued-fraction ladders.

An ensemble maps ``x`` (augmented with a leading 1) to ``y = U x + V z``
where ``z_j`` is the fractional part of ladder ``j`` with partial denominators
``a^(j) = W^(j) x``. The ``a_0`` terms of all ladders fold into ``U``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cfcore import PoleGuard
from .module import Module, Parameter

DEPTH_GRID = (1, 3, 5, 7)
MAX_DEPTH = 16


class RangeTracker:
    """Running per-ladder extrema of ladder outputs.

    In ``recording`` mode every observed output widens ``[lo, hi]``. In
    ``clipping`` mode outputs are clamped into the recorded range; ladders
    that were never observed pass through unchanged.
    """

    MODES = ("recording", "clipping")

    def __init__(self, n: int, mode: str = "recording"):
        self.lo = np.full(n, np.inf)
        self.hi = np.full(n, -np.inf)
        self.count = np.zeros(n, dtype=np.int64)
        self.mode = mode

    @property
    def mode(self) -> str:
        return self._mode

    @mode.setter
    def mode(self, value: str) -> None:
        if value not in self.MODES:
            raise ValueError(f"unknown tracker mode {value!r}; expected one of {self.MODES}")
        self._mode = value

    @property
    def n(self) -> int:
        return self.lo.shape[0]

    def update(self, z) -> "RangeTracker":
        if self.mode != "recording":
            raise RuntimeError("range tracker can only be updated in recording mode")
        z = np.asarray(z)
        m = z.shape[-1]
        if m > self.n:
            raise ValueError(f"tracker holds {self.n} ladders, got outputs for {m}")
        flat = z.reshape(-1, m)
        if flat.shape[0] == 0:
            return self
        self.lo[:m] = np.minimum(self.lo[:m], flat.min(axis=0))
        self.hi[:m] = np.maximum(self.hi[:m], flat.max(axis=0))
        self.count[:m] += flat.shape[0]
        return self

    def bounds(self, m: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        m = self.n if m is None else m
        seen = self.count[:m] > 0
        return np.where(seen, self.lo[:m], -np.inf), np.where(seen, self.hi[:m], np.inf)

    def __call__(self, z: Tensor) -> Tensor:
        if self.mode == "recording":
            self.update(z.data)
            return z
        lo, hi = self.bounds(z.shape[-1])
        return ad.clamp(z, lo.astype(z.dtype), hi.astype(z.dtype))

    def state(self) -> dict:
        return {"lo": self.lo.copy(), "hi": self.hi.copy(), "count": self.count.copy()}

    def load_state(self, state: dict) -> None:
        self.lo = np.array(state["lo"], dtype=np.float64)
        self.hi = np.array(state["hi"], dtype=np.float64)
        self.count = np.array(state["count"], dtype=np.int64)


def update_range(tracker: RangeTracker, z) -> RangeTracker:
    return tracker.update(z)


@dataclass(frozen=True)
class LadderConfig:
    p: int
    q: int
    L: int
    d: int
    guard: PoleGuard = field(default_factory=PoleGuard)
    bias: bool = True

    def __post_init__(self):
        if min(self.p, self.q, self.L) < 1:
            raise ValueError(f"p, q, L must be >= 1, got {self.p}, {self.q}, {self.L}")
        if not 1 <= self.d <= MAX_DEPTH:
            raise ValueError(f"depth d must be in 1..{MAX_DEPTH}, got {self.d}")


def init_ladder_rows(rng: np.random.Generator, L: int, p: int, bias: bool, bias_value: float = 1.0) -> np.ndarray:
    """Rows of ``W`` for one depth: small weights, intercept near ``bias_value``.

    With every ``a_k`` close to 1 the fraction sits in the Fibonacci regime
    (about 0.618), far from the pole guard.
    """
    w = rng.normal(0.0, 0.02 / np.sqrt(p), size=(L, p))
    if not bias:
        return w
    return np.concatenate([np.full((L, 1), bias_value), w], axis=1)


def augment(x: Tensor) -> Tensor:
    ones = Tensor(np.ones(x.shape[:-1] + (1,), dtype=x.dtype))
    return ad.concat([ones, x], axis=-1)


def ladder_denominators(x_aug: Tensor, rows: list[Parameter]) -> Tensor:
    """Partial denominators ``[..., L, d]`` from per-depth rows of shape ``(L, p')``."""
    L = rows[0].shape[0]
    d = len(rows)
    w = ad.reshape(ad.stack(rows, axis=1), (L * d, rows[0].shape[1]))
    a = ad.matmul(x_aug, ad.transpose(w))
    return ad.reshape(a, x_aug.shape[:-1] + (L, d))


class LadderEnsemble(Module):
    def __init__(self, cfg: LadderConfig, rng: np.random.Generator, impl: str = "continuant"):
        self.cfg = cfg
        self.impl = impl
        pin = cfg.p + 1 if cfg.bias else cfg.p
        self.U = Parameter(rng.normal(0.0, 0.02, size=(cfg.q, pin)), decay=True)
        self.V = Parameter(rng.normal(0.0, 0.02, size=(cfg.q, cfg.L)), decay=True)
        self.W = [Parameter(init_ladder_rows(rng, cfg.L, cfg.p, cfg.bias), depth=k)
                  for k in range(1, cfg.d + 1)]
        self.tracker = RangeTracker(cfg.L)

    def _inputs(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.cfg.p:
            raise ValueError(f"ladder ensemble expects input [..., {self.cfg.p}], got {list(x.shape)}")
        return augment(x) if self.cfg.bias else x

    def ladder_outputs(self, x: Tensor) -> Tensor:
        """``z [..., L]``, passed through the range tracker."""
        a = ladder_denominators(self._inputs(x), self.W)
        return self.tracker(ad.cf_layer(a, self.cfg.guard, impl=self.impl))

    def forward(self, x: Tensor) -> Tensor:
        xa = self._inputs(x)
        a = ladder_denominators(xa, self.W)
        z = self.tracker(ad.cf_layer(a, self.cfg.guard, impl=self.impl))
        return ad.matmul(xa, ad.transpose(self.U)) + ad.matmul(z, ad.transpose(self.V))


def ensemble_forward(x: Tensor, ensemble: LadderEnsemble) -> Tensor:
    return ensemble(x)


# --- parameter accounting -------------------------------------------------------

class ParamCount(NamedTuple):
    exact: int
    scale: float

    @property
    def ratio(self) -> float:
        return self.exact / self.scale


VARIANT_KINDS = ("attention", "cattnu", "cattnm", "ffn", "cffn")


def table_scale(variant: str, *, p: int, l: int, L: int, d: int, alpha: int = 4) -> float:
    """Order-of-magnitude parameter formulas per component kind."""
    formulas = {
        "attention": 4 * p * p,
        "cattnu": l * (2 * d + l + 1),
        "cattnm": L * (p + l) + p * p,
        "ffn": 2 * alpha * p * p,
        "cffn": L * p * (d + 1) + 2 * p * p,
    }
    if variant not in formulas:
        raise ValueError(f"unknown component kind {variant!r}; expected one of {VARIANT_KINDS}")
    return float(formulas[variant])


def count_parameters(variant: str, *, p: int, l: int, L: int, d: int, alpha: int = 4,
                     heads: int = 1) -> ParamCount:
    """Exact stored-entry count of a constructed component, with its scale formula."""
    from . import blocks

    scale = table_scale(variant, p=p, l=l, L=L, d=d, alpha=alpha)
    module = blocks.build_component(variant, p=p, l_max=l, L=L, d=d, alpha=alpha, heads=heads,
                                    rng=np.random.default_rng(0))
    return ParamCount(module.n_parameters(), scale)
