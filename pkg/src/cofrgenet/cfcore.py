"""Continued-fraction arithmetic over partial denominators.

All routines work element-wise over leading axes: ``a`` has shape ``(..., d)``
holding ``a_1..a_d`` along the last axis. A 1-D input is a single fraction.

Division accounting is explicit. Every division goes through :func:`_divide`,
which charges one unit per scalar quotient to a :class:`DivisionCounter`, so
the continuant path and the literal path can be compared exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPSILON = 0.01
OVERFLOW_LIMIT = 1e100


@dataclass(frozen=True)
class PoleGuard:
    """Minimum magnitude allowed for any denominator."""

    epsilon: float = EPSILON

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"pole guard epsilon must be positive, got {self.epsilon}")


@dataclass
class DivisionCounter:
    count: int = 0

    def charge(self, n: int) -> None:
        self.count += int(n)


def _divide(num, den, counter: DivisionCounter | None):
    out = np.divide(num, den)
    if counter is not None:
        counter.charge(np.size(out))
    return out


@dataclass(frozen=True)
class ContinuantTable:
    """Tail-aligned continuants of one forward evaluation.

    ``rows[j]`` is ``K_j(a_{d-j+1}, ..., a_d)`` for ``j = 0..d``, stored with
    the depth axis leading so every step of the recursion touches contiguous
    memory; ``k`` is the same data viewed as ``[..., d+1]``. ``inv_kd`` is the
    only quotient ever formed; gradients reuse it.
    """

    rows: np.ndarray
    kd_guarded: np.ndarray
    inv_kd: np.ndarray
    divisions_used: int = field(default=0)

    @property
    def d(self) -> int:
        return self.rows.shape[0] - 1

    @property
    def k(self) -> np.ndarray:
        return np.moveaxis(self.rows, 0, -1)

    @property
    def kd(self) -> np.ndarray:
        return self.rows[-1]


def check_finite(a, what: str = "partial denominators") -> np.ndarray:
    a = np.asarray(a)
    if not np.issubdtype(a.dtype, np.floating):
        a = a.astype(np.float64)
    bad = ~np.isfinite(a)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"non-finite value {a[idx]!r} in {what} at index {idx}")
    return a


def guard_denominator(kd, eps: float = EPSILON):
    """Push ``kd`` away from zero: ``sgn(kd) * max(|kd|, eps)`` with ``sgn(0) = +1``."""
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    kd = np.asarray(kd)
    out = np.where(kd >= 0, 1.0, -1.0).astype(kd.dtype if kd.dtype.kind == "f" else np.float64)
    out *= np.maximum(np.abs(kd), eps)
    return out[()] if out.ndim == 0 else out


def continuants_forward(a, guard: PoleGuard = PoleGuard()) -> ContinuantTable:
    """Run the continuant recursion from the tail ``a_d`` back to ``a_1``."""
    a = np.asarray(a)
    if not np.issubdtype(a.dtype, np.floating):
        a = a.astype(np.float64)
    if a.ndim == 0 or a.shape[-1] < 1:
        raise ValueError("need at least one partial denominator (d >= 1)")
    d = a.shape[-1]
    lead = np.moveaxis(a.reshape(-1, d), -1, 0)  # flat batch keeps every row an array, even for 1-D input
    rows = np.empty((d + 1, lead.shape[1]), dtype=a.dtype)
    rows[0] = 1.0
    rows[1] = lead[d - 1]
    for j in range(2, d + 1):
        np.multiply(lead[d - j], rows[j - 1], out=rows[j])
        rows[j] += rows[j - 2]
    rows = rows.reshape((d + 1,) + a.shape[:-1])
    # one max/min pass doubles as the finiteness check: NaN or inf anywhere fails it
    peak = max(float(rows.max()), -float(rows.min()))
    if not peak <= OVERFLOW_LIMIT:
        check_finite(a)
        raise OverflowError("continuant magnitude exceeded 1e100; inputs too large for unscaled recursion")
    kd_guarded = guard_denominator(rows[d], guard.epsilon)
    counter = DivisionCounter()
    inv_kd = _divide(1.0, kd_guarded, counter)
    for arr in (rows, np.asarray(kd_guarded), np.asarray(inv_kd)):
        if isinstance(arr, np.ndarray) and arr.ndim:
            arr.flags.writeable = False
    return ContinuantTable(rows, kd_guarded, inv_kd, counter.count)


def cf_eval(table: ContinuantTable, a0=0.0):
    """Value of ``a0 + K_{d-1} / K_d``; multiplies by the stored reciprocal."""
    return a0 + table.rows[table.d - 1] * table.inv_kd


def cf_grad(table: ContinuantTable, upstream=None) -> np.ndarray:
    """Partials of the fractional part w.r.t. ``a_1..a_d``, shape ``[..., d]``.

    Entry ``k`` (1-based) is ``(-1)^k (K_{d-k} / K_d)^2`` with tail continuants.
    With ``upstream`` given, returns ``upstream[..., None]`` times that, fused.
    The derivative w.r.t. ``a_0`` is identically one and is not returned.
    """
    d = table.d
    w = table.inv_kd * table.inv_kd
    if upstream is not None:
        w = w * upstream
    # rows[d-1], rows[d-2], ..., rows[0] correspond to a_1..a_d
    out = np.square(table.rows[d - 1::-1])
    out *= w
    out[0::2] *= -1.0
    return np.moveaxis(out, 0, -1)


def cf_literal(a, a0=0.0, guard: PoleGuard = PoleGuard(), counter: DivisionCounter | None = None):
    """Bottom-up evaluation with one guarded division per layer."""
    value, _ = literal_forward(a, guard, counter)
    return a0 + value


def literal_forward(a, guard: PoleGuard = PoleGuard(), counter: DivisionCounter | None = None):
    """Literal evaluation keeping the raw intermediate denominators.

    Returns ``(f, tails)`` where ``tails[..., k-1]`` is the denominator
    ``t_k = a_k + 1/t_{k+1}`` (with ``t_d = a_d``) before guarding.
    """
    a = check_finite(a)
    if a.ndim == 0 or a.shape[-1] < 1:
        raise ValueError("need at least one partial denominator (d >= 1)")
    d = a.shape[-1]
    tails = np.empty_like(a)
    t = a[..., d - 1]
    tails[..., d - 1] = t
    for k in range(d - 2, -1, -1):
        t = a[..., k] + _divide(1.0, guard_denominator(t, guard.epsilon), counter)
        tails[..., k] = t
    f = _divide(1.0, guard_denominator(t, guard.epsilon), counter)
    return f, tails


def literal_backward(tails: np.ndarray, upstream, guard: PoleGuard = PoleGuard(),
                     counter: DivisionCounter | None = None) -> np.ndarray:
    """Chain rule back through the layers of :func:`literal_forward`.

    Each layer differentiates ``1/g(t)`` as ``-g'(t) / g(t)^2``, one division
    per layer, which is what generic reverse-mode code does for a quotient.
    """
    d = tails.shape[-1]
    grad = np.empty_like(tails)
    g = np.asarray(upstream, dtype=tails.dtype)
    for k in range(d):
        t = tails[..., k]
        gt = guard_denominator(t, guard.epsilon)
        passthrough = np.abs(t) >= guard.epsilon
        g = -_divide(g, gt * gt, counter) * passthrough
        grad[..., k] = g
    return grad


def continuant(seq) -> np.ndarray:
    """``K_n(seq)`` along the last axis; the empty continuant is 1."""
    seq = np.asarray(seq, dtype=np.float64)
    n = seq.shape[-1]
    prev = np.zeros(seq.shape[:-1])
    cur = np.ones(seq.shape[:-1])
    for j in range(n):
        prev, cur = cur, seq[..., j] * cur + prev
    return cur


def continuant_partial(a, l: int):
    """``dK_k/da_l = K_{l-1}(a_1..a_{l-1}) * K_{k-l}(a_{l+1}..a_k)`` (1-based ``l``)."""
    a = np.asarray(a, dtype=np.float64)
    k = a.shape[-1]
    if not 1 <= l <= k:
        raise IndexError(f"index l={l} outside 1..{k}")
    return continuant(a[..., : l - 1]) * continuant(a[..., l:])


def check_continuant_identity(a_full, k: int):
    """Residual of the cross-product identity between continuants.

    ``a_full`` holds ``a_0..a_d``. Returns
    ``K_k(a_0..a_{k-1}) K_d(a_1..a_d) - K_{k-1}(a_1..a_{k-1}) K_{d+1}(a_0..a_d)
    - (-1)^k K_{d-k}(a_{k+1}..a_d)`` with ``K_{-1} = 0``.
    """
    a_full = np.asarray(a_full, dtype=np.float64)
    d = a_full.shape[-1] - 1
    if not 0 <= k <= d:
        raise IndexError(f"k={k} outside 0..{d}")
    head = continuant(a_full[..., :k])
    kd = continuant(a_full[..., 1:])
    prev = continuant(a_full[..., 1:k]) if k >= 1 else 0.0
    kd1 = continuant(a_full)
    tail = continuant(a_full[..., k + 1 :])
    sign = -1.0 if k % 2 else 1.0
    return head * kd - prev * kd1 - sign * tail


def tridiagonal_matrix(a) -> np.ndarray:
    """Diagonal ``a``, superdiagonal +1, subdiagonal -1."""
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[-1]
    return np.diag(a) + np.diag(np.ones(n - 1), 1) - np.diag(np.ones(n - 1), -1)


def tridiagonal_determinant(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 1 or a.size < 1:
        raise ValueError("need a non-empty 1-D vector")
    return float(np.linalg.det(tridiagonal_matrix(a)))
