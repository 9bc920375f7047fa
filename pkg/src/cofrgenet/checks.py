"""Finite-difference and identity sweeps used by the ``gradcheck`` and ``identities`` commands."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from . import cfcore
from .blocks import (CAttnM, CAttnU, CausalLM, CausalSelfAttention, Cffn, FFN, ModelConfig, VARIANTS,
                     Block, BlockConfig)
from .ladders import LadderConfig, LadderEnsemble
from .module import Module

GRAD_TOL = 1e-5
IDENTITY_TOL = 1e-9
DET_TOL = 1e-10


def rel_error(a, b, floor: float = 1e-3) -> float:
    """Norm-wise relative error ``||a - b|| / max(||a||, ||b||, floor)``.

    The floor keeps identically-zero gradients (e.g. a key bias under softmax)
    from turning finite-difference round-off into a spurious error of 1.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    den = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / den)


def sample_denominators(rng: np.random.Generator, n: int, d: int, margin: float = 0.1) -> np.ndarray:
    """``n`` draws of ``a_1..a_d``: half in ``[0.5, 3]^d``, half with random signs.

    Sign-mixed draws whose literal intermediate denominators come within
    ``margin`` of zero are redrawn, so every sample is well away from a pole.
    """
    half = n // 2
    pos = rng.uniform(0.5, 3.0, size=(half, d))
    mixed = np.empty((0, d))
    while mixed.shape[0] < n - half:
        cand = rng.uniform(0.5, 3.0, size=(2 * n, d)) * rng.choice([-1.0, 1.0], size=(2 * n, d))
        _, tails = cfcore.literal_forward(cand)
        mixed = np.concatenate([mixed, cand[np.abs(tails).min(axis=-1) > margin]])
    return np.concatenate([pos, mixed[: n - half]])


def cf_gradient_sweep(depths=(1, 3, 5, 7), draws: int = 1000, seed: int = 0, h: float = 1e-6,
                      grad_fn: Callable = cfcore.cf_grad) -> dict[int, float]:
    """Max over draws of the relative error between ``grad_fn`` and central differences of the literal form."""
    rng = np.random.default_rng(seed)
    out = {}
    for d in depths:
        a = sample_denominators(rng, draws, d)
        analytic = grad_fn(cfcore.continuants_forward(a))
        fd = np.empty_like(a)
        for k in range(d):
            step = np.zeros(d)
            step[k] = h
            fd[:, k] = (cfcore.cf_literal(a + step) - cfcore.cf_literal(a - step)) / (2 * h)
        errs = [rel_error(analytic[i], fd[i]) for i in range(draws)]
        out[d] = float(max(errs))
    return out


def identity_sweep(max_depth: int = 8, draws: int = 1000, seed: int = 0) -> float:
    """Max relative residual of the continuant cross-product identity for ``0 <= k <= d <= max_depth``."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for d in range(0, max_depth + 1):
        a = rng.uniform(0.5, 3.0, size=(draws, d + 1)) * rng.choice([-1.0, 1.0], size=(draws, d + 1))
        scale = np.maximum.reduce([np.abs(cfcore.continuant(a)), np.abs(cfcore.continuant(a[:, 1:])),
                                   np.ones(draws)])
        for k in range(d + 1):
            res = np.abs(cfcore.check_continuant_identity(a, k)) / scale
            worst = max(worst, float(res.max()))
    return worst


def determinant_sweep(max_k: int = 8, draws: int = 200, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(1, max_k + 1):
        for _ in range(draws):
            a = rng.uniform(0.5, 3.0, size=k) * rng.choice([-1.0, 1.0], size=k)
            kd = cfcore.continuants_forward(a).kd
            det = cfcore.tridiagonal_determinant(a)
            worst = max(worst, abs(det - kd) / max(abs(kd), 1.0))
    return worst


def numeric_grads(f: Callable[[], float], arrays: list[np.ndarray], h: float = 1e-6) -> list[np.ndarray]:
    """Central differences of ``f()`` w.r.t. every entry of each array (perturbed in place)."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def module_gradcheck(module: Module, forward: Callable[[], ad.Tensor], inputs: list[ad.Tensor] = (),
                     seed: int = 0, h: float = 1e-6) -> dict[str, float]:
    """Compare tape gradients of ``sum(forward() * R)`` with central differences.

    ``R`` is a fixed random weighting so every output entry contributes.
    Returns one relative error per parameter (and per input, keyed ``input.i``).
    """
    rng = np.random.default_rng(seed)
    out0 = forward()
    weights = ad.Tensor(rng.normal(size=out0.shape))

    def scalar() -> float:
        return float((forward().data * weights.data).sum())

    named = list(module.named_parameters()) + [(f"input.{i}", t) for i, t in enumerate(inputs)]
    for _, t in named:
        t.grad = None
        t.requires_grad = True
    with ad.Tape() as tape:
        loss = ad.sum(forward() * weights)
    tape.backward(loss)
    fd = numeric_grads(scalar, [t.data for _, t in named], h)
    result = {}
    for (name, t), g in zip(named, fd):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        result[name] = rel_error(analytic, g)
    return result


def _randomize(module: Module, rng: np.random.Generator) -> None:
    """Spread parameters out while keeping every ladder away from its poles."""
    for name, p in module.named_parameters():
        if p.depth >= 1 and p.ndim == 2:
            p.data[:, 0] = 1.5
            p.data[:, 1:] = rng.uniform(-0.2, 0.2, size=p.data[:, 1:].shape)
        elif p.depth >= 1:
            p.data[...] = rng.uniform(0.8, 1.2, size=p.shape)
        else:
            p.data[...] = rng.normal(0.0, 0.3, size=p.shape)
            if p.mask is not None:
                p.data *= p.mask


def module_suite(seed: int = 0) -> dict[str, float]:
    """Max relative gradient error for each component on a small random instance."""
    rng = np.random.default_rng(seed)
    results = {}

    def run(name, module, x, fwd=None):
        _randomize(module, rng)
        errs = module_gradcheck(module, fwd or (lambda: module(x)), [x], seed=seed)
        results[name] = max(errs.values())

    run("ladder_ensemble", LadderEnsemble(LadderConfig(3, 2, 2, 3), rng),
        ad.Tensor(rng.uniform(-1, 1, (5, 3))))
    run("cffn", Cffn(3, 2, 3, rng), ad.Tensor(rng.uniform(-1, 1, (2, 4, 3))))
    run("cattnm", CAttnM(3, 5, 2, 3, rng), ad.Tensor(rng.uniform(-1, 1, (2, 4, 3))))
    run("cattnu", CAttnU(3, 5, 3, rng), ad.Tensor(rng.uniform(0.5, 1.5, (2, 4, 3))))
    run("attention", CausalSelfAttention(4, 2, rng), ad.Tensor(rng.uniform(-1, 1, (2, 4, 4))))
    run("ffn", FFN(4, 4, rng), ad.Tensor(rng.uniform(-1, 1, (2, 4, 4))))
    for variant in VARIANTS:
        block = Block(BlockConfig.from_variant(variant, p=4, l_max=5, heads=2, alpha=2, L=2, d=3), rng)
        run(f"block[{variant}]", block, ad.Tensor(rng.uniform(-1, 1, (2, 4, 4))))
    lm = CausalLM(ModelConfig(variant="cofrgenet", vocab=7, n_layers=1, p=4, l_max=5, heads=2, L=2, d=3), rng)
    _randomize(lm, rng)
    ids = rng.integers(0, 7, size=(2, 5))
    errs = module_gradcheck(lm, lambda: lm.loss(ids[:, :-1], ids[:, 1:]), seed=seed)
    results["causal_lm"] = max(errs.values())
    return results
