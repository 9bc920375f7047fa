"""Continuant vs literal continued-fraction kernels: division counts and timing."""

from __future__ import annotations

import os
import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .cfcore import DivisionCounter


@dataclass
class ArmReport:
    impl: str
    forward_s: float
    backward_s: float
    forward_divisions: int
    backward_divisions: int

    @property
    def total_s(self) -> float:
        return self.forward_s + self.backward_s


@dataclass
class BenchReport:
    d: int
    L: int
    batch: int
    continuant: ArmReport
    literal: ArmReport
    counts_ok: bool

    @property
    def speedup(self) -> float:
        return self.literal.total_s / self.continuant.total_s

    @property
    def faster(self) -> bool:
        return self.continuant.total_s < self.literal.total_s

    def lines(self) -> list[str]:
        out = [f"shape: batch={self.batch} L={self.L} d={self.d}"]
        for arm in (self.continuant, self.literal):
            out.append(f"{arm.impl:>10}: forward {arm.forward_s * 1e3:8.3f} ms  backward {arm.backward_s * 1e3:8.3f} ms"
                       f"  divisions fwd={arm.forward_divisions} bwd={arm.backward_divisions}")
        out.append(f"division counts as expected: {self.counts_ok}")
        out.append(f"speedup (literal / continuant, fwd+bwd): {self.speedup:.2f}x; continuant faster: {self.faster}")
        return out


def pin_single_thread():
    """Pin to one CPU and one BLAS thread; returns a callable undoing both."""
    from threadpoolctl import threadpool_limits

    cpus = None
    if hasattr(os, "sched_setaffinity"):
        try:
            cpus = os.sched_getaffinity(0)
            os.sched_setaffinity(0, {min(cpus)})
        except OSError:
            cpus = None
    limiter = threadpool_limits(limits=1)

    def restore():
        limiter.restore_original_limits()
        if cpus is not None:
            os.sched_setaffinity(0, cpus)

    return restore


def _run_arm(impl: str, a: np.ndarray, upstream: np.ndarray, warmup: int, repeats: int) -> ArmReport:
    fwd_t, bwd_t = [], []
    fwd_div = bwd_div = 0
    for i in range(warmup + repeats):
        x = ad.Tensor(a, requires_grad=True)
        counter = DivisionCounter()
        with ad.Tape() as tape:
            t0 = time.perf_counter()
            out = ad.cf_layer(x, counter=counter, impl=impl)
            t1 = time.perf_counter()
        n_fwd = counter.count
        t2 = time.perf_counter()
        tape.backward(out, grad=upstream)
        t3 = time.perf_counter()
        if i >= warmup:
            fwd_t.append(t1 - t0)
            bwd_t.append(t3 - t2)
        fwd_div, bwd_div = n_fwd, counter.count - n_fwd
    return ArmReport(impl, statistics.median(fwd_t), statistics.median(bwd_t), fwd_div, bwd_div)


def run_bench(d: int = 7, L: int = 8, batch: int = 4096, warmup: int = 10, repeats: int = 100,
              seed: int = 0, pin: bool = True) -> BenchReport:
    """Time matched forward+backward passes of both kernels on the same ``[batch, L, d]`` input."""
    restore = pin_single_thread() if pin else None
    try:
        rng = np.random.default_rng(seed)
        a = rng.uniform(0.5, 3.0, size=(batch, L, d))
        upstream = rng.normal(size=(batch, L))
        cont = _run_arm("continuant", a, upstream, warmup, repeats)
        lit = _run_arm("literal", a, upstream, warmup, repeats)
    finally:
        if restore is not None:
            restore()
    n = batch * L
    counts_ok = (cont.forward_divisions == n and cont.backward_divisions == 0
                 and lit.forward_divisions == d * n and lit.backward_divisions == d * n)
    return BenchReport(d, L, batch, cont, lit, counts_ok)
