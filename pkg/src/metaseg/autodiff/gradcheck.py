"""Central finite-difference verification of reverse-mode gradients.

Runs in f64. For tensors above a size cutoff, a seeded random subset of
coordinates (at least 64) is probed to bound runtime.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tape, Tensor, using_dtype

SUBSAMPLE_CUTOFF = 4096
SUBSAMPLE_MIN = 64


@dataclass
class GradCheckResult:
    """Max relative FD error per input, plus the overall verdict."""

    max_rel_err: list[float]
    rtol: float

    @property
    def passed(self) -> bool:
        return all(e <= self.rtol for e in self.max_rel_err)

    def __str__(self) -> str:
        errs = ", ".join(f"{e:.3e}" for e in self.max_rel_err)
        return f"grad_check[{'PASS' if self.passed else 'FAIL'} rtol={self.rtol:g}]: {errs}"


def _coords(shape: tuple, rng: np.random.Generator):
    size = int(np.prod(shape)) if shape else 1
    if size <= SUBSAMPLE_CUTOFF:
        return np.arange(size)
    k = max(SUBSAMPLE_MIN, int(0.01 * size))
    return rng.choice(size, size=min(k, size), replace=False)


def grad_check(fn, inputs, rtol: float = 1e-4, h: float = 1e-4, seed: int = 0) -> GradCheckResult:
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` maps a list of Tensors to a scalar Tensor and must be free of
    hidden state (it is re-evaluated many times). Inputs are promoted to f64.
    """
    rng = np.random.default_rng(seed)
    with using_dtype("f64"):
        base = [Tensor(np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)) for t in inputs]
        with Tape() as tape:
            for t in base:
                tape.watch(t)
            loss = fn(base)
        grads = tape.backward(loss)
        analytic = [grads[t] for t in base]

        def eval_at(perturbed):
            out = fn([Tensor(a) for a in perturbed])
            return float(out.data)

        max_errs = []
        for i, t in enumerate(base):
            arrs = [b.data.copy() for b in base]
            flat = arrs[i].reshape(-1)
            an_flat = analytic[i].reshape(-1)
            worst = 0.0
            for c in _coords(t.shape, rng):
                orig = flat[c]
                flat[c] = orig + h
                fp = eval_at(arrs)
                flat[c] = orig - h
                fm = eval_at(arrs)
                flat[c] = orig
                numeric = (fp - fm) / (2 * h)
                denom = max(abs(numeric), abs(an_flat[c]), 1.0)
                worst = max(worst, abs(numeric - an_flat[c]) / denom)
            max_errs.append(worst)
    return GradCheckResult(max_rel_err=max_errs, rtol=rtol)
