"""Adam with bias correction over named parameter groups."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor


@dataclass
class AdamState:
    """First/second moment buffers per parameter, plus the step counter."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def create(cls, params: dict[str, Tensor], lr: float = 0.001, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              clip_norm: float | None = None) -> AdamState:
    """Apply one bias-corrected Adam update in place; advances the counter.

    ``grads`` must cover every key in ``params``. With ``clip_norm`` set, the
    global gradient norm is rescaled to at most that value before the update.
    """
    missing = set(params) - set(grads)
    if missing:
        raise ShapeError(f"gradients missing for parameters: {sorted(missing)}")
    if clip_norm is not None:
        total = float(np.sqrt(sum(float((grads[k] ** 2).sum()) for k in params)))
        if total > clip_norm and total > 0:
            scale = clip_norm / total
            grads = {k: grads[k] * scale for k in params}
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        mhat = m / corr1
        vhat = v / corr2
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)
    return state
