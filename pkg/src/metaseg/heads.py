"""Per-episode classifiers over pixel features.

The main head solves multi-class ridge regression in closed form inside every
episode and stays differentiable end to end, so the meta-optimizer can shape
the features that feed it (and the head's own scalars). Two ablation heads
are provided: nearest-prototype by squared Euclidean distance, and a linear
head updated by a single Adam step on the support squared loss.

Class 0 is always background; an episode with K foreground classes yields
K+1 output columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    absolute,
    add,
    div,
    exp,
    matmul,
    mul,
    neg,
    spd_solve,
    sub,
    sum_,
    transpose,
)
from .errors import ShapeError, ValidationError


@dataclass
class EpisodeTargets:
    """Pixel labels of a support set and their one-hot encoding."""

    labels: np.ndarray  # (n,) ints in [0, num_classes)
    onehot: np.ndarray  # (n, num_classes), one 1 per row

    @classmethod
    def from_labels(cls, labels: np.ndarray, num_classes: int, dtype=np.float32) -> "EpisodeTargets":
        labels = np.asarray(labels).reshape(-1)
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ValidationError(f"labels outside [0, {num_classes})")
        onehot = np.zeros((labels.size, num_classes), dtype=dtype)
        onehot[np.arange(labels.size), labels] = 1.0
        return cls(labels=labels, onehot=onehot)


@dataclass
class RidgeHead:
    """Learnable scalars of the ridge head.

    The regularizer is parametrized as lambda = exp(log_lambda) so it stays
    positive under gradient updates; alpha and beta rescale and shift the
    raw regression outputs into logits.
    """

    log_lambda: Tensor
    alpha: Tensor
    beta: Tensor

    @classmethod
    def create(cls, lam: float = 1.0, alpha: float = 1.0, beta: float = 0.0) -> "RidgeHead":
        return cls(log_lambda=Tensor(np.log(lam)), alpha=Tensor(alpha), beta=Tensor(beta))

    def lam(self) -> Tensor:
        return exp(self.log_lambda)

    def named(self) -> dict[str, Tensor]:
        return {"head.log_lambda": self.log_lambda, "head.alpha": self.alpha, "head.beta": self.beta}


def ridge_fit(x: Tensor, y: Tensor, lam: Tensor) -> Tensor:
    """Closed-form ridge weights W minimizing |XW - Y|^2 + lam |W|^2.

    Uses the primal normal equations (X^T X + lam I_c)^-1 X^T Y when rows
    outnumber columns, else the equivalent dual form X^T (X X^T + lam I_n)^-1 Y,
    whichever gives the smaller SPD system. Differentiable in x, y and lam.
    """
    if x.ndim != 2 or y.ndim != 2:
        raise ShapeError(f"ridge_fit expects matrices, got {x.shape}, {y.shape}")
    n, c = x.shape
    if y.shape[0] != n:
        raise ShapeError(f"feature rows {n} != target rows {y.shape[0]}")
    xt = transpose(x)
    if n >= c:
        gram = matmul(xt, x)
        reg = mul(lam, Tensor(np.eye(c, dtype=x.dtype)))
        return spd_solve(add(gram, reg), matmul(xt, y))
    gram = matmul(x, xt)
    reg = mul(lam, Tensor(np.eye(n, dtype=x.dtype)))
    return matmul(xt, spd_solve(add(gram, reg), y))


def ridge_predict(x_query: Tensor, w: Tensor, head: RidgeHead) -> Tensor:
    """Adjusted logits alpha * (X' W) + beta."""
    if x_query.shape[1] != w.shape[0]:
        raise ShapeError(f"query width {x_query.shape[1]} != weight rows {w.shape[0]}")
    return add(mul(head.alpha, matmul(x_query, w)), head.beta)


def prototype_predict(
    x_support: Tensor, labels: np.ndarray, x_query: Tensor, num_classes: int | None = None
) -> Tensor:
    """Logits as negative squared distance to per-class mean features."""
    labels = np.asarray(labels).reshape(-1)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    counts = np.bincount(labels, minlength=num_classes).astype(x_support.dtype)
    empty = np.nonzero(counts == 0)[0]
    if empty.size:
        raise ValidationError(f"no support pixels for class(es) {empty.tolist()}")
    indicator = np.zeros((labels.size, num_classes), dtype=x_support.dtype)
    indicator[np.arange(labels.size), labels] = 1.0
    protos = div(matmul(Tensor(indicator.T), x_support), Tensor(counts[:, None]))  # (m, c)
    cross = matmul(x_query, transpose(protos))  # (n', m)
    q_sq = sum_(mul(x_query, x_query), axis=1, keepdims=True)  # (n', 1)
    p_sq = transpose(sum_(mul(protos, protos), axis=1, keepdims=True))  # (1, m)
    return sub(mul(Tensor(2.0), cross), add(q_sq, p_sq))


def convstep_predict(
    x_support: Tensor,
    y: Tensor,
    x_query: Tensor,
    step_lr: float = 0.001,
    eps: float = 1e-8,
) -> Tensor:
    """Linear head after exactly one Adam step from zero on the support loss.

    The support loss is the mean-over-pixels squared error |XW - Y|^2 / n;
    at W = 0 its gradient is -(2/n) X^T Y, and the first bias-corrected Adam
    update reduces to -lr * g / (|g| + eps). Differentiable through both
    feature matrices.
    """
    n = x_support.shape[0]
    g = mul(matmul(transpose(x_support), y), Tensor(-2.0 / n))
    w1 = neg(mul(Tensor(step_lr), div(g, add(absolute(g), Tensor(eps)))))
    return matmul(x_query, w1)
