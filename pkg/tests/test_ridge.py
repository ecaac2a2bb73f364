"""Closed-form ridge head and the two ablation heads."""

import numpy as np
import pytest

from metaseg.autodiff import Tape, Tensor, grad_check, softmax_cross_entropy, sum_, using_dtype
from metaseg.errors import ValidationError
from metaseg.heads import (
    EpisodeTargets,
    RidgeHead,
    convstep_predict,
    prototype_predict,
    ridge_fit,
    ridge_predict,
)


def gd_oracle(x, y, lam, lr=1e-2, steps=100_000):
    """Plain gradient descent on |XW - Y|^2 + lam |W|^2 from zero init."""
    xtx = x.T @ x
    xty = x.T @ y
    w = np.zeros((x.shape[1], y.shape[1]))
    for _ in range(steps):
        w -= lr * 2.0 * (xtx @ w - xty + lam * w)
    return w


def fit(x, y, lam):
    with using_dtype("f64"):
        return ridge_fit(Tensor(x, dtype=np.float64), Tensor(y, dtype=np.float64), Tensor(lam, dtype=np.float64)).data


def test_identity_design_half():
    w = fit(np.eye(2), np.eye(2), 1.0)
    np.testing.assert_allclose(w, 0.5 * np.eye(2), rtol=1e-12)


def test_tiny_lambda_recovers_targets():
    rng = np.random.default_rng(0)
    y = rng.normal(size=(3, 2))
    w = fit(np.eye(3), y, 1e-12)
    np.testing.assert_allclose(w, y, atol=1e-9)


def test_matches_gradient_descent_oracle():
    rng = np.random.default_rng(42)
    x = rng.normal(size=(6, 3))
    y = EpisodeTargets.from_labels(np.array([0, 1, 0, 1, 0, 1]), 2, dtype=np.float64).onehot
    w_oracle = gd_oracle(x, y, 0.5)
    w = fit(x, y, 0.5)
    assert np.abs(w - w_oracle).max() <= 1e-6


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
@pytest.mark.parametrize("lam", [0.1, 1.0, 10.0])
def test_primal_dual_agreement(seed, lam):
    # ridge_fit picks primal (n >= c) or Woodbury dual (n < c) internally;
    # both shapes are drawn here and checked against the explicit primal form
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 41))
    c = int(rng.integers(3, 41))
    x = rng.normal(size=(n, c))
    y = rng.normal(size=(n, 3))
    w = fit(x, y, lam)
    ref = np.linalg.solve(x.T @ x + lam * np.eye(c), x.T @ y)
    assert np.abs(w - ref).max() <= 1e-8


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_normal_equation_residual(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(20, 7))
    y = rng.normal(size=(20, 3))
    lam = 0.7
    w = fit(x, y, lam)
    lhs = (x.T @ x + lam * np.eye(7)) @ w
    rhs = x.T @ y
    assert np.abs(lhs - rhs).max() <= 1e-9 * max(1.0, np.abs(rhs).max())


def test_regularization_monotonicity():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(12, 6))
    y = rng.normal(size=(12, 2))
    norms = [np.linalg.norm(fit(x, y, lam)) for lam in (0.01, 0.1, 1.0, 10.0, 100.0)]
    assert all(a >= b for a, b in zip(norms, norms[1:]))


def test_class_permutation_equivariance():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(10, 4))
    labels = rng.integers(0, 3, size=10)
    y = EpisodeTargets.from_labels(labels, 3, dtype=np.float64).onehot
    perm = [2, 0, 1]
    w = fit(x, y, 0.5)
    w_perm = fit(x, y[:, perm], 0.5)
    np.testing.assert_allclose(w_perm, w[:, perm], atol=1e-12)
    xq = rng.normal(size=(5, 4))
    head = RidgeHead.create()
    with using_dtype("f64"):
        logits = ridge_predict(Tensor(xq, dtype=np.float64), Tensor(w, dtype=np.float64), head).data
        logits_perm = ridge_predict(Tensor(xq, dtype=np.float64), Tensor(w_perm, dtype=np.float64), head).data
    assert np.array_equal(logits.argmax(1), np.array(perm)[logits_perm.argmax(1)])


def test_predict_identity_adjustment():
    rng = np.random.default_rng(7)
    xq = rng.normal(size=(4, 3)).astype(np.float32)
    w = rng.normal(size=(3, 2)).astype(np.float32)
    head = RidgeHead.create(alpha=1.0, beta=0.0)
    np.testing.assert_allclose(ridge_predict(Tensor(xq), Tensor(w), head).data, xq @ w, rtol=1e-5)


def test_predict_affine_arithmetic():
    head = RidgeHead.create(alpha=2.0, beta=-1.0)
    xq = Tensor(np.array([[0.5]]))
    w = Tensor(np.array([[1.0]]))
    assert ridge_predict(xq, w, head).data[0, 0] == pytest.approx(0.0)


def test_alpha_zero_gives_uniform_softmax_loss():
    rng = np.random.default_rng(8)
    k = 2
    head = RidgeHead.create(alpha=0.0, beta=0.3)
    xq = Tensor(rng.normal(size=(6, 4)).astype(np.float32))
    w = Tensor(rng.normal(size=(4, k + 1)).astype(np.float32))
    logits = ridge_predict(xq, w, head)
    loss = softmax_cross_entropy(logits, np.zeros(6, dtype=int))
    assert loss.item() == pytest.approx(np.log(k + 1), rel=1e-5)


def test_full_head_gradient_matches_fd():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(8, 5))
    xq = rng.normal(size=(6, 5))
    labels_s = rng.integers(0, 3, size=8)
    labels_q = rng.integers(0, 3, size=6)
    y = EpisodeTargets.from_labels(labels_s, 3, dtype=np.float64).onehot

    def loss_fn(ts):
        xs, xqs, log_lam, alpha, beta = ts
        head = RidgeHead(log_lambda=log_lam, alpha=alpha, beta=beta)
        w = ridge_fit(xs, Tensor(y, dtype=np.float64), head.lam())
        return softmax_cross_entropy(ridge_predict(xqs, w, head), labels_q)

    res = grad_check(loss_fn, [x, xq, np.array(0.2), np.array(1.1), np.array(-0.1)], rtol=1e-4)
    assert res.passed, res


# ----------------------------------------------------------- prototype head


def test_prototype_zero_distance_wins():
    xs = Tensor(np.array([[0.0, 0.0], [2.0, 2.0]]).astype(np.float32))
    labels = np.array([0, 1])
    xq = Tensor(np.array([[0.0, 0.0]]).astype(np.float32))
    logits = prototype_predict(xs, labels, xq).data[0]
    assert logits[0] == pytest.approx(0.0)
    assert logits[1] < 0


def test_prototype_equidistant_tie():
    xs = Tensor(np.array([[-1.0], [1.0]]).astype(np.float32))
    logits = prototype_predict(xs, np.array([0, 1]), Tensor(np.array([[0.0]]))).data[0]
    assert logits[0] == pytest.approx(logits[1])


def test_prototype_hand_enumerated_square_distances():
    xs = Tensor(np.array([[0.0], [0.0], [2.0], [2.0]]).astype(np.float32))
    labels = np.array([0, 0, 1, 1])
    xq = Tensor(np.array([[0.5]]).astype(np.float32))
    logits = prototype_predict(xs, labels, xq).data[0]
    np.testing.assert_allclose(logits, [-0.25, -2.25], rtol=1e-5)
    assert logits.argmax() == 0


def test_prototype_empty_class_rejected():
    xs = Tensor(np.zeros((2, 3), dtype=np.float32))
    with pytest.raises(ValidationError):
        prototype_predict(xs, np.array([0, 0]), Tensor(np.zeros((1, 3))), num_classes=2)


def test_prototype_gradients_flow():
    rng = np.random.default_rng(10)
    res = grad_check(
        lambda ts: sum_(prototype_predict(ts[0], np.array([0, 0, 1, 1]), ts[1])),
        [rng.normal(size=(4, 3)), rng.normal(size=(2, 3))],
        rtol=1e-4,
    )
    assert res.passed, res


# ------------------------------------------------------------ convstep head


def test_convstep_zero_support_gives_zero_logits():
    y = EpisodeTargets.from_labels(np.array([0, 1]), 2).onehot
    logits = convstep_predict(Tensor(np.zeros((2, 3))), Tensor(y), Tensor(np.ones((4, 3))))
    np.testing.assert_array_equal(logits.data, 0.0)
    assert logits.shape == (4, 2)


def test_convstep_output_shape():
    rng = np.random.default_rng(11)
    y = EpisodeTargets.from_labels(rng.integers(0, 3, size=7), 3).onehot
    logits = convstep_predict(
        Tensor(rng.normal(size=(7, 5)).astype(np.float32)), Tensor(y),
        Tensor(rng.normal(size=(9, 5)).astype(np.float32)),
    )
    assert logits.shape == (9, 3)


def test_convstep_matches_adam_t1_formula():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(7, 5))
    y = EpisodeTargets.from_labels(rng.integers(0, 3, size=7), 3, dtype=np.float64).onehot
    xq = rng.normal(size=(9, 5))
    lr, eps = 0.001, 1e-8
    # independent reference: analytic squared-loss gradient at W=0, then the
    # bias-corrected Adam update at t=1
    g = -2.0 / 7 * (x.T @ y)
    m_hat = (1 - 0.9) * g / (1 - 0.9)
    v_hat = (1 - 0.999) * g * g / (1 - 0.999)
    w1 = -lr * m_hat / (np.sqrt(v_hat) + eps)
    expected = xq @ w1
    with using_dtype("f64"):
        logits = convstep_predict(
            Tensor(x, dtype=np.float64), Tensor(y, dtype=np.float64), Tensor(xq, dtype=np.float64), lr
        )
    np.testing.assert_allclose(logits.data, expected, rtol=1e-9)


def test_convstep_differentiable():
    rng = np.random.default_rng(13)
    y = EpisodeTargets.from_labels(np.array([0, 1, 2, 1]), 3, dtype=np.float64).onehot
    res = grad_check(
        lambda ts: sum_(convstep_predict(ts[0], Tensor(y, dtype=np.float64), ts[1])),
        [rng.normal(size=(4, 3)), rng.normal(size=(5, 3))],
        rtol=1e-4,
    )
    assert res.passed, res


def test_targets_validation():
    t = EpisodeTargets.from_labels(np.array([0, 2, 1]), 3)
    assert t.onehot.sum(axis=1).tolist() == [1, 1, 1]
    assert t.onehot.shape == (3, 3)
    with pytest.raises(ValidationError):
        EpisodeTargets.from_labels(np.array([0, 3]), 3)
