"""Episode plumbing: label downsampling, logit lifting, support capping."""

import numpy as np
import pytest

from metaseg.autodiff import Tape, Tensor, sum_
from metaseg.embed import EmbedConfig, build_embedding
from metaseg.heads import RidgeHead
from metaseg.pipeline import (
    cap_support_pixels,
    downsample_labels,
    flatten_labels,
    head_logits,
    lift_logits,
    predict_masks,
)
from metaseg.errors import ValidationError


def test_downsample_takes_cell_centers():
    masks = np.zeros((1, 8, 8), dtype=np.int16)
    masks[0, 2, 2] = 5  # center sample of the top-left 4x4 cell
    masks[0, 0, 0] = 9  # corner pixel is not sampled
    down = downsample_labels(masks, stride=4)
    assert down.shape == (1, 2, 2)
    assert down[0, 0, 0] == 5


def test_flatten_is_image_major_row_major():
    masks = np.arange(8).reshape(2, 2, 2)
    np.testing.assert_array_equal(flatten_labels(masks), np.arange(8))


def test_lift_logits_constant_field():
    logits = Tensor(np.tile(np.array([[2.0, -1.0]], dtype=np.float32), (8, 1)))
    lifted = lift_logits(logits, n_images=2, feat_h=2, feat_w=2, out_h=8, out_w=8)
    assert lifted.shape == (2 * 8 * 8, 2)
    np.testing.assert_allclose(lifted.data[:, 0], 2.0, rtol=1e-6)
    np.testing.assert_allclose(lifted.data[:, 1], -1.0, rtol=1e-6)


def test_predict_masks_argmax():
    logits = np.full((4, 3), -1.0, dtype=np.float32)
    logits[:, 1] = 1.0  # class 1 wins everywhere
    pred = predict_masks(Tensor(logits), n_images=1, feat_h=2, feat_w=2, out_h=4, out_w=4)
    np.testing.assert_array_equal(pred, np.ones((1, 4, 4), dtype=np.int16))


def test_cap_support_pixels_counts_and_determinism():
    labels = np.array([0] * 50 + [1] * 10 + [2] * 3)
    keep = cap_support_pixels(labels, cap=8)
    counts = np.bincount(labels[keep], minlength=3)
    assert counts.tolist() == [8, 8, 3]
    assert np.array_equal(keep, np.sort(keep))
    keep2 = cap_support_pixels(labels, cap=8)
    np.testing.assert_array_equal(keep, keep2)
    assert not np.array_equal(keep, cap_support_pixels(labels, cap=9)[: len(keep)])


def test_head_logits_cap_preserves_gradient_flow():
    rng = np.random.default_rng(0)
    from metaseg.pipeline import PixelFeatures

    with Tape() as tape:
        feats = tape.watch(Tensor(rng.normal(size=(12, 4)).astype(np.float32)))
        support = PixelFeatures(features=feats, n_images=1, feat_h=3, feat_w=4)
        query = PixelFeatures(
            features=Tensor(rng.normal(size=(4, 4)).astype(np.float32)), n_images=1, feat_h=2, feat_w=2
        )
        labels = np.array([0, 0, 0, 0, 0, 0, 1, 1, 1, 2, 2, 2])
        logits = head_logits(RidgeHead.create(), "ridge", support, labels, query, 3, support_cap=2)
        loss = sum_(logits)
    g = tape.backward(loss)[feats]
    assert g.shape == (12, 4)
    assert np.isfinite(g).all()
    assert (np.abs(g).sum(axis=1) > 0).sum() <= 3 * 2 + 6  # capped rows dominate


def test_head_logits_unknown_kind():
    from metaseg.pipeline import PixelFeatures

    pf = PixelFeatures(features=Tensor(np.zeros((2, 3))), n_images=1, feat_h=1, feat_w=2)
    with pytest.raises(ValidationError):
        head_logits(RidgeHead.create(), "nearest", pf, np.array([0, 1]), pf, 2)
