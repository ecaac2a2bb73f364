"""Episode-level plumbing shared by the trainer and the evaluator.

Masks enter the inner problem at feature resolution (stride-4 nearest
sampling at cell centers); logits can be bilinearly lifted back to image
resolution either for a full-resolution loss or for predicted masks.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, gather_rows, reshape, transpose, upsample_bilinear
from .embed import EmbeddingParams, PixelFeatures, embed_forward
from .episodes import Episode
from .errors import ValidationError
from .heads import EpisodeTargets, RidgeHead, convstep_predict, prototype_predict, ridge_fit, ridge_predict
from .util import derive_seed

FEATURE_STRIDE = 4

HEAD_KINDS = ("ridge", "prototype", "convstep")


def cap_support_pixels(labels: np.ndarray, cap: int) -> np.ndarray:
    """Indices keeping at most ``cap`` support pixels per class, seeded.

    A uniform per-class subsample; classes at or under the cap keep all their
    pixels. Balancing the one-hot system this way stops the background's
    pixel majority from dominating the inner solve. The seed is derived from
    the label content, so the choice is deterministic per episode.
    """
    rng = np.random.default_rng(derive_seed("support-cap", cap, labels.size, labels.tobytes().hex()))
    keep = []
    for cls in np.unique(labels):
        rows = np.nonzero(labels == cls)[0]
        if rows.size > cap:
            rows = rng.choice(rows, size=cap, replace=False)
        keep.append(rows)
    return np.sort(np.concatenate(keep))


def stack_pairs(pairs) -> tuple[np.ndarray, np.ndarray]:
    """Stack (image, mask) pairs into (N,3,H,W) and (N,H,W) arrays."""
    images = np.stack([im for im, _ in pairs])
    masks = np.stack([m for _, m in pairs])
    return images, masks


def downsample_labels(masks: np.ndarray, stride: int = FEATURE_STRIDE) -> np.ndarray:
    """Nearest-neighbor labels at feature resolution (cell-center sample)."""
    off = stride // 2
    return masks[:, off::stride, off::stride]


def flatten_labels(masks: np.ndarray) -> np.ndarray:
    """Image-major, then row-major pixel order; matches feature row order."""
    return masks.reshape(-1).astype(np.int64)


def head_logits(
    head: RidgeHead,
    kind: str,
    support: PixelFeatures,
    support_labels: np.ndarray,
    query: PixelFeatures,
    num_classes: int,
    convstep_lr: float = 0.001,
    support_cap: int | None = None,
) -> Tensor:
    """Fit the per-episode classifier on support pixels, score query pixels."""
    if kind == "ridge":
        feats = support.features
        labels = support_labels
        if support_cap is not None:
            keep = cap_support_pixels(labels, support_cap)
            feats = gather_rows(feats, keep)
            labels = labels[keep]
        targets = EpisodeTargets.from_labels(labels, num_classes, dtype=feats.dtype)
        w = ridge_fit(feats, Tensor(targets.onehot, dtype=targets.onehot.dtype), head.lam())
        return ridge_predict(query.features, w, head)
    if kind == "prototype":
        return prototype_predict(support.features, support_labels, query.features, num_classes)
    if kind == "convstep":
        targets = EpisodeTargets.from_labels(support_labels, num_classes, dtype=support.features.dtype)
        return convstep_predict(
            support.features, Tensor(targets.onehot, dtype=targets.onehot.dtype), query.features, convstep_lr
        )
    raise ValidationError(f"unknown head {kind!r}, expected one of {HEAD_KINDS}")


def episode_logits(
    params: EmbeddingParams,
    head: RidgeHead,
    kind: str,
    episode: Episode,
    mode: str,
    convstep_lr: float = 0.001,
    support_cap: int | None = None,
):
    """Support fit + query prediction for one episode.

    Returns (logits, query_feats, query_masks): logits are one row per query
    feature pixel, query_masks the full-resolution ground truth.
    """
    support_imgs, support_masks = stack_pairs(episode.support)
    query_imgs, query_masks = stack_pairs(episode.query)
    support_feats = embed_forward(params, Tensor(support_imgs), mode)
    query_feats = embed_forward(params, Tensor(query_imgs), mode)
    support_labels = flatten_labels(downsample_labels(support_masks))
    logits = head_logits(
        head, kind, support_feats, support_labels, query_feats, episode.k + 1, convstep_lr,
        support_cap=support_cap,
    )
    return logits, query_feats, query_masks


def lift_logits(logits: Tensor, n_images: int, feat_h: int, feat_w: int, out_h: int, out_w: int) -> Tensor:
    """Bilinearly upsample flat per-pixel logits to image resolution.

    Stays differentiable; result is again flattened image-major/row-major.
    """
    m = logits.shape[1]
    maps = transpose(reshape(logits, (n_images, feat_h, feat_w, m)), (0, 3, 1, 2))
    lifted = upsample_bilinear(maps, out_h, out_w)
    return reshape(transpose(lifted, (0, 2, 3, 1)), (n_images * out_h * out_w, m))


def predict_masks(logits: Tensor, n_images: int, feat_h: int, feat_w: int, out_h: int, out_w: int) -> np.ndarray:
    """Full-resolution argmax masks from feature-resolution logits."""
    lifted = lift_logits(logits, n_images, feat_h, feat_w, out_h, out_w)
    m = lifted.shape[1]
    return lifted.data.reshape(n_images, out_h, out_w, m).argmax(axis=-1).astype(np.int16)
