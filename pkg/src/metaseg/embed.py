"""Two-branch convolutional embedding producing per-pixel features.

Topology: a shared trunk (blocks 1-2, each followed by 2x2 max pooling)
feeds two branches. The local branch runs blocks 3-4 at constant resolution
with dilated 3x3 convolutions; the global branch pools, runs block 5, pools
again and global-averages to a single vector per image, which is replicated
back over the local grid. Branch outputs are concatenated channelwise and
L2-normalized per channel map, then flattened to one row per pixel.

Each block is ``convs_per_block`` repetitions of conv3x3 -> batchnorm ->
leaky_relu(0.1) with an additive skip around the block (1x1 projection when
the channel count changes). Output stride of the pixel features is 4.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import (
    BatchNormState,
    Tensor,
    add,
    batchnorm2d,
    concat,
    conv2d,
    default_dtype,
    global_avg_pool,
    l2_normalize_channels,
    leaky_relu,
    max_pool2x2,
    replicate_upsample,
    reshape,
    transpose,
)
from .errors import ValidationError

LEAKY_SLOPE = 0.1

_K_WAY_DIL3 = (1, 2, 4)
_K_WAY_DIL4 = (8, 16, 32)
_ONE_WAY_DIL4 = (2, 4, 8)


@dataclass(frozen=True)
class EmbedConfig:
    """Architecture of the embedding network.

    ``setting`` picks the dilation preset: 'k_way' dilates blocks 3 and 4
    (1,2,4 / 8,16,32), 'one_way' dilates only block 4 (2,4,8). Explicit
    dilation tuples override the preset.
    """

    block_channels: tuple[int, ...] = (64, 128, 256, 512, 512)
    convs_per_block: int = 3
    input_channels: int = 3
    gc_branch_enabled: bool = True
    setting: str = "k_way"
    dilations_block3: Optional[tuple[int, ...]] = None
    dilations_block4: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        if self.setting not in ("k_way", "one_way"):
            raise ValidationError(f"unknown setting {self.setting!r}")
        if len(self.block_channels) != 5:
            raise ValidationError("block_channels must list 5 block widths")
        if any(c < 1 for c in self.block_channels):
            raise ValidationError("block channels must be positive")
        if self.convs_per_block < 1:
            raise ValidationError("convs_per_block must be >= 1")
        if self.input_channels < 1:
            raise ValidationError("input_channels must be >= 1")
        if self.dilations_block3 is None:
            base = _K_WAY_DIL3 if self.setting == "k_way" else (1, 1, 1)
            object.__setattr__(self, "dilations_block3", _fit(base, self.convs_per_block))
        if self.dilations_block4 is None:
            base = _K_WAY_DIL4 if self.setting == "k_way" else _ONE_WAY_DIL4
            object.__setattr__(self, "dilations_block4", _fit(base, self.convs_per_block))
        for name in ("dilations_block3", "dilations_block4"):
            dil = getattr(self, name)
            if len(dil) != self.convs_per_block:
                raise ValidationError(f"{name} must list {self.convs_per_block} dilations, got {dil}")
            if any(d < 1 for d in dil):
                raise ValidationError(f"{name} entries must be positive")

    @classmethod
    def micro(cls, channels: int = 4, **kw) -> "EmbedConfig":
        """Tiny uniform-width net for gradient checks and smoke tests."""
        return cls(block_channels=(channels,) * 5, **kw)

    @property
    def local_channels(self) -> int:
        return self.block_channels[3]

    @property
    def global_channels(self) -> int:
        return self.block_channels[4] if self.gc_branch_enabled else 0

    @property
    def feature_channels(self) -> int:
        return self.local_channels + self.global_channels


def _fit(base: tuple[int, ...], n: int) -> tuple[int, ...]:
    """Stretch or trim a dilation preset to n convs (cycled when longer)."""
    return tuple(base[i % len(base)] for i in range(n))


@dataclass
class EmbeddingParams:
    """Named trainable tensors plus batch-norm running state.

    Insertion order of ``tensors`` is the canonical enumeration used for
    checkpoints and optimizer state, so it must stay stable across builds.
    """

    config: EmbedConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)
    bn_states: dict[str, BatchNormState] = field(default_factory=dict)

    def named(self) -> dict[str, Tensor]:
        return self.tensors


def _block_spec(config: EmbedConfig):
    """(name, in_channels, out_channels, dilations) for the five blocks."""
    ch = config.block_channels
    ones = (1,) * config.convs_per_block
    return [
        ("block1", config.input_channels, ch[0], ones),
        ("block2", ch[0], ch[1], ones),
        ("block3", ch[1], ch[2], config.dilations_block3),
        ("block4", ch[2], ch[3], config.dilations_block4),
        ("block5", ch[1], ch[4], ones),  # global branch taps the trunk output
    ]


def build_embedding(config: EmbedConfig, seed: int) -> EmbeddingParams:
    """He-initialized parameters for the configured topology, deterministic per seed."""
    rng = np.random.default_rng(seed)
    dt = default_dtype()
    params = EmbeddingParams(config=config)

    def add_conv(name, c_in, c_out, k):
        std = np.sqrt(2.0 / (c_in * k * k))
        params.tensors[f"{name}.w"] = Tensor(
            rng.normal(0.0, std, size=(c_out, c_in, k, k)).astype(dt), dtype=dt
        )
        params.tensors[f"{name}.b"] = Tensor(np.zeros(c_out, dtype=dt), dtype=dt)

    def add_bn(name, c):
        params.tensors[f"{name}.gamma"] = Tensor(np.ones(c, dtype=dt), dtype=dt)
        params.tensors[f"{name}.beta"] = Tensor(np.zeros(c, dtype=dt), dtype=dt)
        params.bn_states[name] = BatchNormState.create(c, dtype=dt)

    blocks = _block_spec(config)
    if not config.gc_branch_enabled:
        blocks = blocks[:4]
    for name, c_in, c_out, dil in blocks:
        cur = c_in
        for i in range(config.convs_per_block):
            add_conv(f"{name}.conv{i}", cur, c_out, 3)
            add_bn(f"{name}.bn{i}", c_out)
            cur = c_out
        if c_in != c_out:
            add_conv(f"{name}.skip", c_in, c_out, 1)
    return params


def _run_block(params: EmbeddingParams, name: str, x: Tensor, dilations, mode: str) -> Tensor:
    t = params.tensors
    h = x
    for i, d in enumerate(dilations):
        h = conv2d(h, t[f"{name}.conv{i}.w"], t[f"{name}.conv{i}.b"], stride=1, padding=d, dilation=d)
        h = batchnorm2d(h, t[f"{name}.bn{i}.gamma"], t[f"{name}.bn{i}.beta"], params.bn_states[f"{name}.bn{i}"], mode)
        h = leaky_relu(h, LEAKY_SLOPE)
    if f"{name}.skip.w" in t:
        skip = conv2d(x, t[f"{name}.skip.w"], t[f"{name}.skip.b"], stride=1, padding=0, dilation=1)
    else:
        skip = x
    return add(h, skip)


@dataclass
class PixelFeatures:
    """Flattened per-pixel feature matrix for a batch of images.

    Row order is image-major, then row-major within each feature map, which
    fixes the alignment between feature rows and downsampled mask pixels.
    """

    features: Tensor  # (n_pixels, channels)
    n_images: int
    feat_h: int
    feat_w: int

    @property
    def n_pixels(self) -> int:
        return self.n_images * self.feat_h * self.feat_w


def embed_branches(params: EmbeddingParams, images: Tensor, mode: str):
    """Run trunk and branches; returns (local, replicated_global_or_None)."""
    config = params.config
    n, c, h, w = images.shape
    if c != config.input_channels:
        raise ValidationError(f"expected {config.input_channels}-channel images, got {c}")
    if h % 4 or w % 4:
        raise ValidationError(f"image extents must be divisible by 4, got {h}x{w}")
    spec = {s[0]: s for s in _block_spec(config)}

    x = _run_block(params, "block1", images, spec["block1"][3], mode)
    x = max_pool2x2(x)
    x = _run_block(params, "block2", x, spec["block2"][3], mode)
    trunk = max_pool2x2(x)

    local = _run_block(params, "block3", trunk, spec["block3"][3], mode)
    local = _run_block(params, "block4", local, spec["block4"][3], mode)

    if not config.gc_branch_enabled:
        return local, None
    g = max_pool2x2(trunk)
    g = _run_block(params, "block5", g, spec["block5"][3], mode)
    g = max_pool2x2(g)
    g = global_avg_pool(g)
    rep = replicate_upsample(g, local.shape[2], local.shape[3])
    return local, rep


def embed_forward(params: EmbeddingParams, images: Tensor, mode: str = "train") -> PixelFeatures:
    """Per-pixel fused features for a batch; see module docstring for layout."""
    if mode not in ("train", "eval"):
        raise ValidationError(f"unknown mode {mode!r}")
    local, rep = embed_branches(params, images, mode)
    fused = concat([local, rep], axis=1) if rep is not None else local
    normed = l2_normalize_channels(fused)
    n, c, fh, fw = normed.shape
    flat = reshape(transpose(normed, (0, 2, 3, 1)), (n * fh * fw, c))
    return PixelFeatures(features=flat, n_images=n, feat_h=fh, feat_w=fw)


def count_params(params: EmbeddingParams) -> int:
    """Total trainable scalars (running statistics excluded)."""
    return sum(t.size for t in params.tensors.values())
