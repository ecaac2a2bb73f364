"""Binary checkpoint container with strict versioning and a trailing CRC.

File layout (all integers little-endian):

    magic  b"MSGN"
    u32    format version
    u32    config length, then UTF-8 JSON of the resolved config
    records until 4 bytes remain, each:
        u32 name length, name bytes
        u8  dtype tag (0=f32, 1=f64, 2=i64, 3=u64)
        u64 rank, then u64 extent per axis
        raw payload
    u32    CRC32 of every preceding byte

Round-tripping load(save(x)) is byte-identical because the tensor table
preserves insertion order.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import AdamState, Tensor
from .embed import EmbedConfig, EmbeddingParams, build_embedding
from .errors import ValidationError
from .heads import RidgeHead

MAGIC = b"MSGN"
FORMAT_VERSION = 1

_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2, np.dtype(np.uint64): 3}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("<u8")}


@dataclass
class Checkpoint:
    """Named tensor table plus the resolved config that produced it."""

    config: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", ckpt.version)
    cfg = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    buf += struct.pack("<I", len(cfg)) + cfg
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise ValidationError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<B", _TAGS[arr.dtype])
        buf += struct.pack("<Q", arr.ndim)
        for ext in arr.shape:
            buf += struct.pack("<Q", ext)
        buf += np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < len(MAGIC) + 12:
        raise ValidationError(f"{path}: truncated checkpoint")
    if data[:4] != MAGIC:
        raise ValidationError(f"{path}: bad magic bytes")
    (stored_crc,) = struct.unpack("<I", data[-4:])
    actual_crc = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise ValidationError(f"{path}: checksum mismatch (stored {stored_crc:#x}, computed {actual_crc:#x})")
    pos = 4
    (version,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if version != FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})")
    (cfg_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    config = json.loads(data[pos : pos + cfg_len].decode("utf-8"))
    pos += cfg_len
    tensors: dict[str, np.ndarray] = {}
    end = len(data) - 4
    while pos < end:
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        tag = data[pos]
        pos += 1
        if tag not in _DTYPES:
            raise ValidationError(f"{path}: unknown dtype tag {tag} for {name!r}")
        (rank,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        shape = struct.unpack_from(f"<{rank}Q", data, pos) if rank else ()
        pos += 8 * rank
        dtype = _DTYPES[tag]
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dtype.itemsize
        if pos + nbytes > end:
            raise ValidationError(f"{path}: tensor {name!r} payload runs past end of file")
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos).reshape(shape)
        tensors[name] = arr.copy()
        pos += nbytes
    if pos != end:
        raise ValidationError(f"{path}: {end - pos} trailing bytes before checksum")
    return Checkpoint(config=config, tensors=tensors, version=version)


# ------------------------------------------------- training state <-> tensors


def embed_config_to_dict(cfg: EmbedConfig) -> dict:
    return {
        "block_channels": list(cfg.block_channels),
        "convs_per_block": cfg.convs_per_block,
        "input_channels": cfg.input_channels,
        "gc_branch_enabled": cfg.gc_branch_enabled,
        "setting": cfg.setting,
        "dilations_block3": list(cfg.dilations_block3),
        "dilations_block4": list(cfg.dilations_block4),
    }


def embed_config_from_dict(d: dict) -> EmbedConfig:
    kw = dict(d)
    for key in ("block_channels", "dilations_block3", "dilations_block4"):
        if key in kw and kw[key] is not None:
            kw[key] = tuple(kw[key])
    return EmbedConfig(**kw)


def pack_state(
    config: dict,
    embed_cfg: EmbedConfig,
    params: EmbeddingParams,
    head: RidgeHead,
    adam: AdamState,
    epochs_done: int,
    base_seed: int,
) -> Checkpoint:
    """Bundle everything needed to resume training bit-exactly."""
    cfg = dict(config)
    cfg["embed"] = embed_config_to_dict(embed_cfg)
    tensors: dict[str, np.ndarray] = {}
    for name, t in params.tensors.items():
        tensors[f"embed.{name}"] = t.data
    for name, st in params.bn_states.items():
        tensors[f"embed.{name}.running_mean"] = st.mean
        tensors[f"embed.{name}.running_var"] = st.var
    for name, t in head.named().items():
        tensors[name] = t.data
    for name, arr in adam.m.items():
        tensors[f"adam.m.{name}"] = arr
    for name, arr in adam.v.items():
        tensors[f"adam.v.{name}"] = arr
    tensors["adam.step"] = np.asarray(adam.step, dtype=np.int64)
    tensors["meta.epoch"] = np.asarray(epochs_done, dtype=np.int64)
    tensors["meta.seed"] = np.asarray(base_seed, dtype=np.uint64)
    return Checkpoint(config=cfg, tensors=tensors)


def unpack_state(ckpt: Checkpoint, lr: float = 0.001):
    """Rebuild (embed_cfg, params, head, adam, epochs_done) from a checkpoint."""
    if "embed" not in ckpt.config:
        raise ValidationError("checkpoint config lacks the embedding section")
    embed_cfg = embed_config_from_dict(ckpt.config["embed"])
    params = build_embedding(embed_cfg, seed=0)
    for name, t in params.tensors.items():
        key = f"embed.{name}"
        if key not in ckpt.tensors:
            raise ValidationError(f"checkpoint missing tensor {key!r}")
        arr = ckpt.tensors[key]
        if arr.shape != t.data.shape:
            raise ValidationError(f"checkpoint tensor {key!r} has shape {arr.shape}, expected {t.data.shape}")
        t.data = arr.copy()
    for name, st in params.bn_states.items():
        st.mean = ckpt.tensors[f"embed.{name}.running_mean"].copy()
        st.var = ckpt.tensors[f"embed.{name}.running_var"].copy()
    head = RidgeHead(
        log_lambda=Tensor(ckpt.tensors["head.log_lambda"].copy(), dtype=ckpt.tensors["head.log_lambda"].dtype),
        alpha=Tensor(ckpt.tensors["head.alpha"].copy(), dtype=ckpt.tensors["head.alpha"].dtype),
        beta=Tensor(ckpt.tensors["head.beta"].copy(), dtype=ckpt.tensors["head.beta"].dtype),
    )
    adam = AdamState(lr=float(ckpt.config.get("train", {}).get("lr", lr)))
    adam.step = int(ckpt.tensors["adam.step"])
    for key, arr in ckpt.tensors.items():
        if key.startswith("adam.m."):
            adam.m[key[len("adam.m.") :]] = arr.copy()
        elif key.startswith("adam.v."):
            adam.v[key[len("adam.v.") :]] = arr.copy()
    epochs_done = int(ckpt.tensors["meta.epoch"])
    return embed_cfg, params, head, adam, epochs_done
