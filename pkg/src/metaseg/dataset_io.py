"""On-disk dataset format: binary PPM images, PGM masks, plain-text tables.

Layout of a dataset directory:

    classes.txt   one "id<TAB>name" per line, ids >= 1
    split.txt     lines "train: 1,2,..." and "novel: 5,6,..."
    images/xxxxx.ppm   binary P6, 8-bit RGB
    masks/xxxxx.pgm    binary P5, 8-bit, pixel value = global class id (0 = background)

These formats need no codec dependencies and round-trip the generator's
8-bit-quantized images exactly.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .episodes import Record, SegDataset
from .errors import ValidationError


def _write_pnm(path: Path, magic: bytes, arr: np.ndarray) -> None:
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(arr, dtype=np.uint8).tobytes())


def _read_pnm(path: Path, magic: bytes) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(magic):
        raise ValidationError(f"{path}: expected {magic.decode()} header")
    pos = len(magic)
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":  # comment to end of line
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValidationError(f"{path}: truncated header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(x) for x in fields)
    except ValueError:
        raise ValidationError(f"{path}: malformed header fields {fields}") from None
    if maxval != 255:
        raise ValidationError(f"{path}: only maxval 255 supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    payload = data[pos : pos + need]
    if len(payload) != need:
        raise ValidationError(f"{path}: expected {need} payload bytes, found {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def save_dataset(ds: SegDataset, out_dir: str | os.PathLike) -> None:
    """Write a dataset directory (created if needed, files overwritten)."""
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    with open(root / "classes.txt", "w") as f:
        for cid in ds.class_ids():
            f.write(f"{cid}\t{ds.class_names[cid]}\n")
    with open(root / "split.txt", "w") as f:
        f.write("train: " + ",".join(str(c) for c in sorted(ds.train_classes)) + "\n")
        f.write("novel: " + ",".join(str(c) for c in sorted(ds.novel_classes)) + "\n")
    for i, rec in enumerate(ds.records):
        name = f"{i:05d}"
        rgb = np.round(rec.image * 255.0).astype(np.uint8).transpose(1, 2, 0)
        _write_pnm(root / "images" / f"{name}.ppm", b"P6", rgb)
        if rec.mask.max(initial=0) > 255 or rec.mask.min(initial=0) < 0:
            raise ValidationError(f"mask {name} has ids outside [0, 255]")
        _write_pnm(root / "masks" / f"{name}.pgm", b"P5", rec.mask.astype(np.uint8))


def _parse_split_line(line: str, path: Path) -> tuple[str, frozenset]:
    key, _, rest = line.partition(":")
    key = key.strip()
    if key not in ("train", "novel"):
        raise ValidationError(f"{path}: unknown split key {key!r}")
    rest = rest.strip()
    ids = frozenset(int(x) for x in rest.split(",") if x.strip()) if rest else frozenset()
    return key, ids


def load_dataset_dir(path: str | os.PathLike) -> SegDataset:
    """Load and validate a dataset directory; see module docstring for format."""
    root = Path(path)
    classes_file = root / "classes.txt"
    if not classes_file.exists():
        raise ValidationError(f"{classes_file}: missing")
    class_names: dict[int, str] = {}
    for ln, line in enumerate(classes_file.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValidationError(f"{classes_file}:{ln}: expected 'id<TAB>name'")
        cid = int(parts[0])
        if cid < 1:
            raise ValidationError(f"{classes_file}:{ln}: class ids must be >= 1")
        if cid in class_names:
            raise ValidationError(f"{classes_file}:{ln}: duplicate class id {cid}")
        class_names[cid] = parts[1]

    splits = {"train": frozenset(), "novel": frozenset()}
    split_file = root / "split.txt"
    if split_file.exists():
        for line in split_file.read_text().splitlines():
            if line.strip():
                key, ids = _parse_split_line(line, split_file)
                splits[key] = ids
        overlap = splits["train"] & splits["novel"]
        if overlap:
            raise ValidationError(f"{split_file}: classes in both splits: {sorted(overlap)}")
        undeclared = (splits["train"] | splits["novel"]) - set(class_names)
        if undeclared:
            raise ValidationError(f"{split_file}: undeclared class ids: {sorted(undeclared)}")

    img_dir = root / "images"
    records = []
    for img_path in sorted(img_dir.glob("*.ppm")):
        mask_path = root / "masks" / (img_path.stem + ".pgm")
        if not mask_path.exists():
            raise ValidationError(f"{img_path}: no matching mask {mask_path.name}")
        rgb = _read_pnm(img_path, b"P6")
        mask = _read_pnm(mask_path, b"P5").astype(np.int16)
        if rgb.shape[:2] != mask.shape:
            raise ValidationError(
                f"{img_path}: image is {rgb.shape[1]}x{rgb.shape[0]} but mask is "
                f"{mask.shape[1]}x{mask.shape[0]}"
            )
        present = frozenset(int(v) for v in np.unique(mask) if v != 0)
        bad = present - set(class_names)
        if bad:
            raise ValidationError(f"{mask_path}: mask value(s) {sorted(bad)} not declared in classes.txt")
        image = (rgb.astype(np.float32) / 255.0).transpose(2, 0, 1)
        records.append(Record(image=image, mask=mask, present=present))
    return SegDataset(
        records=records,
        class_names=class_names,
        train_classes=splits["train"],
        novel_classes=splits["novel"],
    )
