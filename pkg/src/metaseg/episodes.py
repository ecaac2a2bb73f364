"""Segmentation dataset, synthetic data generator and episodic sampler.

The synthetic generator renders small RGB images of textured geometric
objects with pixel-exact masks. A class is a (shape, texture) pair; every
image contains objects of a single class, so per-class pools never leak
foreign foreground pixels into an episode. Bright hollow distractor outlines
(labeled background) and a noisy background make raw color statistics a poor
segmentation cue, which keeps the untrained-feature baseline honest.

Episodes remap the K drawn global classes to local ids 1..K in draw order;
everything else is background 0.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ValidationError
from .util import derive_seed

SHAPES = ("disk", "square", "triangle", "ring", "cross", "diamond")
TEXTURES = ("stripes", "checker", "dots")


@dataclass
class Record:
    """One image/mask pair; mask holds global class ids, 0 = background."""

    image: np.ndarray  # (3, H, W) float32 in [0, 1], 8-bit quantized
    mask: np.ndarray  # (H, W) int16
    present: frozenset  # foreground class ids occurring in the mask


@dataclass
class SegDataset:
    records: list[Record]
    class_names: dict[int, str]
    train_classes: frozenset = frozenset()
    novel_classes: frozenset = frozenset()

    def class_ids(self) -> list[int]:
        return sorted(self.class_names)

    def records_for_class(self, cid: int) -> list[int]:
        return [i for i, r in enumerate(self.records) if cid in r.present]


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic generator; fully determined by ``seed``."""

    num_classes: int = 14
    images_per_class: int = 64
    image_size: int = 32
    min_objects: int = 2
    max_objects: int = 3
    min_distractors: int = 1
    max_distractors: int = 2
    min_radius: int = 5
    max_radius: int = 8
    noise: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if not (1 <= self.num_classes <= len(SHAPES) * len(TEXTURES)):
            raise ValidationError(
                f"num_classes must be in [1, {len(SHAPES) * len(TEXTURES)}], got {self.num_classes}"
            )
        if self.image_size % 4 or self.image_size < 16:
            raise ValidationError("image_size must be >= 16 and divisible by 4")
        if not (1 <= self.min_objects <= self.max_objects):
            raise ValidationError("need 1 <= min_objects <= max_objects")
        if not (0 <= self.min_distractors <= self.max_distractors):
            raise ValidationError("need 0 <= min_distractors <= max_distractors")
        if not (2 <= self.min_radius <= self.max_radius < self.image_size // 2):
            raise ValidationError("bad radius range for this canvas")
        if self.images_per_class < 1:
            raise ValidationError("images_per_class must be >= 1")


def class_recipe(num_classes: int) -> list[tuple[str, str]]:
    """Deterministic (shape, texture) assignment for class ids 1..num_classes."""
    combos = [(s, t) for s in SHAPES for t in TEXTURES]
    return combos[:num_classes]


def _inside(shape: str, dy: np.ndarray, dx: np.ndarray, r: float) -> np.ndarray:
    if shape == "disk":
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= r
    if shape == "triangle":
        return (np.abs(dy) <= r) & (np.abs(dx) <= (dy + r) / 2)
    if shape == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if shape == "cross":
        arm = max(r / 3.0, 1.2)
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    raise ValidationError(f"unknown shape {shape!r}")


def _texture_colors(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    primary = rng.uniform(0.35, 1.0, size=3)
    secondary = primary * rng.uniform(0.10, 0.35)
    return primary, secondary


def _paint(img: np.ndarray, sel: np.ndarray, texture: str, yy, xx, rng: np.random.Generator):
    """Fill the selected pixels with a two-color period-4 pattern.

    All class textures share scale and color statistics; only the pattern
    geometry differs, so telling them apart (or from the background's
    near-miss patches) requires actual pattern recognition.
    """
    c1, c2 = _texture_colors(rng)
    if texture == "stripes":
        # orientation is free per object, so only "stripiness" identifies
        # the class, not any particular direction a linear probe could use
        phase = rng.integers(0, 4)
        coord = (yy, xx, yy + xx, yy - xx)[rng.integers(0, 4)]
        pattern = ((coord + phase) // 2) % 2 == 0
    elif texture == "checker":
        py, px = rng.integers(0, 4, size=2)
        pattern = ((yy + py) // 2 + (xx + px) // 2) % 2 == 0
    elif texture == "dots":
        py, px = rng.integers(0, 4, size=2)
        pattern = ((yy + py) % 4 < 2) & ((xx + px) % 4 < 2)
        if rng.random() < 0.5:  # polarity flip keeps the mean color class-free
            pattern = ~pattern
    else:
        raise ValidationError(f"unknown texture {texture!r}")
    for ch in range(3):
        img[ch][sel & pattern] = c1[ch]
        img[ch][sel & ~pattern] = c2[ch]


def _paint_decoy(img: np.ndarray, sel: np.ndarray, yy, xx, rng: np.random.Generator):
    """Fill a background patch with a near-miss pattern: object-like to raw
    color statistics, off-family to a pattern-aware model."""
    style = rng.integers(0, 4)
    c1, c2 = _texture_colors(rng)
    if style == 0:  # solid fill (classes are never solid)
        for ch in range(3):
            img[ch][sel] = c1[ch]
    elif style == 1:  # period-2 stripes (half the class period)
        phase = rng.integers(0, 2)
        coord = (yy, xx, yy + xx, yy - xx)[rng.integers(0, 4)]
        pattern = (coord + phase) % 2 == 0
        for ch in range(3):
            img[ch][sel & pattern] = c1[ch]
            img[ch][sel & ~pattern] = c2[ch]
    elif style == 2:  # period-8 checker (double the class period)
        py, px = rng.integers(0, 8, size=2)
        pattern = ((yy + py) // 4 + (xx + px) // 4) % 2 == 0
        for ch in range(3):
            img[ch][sel & pattern] = c1[ch]
            img[ch][sel & ~pattern] = c2[ch]
    else:  # 2x2 confetti fill
        h, w = img.shape[1], img.shape[2]
        half_h, half_w = (h + 1) // 2, (w + 1) // 2
        confetti = np.repeat(np.repeat(rng.uniform(0.1, 1.0, (3, half_h, half_w)), 2, axis=1), 2, axis=2)
        for ch in range(3):
            img[ch][sel] = confetti[ch, :h, :w][sel]


def _render_background(s: int, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Wall-to-wall background in a per-image random near-miss style.

    Colors cover the same range as object colors and the style changes from
    image to image, so no fixed background statistic separates figure from
    ground; only the objects' regular period-4 two-color patterns are a
    stable segmentation cue.
    """
    yy, xx = np.mgrid[0:s, 0:s]
    style = rng.integers(0, 9)
    if style >= 6:  # wall in a class-family texture: bounded-region vs
        # full-field is then the only figure/ground cue at that texture
        img = np.empty((3, s, s))
        sel = np.ones((s, s), dtype=bool)
        _paint(img, sel, TEXTURES[style - 6], yy, xx, rng)
        return img + rng.normal(0.0, cfg.noise, size=(3, s, s))
    if style == 0:  # per-pixel confetti
        img = rng.uniform(0.1, 1.0, size=(3, s, s))
    elif style == 1:  # 2x2-block confetti
        half = (s + 1) // 2
        img = np.repeat(np.repeat(rng.uniform(0.1, 1.0, size=(3, half, half)), 2, axis=1), 2, axis=2)
        img = img[:, :s, :s].copy()
    elif style == 2:  # smooth color field from a coarse grid
        coarse = rng.uniform(0.1, 1.0, size=(3, 4, 4))
        axes = np.linspace(0, 3, s)
        lo = np.floor(axes).astype(int)
        hi = np.minimum(lo + 1, 3)
        t = axes - lo
        rows = coarse[:, lo, :] * (1 - t)[None, :, None] + coarse[:, hi, :] * t[None, :, None]
        img = rows[:, :, lo] * (1 - t)[None, None, :] + rows[:, :, hi] * t[None, None, :]
    elif style == 3:  # solid wall (classes are never solid)
        img = np.ones((3, s, s)) * rng.uniform(0.1, 1.0, size=3)[:, None, None]
    elif style == 4:  # period-2 stripe wall (half the class period)
        c1, c2 = _texture_colors(rng)
        coord = (yy, xx, yy + xx, yy - xx)[rng.integers(0, 4)]
        pattern = (coord + rng.integers(0, 2)) % 2 == 0
        img = np.where(pattern[None], c1[:, None, None], c2[:, None, None])
    else:  # period-8 checker wall (double the class period)
        c1, c2 = _texture_colors(rng)
        py, px = rng.integers(0, 8, size=2)
        pattern = ((yy + py) // 4 + (xx + px) // 4) % 2 == 0
        img = np.where(pattern[None], c1[:, None, None], c2[:, None, None])
    img = img + rng.normal(0.0, cfg.noise, size=(3, s, s))
    return img


_PLACEMENT_TRIES = 500
_SPACING = 0.6  # min center distance as a fraction of summed radii


def _place(rng, size, radius, occupied):
    """Center for a new object; keeps soft clearance from earlier ones.

    Falls back to an unconstrained spot when the retry budget runs out, so
    large objects may partially overlap (later draws occlude earlier ones).
    """
    if radius + 1 >= size - radius - 2:
        raise ValidationError(
            f"placement retry budget exhausted: radius {radius:.1f} does not fit a {size}x{size} canvas"
        )
    for _ in range(_PLACEMENT_TRIES):
        cy = rng.uniform(radius + 1, size - radius - 2)
        cx = rng.uniform(radius + 1, size - radius - 2)
        if all(
            (cy - oy) ** 2 + (cx - ox) ** 2 > (_SPACING * (radius + orad)) ** 2
            for oy, ox, orad in occupied
        ):
            return cy, cx
    return rng.uniform(radius + 1, size - radius - 2), rng.uniform(radius + 1, size - radius - 2)


def _render_record(cid: int, shape: str, texture: str, cfg: SynthConfig, rng: np.random.Generator) -> Record:
    s = cfg.image_size
    yy, xx = np.mgrid[0:s, 0:s]
    img = _render_background(s, cfg, rng)
    mask = np.zeros((s, s), dtype=np.int16)
    occupied: list[tuple[float, float, float]] = []

    # near-miss decoy patches first, under the objects, labeled background
    if cfg.max_distractors:
        for _ in range(int(rng.integers(cfg.min_distractors, cfg.max_distractors + 1))):
            r = rng.uniform(cfg.min_radius, cfg.max_radius)
            cy, cx = _place(rng, s, r, occupied)
            dshape = SHAPES[rng.integers(0, len(SHAPES))]
            sel = _inside(dshape, yy - cy, xx - cx, r)
            _paint_decoy(img, sel, yy, xx, rng)
            occupied.append((cy, cx, r))

    n_objects = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    for _ in range(n_objects):
        r = rng.uniform(cfg.min_radius, cfg.max_radius)
        cy, cx = _place(rng, s, r, occupied)
        sel = _inside(shape, yy - cy, xx - cx, r)
        _paint(img, sel, texture, yy, xx, rng)
        mask[sel] = cid
        occupied.append((cy, cx, r))

    # per-image color jitter: channel permutation plus gains. Pattern geometry
    # survives, but raw color statistics stop transferring between images.
    perm = rng.permutation(3)
    gains = rng.uniform(0.55, 1.0, size=3)
    img = img[perm] * gains[:, None, None]

    img = np.clip(img, 0.0, 1.0)
    img = np.round(img * 255.0) / 255.0  # 8-bit grid so disk round-trips exactly
    return Record(image=img.astype(np.float32), mask=mask, present=frozenset({cid}))


def gen_synthetic(cfg: SynthConfig) -> SegDataset:
    """Deterministic dataset of single-class images with pixel-exact masks."""
    recipe = class_recipe(cfg.num_classes)
    class_names = {i + 1: f"{shape}_{texture}" for i, (shape, texture) in enumerate(recipe)}
    records = []
    for idx, (shape, texture) in enumerate(recipe):
        cid = idx + 1
        for j in range(cfg.images_per_class):
            rng = np.random.default_rng(derive_seed(cfg.seed, "image", cid, j))
            records.append(_render_record(cid, shape, texture, cfg, rng))
    return SegDataset(records=records, class_names=class_names)


def dataset_hash(ds: SegDataset) -> str:
    """SHA-256 over images, masks, class table and split; stable across runs."""
    h = hashlib.sha256()
    for cid in ds.class_ids():
        h.update(f"{cid}:{ds.class_names[cid]};".encode())
    h.update(("train=" + ",".join(map(str, sorted(ds.train_classes)))).encode())
    h.update(("novel=" + ",".join(map(str, sorted(ds.novel_classes)))).encode())
    for rec in ds.records:
        h.update(np.round(rec.image * 255.0).astype(np.uint8).tobytes())
        h.update(rec.mask.astype(np.int16).tobytes())
    return h.hexdigest()


def split_classes(ds: SegDataset, novel_ids) -> SegDataset:
    """Declare the novel class set; the rest become training classes."""
    novel = frozenset(int(i) for i in novel_ids)
    declared = set(ds.class_names)
    unknown = novel - declared
    if unknown:
        raise ValidationError(f"novel ids not in dataset: {sorted(unknown)}")
    train = frozenset(declared - novel)
    if not train:
        raise ValidationError("split leaves no training classes")
    return replace(ds, train_classes=train, novel_classes=novel)


@dataclass
class Episode:
    """One K-way N-shot task with masks remapped to local ids 0..K."""

    k: int
    n_shot: int
    q: int
    class_table: dict[int, int]  # global id -> local id (1..K, draw order)
    support: list[tuple[np.ndarray, np.ndarray]]  # N*K (image, mask) pairs, class-major
    query: list[tuple[np.ndarray, np.ndarray]]  # Q*K pairs, class-major
    record_ids: list[int] = field(default_factory=list)  # support then query


def _remap(mask: np.ndarray, table: dict[int, int]) -> np.ndarray:
    out = np.zeros_like(mask)
    for gid, lid in table.items():
        out[mask == gid] = lid
    return out


def sample_episode(ds: SegDataset, split: str, k: int, n: int, q: int, seed: int) -> Episode:
    """Draw K classes then N support + Q query images per class, no repeats.

    Only single-class images of the drawn class are eligible, so no pixel of
    a foreign foreground class can enter the episode. Masks are remapped to
    1..K in class draw order. Deterministic given the seed.
    """
    if split == "train":
        class_pool = sorted(ds.train_classes)
    elif split == "novel":
        class_pool = sorted(ds.novel_classes)
    else:
        raise ValidationError(f"unknown split {split!r}")
    if len(class_pool) < k:
        raise ValidationError(f"split {split!r} has {len(class_pool)} classes, need {k}")
    if k < 1 or n < 1 or q < 0:
        raise ValidationError("need k >= 1, n >= 1, q >= 0")
    rng = np.random.default_rng(seed)
    chosen = [int(c) for c in rng.choice(class_pool, size=k, replace=False)]
    table = {gid: i + 1 for i, gid in enumerate(chosen)}

    wanted = set(chosen)
    pools: dict[int, list[int]] = {gid: [] for gid in chosen}
    for i, r in enumerate(ds.records):
        if len(r.present) == 1:
            (only,) = r.present
            if only in wanted:
                pools[only].append(i)

    support, query, rec_ids_s, rec_ids_q = [], [], [], []
    for gid in chosen:
        pool = pools[gid]
        if len(pool) < n + q:
            raise ValidationError(
                f"class {gid} has {len(pool)} usable images, need {n + q} (N={n}, Q={q})"
            )
        picks = rng.choice(len(pool), size=n + q, replace=False)
        for j, p in enumerate(picks):
            rec = ds.records[pool[int(p)]]
            pair = (rec.image, _remap(rec.mask, table))
            if j < n:
                support.append(pair)
                rec_ids_s.append(pool[int(p)])
            else:
                query.append(pair)
                rec_ids_q.append(pool[int(p)])
    return Episode(
        k=k, n_shot=n, q=q, class_table=table,
        support=support, query=query, record_ids=rec_ids_s + rec_ids_q,
    )


def hflip_pair(image: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return image[:, :, ::-1].copy(), mask[:, ::-1].copy()


def rot90_pair(image: np.ndarray, mask: np.ndarray, turns: int) -> tuple[np.ndarray, np.ndarray]:
    turns %= 4
    return (
        np.ascontiguousarray(np.rot90(image, turns, axes=(1, 2))),
        np.ascontiguousarray(np.rot90(mask, turns, axes=(0, 1))),
    )


def augment_pair(image: np.ndarray, mask: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Coin-flip horizontal mirror, then a uniform quarter-turn rotation.

    The identical transform hits image and mask; label values are untouched.
    Requires a square canvas so rotations keep the shape.
    """
    if image.shape[1] != image.shape[2]:
        raise ValidationError("augmentation requires square images")
    rng = np.random.default_rng(seed)
    if rng.random() < 0.5:
        image, mask = hflip_pair(image, mask)
    return rot90_pair(image, mask, int(rng.integers(0, 4)))


def augment_episode(ep: Episode, seed: int) -> Episode:
    """Augment every support and query pair with independent derived seeds."""
    support = [augment_pair(im, m, derive_seed(seed, "s", i)) for i, (im, m) in enumerate(ep.support)]
    query = [augment_pair(im, m, derive_seed(seed, "q", i)) for i, (im, m) in enumerate(ep.query)]
    return replace(ep, support=support, query=query)
