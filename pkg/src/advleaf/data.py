"""Labeled image collections: folder ingestion, a synthetic leaf generator,
deterministic splits, batching and the packed ``ALDS`` container."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .netpbm import read_ppm
from .binio import Reader, check_crc, pack_str, with_crc
from .tensor import Tensor

logger = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")


@dataclass
class Dataset:
    """uint8 images [N, C, H, W] with integer labels and stable sample ids."""

    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    class_names: list[str]
    splits: dict[str, np.ndarray] = field(default_factory=dict)
    normalize: bool = True
    warnings: list[str] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be [N, C, H, W], got shape {self.images.shape}")
        n = len(self.images)
        if len(self.labels) != n or len(self.ids) != n:
            raise DataError(f"{n} images but {len(self.labels)} labels and {len(self.ids)} ids")
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataError(f"labels must lie in [0, {len(self.class_names)})")
        if len(np.unique(self.ids)) != n:
            raise DataError("sample ids must be unique")
        self.splits = {k: np.asarray(v, dtype=np.int64) for k, v in self.splits.items()}
        seen = np.zeros(n, dtype=bool)
        for name, idx in self.splits.items():
            if len(idx) and (idx.min() < 0 or idx.max() >= n):
                raise DataError(f"split {name!r} has indices outside [0, {n})")
            if seen[idx].any() or len(np.unique(idx)) != len(idx):
                raise DataError(f"split {name!r} overlaps another split or repeats indices")
            seen[idx] = True

    def __len__(self) -> int:
        return len(self.images)

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def split_indices(self, split: str) -> np.ndarray:
        if split not in self.splits:
            raise DataError(f"unknown split {split!r}; available: {sorted(self.splits)}")
        return self.splits[split]

    def arrays(self, split: Optional[str] = None) -> tuple[np.ndarray, np.ndarray]:
        """(float32 images scaled to [0, 1], labels) for a split or everything."""
        idx = np.arange(len(self)) if split is None else self.split_indices(split)
        return to_float(self.images[idx]) if self.normalize else self.images[idx].astype(np.float32), self.labels[idx]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def positions_of(self, sample_ids) -> np.ndarray:
        """Row positions of the given sample ids."""
        lookup = {int(s): i for i, s in enumerate(self.ids)}
        try:
            return np.array([lookup[int(s)] for s in sample_ids], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"sample id {exc.args[0]} not in dataset") from None

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (np.array_equal(self.images, other.images) and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.ids, other.ids) and self.class_names == other.class_names
                and self.splits.keys() == other.splits.keys()
                and all(np.array_equal(self.splits[k], other.splits[k]) for k in self.splits)
                and self.normalize == other.normalize)


def to_float(images: np.ndarray) -> np.ndarray:
    return images.astype(np.float32) / np.float32(255.0)


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- ingestion


def load_image_folder(root) -> Dataset:
    """One subdirectory per class holding P6 ``.ppm`` files."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    class_dirs = sorted((p for p in root.iterdir() if p.is_dir()), key=lambda p: p.name)
    if len(class_dirs) < 2:
        raise DataError(f"{root}: need at least 2 class subdirectories, found {len(class_dirs)}")
    images, labels, files, warnings = [], [], [], []
    for label, d in enumerate(class_dirs):
        paths = sorted((p for p in d.iterdir() if p.is_file() and p.suffix.lower() == ".ppm"), key=lambda p: p.name)
        if not paths:
            msg = f"class {d.name!r} has no images"
            logger.warning(msg)
            warnings.append(msg)
        for p in paths:
            try:
                images.append(read_ppm(p))
            except FormatError as exc:
                raise FormatError(f"{p}: {exc}") from None
            labels.append(label)
            files.append(p)
    if not images:
        raise DataError(f"{root}: no images found")
    shapes = [im.shape for im in images]
    values, counts = np.unique(np.array(shapes), axis=0, return_counts=True)
    if len(values) > 1:
        common = tuple(values[counts.argmax()])
        offenders = [str(f) for f, s in zip(files, shapes) if s != common]
        raise DataError(f"mixed image shapes (expected {common}); offending files: {offenders}")
    return Dataset(np.stack(images), labels, np.arange(len(images)), [d.name for d in class_dirs],
                   warnings=warnings, metadata={"source": str(root)})


# ---------------------------------------------------------------- synthetic leaves

_LEAF_NAMES = ["healthy", "leaf_spot", "rust", "early_blight", "powdery_mildew", "mosaic_virus", "scab",
               "leaf_curl"]


@dataclass
class SynthConfig:
    """Synthetic leaf dataset parameters.

    ``samples_per_class`` is an int or one count per class (imbalance).
    """

    class_count: int = 8
    samples_per_class: int | Sequence[int] = 100
    image_size: int = 32
    seed: int = 0
    noise: float = 10.0

    def counts(self) -> list[int]:
        if isinstance(self.samples_per_class, (int, np.integer)):
            return [int(self.samples_per_class)] * self.class_count
        counts = [int(c) for c in self.samples_per_class]
        if len(counts) != self.class_count:
            raise ConfigError(f"{len(counts)} per-class counts for {self.class_count} classes")
        return counts

    def validate(self) -> None:
        if self.class_count < 2:
            raise ConfigError(f"class_count must be >= 2, got {self.class_count}")
        if self.image_size < 16:
            raise ConfigError(f"image_size must be >= 16, got {self.image_size}")
        if min(self.counts()) < 0:
            raise ConfigError("per-class sample counts must be non-negative")


def _class_style(k: int, class_count: int) -> dict:
    """Deterministic appearance of class k: orientation, tint and lesion pattern."""
    return {
        "angle": np.pi * k / class_count,
        "tint": np.array([18.0 * ((k % 3) - 1), 14.0 * (((k // 3) % 3) - 1), 0.0]),
        "spots": 1 + (k % 4) * 2,
        "spot_color": np.array([120.0, 70.0, 25.0]) if (k // 4) % 2 == 0 else np.array([215.0, 200.0, 60.0]),
        "spot_radius": 0.05 + 0.015 * ((k // 2) % 2),
    }


def _draw_leaf(rng: np.random.Generator, style: dict, size: int, noise: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    # soil-like background: per-image base colour plus smooth blotches
    base = np.array([95.0, 80.0, 60.0]) + rng.normal(0, 12, 3)
    img = np.broadcast_to(base, (size, size, 3)).copy()
    for _ in range(3):
        cy, cx, r = rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.15, 0.4)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        img += blob[..., None] * rng.normal(0, 15, 3)
    cy, cx = 0.5 + rng.uniform(-0.06, 0.06, 2)
    a, b = rng.uniform(0.34, 0.42), rng.uniform(0.17, 0.23)
    theta = style["angle"] + rng.normal(0, 0.08)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    r2 = (u / a) ** 2 + (v / b) ** 2
    leaf_mask = np.clip((1.0 - r2) * 6.0, 0.0, 1.0)
    leaf = np.array([70.0, 150.0, 55.0]) + style["tint"] + rng.normal(0, 6, 3)
    shade = 1.0 + 0.15 * u / a
    leaf_img = leaf * shade[..., None]
    # midrib along the major axis
    leaf_img -= (np.abs(v) < 0.012)[..., None] * 25.0
    for _ in range(style["spots"]):
        su, sv = rng.uniform(-0.6, 0.6) * a, rng.uniform(-0.5, 0.5) * b
        sy = cy + su * np.sin(theta) + sv * np.cos(theta)
        sx = cx + su * np.cos(theta) - sv * np.sin(theta)
        rad = style["spot_radius"] * rng.uniform(0.8, 1.2)
        d2 = (yy - sy) ** 2 + (xx - sx) ** 2
        spot = np.clip((1.0 - d2 / (rad * rad)) * 3.0, 0.0, 1.0)
        leaf_img = leaf_img * (1 - spot[..., None]) + style["spot_color"] * spot[..., None]
    img = img * (1 - leaf_mask[..., None]) + leaf_img * leaf_mask[..., None]
    img *= rng.uniform(0.85, 1.15)
    img += rng.normal(0, noise, img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8).transpose(2, 0, 1)


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """Procedural leaves on a noisy background; deterministic per seed.

    Each class has its own leaf orientation, tint and lesion pattern, with
    per-sample jitter in position, size, lighting and noise.
    """
    cfg.validate()
    counts = cfg.counts()
    images, labels = [], []
    for k, count in enumerate(counts):
        style = _class_style(k, cfg.class_count)
        for i in range(count):
            rng = np.random.default_rng([cfg.seed, k, i])
            images.append(_draw_leaf(rng, style, cfg.image_size, cfg.noise))
            labels.append(k)
    names = [(_LEAF_NAMES[k] if k < len(_LEAF_NAMES) and cfg.class_count <= len(_LEAF_NAMES) else f"class_{k:02d}")
             for k in range(cfg.class_count)]
    shape = (0, 3, cfg.image_size, cfg.image_size)
    imgs = np.stack(images) if images else np.zeros(shape, np.uint8)
    meta = {"generator": "synthetic_leaves", "class_count": cfg.class_count, "samples_per_class": counts,
            "image_size": cfg.image_size, "seed": cfg.seed, "noise": cfg.noise}
    return Dataset(imgs, labels, np.arange(len(imgs)), names, metadata=meta)


# ---------------------------------------------------------------- splits / batches


def _allocate(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of n items; ties favour earlier splits."""
    raw = [f * n for f in fractions]
    counts = [int(np.floor(r + 1e-9)) for r in raw]
    left = n - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:left]:
        counts[i] += 1
    return counts


def split(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0, stratified: bool = True) -> Dataset:
    """Return a copy of ``dataset`` with disjoint, exhaustive train/val/test splits."""
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[], [], []]
    groups = ([np.flatnonzero(dataset.labels == k) for k in range(dataset.class_count)] if stratified
              else [np.arange(len(dataset))])
    for members in groups:
        members = rng.permutation(members)
        start = 0
        for j, c in enumerate(_allocate(len(members), fractions)):
            parts[j].append(members[start:start + c])
            start += c
    splits = {name: np.sort(np.concatenate(p)) if p else np.zeros(0, np.int64) for name, p in zip(SPLIT_NAMES, parts)}
    meta = dict(dataset.metadata, split={"fractions": fractions, "seed": seed, "stratified": stratified})
    return Dataset(dataset.images, dataset.labels, dataset.ids, list(dataset.class_names), splits,
                   dataset.normalize, list(dataset.warnings), meta)


def batches(dataset: Dataset, split_name: str, batch_size: int, shuffle_seed: Optional[int] = None,
            with_indices: bool = False) -> Iterator[tuple]:
    """Yield ``(x, y)`` batches with x a float32 Tensor in [0, 1].

    ``shuffle_seed=None`` keeps split order; the last partial batch is kept.
    With ``with_indices`` the dataset row positions are yielded third.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    idx = dataset.split_indices(split_name)
    if shuffle_seed is not None:
        idx = np.random.default_rng(shuffle_seed).permutation(idx)
    for start in range(0, len(idx), batch_size):
        sel = idx[start:start + batch_size]
        x = to_float(dataset.images[sel]) if dataset.normalize else dataset.images[sel].astype(np.float32)
        out = (Tensor(x), dataset.labels[sel])
        yield (*out, sel) if with_indices else out


# ---------------------------------------------------------------- packed container

PACK_MAGIC = b"ALDS"
PACK_VERSION = 1


def encode_packed(dataset: Dataset) -> bytes:
    n = len(dataset)
    c, h, w = dataset.image_shape
    out = bytearray(PACK_MAGIC)
    out += struct.pack("<IQ3I", PACK_VERSION, n, c, h, w)
    out += struct.pack("<I", dataset.class_count)
    for name in dataset.class_names:
        out += pack_str(name)
    out += struct.pack("<I", len(dataset.splits))
    for name, idx in dataset.splits.items():
        out += pack_str(name) + struct.pack("<Q", len(idx)) + np.asarray(idx, "<u8").tobytes()
    rec = np.zeros(n, dtype=[("id", "<u8"), ("label", "<u4"), ("pixels", "u1", (c * h * w,))])
    rec["id"] = dataset.ids
    rec["label"] = dataset.labels
    rec["pixels"] = dataset.images.reshape(n, -1)
    out += rec.tobytes()
    meta = dict(dataset.metadata, normalize=dataset.normalize, warnings=dataset.warnings)
    out += pack_str(json.dumps(meta, sort_keys=True, default=_json_default))
    return with_crc(out)


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o)}")


def save_packed(dataset: Dataset, path) -> None:
    Path(path).write_bytes(encode_packed(dataset))


def decode_packed(buf: bytes) -> Dataset:
    if buf[:4] != PACK_MAGIC:
        raise FormatError(f"packed dataset: bad magic {buf[:4]!r}")
    r = Reader(check_crc(buf, "packed dataset"), "packed dataset")
    r.take(4)
    version, n, c, h, w = r.unpack("<IQ3I")
    if version != PACK_VERSION:
        raise FormatError(f"packed dataset: unsupported version {version}")
    (k,) = r.unpack("<I")
    names = [r.string() for _ in range(k)]
    (s,) = r.unpack("<I")
    splits = {}
    for _ in range(s):
        name = r.string()
        (count,) = r.unpack("<Q")
        splits[name] = np.frombuffer(r.take(8 * count), "<u8").astype(np.int64)
    dt = np.dtype([("id", "<u8"), ("label", "<u4"), ("pixels", "u1", (c * h * w,))])
    rec = np.frombuffer(r.take(dt.itemsize * n), dtype=dt)
    meta = json.loads(r.string())
    r.expect_end()
    normalize = meta.pop("normalize", True)
    warnings = meta.pop("warnings", [])
    return Dataset(rec["pixels"].reshape(n, c, h, w).copy(), rec["label"].astype(np.int64),
                   rec["id"].astype(np.int64), names, splits, normalize, warnings, meta)


def load_packed(path) -> Dataset:
    return decode_packed(Path(path).read_bytes())
