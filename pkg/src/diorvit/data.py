"""Synthetic ordinal images, the DOLD binary format, splitting and flips.

DOLD layout (little-endian)::

    magic  b"DOLD"          4 bytes
    version u16 = 1
    n_samples u32
    n_classes u8
    channels u8
    height u16
    width u16               -> 16-byte header
    per sample: label u8, then C*H*W float32 (channel-major, row-major)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"DOLD"
VERSION = 1
_HEADER = struct.Struct("<4sHIBBHH")
HEADER_SIZE = _HEADER.size


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class DataConfigError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32
    labels: np.ndarray  # [N] int64 in 1..num_classes
    num_classes: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataConfigError(f"images {self.images.shape} do not match {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 1 or self.labels.max() > self.num_classes):
            raise DataConfigError(f"labels must lie in 1..{self.num_classes}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, dict(self.metadata))

    def class_counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.num_classes + 1)[1:].tolist()

    def equals(self, other: "Dataset") -> bool:
        """Bitwise equality of images and labels."""
        return (self.num_classes == other.num_classes
                and self.images.shape == other.images.shape
                and self.images.tobytes() == other.images.tobytes()
                and np.array_equal(self.labels, other.labels))


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 4
    per_class: int = 250
    image_size: int = 32
    channels: int = 1
    noise_sigma: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2 or self.num_classes > 255:
            raise DataConfigError(f"num_classes must lie in 2..255, got {self.num_classes}")
        if self.per_class < 1:
            raise DataConfigError(f"per_class must be >= 1, got {self.per_class}")
        if self.image_size < 1 or self.channels < 1:
            raise DataConfigError("image_size and channels must be positive")
        if self.noise_sigma < 0:
            raise DataConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


def synth_image(grade: int, size: int, channels: int, phase: float,
                noise: np.ndarray | None = None) -> np.ndarray:
    """clamp(0.5 + 0.4 sin(2 pi grade (p+q)/S + phase) + noise, 0, 1)."""
    p = np.arange(size)[:, None]
    q = np.arange(size)[None, :]
    base = 0.5 + 0.4 * np.sin(2 * np.pi * grade * (p + q) / size + phase)
    img = np.broadcast_to(base, (channels, size, size))
    if noise is not None:
        img = img + noise
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """Grade g sets the diagonal frequency; phase and noise are per-sample random.

    Sample k has its own generator seeded from (seed, k), so any sample can
    be produced independently of the others.
    """
    n = cfg.num_classes * cfg.per_class
    S, C = cfg.image_size, cfg.channels
    images = np.empty((n, C, S, S), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for k in range(n):
        grade = k // cfg.per_class + 1
        rng = np.random.default_rng([cfg.seed, k])
        phase = rng.uniform(0.0, 2 * np.pi)
        noise = rng.normal(0.0, cfg.noise_sigma, size=(C, S, S)) if cfg.noise_sigma > 0 else None
        images[k] = synth_image(grade, S, C, phase, noise)
        labels[k] = grade
    meta = {"generator": "sinusoid-diagonal", "num_classes": cfg.num_classes,
            "per_class": cfg.per_class, "image_size": S, "channels": C,
            "noise_sigma": cfg.noise_sigma, "seed": cfg.seed}
    return Dataset(images, labels, cfg.num_classes, meta)


# ------------------------------------------------------------------- format


def dataset_bytes(ds: Dataset) -> bytes:
    N, C, H, W = ds.images.shape
    if ds.num_classes > 255:
        raise DataConfigError("DOLD stores at most 255 classes")
    header = _HEADER.pack(MAGIC, VERSION, N, ds.num_classes, C, H, W)
    rec = np.dtype([("label", "u1"), ("pix", "<f4", (C, H, W))])
    body = np.empty(N, dtype=rec)
    body["label"] = ds.labels
    body["pix"] = ds.images
    return header + body.tobytes()


def write_dataset(ds: Dataset, path: str | Path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def parse_dataset(buf: bytes) -> Dataset:
    if len(buf) < HEADER_SIZE:
        raise DatasetFormatError(f"file shorter than the {HEADER_SIZE}-byte header", len(buf))
    magic, version, N, n_classes, C, H, W = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 4)
    rec = np.dtype([("label", "u1"), ("pix", "<f4", (C, H, W))])
    need = HEADER_SIZE + N * rec.itemsize
    if len(buf) < need:
        done = (len(buf) - HEADER_SIZE) // rec.itemsize
        raise DatasetFormatError(f"truncated: sample {done} of {N} incomplete",
                                 HEADER_SIZE + done * rec.itemsize)
    if len(buf) > need:
        raise DatasetFormatError(f"{len(buf) - need} trailing bytes", need)
    body = np.frombuffer(buf, dtype=rec, count=N, offset=HEADER_SIZE)
    labels = body["label"].astype(np.int64)
    bad = np.flatnonzero((labels < 1) | (labels > n_classes))
    if bad.size:
        k = int(bad[0])
        raise DatasetFormatError(f"label {labels[k]} of sample {k} outside 1..{n_classes}",
                                 HEADER_SIZE + k * rec.itemsize)
    return Dataset(body["pix"].copy(), labels, n_classes)


def read_dataset(path: str | Path) -> Dataset:
    ds = parse_dataset(Path(path).read_bytes())
    meta_path = metadata_path(path)
    if meta_path.exists():
        ds.metadata = json.loads(meta_path.read_text())
    return ds


def metadata_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def write_metadata(ds: Dataset, path: str | Path) -> Path:
    meta_path = metadata_path(path)
    meta_path.write_text(json.dumps(ds.metadata, indent=2, sort_keys=True) + "\n")
    return meta_path


# ------------------------------------------------------------- augmentation

AUGMENT_MODES = ("none", "hflip", "vflip", "random")


def augment(image: np.ndarray, mode: str = "none", seed=None) -> np.ndarray:
    """Flip the last (hflip) or second-to-last (vflip) axis.

    ``random`` draws an independent horizontal and vertical flip from ``seed``.
    """
    if mode == "none":
        return image
    if mode == "hflip":
        return image[..., ::-1].copy()
    if mode == "vflip":
        return image[..., ::-1, :].copy()
    if mode == "random":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        h, v = rng.random(2) < 0.5
        out = image[..., ::-1] if h else image
        out = out[..., ::-1, :] if v else out
        return out.copy()
    raise DataConfigError(f"unknown augmentation mode {mode!r}")


# -------------------------------------------------------------------- split


def split(ds: Dataset, fractions: Sequence[float] = (0.7, 0.15, 0.15),
          seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Stratified, seed-deterministic train/validation/test split."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise DataConfigError(f"fractions must be 3 non-negative values summing to 1, got {fractions}")
    active = int((fr > 0).sum())
    rng = np.random.default_rng([seed, 0x5B1])
    parts: list[list[np.ndarray]] = [[], [], []]
    for c in range(1, ds.num_classes + 1):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size == 0:
            continue
        if idx.size < active:
            raise DataConfigError(f"class {c} has {idx.size} samples, fewer than {active} splits")
        idx = rng.permutation(idx)
        bounds = np.round(np.cumsum(fr) * idx.size).astype(int)
        bounds[-1] = idx.size
        start = 0
        for s, stop in enumerate(bounds):
            parts[s].append(idx[start:stop])
            start = stop
    out = []
    for chunks in parts:
        idx = np.sort(np.concatenate(chunks)) if chunks else np.zeros(0, dtype=np.int64)
        out.append(ds.subset(idx))
    return tuple(out)
