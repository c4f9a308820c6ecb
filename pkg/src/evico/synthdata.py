"""Synthetic 2D segmentation benchmark with labeled/unlabeled splits.

Each image holds one or two ellipses/rectangles on a smooth background.
The clean piecewise-constant image is blurred, corrupted with Gaussian
noise and normalized per sample, so object boundaries are genuinely
ambiguous.  Masks are the pre-noise shape indicators.
"""
from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, EmptyBatchError

FG_FRACTION_RANGE = (0.02, 0.60)
MAX_REJECTIONS = 1000

IMAGE_MAGIC = b"EVIM"
MASK_MAGIC = b"EVMK"
DTYPE_TAGS = {"f8": b"f8\0\0", "u1": b"u1\0\0"}


@dataclass(frozen=True)
class DatasetSpec:
    count: int = 100
    test_count: int = 20
    height: int = 64
    width: int = 64
    num_classes: int = 2
    labeled_fraction: float = 0.2
    seed: int = 0
    noise_sigma: float = 0.35
    blur_sigma: float = 1.5
    contrast_min: float = 0.3
    contrast_max: float = 1.0
    size_min: float = 0.08
    size_max: float = 0.30
    bias_amplitude: float = 0.3

    def __post_init__(self):
        if self.count <= 0:
            raise ConfigError("dataset count must be positive")
        if self.test_count < 0:
            raise ConfigError("test_count must be >= 0")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ConfigError(f"labeled_fraction must be in (0, 1], got {self.labeled_fraction}")
        if self.num_classes not in (2, 3):
            raise ConfigError(f"num_classes must be 2 or 3, got {self.num_classes}")
        if self.height < 8 or self.width < 8:
            raise ConfigError("images must be at least 8x8")
        if self.noise_sigma < 0 or self.blur_sigma < 0:
            raise ConfigError("noise_sigma and blur_sigma must be >= 0")
        if not 0 < self.contrast_min <= self.contrast_max:
            raise ConfigError("need 0 < contrast_min <= contrast_max")
        if not 0 < self.size_min <= self.size_max < 0.5:
            raise ConfigError("need 0 < size_min <= size_max < 0.5")

    @property
    def labeled_count(self):
        # round first so 0.1 * 30 does not become 4
        return max(1, math.ceil(round(self.labeled_fraction * self.count, 9)))


@dataclass
class Sample:
    id: int
    image: np.ndarray                  # [1,H,W] float64, zero mean / unit variance
    mask: Optional[np.ndarray] = None  # [H,W] uint8 class indices, labeled samples only

    @property
    def labeled(self):
        return self.mask is not None


@dataclass
class Dataset:
    spec: DatasetSpec
    train: list[Sample]
    test: list[Sample]

    @property
    def labeled(self):
        return [s for s in self.train if s.labeled]

    @property
    def unlabeled(self):
        return [s for s in self.train if not s.labeled]


def _seed_seq(seed, *key):
    return np.random.SeedSequence(seed, spawn_key=key)


def _shape_mask(rng, h, w, spec: DatasetSpec):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    size = min(h, w)
    cy, cx = rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * w
    ry, rx = rng.uniform(spec.size_min, spec.size_max, size=2) * size
    theta = rng.uniform(0, math.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    if rng.random() < 0.5:
        return "ellipse", (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    return "rectangle", (np.abs(u) <= rx) & (np.abs(v) <= ry)


def _draw_mask(rng, spec: DatasetSpec):
    h, w = spec.height, spec.width
    lo, hi = FG_FRACTION_RANGE
    for _ in range(MAX_REJECTIONS):
        mask = np.zeros((h, w), dtype=np.uint8)
        for _ in range(int(rng.integers(1, 3))):
            kind, region = _shape_mask(rng, h, w, spec)
            cls = 2 if (spec.num_classes == 3 and kind == "rectangle") else 1
            mask[region] = cls
        frac = np.count_nonzero(mask) / mask.size
        if lo <= frac <= hi:
            return mask
    raise ConfigError("could not draw a mask with an admissible foreground fraction")


def make_sample(spec: DatasetSpec, sample_id: int):
    """Image and full mask for one sample; a pure function of (spec, id)."""
    rng = np.random.default_rng(_seed_seq(spec.seed, 0, sample_id))
    mask = _draw_mask(rng, spec)
    h, w = mask.shape
    clean = np.zeros((h, w))
    for cls in range(1, spec.num_classes):
        clean[mask == cls] = rng.uniform(spec.contrast_min, spec.contrast_max)
    # smooth linear intensity drift across the field of view
    gy, gx = rng.normal(size=2) * spec.bias_amplitude
    yy, xx = np.mgrid[0:h, 0:w]
    clean += gy * (yy / h - 0.5) + gx * (xx / w - 0.5)
    img = gaussian_filter(clean, spec.blur_sigma, mode="nearest") if spec.blur_sigma > 0 else clean
    img = img + rng.normal(0.0, spec.noise_sigma, size=(h, w))
    img = (img - img.mean()) / img.std()
    return img[None, :, :], mask


def split_ids(spec: DatasetSpec):
    """(labeled ids sorted, unlabeled ids sorted, test ids)."""
    rng = np.random.default_rng(_seed_seq(spec.seed, 1))
    order = rng.permutation(spec.count)
    n_lab = spec.labeled_count
    labeled = sorted(int(i) for i in order[:n_lab])
    unlabeled = sorted(int(i) for i in order[n_lab:])
    test = list(range(spec.count, spec.count + spec.test_count))
    return labeled, unlabeled, test


def generate(spec: DatasetSpec) -> Dataset:
    labeled, _, test_ids = split_ids(spec)
    labeled = set(labeled)
    train = []
    for i in range(spec.count):
        img, mask = make_sample(spec, i)
        train.append(Sample(i, img, mask if i in labeled else None))
    test = [Sample(i, *make_sample(spec, i)) for i in test_ids]
    return Dataset(spec, train, test)


# ---------------------------------------------------------------- batching

@dataclass
class Batch:
    images: np.ndarray   # [B,1,H,W]; labeled samples first
    labels: np.ndarray   # [L,H,W] int64 for the first L samples
    ids: list[int]

    @property
    def n_labeled(self):
        return int(self.labels.shape[0])


class _Cycler:
    """Endless draw without replacement, reshuffling after every pass."""

    def __init__(self, items, rng):
        self.items = list(items)
        self.rng = rng
        self._queue: list = []

    def take(self, k):
        out = []
        while len(out) < k:
            if not self._queue:
                self._queue = [self.items[i] for i in self.rng.permutation(len(self.items))]
            out.append(self._queue.pop(0))
        return out


def make_batches(train: list[Sample], batch_size=8, labeled_per_batch=4, seed=0,
                 include_unlabeled=True) -> Iterator[Batch]:
    """Endless stream of mixed batches.

    The labeled and unlabeled streams use independent generators, so the
    labeled part of every batch is the same whether or not unlabeled samples
    are included.  With ``include_unlabeled=False`` a batch holds only the
    ``labeled_per_batch`` labeled samples.
    """
    if not 0 < labeled_per_batch <= batch_size:
        raise ConfigError("need 0 < labeled_per_batch <= batch_size")
    lab = [s for s in train if s.labeled]
    unl = [s for s in train if not s.labeled]
    if not lab:
        raise EmptyBatchError("no labeled samples available")
    n_unl = batch_size - labeled_per_batch if include_unlabeled else 0
    if n_unl and not unl:
        raise EmptyBatchError(f"batches need {n_unl} unlabeled samples but none are available")
    lab_cycle = _Cycler(lab, np.random.default_rng(_seed_seq(seed, 2)))
    unl_cycle = _Cycler(unl, np.random.default_rng(_seed_seq(seed, 3)))
    while True:
        chosen = lab_cycle.take(labeled_per_batch)
        labels = np.stack([s.mask for s in chosen]).astype(np.int64)
        chosen = chosen + unl_cycle.take(n_unl)
        yield Batch(np.stack([s.image for s in chosen]), labels, [s.id for s in chosen])


# ---------------------------------------------------------------- dump / load

def _write_raw(path, magic, arr, tag):
    h, w = arr.shape
    header = magic + struct.pack("<II", h, w) + DTYPE_TAGS[tag]
    dtype = "<f8" if tag == "f8" else "u1"
    path.write_bytes(header + np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read_raw(path, magic):
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != magic:
        raise ConfigError(f"{path}: bad header")
    h, w = struct.unpack_from("<II", data, 4)
    tag = data[12:16]
    if tag == DTYPE_TAGS["f8"]:
        dtype, width = "<f8", 8
    elif tag == DTYPE_TAGS["u1"]:
        dtype, width = "u1", 1
    else:
        raise ConfigError(f"{path}: unknown dtype tag {tag!r}")
    if len(data) != 16 + h * w * width:
        raise ConfigError(f"{path}: expected {h}x{w} payload")
    return np.frombuffer(data, dtype=dtype, offset=16).reshape(h, w).copy()


def _ids_line(ids):
    return ",".join(str(i) for i in ids)


def save_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} = {v}" for k, v in asdict(ds.spec).items()]
    lines.append(f"train_labeled = {_ids_line(s.id for s in ds.labeled)}")
    lines.append(f"train_unlabeled = {_ids_line(s.id for s in ds.unlabeled)}")
    lines.append(f"test = {_ids_line(s.id for s in ds.test)}")
    (out / "manifest").write_text("\n".join(lines) + "\n")
    for s in ds.train + ds.test:
        _write_raw(out / f"image_{s.id:05d}.raw", IMAGE_MAGIC, s.image[0], "f8")
        if s.mask is not None:
            _write_raw(out / f"mask_{s.id:05d}.raw", MASK_MAGIC, s.mask, "u1")
    return out


def _parse_ids(text):
    text = text.strip()
    return [int(t) for t in text.split(",")] if text else []


def load_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    manifest = root / "manifest"
    if not manifest.is_file():
        raise ConfigError(f"{root}: no manifest file")
    entries = {}
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise ConfigError(f"{manifest}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        entries[key] = value
    kinds = {f.name: f.type for f in fields(DatasetSpec)}
    try:
        spec = DatasetSpec(**{k: (float(v) if kinds[k] == "float" else int(v))
                              for k, v in entries.items() if k in kinds})
        labeled = _parse_ids(entries["train_labeled"])
        unlabeled = _parse_ids(entries["train_unlabeled"])
        test = _parse_ids(entries["test"])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{manifest}: malformed manifest ({exc})") from None

    def read(i, with_mask):
        img = _read_raw(root / f"image_{i:05d}.raw", IMAGE_MAGIC)[None]
        mask = _read_raw(root / f"mask_{i:05d}.raw", MASK_MAGIC) if with_mask else None
        return Sample(i, img, mask)

    lab = set(labeled)
    train = [read(i, i in lab) for i in sorted(labeled + unlabeled)]
    return Dataset(spec, train, [read(i, True) for i in test])
