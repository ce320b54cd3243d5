"""Dataset discovery, image preprocessing, stratified splitting and batching.

Expected layout::

    <root>/<ClassName>/**/*.{png,jpg,jpeg}

with an optional ``<root>/classes.json`` (``{"classes": [...]}``) naming the
classes.  Without a manifest the five default class names are used.  Ids are
assigned in ascending lexicographic name order either way.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .tensor import DTYPE

log = logging.getLogger(__name__)

DEFAULT_CLASSES = ("COVID19", "Fibrosis", "Normal", "Pneumonia", "Tuberculosis")
IMAGE_SIZE = 224
NORM_MEAN = 0.5
NORM_STD = 0.5
SUPPORTED_SUFFIXES = (".png", ".jpg", ".jpeg")
SUPPORTED_FORMATS = ("PNG", "JPEG")
LUMA = (0.299, 0.587, 0.114)
MANIFEST = "classes.json"
THREADS_ENV = "RESCHEST_THREADS"


class DatasetError(Exception):
    """Dataset layout or content problem."""


class ImageDecodeError(DatasetError):
    pass


@dataclass(frozen=True)
class ClassIndex:
    names: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(set(self.names)) != len(self.names) or not self.names:
            raise ValueError(f"class names must be unique and non-empty: {self.names}")
        object.__setattr__(self, "names", tuple(self.names))

    @classmethod
    def from_names(cls, names: Sequence[str]) -> "ClassIndex":
        """Ids follow ascending lexicographic order of ``names``."""
        return cls(tuple(sorted(names)))

    @classmethod
    def default(cls) -> "ClassIndex":
        return cls.from_names(DEFAULT_CLASSES)

    @classmethod
    def for_root(cls, root: str | os.PathLike) -> "ClassIndex":
        """Class names from ``classes.json`` when present, else the defaults.
        Ids are always assigned in sorted name order."""
        manifest = Path(root) / MANIFEST
        if manifest.is_file():
            try:
                doc = json.loads(manifest.read_text())
                names = doc["classes"] if isinstance(doc, dict) else doc
                return cls.from_names([str(n) for n in names])
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetError(f"malformed {manifest}: {exc}") from exc
        return cls.default()

    @property
    def mapping(self) -> dict[str, int]:
        return {n: i for i, n in enumerate(self.names)}

    def __len__(self) -> int:
        return len(self.names)

    def id(self, name: str) -> int:
        return self.names.index(name)

    def to_list(self) -> list[str]:
        return list(self.names)


@dataclass
class Sample:
    """One labelled image.  ``pixels`` caches a normalized (1, S, S) array;
    in-memory samples may set it directly and leave ``path`` empty."""

    path: str
    label: int
    pixels: np.ndarray | None = field(default=None, repr=False)

    def tensor(self, size: int = IMAGE_SIZE, cache: bool = False) -> np.ndarray:
        if self.pixels is not None and self.pixels.shape[-1] == size and self.pixels.shape[-2] == size:
            return self.pixels
        arr = preprocess(self.path, size)
        if cache:
            self.pixels = arr
        return arr


@dataclass
class ScanResult:
    samples: list[Sample]
    counts: list[int]
    skipped: list[str] = field(default_factory=list)
    index: ClassIndex | None = None


def _is_readable(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            return im.format in SUPPORTED_FORMATS
    except (OSError, UnidentifiedImageError):
        return False


def scan_dataset(root: str | os.PathLike, index: ClassIndex | None = None, check: bool = True) -> ScanResult:
    """Enumerate supported images per class in lexicographic path order.

    Files that fail a header check are skipped with a warning and listed in
    ``skipped``; empty class directories warn and count 0.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    index = index or ClassIndex.for_root(root)
    samples: list[Sample] = []
    counts: list[int] = []
    skipped: list[str] = []
    for label, name in enumerate(index.names):
        cdir = root / name
        if not cdir.is_dir():
            raise DatasetError(f"missing class directory {cdir}")
        files = sorted(
            (p for p in cdir.rglob("*") if p.is_file() and p.suffix.lower() in SUPPORTED_SUFFIXES),
            key=lambda p: p.relative_to(cdir).as_posix(),
        )
        n = 0
        for p in files:
            if check and not _is_readable(p):
                log.warning("skipping unreadable image %s", p)
                skipped.append(str(p))
                continue
            samples.append(Sample(str(p), label))
            n += 1
        if n == 0:
            log.warning("class directory %s contains no images", cdir)
        counts.append(n)
    return ScanResult(samples, counts, skipped, index)


def decode_to_grayscale(path: str | os.PathLike) -> np.ndarray:
    """(H, W) float32 in [0, 1]; colour collapses by Rec.601 luma weights."""
    try:
        with Image.open(path) as im:
            if im.format not in SUPPORTED_FORMATS:
                raise ImageDecodeError(f"{path}: unsupported format {im.format}")
            if im.mode in ("P", "PA"):
                im = im.convert("RGBA" if "transparency" in im.info or im.mode == "PA" else "RGB")
            elif im.mode == "1":
                im = im.convert("L")
            elif im.mode == "CMYK":
                im = im.convert("RGB")
            if im.mode not in ("L", "LA", "RGB", "RGBA"):
                raise ImageDecodeError(f"{path}: unsupported pixel mode {im.mode} (8-bit only)")
            arr = np.asarray(im)
    except ImageDecodeError:
        raise
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise ImageDecodeError(f"{path}: {exc}") from exc
    return grayscale(arr)


def grayscale(arr: np.ndarray) -> np.ndarray:
    """8-bit array (H, W) or (H, W, 2|3|4) -> float32 luminance in [0, 1]."""
    arr = np.asarray(arr)
    if arr.ndim == 3:
        if arr.shape[2] in (3, 4):
            rgb = arr[..., :3].astype(np.float64)
            g = rgb[..., 0] * LUMA[0] + rgb[..., 1] * LUMA[1] + rgb[..., 2] * LUMA[2]
        elif arr.shape[2] in (1, 2):
            g = arr[..., 0].astype(np.float64)
        else:
            raise ImageDecodeError(f"unsupported channel count {arr.shape[2]}")
    elif arr.ndim == 2:
        g = arr.astype(np.float64)
    else:
        raise ImageDecodeError(f"unsupported image array shape {arr.shape}")
    return (g / 255.0).astype(DTYPE)


def _source_coords(out_n: int, in_n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centres, clamped to the edge
    src = (np.arange(out_n) + 0.5) * (in_n / out_n) - 0.5
    src = np.clip(src, 0.0, in_n - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_n - 1)
    return lo, hi, src - lo


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 1:
        raise ValueError(f"resize_bilinear expects a non-empty 2-D image, got {img.shape}")
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.astype(DTYPE)
    y0, y1, fy = _source_coords(out_h, h)
    x0, x1, fx = _source_coords(out_w, w)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return (top * (1 - fy)[:, None] + bot * fy[:, None]).astype(DTYPE)


def normalize(img: np.ndarray) -> np.ndarray:
    return ((np.asarray(img, dtype=DTYPE) - DTYPE(NORM_MEAN)) / DTYPE(NORM_STD)).astype(DTYPE)


def denormalize(img: np.ndarray) -> np.ndarray:
    return (np.asarray(img, dtype=DTYPE) * DTYPE(NORM_STD) + DTYPE(NORM_MEAN)).astype(DTYPE)


def preprocess(path: str | os.PathLike, size: int = IMAGE_SIZE) -> np.ndarray:
    """decode -> grayscale -> resize -> normalize, as a (1, size, size) array."""
    img = resize_bilinear(decode_to_grayscale(path), size, size)
    return np.clip(normalize(img), -1.0, 1.0)[None]


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.7
    val_frac: float = 0.1
    test_frac: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(f <= 0 for f in fracs):
            raise ValueError(f"split fractions must be positive, got {fracs}")
        if abs(sum(fracs) - 1.0) >= 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fracs)}")

    def to_dict(self) -> dict:
        return {"train_frac": self.train_frac, "val_frac": self.val_frac, "test_frac": self.test_frac, "seed": self.seed}


MIN_CLASS_SIZE = 3


def split_sizes(n: int, fracs: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items.

    An empty part then takes one item from the part with the most slack,
    but only while every part stays within one item of its exact share.
    """
    exact = [n * f for f in fracs]
    sizes = [math.floor(e) for e in exact]
    order = sorted(range(len(fracs)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    for i in range(len(sizes)):
        if sizes[i] == 0:
            donor = max(range(len(sizes)), key=lambda j: (sizes[j] - exact[j], sizes[j]))
            if sizes[donor] - 1 >= exact[donor] - 1 and sizes[donor] > 1:
                sizes[donor] -= 1
                sizes[i] += 1
    return sizes


def split_dataset(
    samples: Sequence[Sample], spec: SplitSpec, strict: bool = True
) -> tuple[list[Sample], list[Sample], list[Sample]]:
    """Stratified split: seeded per-class shuffle, then a proportional cut.

    Each partition keeps the original (scan) order of its members.  A class
    with fewer than three samples is an error unless ``strict`` is false; it
    then gives its first shuffled sample to train and deals the rest to
    validation and test alternately, continuing the deal across classes.
    """
    by_class: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_class.setdefault(s.label, []).append(i)
    parts: tuple[list[int], list[int], list[int]] = ([], [], [])
    fracs = (spec.train_frac, spec.val_frac, spec.test_frac)
    deal = 0
    for label in sorted(by_class):
        idx = by_class[label]
        rng = np.random.default_rng([spec.seed, label])
        perm = [idx[j] for j in rng.permutation(len(idx))]
        if len(idx) < MIN_CLASS_SIZE:
            if strict:
                raise DatasetError(
                    f"class {label} has {len(idx)} samples; at least {MIN_CLASS_SIZE} needed to split"
                )
            log.warning("class %d has only %d samples; split is not stratified for it", label, len(idx))
            parts[0].append(perm[0])
            for i in perm[1:]:
                parts[1 + deal % 2].append(i)
                deal += 1
            continue
        n_train, n_val, _ = split_sizes(len(idx), fracs)
        parts[0].extend(perm[:n_train])
        parts[1].extend(perm[n_train : n_train + n_val])
        parts[2].extend(perm[n_train + n_val :])
    return tuple([samples[i] for i in sorted(p)] for p in parts)  # type: ignore[return-value]


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def make_batches(
    samples: Sequence[Sample],
    batch_size: int,
    shuffle_seed: int | None = None,
    image_size: int = IMAGE_SIZE,
    cache: bool = False,
    loader: Callable[[Sample], np.ndarray] | None = None,
) -> Iterator[Batch]:
    """Yield batches in source order, or a seeded permutation of it.

    The final partial batch is kept.  Images are loaded on a pool of
    ``RESCHEST_THREADS`` workers; batch contents do not depend on its size.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be at least 1, got {batch_size}")
    if not samples:
        raise DatasetError("cannot batch an empty sample list")
    order = np.arange(len(samples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(samples))
    load = loader or (lambda s: s.tensor(image_size, cache=cache))
    workers = worker_count()
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for start in range(0, len(order), batch_size):
            chunk = [samples[i] for i in order[start : start + batch_size]]
            arrays = list(pool.map(load, chunk)) if pool else [load(s) for s in chunk]
            yield Batch(np.stack(arrays).astype(DTYPE, copy=False), np.array([s.label for s in chunk], dtype=np.int64))
    finally:
        if pool:
            pool.shutdown()
