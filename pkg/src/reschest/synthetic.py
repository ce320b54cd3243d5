"""Synthetic five-class image corpus: one geometric motif per class plus
seeded noise and a small random offset.  Used for desk-scale runs and test
fixtures where real radiographs are unavailable."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image

from .data import DEFAULT_CLASSES, ClassIndex, Sample, normalize


def _motif(label: int, size: int, dy: int, dx: int) -> np.ndarray:
    img = np.zeros((size, size))
    yy, xx = np.mgrid[0:size, 0:size]
    c = size // 2
    cy, cx = c + dy, c + dx
    t = max(2, size // 10)
    r = size // 4
    if label == 0:  # horizontal bar
        img[abs(yy - cy) < t] = 1.0
    elif label == 1:  # vertical bar
        img[abs(xx - cx) < t] = 1.0
    elif label == 2:  # ring
        d = np.hypot(yy - cy, xx - cx)
        img[abs(d - r) < t * 0.75] = 1.0
    elif label == 3:  # diagonal cross
        img[(abs((yy - cy) - (xx - cx)) < t) | (abs((yy - cy) + (xx - cx)) < t)] = 1.0
    elif label == 4:  # filled square
        img[(abs(yy - cy) < r) & (abs(xx - cx) < r)] = 1.0
    else:
        raise ValueError(f"no motif for class {label}")
    return img


def motif_image(label: int, size: int, rng: np.random.Generator, noise: float = 0.15) -> np.ndarray:
    """(size, size) array in [0, 1]."""
    jitter = max(1, size // 16)
    dy, dx = rng.integers(-jitter, jitter + 1, size=2)
    img = 0.15 + 0.7 * _motif(label, size, int(dy), int(dx))
    img = img + rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def make_corpus(n_per_class: int, size: int = 64, seed: int = 0, num_classes: int = 5) -> list[Sample]:
    """In-memory samples with pre-normalized pixels, ordered class by class."""
    rng = np.random.default_rng(seed)
    samples = []
    for label in range(num_classes):
        for i in range(n_per_class):
            px = normalize(motif_image(label, size, rng))[None]
            samples.append(Sample(f"synthetic/{label}/{i:04d}", label, px))
    return samples


def write_image_tree(
    root: str | os.PathLike,
    n_per_class: int,
    size: int = 64,
    seed: int = 0,
    class_names=DEFAULT_CLASSES,
    rgb_every: int = 0,
) -> ClassIndex:
    """Write a class-per-directory PNG tree.  With ``rgb_every=k`` every
    k-th image is stored as RGB (JPEG) to exercise colour decoding."""
    root = Path(root)
    index = ClassIndex.from_names(class_names)
    rng = np.random.default_rng(seed)
    for label, name in enumerate(index.names):
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class):
            px = (motif_image(label % 5, size, rng) * 255).round().astype(np.uint8)
            if rgb_every and i % rgb_every == rgb_every - 1:
                Image.fromarray(np.stack([px] * 3, axis=-1), "RGB").save(d / f"img_{i:03d}.jpg", quality=95)
            else:
                Image.fromarray(px, "L").save(d / f"img_{i:03d}.png")
    return index
