"""Desk-scale labelled image sets.

Images are float32 arrays shaped [N, C, H, W] with values in [-1, 1]. Two
sources are built in: the scikit-learn 8x8 handwritten digits (resized), and a
procedural two-class bars set for quick toy runs.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError


@dataclass
class ImageDataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "unnamed"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ConfigError("images must be [N, C, H, W]")
        if len(self.images) != len(self.labels):
            raise ConfigError("images and labels differ in length")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def tensors(self, dtype=torch.float32):
        return torch.from_numpy(self.images).to(dtype), torch.from_numpy(self.labels)

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, images=self.images, labels=self.labels,
                 num_classes=self.num_classes, name=self.name)

    @classmethod
    def load(cls, path):
        with np.load(path) as f:
            return cls(f["images"], f["labels"], int(f["num_classes"]), str(f["name"]))


def split_dataset(dataset: ImageDataset, fractions: Sequence[float], seed: int = 0):
    """Stratified split into ``len(fractions)`` disjoint parts (fractions sum to 1)."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if np.any(fractions < 0) or not np.isclose(fractions.sum(), 1.0):
        raise ConfigError("split fractions must be non-negative and sum to 1")
    rng = np.random.default_rng(seed)
    parts = [[] for _ in fractions]
    bounds = np.cumsum(fractions)[:-1]
    for c in np.unique(dataset.labels):
        idx = rng.permutation(np.flatnonzero(dataset.labels == c))
        cuts = np.round(bounds * len(idx)).astype(int)
        for p, chunk in zip(parts, np.split(idx, cuts)):
            p.extend(chunk)
    out = []
    for p in parts:
        p = np.sort(np.asarray(p, dtype=np.int64))
        out.append(ImageDataset(dataset.images[p], dataset.labels[p], dataset.num_classes, dataset.name))
    return out


def load_digits(classes: Optional[Sequence[int]] = None, resolution: int = 16) -> ImageDataset:
    """The scikit-learn digits restricted to ``classes`` and resized to ``resolution``.

    Labels are re-indexed to 0..len(classes)-1 in the order given.
    """
    from sklearn.datasets import load_digits as _load

    digits = _load()
    classes = list(range(10)) if classes is None else list(classes)
    if not classes:
        raise ConfigError("class subset is empty")
    keep, labels = [], []
    for new, c in enumerate(classes):
        idx = np.flatnonzero(digits.target == c)
        keep.extend(idx)
        labels.extend([new] * len(idx))
    x = torch.from_numpy(digits.images[keep].astype(np.float32) / 16.0)[:, None]
    if resolution != 8:
        x = F.interpolate(x, size=(resolution, resolution), mode="bilinear", align_corners=False)
    x = (x.clamp(0, 1) * 2 - 1).numpy()
    name = f"digits{''.join(map(str, classes))}@{resolution}"
    return ImageDataset(x, np.asarray(labels, dtype=np.int64), len(classes), name)


def load_digits_split(classes: Optional[Sequence[int]] = None, resolution: int = 16,
                      test_fraction: float = 0.3, seed: int = 0):
    """(train, held-out) split of :func:`load_digits`."""
    return tuple(split_dataset(load_digits(classes, resolution), [1 - test_fraction, test_fraction], seed))


def make_bars_split(n_total: int = 200, resolution: int = 16, test_fraction: float = 0.5,
                    noise: float = 0.3, seed: int = 0):
    """Two-class toy set: class 0 carries a horizontal bar, class 1 a vertical bar."""
    rng = np.random.default_rng(seed)
    x = np.full((n_total, 1, resolution, resolution), -1.0, dtype=np.float32)
    y = np.arange(n_total) % 2
    width = max(1, resolution // 8)
    for i in range(n_total):
        pos = rng.integers(1, resolution - width - 1)
        if y[i] == 0:
            x[i, 0, pos:pos + width, :] = 1.0
        else:
            x[i, 0, :, pos:pos + width] = 1.0
    x += noise * rng.standard_normal(x.shape).astype(np.float32)
    x = np.clip(x, -1, 1)
    full = ImageDataset(x, y, 2, "bars")
    return tuple(split_dataset(full, [1 - test_fraction, test_fraction], seed))


def style_shift(images: np.ndarray, contrast: float = 0.5, offset: float = 0.0,
                blur: float = 0.0, seed: int = 0) -> np.ndarray:
    """Deterministic appearance shift used to build a mismatched generator domain.

    Applies an optional 3x3 box blur (mixed in with weight ``blur``) followed by
    a contrast squeeze around zero and an additive offset.
    """
    x = torch.from_numpy(np.asarray(images, dtype=np.float32))
    if blur > 0:
        c = x.shape[1]
        k = torch.full((c, 1, 3, 3), 1.0 / 9.0)
        xb = F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), k, groups=c)
        x = (1 - blur) * x + blur * xb
    x = contrast * x + offset
    return x.clamp(-1, 1).numpy()


DEFAULT_STYLES = ((1.0, 0.0, 0.0), (-1.0, 0.0, 0.0), (0.5, 0.0, 0.0), (0.5, -0.4, 0.8))


def generator_corpus(dataset: ImageDataset, styles=DEFAULT_STYLES) -> ImageDataset:
    """Union of style-shifted copies of ``dataset``; stands in for a broad pretraining set.

    Each style is (contrast, offset, blur) for :func:`style_shift`. Only the
    first default style matches the source appearance, so an unguided sampler
    lands in the classifier's domain for roughly 1/len(styles) of its draws.
    """
    parts = [style_shift(dataset.images, *s) for s in styles]
    images = np.concatenate(parts)
    labels = np.concatenate([dataset.labels] * len(styles))
    return ImageDataset(images, labels, dataset.num_classes, f"{dataset.name}+styles{len(styles)}")
