"""Image sources and PNG I/O.

Training at desk scale uses procedurally generated RGB images: smooth color
fields, sharp-edged shapes and oriented stripes, so blur is identifiable
from local statistics.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image


def textured_image(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """One ``[3,h,w]`` image in [0, 1]."""
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    img = np.zeros((3, h, w))
    base = rng.uniform(0.2, 0.8, size=3)
    img += base[:, None, None]
    # low-frequency color waves
    for _ in range(3):
        fx, fy = rng.uniform(0.5, 2.0, size=2) * rng.choice([-1, 1], size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.05, 0.15, size=3)
        img += amp[:, None, None] * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    # sharp shapes
    for _ in range(rng.integers(2, 5)):
        color = rng.uniform(0, 1, size=3)
        cy, cx = rng.uniform(0, 1, size=2)
        if rng.random() < 0.5:
            hh, ww = rng.uniform(0.1, 0.4, size=2)
            mask = (np.abs(yy - cy) < hh / 2) & (np.abs(xx - cx) < ww / 2)
        else:
            r = rng.uniform(0.08, 0.25)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        alpha = rng.uniform(0.5, 0.9)
        img[:, mask] = (1 - alpha) * img[:, mask] + alpha * color[:, None]
    # fine oriented stripes
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(3.0, 6.0)
    stripe = np.sin(2 * np.pi * freq * (np.cos(theta) * xx * w + np.sin(theta) * yy * h) / 16.0)
    img += rng.uniform(0.03, 0.12) * stripe[None]
    return np.clip(img, 0.0, 1.0)


class SyntheticCorpus:
    """Deterministic endless source of textured images of a fixed size."""

    def __init__(self, size: int = 64, seed: int = 0):
        self.size = size
        self.seed = seed

    def image(self, index: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, index])
        return textured_image(rng, self.size, self.size)

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        return self.image(int(rng.integers(0, 2**31 - 1)))


class FolderCorpus:
    """Images loaded from PNG files; draws pick a file uniformly."""

    def __init__(self, paths: Sequence):
        self.paths = [Path(p) for p in paths]
        if not self.paths:
            raise ValueError("empty image folder")
        self._cache: dict = {}

    @classmethod
    def from_dir(cls, directory) -> "FolderCorpus":
        return cls(sorted(Path(directory).glob("*.png")))

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        p = self.paths[int(rng.integers(0, len(self.paths)))]
        if p not in self._cache:
            self._cache[p] = load_png(p)
        return self._cache[p]


def random_crop(img: np.ndarray, patch: int, rng: np.random.Generator, flip: bool = False) -> np.ndarray:
    _, h, w = img.shape
    if h < patch or w < patch:
        raise ValueError(f"image {h}x{w} smaller than patch {patch}")
    i = int(rng.integers(0, h - patch + 1))
    j = int(rng.integers(0, w - patch + 1))
    out = img[:, i:i + patch, j:j + patch]
    if flip and rng.random() < 0.5:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Clip to [0, 1] and quantize; this is the only place values are clipped."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, img: np.ndarray) -> None:
    arr = to_uint8(np.asarray(img))
    if arr.ndim == 3:
        arr = np.transpose(arr, (1, 2, 0))
        if arr.shape[2] == 1:
            arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.ascontiguousarray(np.transpose(arr, (2, 0, 1)))
