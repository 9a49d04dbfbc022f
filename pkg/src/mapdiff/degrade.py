"""Classical degradation ``y = (k conv x) downsample_s + n`` and its relatives.

Conventions: true convolution (kernel flipped relative to correlation),
replicate boundary, decimation keeps the top-left sample of each
``s x s`` block, noise added after decimation. Values live in [0, 1] and
nothing here clips.
"""

from __future__ import annotations

import csv
import math
from contextlib import nullcontext
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .kernels import BlurKernel
from .tensor import Tensor, no_grad, ops
from .tensor.core import as_tensor

BOUNDARY = "replicate"
ArrayLike = Union[np.ndarray, Tensor]


@dataclass
class DegradationSpec:
    kernel: BlurKernel
    scale: int = 4
    noise_sigma: float = 0.0
    boundary: str = BOUNDARY

    def __post_init__(self):
        if self.scale < 1:
            raise ValueError(f"scale must be >= 1, got {self.scale}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


def _kernel_array(k) -> np.ndarray:
    return np.asarray(k.weights if isinstance(k, BlurKernel) else k, dtype=np.float64)


def blur_downsample(x: ArrayLike, k, s: int, boundary: str = BOUNDARY) -> ArrayLike:
    """Linear operator ``A(x) = (k conv x) downsample_s``.

    ``x`` is ``[c,h,w]`` or ``[b,c,h,w]``; ``k`` is one 2-D kernel shared by
    all items or a stack ``[b,kh,kw]`` with one kernel per batch item.
    Differentiable when ``x`` is a tracked :class:`Tensor`; arrays in give
    arrays out.
    """
    is_array = not isinstance(x, Tensor)
    xt = as_tensor(x)
    squeeze = xt.ndim == 3
    if squeeze:
        xt = ops.reshape(xt, (1,) + xt.shape)
    b, c, h, w = xt.shape
    if h % s or w % s:
        raise ValueError(f"image extents {h}x{w} not divisible by scale {s}")
    karr = _kernel_array(k)
    if karr.ndim == 2:
        karr = np.broadcast_to(karr, (b,) + karr.shape)
    if karr.shape[0] != b:
        raise ValueError(f"{karr.shape[0]} kernels for a batch of {b}")
    # convolution = correlation with the flipped kernel
    weight = np.repeat(karr[:, ::-1, ::-1], c, axis=0)[:, None]
    flat = ops.reshape(xt, (1, b * c, h, w))
    with no_grad() if is_array else nullcontext():
        out = ops.conv2d(flat, Tensor(weight), stride=s, padding=boundary, groups=b * c)
        out = ops.reshape(out, (b, c, h // s, w // s))
        if squeeze:
            out = ops.reshape(out, out.shape[1:])
    return out.data if is_array else out


def blur_downsample_adjoint(u: np.ndarray, k, s: int, hr_shape: tuple) -> np.ndarray:
    """Explicit adjoint of :func:`blur_downsample` for a single shared kernel.

    Written as a scatter over kernel taps so it shares no code with the
    forward path.
    """
    karr = _kernel_array(k)
    kh, kw = karr.shape
    rh, rw = kh // 2, kw // 2
    h, w = hr_shape[-2:]
    out = np.zeros(hr_shape)
    lh, lw = u.shape[-2:]
    rows = np.arange(lh) * s
    cols = np.arange(lw) * s
    for a in range(kh):
        ri = np.clip(rows - (a - rh), 0, h - 1)
        for bb in range(kw):
            ci = np.clip(cols - (bb - rw), 0, w - 1)
            contrib = karr[a, bb] * u
            np.add.at(out, (..., ri[:, None], ci[None, :]), contrib)
    return out


def apply(spec: DegradationSpec, x: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Synthesize an LR observation from ``x[c,h,w]`` (or a batch)."""
    x = np.asarray(x, dtype=np.float64)
    y = blur_downsample(x, spec.kernel, spec.scale, spec.boundary)
    if spec.noise_sigma > 0:
        if rng is None:
            raise ValueError("noisy degradation needs an rng")
        y = awgn(y, spec.noise_sigma, rng)
    return y


def awgn(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError(f"noise sigma must be non-negative, got {sigma}")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    return x + sigma * rng.standard_normal(x.shape)


def fidelity(y: ArrayLike, k, x0_hat: ArrayLike, s: int) -> Tensor:
    """Mean-squared residual ``mean((y - A(x0_hat))^2)`` as a differentiable scalar."""
    x0_hat = as_tensor(x0_hat)
    pred = blur_downsample(x0_hat, k, s)
    y = as_tensor(y)
    if y.shape != pred.shape:
        raise ValueError(f"observation shape {y.shape} != predicted {pred.shape}")
    return ops.mean(ops.square(y - pred))


# ---------------------------------------------------------------------------
# bicubic resampling
# ---------------------------------------------------------------------------

def _cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


@lru_cache(maxsize=64)
def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense ``[n_out, n_in]`` bicubic resampling matrix.

    Downscaling widens the cubic by the scale ratio (antialiasing); indices
    beyond the border are mirrored; rows sum to one.
    """
    scale = n_out / n_in
    if scale < 1:
        kernel = lambda t: scale * _cubic(scale * t)
        width = 4.0 / scale
    else:
        kernel = _cubic
        width = 4.0
    pos = np.arange(1, n_out + 1, dtype=np.float64)
    u = pos / scale + 0.5 * (1.0 - 1.0 / scale)
    left = np.floor(u - width / 2.0)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    wts = kernel(u[:, None] - idx)
    wts = wts / wts.sum(axis=1, keepdims=True)
    mirror = np.concatenate([np.arange(n_in), np.arange(n_in)[::-1]])
    cols = mirror[np.mod(idx.astype(np.int64) - 1, 2 * n_in)]
    mat = np.zeros((n_out, n_in))
    rows = np.repeat(np.arange(n_out)[:, None], taps, axis=1)
    np.add.at(mat, (rows, cols), wts)
    mat.setflags(write=False)
    return mat


def _target(n: int, factor: Fraction, direction: str) -> int:
    t = n * factor if direction == "up" else n / factor
    if t.denominator != 1:
        raise ValueError(f"extent {n} with factor {factor} ({direction}) is not an integer")
    return int(t)


def bicubic_resize(x: ArrayLike, factor, direction: str = "up") -> ArrayLike:
    """Separable bicubic resize (a = -0.5) of the last two axes."""
    if direction not in ("up", "down"):
        raise ValueError("direction must be 'up' or 'down'")
    factor = Fraction(factor).limit_denominator(1000)
    if factor <= 0:
        raise ValueError("factor must be positive")
    is_array = not isinstance(x, Tensor)
    xt = as_tensor(x)
    h, w = xt.shape[-2:]
    th, tw = _target(h, factor, direction), _target(w, factor, direction)
    if (th, tw) == (h, w):
        return x.copy() if is_array else xt
    mh, mw = resize_matrix(h, th), resize_matrix(w, tw)
    with no_grad() if is_array else nullcontext():
        out = ops.matmul(ops.matmul(Tensor(mh), xt), Tensor(np.ascontiguousarray(mw.T)))
    return out.data if is_array else out


def bicubic_resize_adjoint(u: np.ndarray, in_shape: tuple) -> np.ndarray:
    h, w = in_shape[-2:]
    mh, mw = resize_matrix(h, u.shape[-2]), resize_matrix(w, u.shape[-1])
    return mh.T @ u @ mw


# ---------------------------------------------------------------------------
# dataset manifest
# ---------------------------------------------------------------------------

@dataclass
class ManifestRow:
    hr_path: str
    kernel_path: str
    scale: int
    noise_sigma: float


def read_manifest(path) -> list[ManifestRow]:
    """Parse ``hr_path<TAB>kernel_path<TAB>s<TAB>noise_sigma`` lines (relative to the file)."""
    base = Path(path).parent
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
            hr, kp, s, sigma = parts
            rows.append(ManifestRow(str(base / hr), str(base / kp), int(s), float(sigma)))
    return rows


def write_manifest(path, rows: list[ManifestRow]) -> None:
    base = Path(path).parent.resolve()
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for r in rows:
            hr = Path(r.hr_path).resolve()
            kp = Path(r.kernel_path).resolve()
            writer.writerow([_rel(hr, base), _rel(kp, base), r.scale, repr(float(r.noise_sigma))])


def _rel(p: Path, base: Path) -> str:
    try:
        return str(p.relative_to(base))
    except ValueError:
        return str(p)
