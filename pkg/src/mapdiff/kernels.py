"""Gaussian blur kernels and the PCA kernel-code space.

Kernels are evaluated at integer pixel offsets from the center (no
pixel-area integration) and normalized to unit sum.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

# training distributions for the two degradation settings
ISO_SIZE = 21
ISO_SIGMA_RANGE = (0.2, 4.0)
ANISO_SIZE = 11
ANISO_SIGMA_RANGE = (0.6, 5.0)
ANISO_NOISE = 0.25
GAUSSIAN8_RANGE = (1.8, 3.2)
DEFAULT_CODE_DIM = 10


@dataclass
class BlurKernel:
    weights: np.ndarray
    kind: str = "iso"
    sigma_x: float = 0.0
    sigma_y: float = 0.0
    theta: float = 0.0
    noise_amp: float = 0.0

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    def meta(self) -> dict:
        return {"kind": self.kind, "sigma_x": self.sigma_x, "sigma_y": self.sigma_y,
                "theta": self.theta, "noise_amp": self.noise_amp}


def _check_size(size: int) -> None:
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be a positive odd integer, got {size}")


def _grid(size: int):
    r = size // 2
    ax = np.arange(-r, r + 1, dtype=np.float64)
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    return xx, yy


def make_isotropic(size: int, sigma: float) -> BlurKernel:
    _check_size(size)
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    xx, yy = _grid(size)
    w = np.exp(-(xx * xx + yy * yy) / (2.0 * sigma * sigma))
    return BlurKernel(w / w.sum(), "iso", float(sigma), float(sigma), 0.0, 0.0)


def make_anisotropic(size: int, sigma_x: float, sigma_y: float, theta: float,
                     noise_amp: float = 0.0,
                     rng: Optional[np.random.Generator] = None) -> BlurKernel:
    """Rotated Gaussian with covariance ``R(theta) diag(sx^2, sy^2) R(theta)^T``.

    Each weight is multiplied by ``Uniform(1 - noise_amp, 1 + noise_amp)``
    before renormalization.
    """
    _check_size(size)
    if not (sigma_x > 0 and sigma_y > 0):
        raise ValueError("axis widths must be positive")
    if not 0.0 <= noise_amp <= 0.25:
        raise ValueError(f"noise_amp must lie in [0, 0.25], got {noise_amp}")
    if noise_amp > 0 and rng is None:
        raise ValueError("multiplicative noise needs an rng")
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    cov = rot @ np.diag([sigma_x ** 2, sigma_y ** 2]) @ rot.T
    inv = np.linalg.inv(cov)
    xx, yy = _grid(size)
    q = inv[0, 0] * xx * xx + 2.0 * inv[0, 1] * xx * yy + inv[1, 1] * yy * yy
    w = np.exp(-0.5 * q)
    w /= w.sum()
    if noise_amp > 0:
        w = w * rng.uniform(1.0 - noise_amp, 1.0 + noise_amp, size=w.shape)
        w /= w.sum()
    return BlurKernel(w, "aniso", float(sigma_x), float(sigma_y), float(theta), float(noise_amp))


def delta_kernel(size: int = 1) -> BlurKernel:
    _check_size(size)
    w = np.zeros((size, size))
    w[size // 2, size // 2] = 1.0
    return BlurKernel(w, "delta")


def gaussian8() -> list[BlurKernel]:
    """The eight isotropic 21x21 test kernels, widths 1.8, 2.0, ..., 3.2."""
    lo, hi = GAUSSIAN8_RANGE
    widths = np.round(np.linspace(lo, hi, 8), 10)
    return [make_isotropic(ISO_SIZE, float(s)) for s in widths]


def sample_isotropic(rng: np.random.Generator, size: int = ISO_SIZE,
                     sigma_range=ISO_SIGMA_RANGE) -> BlurKernel:
    return make_isotropic(size, float(rng.uniform(*sigma_range)))


def sample_anisotropic(rng: np.random.Generator, size: int = ANISO_SIZE,
                       sigma_range=ANISO_SIGMA_RANGE, noise_amp: float = ANISO_NOISE) -> BlurKernel:
    sx, sy = rng.uniform(*sigma_range, size=2)
    theta = rng.uniform(-math.pi, math.pi)
    return make_anisotropic(size, float(sx), float(sy), float(theta), noise_amp, rng)


def sample_kernel(family: str, rng: np.random.Generator) -> BlurKernel:
    if family == "iso":
        return sample_isotropic(rng)
    if family == "aniso":
        return sample_anisotropic(rng)
    if family == "delta":
        return delta_kernel(ISO_SIZE)
    raise ValueError(f"unknown kernel family '{family}'")


def pad_kernel(k: BlurKernel, size: int) -> BlurKernel:
    """Zero-pad a kernel to a larger odd size, keeping it centered."""
    _check_size(size)
    if size < k.size:
        raise ValueError(f"cannot pad a {k.size}x{k.size} kernel down to {size}")
    p = (size - k.size) // 2
    w = np.pad(k.weights, p)
    return BlurKernel(w, k.kind, k.sigma_x, k.sigma_y, k.theta, k.noise_amp)


def pca_training_kernels(n: int = 10_000, seed: int = 0, size: int = ISO_SIZE) -> list[BlurKernel]:
    """Union of the iso and aniso training distributions, alternating draws.

    Anisotropic kernels are zero-padded to ``size`` so both families share one
    code space.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        if i % 2 == 0:
            out.append(sample_isotropic(rng, size=size))
        else:
            out.append(pad_kernel(sample_anisotropic(rng), size))
    return out


@dataclass
class KernelPCA:
    mean: np.ndarray            # (size*size,)
    basis: np.ndarray           # (d, size*size), orthonormal rows
    fit_mse: float = field(default=0.0)

    @property
    def d(self) -> int:
        return self.basis.shape[0]

    @property
    def size(self) -> int:
        return int(round(math.sqrt(self.mean.size)))


def fit_pca(kernels: Iterable[BlurKernel], d: int = DEFAULT_CODE_DIM) -> KernelPCA:
    kernels = list(kernels)
    if not kernels:
        raise ValueError("no kernels to fit")
    size = kernels[0].size
    if any(k.size != size for k in kernels):
        raise ValueError("all kernels must share one size")
    dim = size * size
    if d < 0 or d > dim:
        raise ValueError(f"code dimension {d} outside [0, {dim}]")
    if len(kernels) < d:
        raise ValueError(f"need at least {d} kernels, got {len(kernels)}")
    X = np.stack([k.weights.reshape(-1) for k in kernels])
    mean = X.mean(axis=0)
    Xc = X - mean
    if d == 0:
        basis = np.zeros((0, dim))
    else:
        _, _, vt = np.linalg.svd(Xc, full_matrices=len(kernels) < dim)
        basis = vt[:d]
        if basis.shape[0] < d:
            raise ValueError(f"only {basis.shape[0]} directions available for d={d}")
    pca = KernelPCA(mean, np.ascontiguousarray(basis))
    rec = np.stack([decode(pca, encode(pca, k)).weights.reshape(-1) for k in kernels])
    pca.fit_mse = float(np.mean((rec - X) ** 2))
    return pca


def encode(pca: KernelPCA, k: BlurKernel) -> np.ndarray:
    flat = np.asarray(k.weights, dtype=np.float64).reshape(-1)
    if flat.size != pca.mean.size:
        raise ValueError(f"kernel has {flat.size} weights, PCA expects {pca.mean.size}")
    return pca.basis @ (flat - pca.mean)


def project(pca: KernelPCA, code: np.ndarray) -> np.ndarray:
    """Raw reconstruction ``mean + basis^T code`` without clamping."""
    code = np.asarray(code, dtype=np.float64)
    if code.shape[-1] != pca.d:
        raise ValueError(f"code has length {code.shape[-1]}, PCA expects {pca.d}")
    return pca.mean + code @ pca.basis


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto ``{w >= 0, sum(w) = 1}``.

    The result is ``max(v - tau, 0)`` for the unique shift ``tau`` that makes
    it sum to one, so negatives are clamped and the mass renormalized in one
    step. Being a projection onto a convex set that contains every valid
    kernel, it never moves a reconstruction further from the true kernel.
    """
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    j = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / j > 0)[0][-1]
    tau = css[rho] / (rho + 1)
    return np.maximum(v - tau, 0.0)


def decode(pca: KernelPCA, code: np.ndarray) -> BlurKernel:
    """Reconstruct a non-negative kernel summing to one from its code."""
    w = project_simplex(project(pca, code))
    return BlurKernel(w.reshape(pca.size, pca.size), "pca")


def decode_batch(pca: KernelPCA, codes: np.ndarray) -> np.ndarray:
    """Decode ``codes[b, d]`` into kernel weights ``[b, size, size]``."""
    return np.stack([decode(pca, c).weights for c in np.atleast_2d(codes)])


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def save_kernel(path, k: BlurKernel) -> None:
    """BDK1: magic, size u16, f64 weights row-major, then a key=value text block."""
    meta = "".join(f"{key}={value!r}\n" for key, value in k.meta().items())
    payload = (b"BDK1" + struct.pack("<H", k.size)
               + np.ascontiguousarray(k.weights, dtype="<f8").tobytes()
               + meta.encode("utf-8"))
    Path(path).write_bytes(payload)


def load_kernel(path) -> BlurKernel:
    raw = Path(path).read_bytes()
    if raw[:4] != b"BDK1":
        raise ValueError(f"{path}: not a BDK1 kernel file")
    (size,) = struct.unpack_from("<H", raw, 4)
    n = size * size
    w = np.frombuffer(raw, dtype="<f8", count=n, offset=6).reshape(size, size).astype(np.float64)
    meta = {}
    for line in raw[6 + 8 * n:].decode("utf-8").splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            meta[key] = value
    kind = meta.get("kind", "'iso'").strip("'\"")
    num = {key: float(meta[key]) for key in ("sigma_x", "sigma_y", "theta", "noise_amp") if key in meta}
    return BlurKernel(w, kind, **num)


def save_pca(path, pca: KernelPCA) -> None:
    """BDP1: magic, d u32, n u32, mean f64[n], basis f64[d*n], fit_mse f64."""
    n = pca.mean.size
    payload = (b"BDP1" + struct.pack("<II", pca.d, n)
               + np.ascontiguousarray(pca.mean, dtype="<f8").tobytes()
               + np.ascontiguousarray(pca.basis, dtype="<f8").tobytes()
               + struct.pack("<d", pca.fit_mse))
    Path(path).write_bytes(payload)


def load_pca(path) -> KernelPCA:
    raw = Path(path).read_bytes()
    if raw[:4] != b"BDP1":
        raise ValueError(f"{path}: not a BDP1 PCA file")
    d, n = struct.unpack_from("<II", raw, 4)
    mean = np.frombuffer(raw, dtype="<f8", count=n, offset=12).astype(np.float64)
    basis = np.frombuffer(raw, dtype="<f8", count=d * n, offset=12 + 8 * n)
    basis = basis.reshape(d, n).astype(np.float64)
    (fit_mse,) = struct.unpack_from("<d", raw, 12 + 8 * n * (d + 1))
    return KernelPCA(mean, basis, fit_mse)
