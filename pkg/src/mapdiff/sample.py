"""Reverse diffusion interleaved with a kernel-aware data-consistency step.

Each step evaluates the denoiser, decodes the current kernel estimate,
forms the clean-image estimate and takes the gradient of the LR residual
with respect to ``x_t`` through the whole network. The ancestral update is
then shifted against that gradient with weight ``lam``.

The guidance objective is the squared L2 norm ``||y - A_k(x0)||^2`` per
item, so ``lam`` is in per-pixel-sum units. Traces and reports use the
mean-squared residual instead, which is comparable across resolutions.
The clean estimate is clamped to the image range inside the residual; at
early steps it is otherwise dominated by amplified noise-prediction error.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import degrade as D
from . import kernels as K
from . import schedule as S
from .data import textured_image
from .metrics import psnr
from .tensor import Tensor, no_grad, ops


class SamplingError(RuntimeError):
    pass


@dataclass
class SamplerConfig:
    lam: float = 1.0
    seed: int = 0
    trace_every: int = 1
    keep_x0: bool = False
    clamp_x0: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"guidance weight must be non-negative, got {self.lam}")
        if self.trace_every < 1:
            raise ValueError("trace_every must be >= 1")


@dataclass
class StepResult:
    x_prev: np.ndarray
    kernels: np.ndarray       # [b,k,k] decoded kernels used in the residual
    code: np.ndarray          # [b,d]
    residual: np.ndarray      # [b] mean-squared LR residual at x~0
    grad: Optional[np.ndarray]
    x0_tilde: np.ndarray


@dataclass
class SamplerTrace:
    t: list = field(default_factory=list)
    residual: list = field(default_factory=list)    # per entry: [b]
    code: list = field(default_factory=list)        # per entry: [b,d]
    x0: list = field(default_factory=list)

    def record(self, t: int, step: StepResult, keep_x0: bool) -> None:
        if self.t and t >= self.t[-1]:
            raise ValueError("trace timesteps must strictly decrease")
        self.t.append(int(t))
        self.residual.append(step.residual.copy())
        self.code.append(step.code.copy())
        if keep_x0:
            self.x0.append(step.x0_tilde.copy())

    def kernel_l1(self, code_gt: np.ndarray) -> np.ndarray:
        """Mean absolute code error per recorded step, ``[n_steps, b]``."""
        return np.array([np.mean(np.abs(c - code_gt), axis=-1) for c in self.code])

    def write_csv(self, path, code_gt: Optional[np.ndarray] = None, item: int = 0) -> None:
        l1 = self.kernel_l1(code_gt) if code_gt is not None else None
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "residual"] + (["kernel_l1"] if l1 is not None else []))
            for i, t in enumerate(self.t):
                row = [t, repr(float(self.residual[i][item]))]
                if l1 is not None:
                    row.append(repr(float(l1[i][item])))
                w.writerow(row)


@dataclass
class SampleResult:
    x0_hat: np.ndarray
    kernels: list             # one BlurKernel per item
    code: np.ndarray
    trace: SamplerTrace


IMAGE_RANGE = (0.0, 1.0)


def lr_residual(y, kernels, x0_tilde, s: int, reduce: str = "mean"):
    """Per-item residual of ``y - A_k(x0)`` as a ``[b]`` tensor.

    ``reduce="mean"`` gives the mean-squared value, ``"sum"`` the squared L2 norm.
    """
    pred = D.blur_downsample(x0_tilde, kernels, s)
    y = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=np.float64))
    if pred.shape != y.shape:
        raise ValueError(f"observation {y.shape} vs prediction {pred.shape}")
    sq = ops.square(y - pred)
    if reduce == "mean":
        return ops.mean(sq, axis=(1, 2, 3))
    if reduce == "sum":
        return ops.sum(sq, axis=(1, 2, 3))
    raise ValueError(f"unknown reduction {reduce!r}")


def guided_reverse_step(model, sched: S.DiffusionSchedule, x_t: np.ndarray, t: int, y: np.ndarray,
                        s: int, pca: K.KernelPCA, lam: float,
                        rng: np.random.Generator, clamp_x0: bool = True) -> StepResult:
    """One guided reverse step on a batch ``x_t[b,3,H,W]`` with ``y[b,3,H/s,W/s]``.

    Noise for the ancestral update is drawn from ``rng`` for ``t > 1`` (the
    final step is deterministic). With ``lam == 0`` no graph is recorded and
    no gradient is computed.
    """
    guided = lam > 0
    xt = Tensor(np.asarray(x_t, dtype=np.float64), requires_grad=guided)
    noise = rng.standard_normal(xt.shape) if t > 1 else np.zeros(xt.shape)
    if guided:
        out = model.evaluate(xt, t, y)
    else:
        with no_grad():
            out = model.evaluate(xt, t, y)
    code = out.kernel_code.data.copy()
    # the decoded kernel is treated as a constant of the residual
    ks = K.decode_batch(pca, code)
    x0_tilde = S.predict_x0(sched, xt, t, out.eps_hat)
    x0_used = ops.clip(x0_tilde, *IMAGE_RANGE) if clamp_x0 else x0_tilde
    grad = None
    if guided:
        objective = ops.sum(lr_residual(y, ks, x0_used, s, reduce="sum"))
        objective.backward()
        grad = xt.grad.data if xt.grad is not None else np.zeros(xt.shape)
        if not np.all(np.isfinite(grad)):
            raise SamplingError(f"non-finite guidance gradient at t={t} "
                                f"(objective={objective.item()}, code={code.tolist()})")
    with no_grad():
        residual = lr_residual(y, ks, x0_used.data, s).data
    x_prev = S.reverse_step(sched, xt.data, t, out.eps_hat.data, noise)
    if guided:
        x_prev = x_prev - lam * grad
    return StepResult(x_prev, ks, code, residual, grad, x0_tilde.data)


def sample(model, sched: S.DiffusionSchedule, y: np.ndarray, s: int, pca: K.KernelPCA,
           cfg: SamplerConfig = SamplerConfig()) -> SampleResult:
    """Restore ``y`` (``[3,h,w]`` or ``[b,3,h,w]``) to ``s`` times its extent."""
    y = np.asarray(y, dtype=np.float64)
    squeeze = y.ndim == 3
    if squeeze:
        y = y[None]
    b, c, h, w = y.shape
    rng = np.random.default_rng(cfg.seed)
    x = rng.standard_normal((b, c, h * s, w * s))
    trace = SamplerTrace()
    step = None
    for t in range(sched.T, 0, -1):
        step = guided_reverse_step(model, sched, x, t, y, s, pca, cfg.lam, rng, cfg.clamp_x0)
        x = step.x_prev
        if (sched.T - t) % cfg.trace_every == 0 or t == 1:
            trace.record(t, step, cfg.keep_x0)
    kernels = [K.BlurKernel(k, "pca") for k in step.kernels]
    return SampleResult(x[0] if squeeze else x, kernels, step.code, trace)


# ---------------------------------------------------------------------------
# lambda sweep
# ---------------------------------------------------------------------------

@dataclass
class ToyInstance:
    x0: np.ndarray        # [3,H,W]
    y: np.ndarray         # [3,H/s,W/s]
    kernel: K.BlurKernel
    scale: int


@dataclass
class SweepRow:
    lam: float
    residual: float
    psnr: float
    kernel_l1: float


SWEEP_HEADER = ["lambda", "residual", "psnr", "kernel_l1"]


def toy_suite(n: int = 8, size: int = 32, scale: int = 2, family: str = "iso",
              seed: int = 777) -> list[ToyInstance]:
    """Noiseless textured instances with kernels from ``family``."""
    rng = np.random.default_rng(seed)
    suite = []
    for i in range(n):
        x0 = textured_image(np.random.default_rng([seed, i]), size, size)
        k = K.sample_kernel(family, rng)
        suite.append(ToyInstance(x0, D.blur_downsample(x0, k, scale), k, scale))
    return suite


def lambda_sweep(model, sched: S.DiffusionSchedule, suite: Sequence[ToyInstance],
                 lambdas: Sequence[float], pca: K.KernelPCA, seed: int = 0) -> list[SweepRow]:
    """Mean final residual, PSNR and kernel-code L1 per guidance weight.

    The whole suite is restored as one batch per weight; instances must share
    extents and scale. The same seed is used for every weight so differences
    come from guidance alone.
    """
    scales = {inst.scale for inst in suite}
    if len(scales) != 1:
        raise ValueError("suite instances must share one scale")
    s = scales.pop()
    y = np.stack([inst.y for inst in suite])
    x0 = np.stack([inst.x0 for inst in suite])
    codes_gt = np.stack([K.encode(pca, K.pad_kernel(inst.kernel, pca.size)) for inst in suite])
    rows = []
    for lam in lambdas:
        res = sample(model, sched, y, s, pca, SamplerConfig(lam=float(lam), seed=seed,
                                                            trace_every=sched.T))
        with no_grad():
            final_res = lr_residual(y, np.stack([k.weights for k in res.kernels]), res.x0_hat, s).data
        psnrs = [psnr(np.clip(res.x0_hat[i], 0, 1), x0[i]) for i in range(len(suite))]
        l1 = np.mean(np.abs(res.code - codes_gt), axis=1)
        rows.append(SweepRow(float(lam), float(np.mean(final_res)), float(np.mean(psnrs)),
                             float(np.mean(l1))))
    return rows


def write_sweep_csv(path, rows: Sequence[SweepRow]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow([repr(float(v)) for v in (r.lam, r.residual, r.psnr, r.kernel_l1)])
