"""Joint training of the noise predictor and the kernel-code estimator."""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from . import degrade as D
from . import kernels as K
from . import schedule as S
from .data import SyntheticCorpus, random_crop
from .mcformer import DenoiserOutput, MCFormer, MCFormerConfig
from .tensor import Tensor, checkpoint, no_grad, ops

log = logging.getLogger(__name__)

METRICS_HEADER = ["iter", "loss", "eps_mse", "kernel_l1", "lr"]
CHECKPOINT_NAME = "checkpoint.bdtn"
METRICS_NAME = "metrics.csv"

# stream ids for splitting the root seed
STREAM_BATCH = 1
STREAM_STEP = 2
STREAM_HELDOUT = 3


class TrainingError(RuntimeError):
    pass


def deterministic_mode() -> bool:
    return os.environ.get("BD_DETERMINISTIC") == "1"


def stream(seed: int, subsystem: int, index: int = 0) -> np.random.Generator:
    """Independent generator for one (subsystem, iteration) pair of a root seed."""
    return np.random.default_rng([int(seed), int(subsystem), int(index)])


@dataclass
class TrainConfig:
    batch_size: int = 4
    hr_patch: int = 32
    total_iters: int = 2000
    lr: float = 2e-3
    lr_halving_interval: int = 1000
    scale: int = 2
    family: str = "iso"
    noise_sigma: float = 0.0
    seed: int = 0
    checkpoint_every: int = 500
    flip: bool = False
    workers: int = 0

    def __post_init__(self):
        for name in ("batch_size", "hr_patch", "scale"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.total_iters < 0 or self.lr < 0 or self.lr_halving_interval < 0:
            raise ValueError("iteration counts and learning rate must be non-negative")
        if self.hr_patch % self.scale:
            raise ValueError(f"patch {self.hr_patch} not divisible by scale {self.scale}")
        if self.family not in ("iso", "aniso", "delta"):
            raise ValueError(f"unknown kernel family {self.family!r}")

    def lr_at(self, it: int) -> float:
        """Learning rate for 0-based iteration ``it``; halves every interval."""
        if self.lr_halving_interval == 0:
            return self.lr
        return self.lr * 0.5 ** (it // self.lr_halving_interval)


@dataclass
class Batch:
    x0: np.ndarray          # [b,3,p,p]
    y: np.ndarray           # [b,3,p/s,p/s]
    code: np.ndarray        # [b,d]
    kernels: list


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, model, lr: float) -> None:
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step
        c2 = 1.0 - b2 ** self.step
        for name, p in model.named_parameters():
            g = p.grad.data if p.grad is not None else np.zeros_like(p.data)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if lr:
                p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class StepResult:
    loss: float
    eps_mse: float
    kernel_l1: float


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def draw_kernel(family: str, rng: np.random.Generator, size: int) -> K.BlurKernel:
    k = K.sample_kernel(family, rng) if family != "delta" else K.delta_kernel(size)
    return K.pad_kernel(k, size) if k.size < size else k


def synthesize_batch(cfg: TrainConfig, corpus, pca: K.KernelPCA, rng: np.random.Generator) -> Batch:
    xs, ys, codes, ks = [], [], [], []
    for _ in range(cfg.batch_size):
        x0 = random_crop(corpus.draw(rng), cfg.hr_patch, rng, flip=cfg.flip)
        k = draw_kernel(cfg.family, rng, pca.size)
        y = D.apply(D.DegradationSpec(k, cfg.scale, cfg.noise_sigma), x0, rng)
        xs.append(x0)
        ys.append(y)
        codes.append(K.encode(pca, k))
        ks.append(k)
    return Batch(np.stack(xs), np.stack(ys), np.stack(codes), ks)


def batch_stream(cfg: TrainConfig, corpus, pca, start: int, stop: int) -> Iterator[Batch]:
    """Batches for iterations ``start..stop-1``; each depends only on its iteration index.

    With ``workers > 0`` (and determinism mode off) batches are prefetched by a
    thread pool holding at most ``2 * workers`` pending batches.
    """
    make = lambda it: synthesize_batch(cfg, corpus, pca, stream(cfg.seed, STREAM_BATCH, it))
    if cfg.workers <= 0 or deterministic_mode():
        for it in range(start, stop):
            yield make(it)
        return
    depth = 2 * cfg.workers
    with ThreadPoolExecutor(cfg.workers) as pool:
        pending = [pool.submit(make, it) for it in range(start, min(start + depth, stop))]
        nxt = start + len(pending)
        while pending:
            batch = pending.pop(0).result()
            if nxt < stop:
                pending.append(pool.submit(make, nxt))
                nxt += 1
            yield batch


# ---------------------------------------------------------------------------
# objective and optimization
# ---------------------------------------------------------------------------

def loss_terms(out: DenoiserOutput, eps, code_gt):
    """Total loss tensor plus its two components as floats."""
    eps = eps if isinstance(eps, Tensor) else Tensor(np.asarray(eps, dtype=np.float64))
    code_gt = code_gt if isinstance(code_gt, Tensor) else Tensor(np.asarray(code_gt, dtype=np.float64))
    if out.eps_hat.shape != eps.shape:
        raise ValueError(f"eps_hat {out.eps_hat.shape} vs eps {eps.shape}")
    if out.kernel_code.shape != code_gt.shape:
        raise ValueError(f"kernel code {out.kernel_code.shape} vs target {code_gt.shape}")
    eps_term = ops.mean(ops.square(eps - out.eps_hat))
    code_term = ops.mean(ops.abs(code_gt - out.kernel_code))
    return eps_term + code_term, eps_term.item(), code_term.item()


def loss(out: DenoiserOutput, eps, code_gt) -> Tensor:
    """Mean-squared noise error plus mean absolute kernel-code error, weighted 1:1."""
    return loss_terms(out, eps, code_gt)[0]


def train_step(model, opt: AdamState, batch: Batch, sched: S.DiffusionSchedule,
               rng: np.random.Generator, lr: float) -> StepResult:
    b = batch.x0.shape[0]
    t = rng.integers(1, sched.T + 1, size=b)
    eps = rng.standard_normal(batch.x0.shape)
    x_t = S.q_sample(sched, batch.x0, t, eps)
    model.zero_grad()
    out = model.evaluate(Tensor(x_t), t, batch.y)
    total, eps_mse, code_l1 = loss_terms(out, eps, batch.code)
    if not np.isfinite(total.item()):
        raise TrainingError(f"non-finite loss {total.item()} (eps_mse={eps_mse}, kernel_l1={code_l1}, t={t.tolist()})")
    total.backward()
    for name, p in model.named_parameters():
        if p.grad is not None and not np.all(np.isfinite(p.grad.data)):
            raise TrainingError(f"non-finite gradient in {name}")
    opt.update(model, lr)
    return StepResult(total.item(), eps_mse, code_l1)


# ---------------------------------------------------------------------------
# held-out evaluation
# ---------------------------------------------------------------------------

@dataclass
class HeldOut:
    batch: Batch
    t: np.ndarray
    eps: np.ndarray


def make_heldout(cfg: TrainConfig, pca: K.KernelPCA, sched: S.DiffusionSchedule, n: int = 16,
                 seed: int = 12345) -> HeldOut:
    """Fixed evaluation set drawn from images and kernels never used for training."""
    rng = stream(seed, STREAM_HELDOUT)
    corpus = SyntheticCorpus(size=max(2 * cfg.hr_patch, 64), seed=seed + 1)
    sub = TrainConfig(batch_size=n, hr_patch=cfg.hr_patch, scale=cfg.scale, family=cfg.family,
                      noise_sigma=cfg.noise_sigma, total_iters=0)
    batch = synthesize_batch(sub, corpus, pca, rng)
    t = np.linspace(1, sched.T, n).round().astype(int)
    return HeldOut(batch, t, rng.standard_normal(batch.x0.shape))


def evaluate(model, sched: S.DiffusionSchedule, held: HeldOut) -> tuple[float, float]:
    """(eps-MSE, kernel-code L1) on a fixed held-out set."""
    with no_grad():
        x_t = S.q_sample(sched, held.batch.x0, held.t, held.eps)
        out = model.evaluate(Tensor(x_t), held.t, held.batch.y)
    eps_mse = float(np.mean((out.eps_hat.data - held.eps) ** 2))
    code_l1 = float(np.mean(np.abs(out.kernel_code.data - held.batch.code)))
    return eps_mse, code_l1


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model: MCFormer
    sched: S.DiffusionSchedule
    pca: K.KernelPCA
    opt: AdamState
    iteration: int


def _schedule_vector(sched: S.DiffusionSchedule) -> np.ndarray:
    return np.array([sched.T, sched.beta_start, sched.beta_end], dtype=np.float64)


def checkpoint_tensors(model: MCFormer, sched, pca, opt: AdamState, iteration: int) -> dict:
    out = {f"param.{n}": p.data for n, p in model.named_parameters()}
    out.update({f"opt.m.{n}": a for n, a in opt.m.items()})
    out.update({f"opt.v.{n}": a for n, a in opt.v.items()})
    out["opt.step"] = np.array([opt.step], dtype=np.float64)
    out["meta.model_config"] = model.cfg.to_vector()
    out["meta.schedule"] = _schedule_vector(sched)
    out["meta.iter"] = np.array([iteration], dtype=np.float64)
    out["pca.mean"] = pca.mean
    out["pca.basis"] = pca.basis
    out["pca.fit_mse"] = np.array([pca.fit_mse])
    return out


def save_checkpoint(path, model, sched, pca, opt: AdamState, iteration: int) -> None:
    checkpoint.save(path, checkpoint_tensors(model, sched, pca, opt, iteration))


def load_checkpoint(path) -> Checkpoint:
    t = checkpoint.load(path)
    try:
        cfg = MCFormerConfig.from_vector(t["meta.model_config"])
        T, b0, b1 = t["meta.schedule"]
        pca = K.KernelPCA(t["pca.mean"], t["pca.basis"], float(t["pca.fit_mse"][0]))
        iteration = int(t["meta.iter"][0])
        step = int(t["opt.step"][0])
    except KeyError as exc:
        raise checkpoint.CheckpointError(f"{path}: missing entry {exc}") from None
    model = MCFormer(cfg)
    model.load_state_dict({k[len("param."):]: v for k, v in t.items() if k.startswith("param.")})
    opt = AdamState(step=step,
                    m={k[len("opt.m."):]: v.copy() for k, v in t.items() if k.startswith("opt.m.")},
                    v={k[len("opt.v."):]: v.copy() for k, v in t.items() if k.startswith("opt.v.")})
    sched = S.linear_schedule(int(T), float(b0), float(b1))
    return Checkpoint(model, sched, pca, opt, iteration)


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

def _read_metrics(path: Path, upto: int) -> list[list[str]]:
    if not path.exists():
        return []
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    return [r for r in rows[1:] if r and int(r[0]) <= upto]


def train_loop(cfg: TrainConfig, model: MCFormer, corpus, pca: K.KernelPCA, sched: S.DiffusionSchedule,
               out_dir, resume: bool = True) -> Path:
    """Train until ``cfg.total_iters``; returns the final checkpoint path.

    Iterations are 1-based in the log. If ``out_dir`` already holds a
    checkpoint and ``resume`` is set, training continues from it; the per
    iteration random streams make the continuation bit-identical to an
    uninterrupted run.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / CHECKPOINT_NAME
    metrics_path = out_dir / METRICS_NAME
    opt = AdamState()
    start = 0
    if resume and ckpt_path.exists():
        ck = load_checkpoint(ckpt_path)
        if ck.model.cfg != model.cfg:
            raise TrainingError("checkpoint model config differs from the requested one")
        model.load_state_dict(ck.model.state_dict())
        opt, start = ck.opt, ck.iteration
        log.info("resuming from iteration %d", start)
    rows = _read_metrics(metrics_path, start)
    if start == 0 or not ckpt_path.exists():
        save_checkpoint(ckpt_path, model, sched, pca, opt, start)

    with metrics_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        writer.writerows(rows)
        fh.flush()
        it = start
        for batch in batch_stream(cfg, corpus, pca, start, cfg.total_iters):
            lr = cfg.lr_at(it)
            if it > 0 and lr != cfg.lr_at(it - 1):
                log.info("iteration %d: learning rate halved to %g", it + 1, lr)
            res = train_step(model, opt, batch, sched, stream(cfg.seed, STREAM_STEP, it), lr)
            it += 1
            writer.writerow([it, repr(res.loss), repr(res.eps_mse), repr(res.kernel_l1), repr(lr)])
            if it % cfg.checkpoint_every == 0 or it == cfg.total_iters:
                fh.flush()
                save_checkpoint(ckpt_path, model, sched, pca, opt, it)
    return ckpt_path


def read_metrics(path) -> dict[str, np.ndarray]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in METRICS_HEADER}


def default_pca(seed: int = 0, n: int = 10_000, d: int = K.DEFAULT_CODE_DIM) -> K.KernelPCA:
    return K.fit_pca(K.pca_training_kernels(n=n, seed=seed), d)


def build_model(cfg: MCFormerConfig, seed: int) -> MCFormer:
    # init stream is derived from the root seed like every other subsystem
    return MCFormer(cfg, seed=int(stream(seed, 0).integers(0, 2**31 - 1)))
