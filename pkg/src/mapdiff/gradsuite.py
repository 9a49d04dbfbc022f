"""Finite-difference suites over every differentiable op and the end-to-end fidelity gradient."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from . import degrade as D
from . import kernels as K
from . import schedule as S
from .mcformer import MCFormer, MCFormerConfig
from .tensor import Tensor, ops
from .tensor.gradcheck import check_gradients

OP_TOL = 1e-4
NETWORK_TOL = 1e-3


@dataclass
class CaseResult:
    name: str
    worst: float
    tol: float
    seeds: int

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.worst) and self.worst < self.tol)


def _normal(r, s):
    return r.normal(size=s)


def _positive(r, s):
    return r.uniform(0.5, 2.0, size=s)


def _off_boundary(r, s):
    # values kept well away from the clamp edges so differences stay on one side
    v = r.uniform(-0.5, 1.5, size=s)
    return np.where(np.abs(v) < 0.05, v + 0.2, np.where(np.abs(v - 1) < 0.05, v + 0.2, v))


UNARY: dict[str, tuple[Callable, Callable]] = {
    "exp": (ops.exp, _normal),
    "log": (ops.log, _positive),
    "sqrt": (ops.sqrt, _positive),
    "power": (lambda t: ops.power(t, 1.7), _positive),
    "square": (ops.square, _normal),
    "neg": (ops.neg, _normal),
    "abs": (ops.abs, _normal),
    "leaky_relu": (ops.leaky_relu, _normal),
    "gelu": (ops.gelu, _normal),
    "sigmoid": (ops.sigmoid, _normal),
    "clip": (lambda t: ops.clip(t, 0.0, 1.0), _off_boundary),
    "softmax": (lambda t: ops.softmax(t, axis=-1), _normal),
    "l2_normalize": (lambda t: ops.l2_normalize(t, axis=-1), _normal),
    "sum": (lambda t: ops.sum(t, axis=1, keepdims=True), _normal),
    "mean": (lambda t: ops.mean(t, axis=(0, 2), keepdims=True), _normal),
    "reshape": (lambda t: ops.reshape(t, (4, 6)), _normal),
    "transpose": (lambda t: ops.transpose(t, (1, 0, 2)), _normal),
    "getitem": (lambda t: t[:, 1:, ::2], _normal),
    "pad_zero": (lambda t: ops.pad2d(t, (1, 1), "zero"), _normal),
    "pad_replicate": (lambda t: ops.pad2d(t, (2, 1), "replicate"), _normal),
    "pad_circular": (lambda t: ops.pad2d(t, (1, 2), "circular"), _normal),
}

BINARY: dict[str, Callable] = {
    "add": ops.add,
    "sub": ops.sub,
    "mul": ops.mul,
    "div": lambda a, b: ops.div(a, ops.exp(b)),
}


def _weighted(fn, out_shape, rng):
    u = Tensor(rng.normal(size=out_shape))
    return lambda *ts: ops.sum(fn(*ts) * u)


def _unary_case(name: str, seed: int) -> float:
    fn, gen = UNARY[name]
    rng = np.random.default_rng(seed)
    x = gen(rng, (2, 3, 4))
    return check_gradients(_weighted(fn, fn(Tensor(x)).shape, rng), [x])


def _binary_case(name: str, seed: int) -> float:
    fn = BINARY[name]
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(3, 1))
    return check_gradients(_weighted(fn, (2, 3, 4), rng), [a, b])


def _matmul_case(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    return check_gradients(_weighted(ops.matmul, (2, 3, 5), rng), [a, b])


def _conv_case(seed: int, stride: int, groups: int, mode: str) -> float:
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(2, 4, 5, 5)), rng.normal(size=(4, 4 // groups, 3, 3)), rng.normal(size=4)
    fn = lambda xx, ww, bb: ops.conv2d(xx, ww, bb, stride=stride, padding=mode, groups=groups)
    shape = fn(Tensor(x), Tensor(w), Tensor(b)).shape
    return check_gradients(_weighted(fn, shape, rng), [x, w, b])


def _conv_transpose_case(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(1, 3, 3, 3)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=2)
    return check_gradients(_weighted(ops.conv_transpose2d, (1, 2, 6, 6), rng), [x, w, b])


def _concat_split_case(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 5))
    u = Tensor(rng.normal(size=(2, 8)))

    def f(x, y):
        left, right = ops.split(ops.concat([x, y], axis=1), 2, axis=1)
        return ops.sum(ops.concat([right, left], axis=1) * u)

    return check_gradients(f, [a, b])


def _degrade_case(seed: int, s: int) -> float:
    rng = np.random.default_rng(seed)
    k = K.sample_kernel("aniso", rng)
    x = rng.normal(size=(1, 3, 8, 8))
    y = rng.normal(size=(1, 3, 8 // s, 8 // s))
    return check_gradients(lambda t: D.fidelity(y, k, t, s), [x])


def _bicubic_case(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 3, 4, 4))
    return check_gradients(_weighted(lambda t: D.bicubic_resize(t, 2, "up"), (1, 3, 8, 8), rng), [x])


def network_fidelity_case(seed: int, model: Optional[MCFormer] = None,
                          sched: Optional[S.DiffusionSchedule] = None, n: int = 8, s: int = 2,
                          max_coords: int = 24) -> float:
    """Gradient of ``||y - A_k(x0(x_t))||^2`` w.r.t. ``x_t`` through the toy network.

    The kernel is held fixed, matching the sampler, which treats the decoded
    kernel as a constant of the residual.
    """
    model = model or MCFormer(MCFormerConfig.toy(), seed=seed)
    sched = sched or S.scaled_linear_schedule(50)
    rng = np.random.default_rng(seed)
    k = K.sample_isotropic(rng)
    y = rng.uniform(size=(1, 3, n // s, n // s))
    x_t = rng.normal(size=(1, 3, n, n))
    t = int(rng.integers(1, sched.T + 1))

    def f(xt):
        x0 = S.predict_x0(sched, xt, t, model.evaluate(xt, t, y).eps_hat)
        return ops.sum(ops.square(Tensor(y) - D.blur_downsample(x0, k, s)))

    return check_gradients(f, [x_t], max_coords=max_coords, rng=rng)


def op_cases() -> dict[str, Callable[[int], float]]:
    cases: dict[str, Callable[[int], float]] = {}
    for name in UNARY:
        cases[name] = lambda seed, name=name: _unary_case(name, seed)
    for name in BINARY:
        cases[name] = lambda seed, name=name: _binary_case(name, seed)
    cases["matmul"] = _matmul_case
    for stride, groups, mode in [(1, 1, "zero"), (2, 1, "zero"), (1, 2, "replicate"),
                                 (1, 4, "circular"), (2, 4, "zero")]:
        cases[f"conv2d_s{stride}_g{groups}_{mode}"] = (
            lambda seed, a=(stride, groups, mode): _conv_case(seed, *a))
    cases["conv_transpose2d"] = _conv_transpose_case
    cases["concat_split"] = _concat_split_case
    for s in (1, 2, 4):
        cases[f"blur_downsample_s{s}"] = lambda seed, s=s: _degrade_case(seed, s)
    cases["bicubic_up"] = _bicubic_case
    return cases


def run(seeds: int = 20, names: Optional[Iterable[str]] = None,
        network: bool = True) -> list[CaseResult]:
    """Worst relative error per case over ``seeds`` seeds."""
    cases = op_cases()
    chosen = list(cases) if names is None else list(names)
    out = []
    for name in chosen:
        if name not in cases:
            raise KeyError(f"unknown gradient case {name!r}")
        worst = max(cases[name](seed) for seed in range(seeds))
        out.append(CaseResult(name, worst, OP_TOL, seeds))
    if network:
        model = MCFormer(MCFormerConfig.toy(), seed=0)
        sched = S.scaled_linear_schedule(50)
        worst = max(network_fidelity_case(seed, model, sched) for seed in range(seeds))
        out.append(CaseResult("mcformer_fidelity", worst, NETWORK_TOL, seeds))
    return out
