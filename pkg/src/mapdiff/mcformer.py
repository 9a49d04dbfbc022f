"""Kernel-modulated conditional transformer denoiser.

The network takes the noisy image ``x_t``, the timestep and the LR
observation, estimates a kernel code from ``[x_t, bicubic_up(y)]`` and
predicts the injected noise with a U-shaped stack of transformer blocks
whose features are scaled and shifted by embeddings of the timestep and the
estimated kernel code.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Protocol

import numpy as np

from . import schedule as S
from .degrade import bicubic_resize
from .tensor import Tensor, no_grad, ops
from .tensor.core import as_tensor
from .tensor.nn import Conv2d, ConvTranspose2d, Linear, Module, global_avg_pool, layer_norm_channels


@dataclass
class MCFormerConfig:
    levels: int = 4
    blocks_per_level: list = field(default_factory=lambda: [2, 3, 6, 8])
    channels_per_level: list = field(default_factory=lambda: [48, 96, 192, 384])
    heads_per_level: list = field(default_factory=lambda: [1, 2, 4, 8])
    refinement_blocks: int = 2
    kernel_code_dim: int = 10
    time_embed_dim: int = 64
    estimator_channels: int = 64
    ffn_expansion: float = 2.66
    image_channels: int = 3

    def __post_init__(self):
        self.blocks_per_level = [int(v) for v in self.blocks_per_level]
        self.channels_per_level = [int(v) for v in self.channels_per_level]
        self.heads_per_level = [int(v) for v in self.heads_per_level]
        lists = (self.blocks_per_level, self.channels_per_level, self.heads_per_level)
        if any(len(v) != self.levels for v in lists):
            raise ValueError(f"per-level lists must all have length levels={self.levels}")
        for c, h in zip(self.channels_per_level, self.heads_per_level):
            if c % h:
                raise ValueError(f"{c} channels not divisible by {h} heads")

    @classmethod
    def toy(cls) -> "MCFormerConfig":
        return cls(levels=2, blocks_per_level=[1, 1], channels_per_level=[8, 16],
                   heads_per_level=[1, 2], refinement_blocks=1, kernel_code_dim=10,
                   time_embed_dim=16, estimator_channels=16)

    def to_vector(self) -> np.ndarray:
        head = [self.levels, self.refinement_blocks, self.kernel_code_dim, self.time_embed_dim,
                self.estimator_channels, self.ffn_expansion, self.image_channels]
        return np.array(head + self.blocks_per_level + self.channels_per_level
                        + self.heads_per_level, dtype=np.float64)

    @classmethod
    def from_vector(cls, v: np.ndarray) -> "MCFormerConfig":
        v = [float(x) for x in v]
        L = int(v[0])
        rest = [int(x) for x in v[7:]]
        return cls(levels=L, refinement_blocks=int(v[1]), kernel_code_dim=int(v[2]),
                   time_embed_dim=int(v[3]), estimator_channels=int(v[4]), ffn_expansion=v[5],
                   image_channels=int(v[6]), blocks_per_level=rest[:L],
                   channels_per_level=rest[L:2 * L], heads_per_level=rest[2 * L:3 * L])

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class DenoiserOutput:
    eps_hat: Tensor       # same shape as x_t
    kernel_code: Tensor   # [b, d]


class Denoiser(Protocol):
    def evaluate(self, x_t: Tensor, t, y_lr) -> DenoiserOutput: ...


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


class MLP(Module):
    """Two linear layers with a GELU in between."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng):
        self.fc1 = Linear(n_in, n_hidden, rng)
        self.fc2 = Linear(n_hidden, n_out, rng)

    def forward(self, x):
        return self.fc2(ops.gelu(self.fc1(x)))


class KernelEstimator(Module):
    """Four 5x5 conv + LeakyReLU stages, global average pooling, linear head to a code."""

    def __init__(self, in_channels: int, width: int, code_dim: int, rng, zero_head: bool = False):
        chans = [in_channels, width, width, width, width]
        self.convs = [Conv2d(chans[i], chans[i + 1], 5, rng) for i in range(4)]
        self.head = Linear(width, code_dim, rng)
        if zero_head:
            self.head.weight.data[:] = 0.0
            self.head.bias.data[:] = 0.0

    def forward(self, inp: Tensor) -> Tensor:
        h = inp
        for conv in self.convs:
            h = ops.leaky_relu(conv(h))
        return self.head(global_avg_pool(h))


class Modulation(Module):
    """Per-channel scale ``gamma`` and shift ``tau`` from the fused conditioning.

    ``gamma`` starts at one (zero-mean weights, unit bias) and ``tau`` at
    zero-ish, so a fresh block begins close to its unmodulated form.
    """

    def __init__(self, embed_dim: int, channels: int, rng):
        self.gamma = Linear(embed_dim, channels, rng)
        self.tau = Linear(embed_dim, channels, rng)
        self.gamma.bias.data[:] = 1.0
        self.tau.bias.data[:] = 0.0

    def params(self, t_embed: Tensor, k_embed: Tensor):
        fused = t_embed + k_embed
        b = fused.shape[0]
        gamma = ops.reshape(self.gamma(fused), (b, -1, 1, 1))
        tau = ops.reshape(self.tau(fused), (b, -1, 1, 1))
        return gamma, tau

    def forward(self, F: Tensor, t_embed: Tensor, k_embed: Tensor, normalize: bool) -> Tensor:
        gamma, tau = self.params(t_embed, k_embed)
        if F.shape[1] != gamma.shape[1]:
            raise ValueError(f"feature has {F.shape[1]} channels, modulation expects {gamma.shape[1]}")
        base = layer_norm_channels(F) if normalize else F
        return gamma * base + tau


def modulate1(mod: Modulation, F: Tensor, t_embed: Tensor, k_embed: Tensor) -> Tensor:
    """``gamma1 * LayerNorm(F) + tau1``."""
    return mod(F, t_embed, k_embed, normalize=True)


def modulate2(mod: Modulation, F_tilde: Tensor, t_embed: Tensor, k_embed: Tensor) -> Tensor:
    """``gamma2 * F_tilde + tau2`` (no normalization)."""
    return mod(F_tilde, t_embed, k_embed, normalize=False)


class MDTA(Module):
    """Channel-wise (transposed) multi-head attention with depthwise-conv projections."""

    def __init__(self, channels: int, heads: int, rng):
        if channels % heads:
            raise ValueError(f"{channels} channels not divisible by {heads} heads")
        self.heads = heads
        self.temperature = Tensor(np.ones((heads, 1, 1)), requires_grad=True)
        self.qkv = Conv2d(channels, 3 * channels, 1, rng)
        self.qkv_dw = Conv2d(3 * channels, 3 * channels, 3, rng, groups=3 * channels)
        self.proj = Conv2d(channels, channels, 1, rng)
        self.last_attention: Optional[np.ndarray] = None

    def forward(self, F: Tensor) -> Tensor:
        b, c, h, w = F.shape
        if c % self.heads:
            raise ValueError(f"{c} channels not divisible by {self.heads} heads")
        qkv = self.qkv_dw(self.qkv(F))
        q, k, v = ops.split(qkv, 3, axis=1)
        shape = (b, self.heads, c // self.heads, h * w)
        q = ops.l2_normalize(ops.reshape(q, shape), axis=-1)
        k = ops.l2_normalize(ops.reshape(k, shape), axis=-1)
        v = ops.reshape(v, shape)
        logits = ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))) * self.temperature
        attn = ops.softmax(logits, axis=-1)
        self.last_attention = attn.data
        out = ops.reshape(ops.matmul(attn, v), (b, c, h, w))
        return self.proj(out)


class GDFN(Module):
    """Gated depthwise-conv feed-forward: ``proj_out(GELU(a) * b)``."""

    def __init__(self, channels: int, expansion: float, rng):
        hidden = int(channels * expansion)
        self.hidden = hidden
        self.proj_in = Conv2d(channels, 2 * hidden, 1, rng)
        self.dw = Conv2d(2 * hidden, 2 * hidden, 3, rng, groups=2 * hidden)
        self.proj_out = Conv2d(hidden, channels, 1, rng)

    def forward(self, F: Tensor) -> Tensor:
        a, b = ops.split(self.dw(self.proj_in(F)), 2, axis=1)
        return self.proj_out(ops.gelu(a) * b)


class TransformerBlock(Module):
    def __init__(self, channels: int, heads: int, embed_dim: int, expansion: float, rng):
        self.mod1 = Modulation(embed_dim, channels, rng)
        self.attn = MDTA(channels, heads, rng)
        self.mod2 = Modulation(embed_dim, channels, rng)
        self.ffn = GDFN(channels, expansion, rng)

    def forward(self, F: Tensor, t_embed: Tensor, k_embed: Tensor) -> Tensor:
        F_bar = modulate1(self.mod1, F, t_embed, k_embed)
        F_hat = modulate2(self.mod2, self.attn(F_bar), t_embed, k_embed)
        H = F + F_hat
        return H + self.ffn(layer_norm_channels(H))


# ---------------------------------------------------------------------------
# full network
# ---------------------------------------------------------------------------

class MCFormer(Module):
    def __init__(self, cfg: MCFormerConfig, seed: int = 0, zero_head: bool = False):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        C, E, L = cfg.channels_per_level, cfg.time_embed_dim, cfg.levels
        ic = cfg.image_channels
        self.estimator = KernelEstimator(2 * ic, cfg.estimator_channels, cfg.kernel_code_dim, rng,
                                         zero_head=zero_head)
        self.time_mlp = MLP(E, E, E, rng)
        self.kernel_mlp = MLP(cfg.kernel_code_dim, E, E, rng)
        self.in_proj = Conv2d(2 * ic, C[0], 3, rng)

        def stack(n, c, h):
            return [TransformerBlock(c, h, E, cfg.ffn_expansion, rng) for _ in range(n)]

        self.encoder = [stack(cfg.blocks_per_level[l], C[l], cfg.heads_per_level[l]) for l in range(L)]
        self.down = [Conv2d(C[l], C[l + 1], 3, rng, stride=2) for l in range(L - 1)]
        self.up = [ConvTranspose2d(C[l + 1], C[l], 3, rng) for l in range(L - 1)]
        self.fuse = [Conv2d(2 * C[l], C[l], 1, rng) for l in range(L - 1)]
        self.decoder = [stack(cfg.blocks_per_level[l], C[l], cfg.heads_per_level[l]) for l in range(L - 1)]
        self.refine = stack(cfg.refinement_blocks, C[0], cfg.heads_per_level[0])
        self.out_proj = Conv2d(C[0], ic, 3, rng)

    def named_parameters(self, prefix: str = ""):
        # nested lists of blocks are not covered by the generic attribute walk
        for name, value in vars(self).items():
            if name in ("encoder", "decoder"):
                for l, blocks in enumerate(value):
                    for i, blk in enumerate(blocks):
                        yield from blk.named_parameters(f"{prefix}{name}.{l}.{i}.")
        yield from super().named_parameters(prefix)

    def condition(self, x_t: Tensor, y_lr) -> Tensor:
        x_t = as_tensor(x_t)
        h, w = x_t.shape[-2:]
        y_lr = y_lr.data if isinstance(y_lr, Tensor) else np.asarray(y_lr, dtype=np.float64)
        if y_lr.ndim == 3:
            y_lr = y_lr[None]
        if h % y_lr.shape[-2] or w % y_lr.shape[-1] or h // y_lr.shape[-2] != w // y_lr.shape[-1]:
            raise ValueError(f"LR extents {y_lr.shape[-2:]} do not divide HR extents {(h, w)}")
        y_up = bicubic_resize(y_lr, h // y_lr.shape[-2], "up")
        if y_up.shape[0] != x_t.shape[0]:
            y_up = np.broadcast_to(y_up, (x_t.shape[0],) + y_up.shape[1:])
        return ops.concat([x_t, Tensor(y_up)], axis=1)

    def forward(self, x_t: Tensor, t, y_lr) -> DenoiserOutput:
        cfg = self.cfg
        x_t = as_tensor(x_t)
        b, c, h, w = x_t.shape
        if c != cfg.image_channels:
            raise ValueError(f"expected {cfg.image_channels} image channels, got {c}")
        factor = 2 ** (cfg.levels - 1)
        if h % factor or w % factor:
            raise ValueError(f"extents {h}x{w} must be divisible by {factor}")
        inp = self.condition(x_t, y_lr)
        code = self.estimator(inp)
        t_arr = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.float64)), (b,))
        t_embed = self.time_mlp(Tensor(sinusoidal_embedding(t_arr, cfg.time_embed_dim)))
        k_embed = self.kernel_mlp(code)

        feat = self.in_proj(inp)
        skips = []
        for l in range(cfg.levels):
            for blk in self.encoder[l]:
                feat = blk(feat, t_embed, k_embed)
            if l < cfg.levels - 1:
                skips.append(feat)
                feat = self.down[l](feat)
        for l in reversed(range(cfg.levels - 1)):
            feat = self.up[l](feat)
            feat = self.fuse[l](ops.concat([feat, skips[l]], axis=1))
            for blk in self.decoder[l]:
                feat = blk(feat, t_embed, k_embed)
        for blk in self.refine:
            feat = blk(feat, t_embed, k_embed)
        return DenoiserOutput(self.out_proj(feat), code)

    def evaluate(self, x_t, t, y_lr) -> DenoiserOutput:
        return self.forward(x_t, t, y_lr)


def count_parameters(cfg: MCFormerConfig) -> int:
    """Closed-form parameter count, independent of instantiating the network."""
    ic, E, d, W = cfg.image_channels, cfg.time_embed_dim, cfg.kernel_code_dim, cfg.estimator_channels
    conv = lambda ci, co, k, g=1: co * (ci // g) * k * k + co
    lin = lambda a, b: a * b + b

    def block(c, heads):
        hid = int(c * cfg.ffn_expansion)
        mods = 2 * (2 * lin(E, c))
        mdta = heads + conv(c, 3 * c, 1) + conv(3 * c, 3 * c, 3, 3 * c) + conv(c, c, 1)
        gdfn = conv(c, 2 * hid, 1) + conv(2 * hid, 2 * hid, 3, 2 * hid) + conv(hid, c, 1)
        return mods + mdta + gdfn

    C = cfg.channels_per_level
    n = conv(2 * ic, W, 5) + 3 * conv(W, W, 5) + lin(W, d)
    n += 2 * lin(E, E) + lin(d, E) + lin(E, E)
    n += conv(2 * ic, C[0], 3) + conv(C[0], ic, 3)
    for l in range(cfg.levels):
        n += cfg.blocks_per_level[l] * block(C[l], cfg.heads_per_level[l])
        if l < cfg.levels - 1:
            n += cfg.blocks_per_level[l] * block(C[l], cfg.heads_per_level[l])
            n += conv(C[l], C[l + 1], 3, 1)
            n += C[l + 1] * C[l] * 9 + C[l]
            n += conv(2 * C[l], C[l], 1)
    n += cfg.refinement_blocks * block(C[0], cfg.heads_per_level[0])
    return n


# ---------------------------------------------------------------------------
# analytic denoisers for testing the sampler without training
# ---------------------------------------------------------------------------

class OracleDenoiser:
    """Returns the exact noise that maps ``x_t`` back to a known ``x0``.

    Built from tensor ops on ``x_t`` so gradients flow (and vanish, since the
    implied clean estimate does not depend on ``x_t``).
    """

    def __init__(self, sched: S.DiffusionSchedule, x0: np.ndarray, kernel_code: np.ndarray):
        self.sched = sched
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.code = np.atleast_2d(np.asarray(kernel_code, dtype=np.float64))

    def evaluate(self, x_t, t, y_lr=None) -> DenoiserOutput:
        x_t = as_tensor(x_t)
        ab = self.sched.coef("alpha_bar", t, x_t.ndim)
        eps = (x_t - np.sqrt(ab) * self.x0) * (1.0 / np.sqrt(1.0 - ab))
        code = np.broadcast_to(self.code, (x_t.shape[0], self.code.shape[-1]))
        return DenoiserOutput(eps, Tensor(code))


class GaussianPriorDenoiser:
    """Exact MMSE denoiser for a Gaussian prior ``x0 ~ N(mean, var I)``.

    Its clean-image estimate is affine in ``x_t`` with a nonzero slope, which
    makes guidance gradients nontrivial.
    """

    def __init__(self, sched: S.DiffusionSchedule, mean: np.ndarray, var: float,
                 kernel_code: np.ndarray):
        self.sched = sched
        self.mean = np.asarray(mean, dtype=np.float64)
        self.var = float(var)
        self.code = np.atleast_2d(np.asarray(kernel_code, dtype=np.float64))

    def evaluate(self, x_t, t, y_lr=None) -> DenoiserOutput:
        x_t = as_tensor(x_t)
        ab = self.sched.coef("alpha_bar", t, x_t.ndim)
        denom = ab * self.var + (1.0 - ab)
        x0_hat = x_t * (np.sqrt(ab) * self.var / denom) + self.mean * ((1.0 - ab) / denom)
        eps = (x_t - np.sqrt(ab) * x0_hat) * (1.0 / np.sqrt(1.0 - ab))
        code = np.broadcast_to(self.code, (x_t.shape[0], self.code.shape[-1]))
        return DenoiserOutput(eps, Tensor(code))


def predict_code(model, x_t, t, y_lr) -> np.ndarray:
    with no_grad():
        return model.evaluate(x_t, t, y_lr).kernel_code.data
