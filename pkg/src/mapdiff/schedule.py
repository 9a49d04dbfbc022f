"""DDPM variance schedule and the forward/reverse update rules.

Timesteps are 1-based: index ``t`` addresses ``beta[t-1]``. Functions accept
either a scalar ``t`` or a per-item integer array (one per batch row).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

DEFAULT_T = 1000
DEFAULT_BETA = (1e-4, 0.02)


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    beta_start: float
    beta_end: float
    family: str = "linear"
    beta: np.ndarray = field(repr=False, compare=False, default=None)
    alpha: np.ndarray = field(repr=False, compare=False, default=None)
    alpha_bar: np.ndarray = field(repr=False, compare=False, default=None)
    alpha_bar_prev: np.ndarray = field(repr=False, compare=False, default=None)
    posterior_var: np.ndarray = field(repr=False, compare=False, default=None)

    def coef(self, name: str, t, ndim: int = 4) -> np.ndarray | float:
        """Look up ``name[t]``; array ``t`` is shaped for broadcasting over ``ndim`` axes."""
        arr = getattr(self, name)
        t_arr = np.asarray(t)
        if np.any(t_arr < 1) or np.any(t_arr > self.T):
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        if t_arr.ndim == 0:
            return float(arr[int(t_arr) - 1])
        return arr[t_arr.astype(np.int64) - 1].reshape((-1,) + (1,) * (ndim - 1))


def linear_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA[0],
                    beta_end: float = DEFAULT_BETA[1]) -> DiffusionSchedule:
    if T < 1:
        raise ValueError("T must be positive")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
    for arr in (beta, alpha, alpha_bar, alpha_bar_prev, posterior_var):
        arr.setflags(write=False)
    return DiffusionSchedule(T, float(beta_start), float(beta_end), "linear",
                             beta, alpha, alpha_bar, alpha_bar_prev, posterior_var)


def scaled_linear_schedule(T: int) -> DiffusionSchedule:
    """Linear schedule with the 1000-step endpoints rescaled by ``1000 / T``."""
    scale = DEFAULT_T / T
    return linear_schedule(T, DEFAULT_BETA[0] * scale, min(DEFAULT_BETA[1] * scale, 0.999))


def _shape(x) -> tuple:
    return x.shape if isinstance(x, Tensor) else np.shape(x)


def q_sample(sched: DiffusionSchedule, x0, t, eps):
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``."""
    if _shape(eps) != _shape(x0):
        raise ValueError(f"eps shape {_shape(eps)} != x0 shape {_shape(x0)}")
    ndim = len(_shape(x0))
    ab = sched.coef("alpha_bar", t, ndim)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def predict_x0(sched: DiffusionSchedule, x_t, t, eps_hat):
    """Invert the forward marginal: ``(x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)``."""
    ndim = len(x_t.shape)
    ab = sched.coef("alpha_bar", t, ndim)
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) * (1.0 / np.sqrt(ab))


def posterior_mean(sched: DiffusionSchedule, x_t, t, eps_hat):
    """``(x_t - beta_t / sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t)``."""
    ndim = len(x_t.shape)
    a = sched.coef("alpha", t, ndim)
    b = sched.coef("beta", t, ndim)
    ab = sched.coef("alpha_bar", t, ndim)
    return (x_t - (b / np.sqrt(1.0 - ab)) * eps_hat) * (1.0 / np.sqrt(a))


def reverse_step(sched: DiffusionSchedule, x_t, t: int, eps_hat, noise):
    """One ancestral step: posterior mean plus ``sqrt(posterior_var_t) * noise``.

    At ``t == 1`` the noise must be zero (the final step is deterministic).
    """
    noise_arr = noise.data if isinstance(noise, Tensor) else np.asarray(noise)
    if int(t) == 1 and np.any(noise_arr != 0):
        raise ValueError("the final reverse step (t=1) takes no noise")
    mean = posterior_mean(sched, x_t, t, eps_hat)
    var = sched.coef("posterior_var", t, len(x_t.shape))
    return mean + np.sqrt(var) * noise
