"""Noise schedules, forward noising, clean-latent estimates and DDIM sampling.

Timesteps are 1-based: ``t`` in ``[1, T]`` indexes ``alpha_bar[t - 1]``, and
``t = 0`` denotes the clean end of the chain with ``alpha_bar = 1``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tensor, mul, sub

__all__ = [
    "NoiseSchedule",
    "SamplerConfig",
    "build_schedule",
    "forward_diffuse",
    "estimate_clean",
    "estimate_clean_tensor",
    "ddim_step",
    "timestep_sequence",
    "sample",
]


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def abar(self, t) -> np.ndarray:
        """alpha_bar at (possibly array-valued) ``t`` with ``abar(0) == 1``."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [0, {self.T}]: {t}")
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[t]

    def _check_t(self, t, low: int = 1) -> np.ndarray:
        t = np.asarray(t)
        if t.dtype.kind not in "iu":
            raise TypeError(f"timestep must be integer, got {t.dtype}")
        if np.any(t < low) or np.any(t > self.T):
            raise ValueError(f"timestep {t} outside [{low}, {self.T}]")
        return t


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 50
    t_start: int = 120
    eta: float = 0.0

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.t_start < 1:
            raise ValueError("t_start must be >= 1")
        if self.num_steps > self.t_start:
            raise ValueError(f"num_steps={self.num_steps} exceeds t_start={self.t_start}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")


def build_schedule(T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.03) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _coef(sched: NoiseSchedule, t, batch_ndim: int) -> np.ndarray:
    ab = sched.abar(t)
    # per-row coefficients broadcast against (B, d)
    return ab.reshape(ab.shape + (1,) * (batch_ndim - ab.ndim)) if ab.ndim else ab


def forward_diffuse(z0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """Noised latent ``sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``.

    ``t`` may be a scalar or one timestep per row of ``z0``.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"z0 {z0.shape} and eps {eps.shape} differ in shape")
    sched._check_t(t)
    ab = _coef(sched, t, z0.ndim)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def estimate_clean(zt, eps_hat, t, sched: NoiseSchedule) -> np.ndarray:
    zt = np.asarray(zt, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    sched._check_t(t)
    ab = _coef(sched, t, zt.ndim)
    return (zt - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def estimate_clean_tensor(zt: np.ndarray, eps_hat: Tensor, t, sched: NoiseSchedule) -> Tensor:
    """Differentiable clean-latent estimate; gradients flow into ``eps_hat``."""
    sched._check_t(t)
    zt = np.asarray(zt, dtype=np.float64)
    ab = _coef(sched, t, zt.ndim)
    inv = 1.0 / np.sqrt(ab)
    scaled_eps = mul(eps_hat, Tensor(np.sqrt(1.0 - ab) * inv))
    return sub(Tensor(zt * inv), scaled_eps)


def ddim_step(zt, eps_hat, t: int, t_prev: int, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic DDIM move from ``t`` to ``t_prev`` (``t_prev == 0`` returns the clean estimate)."""
    if t_prev > t:
        raise ValueError(f"ddim_step needs t_prev <= t, got t={t}, t_prev={t_prev}")
    zt = np.asarray(zt, dtype=np.float64)
    if t_prev == t:
        return zt.copy()
    sched._check_t(t)
    z0_hat = estimate_clean(zt, eps_hat, t, sched)
    ab_prev = sched.abar(t_prev)
    return np.sqrt(ab_prev) * z0_hat + np.sqrt(1.0 - ab_prev) * np.asarray(eps_hat)


def timestep_sequence(t_start: int, num_steps: int) -> np.ndarray:
    """Uniformly spaced decreasing timesteps ``[t_start, ..., 0]`` of length ``num_steps + 1``."""
    if num_steps < 1 or num_steps > t_start:
        raise ValueError(f"need 1 <= num_steps <= t_start, got {num_steps}, {t_start}")
    ts = np.rint(np.linspace(t_start, 0, num_steps + 1)).astype(np.int64)
    return ts


def sample(
    denoiser_fn: Callable[[np.ndarray, int, np.ndarray], np.ndarray],
    e,
    z_init,
    cfg: SamplerConfig,
    sched: NoiseSchedule,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Reverse diffusion from ``z_init`` (already at noise level ``cfg.t_start``).

    ``denoiser_fn(z, t, e)`` returns the predicted noise for a batch. With
    ``eta > 0`` the update injects fresh noise drawn from ``rng``.
    """
    if cfg.t_start > sched.T:
        raise ValueError(f"t_start={cfg.t_start} exceeds schedule length {sched.T}")
    z = np.array(z_init, dtype=np.float64)
    ts = timestep_sequence(cfg.t_start, cfg.num_steps)
    if cfg.eta > 0 and rng is None:
        raise ValueError("eta > 0 requires an rng")
    for t, t_prev in zip(ts[:-1], ts[1:]):
        eps_hat = np.asarray(denoiser_fn(z, int(t), e), dtype=np.float64)
        if eps_hat.shape != z.shape:
            raise ValueError(f"denoiser returned shape {eps_hat.shape}, expected {z.shape}")
        if cfg.eta == 0.0:
            z = ddim_step(z, eps_hat, int(t), int(t_prev), sched)
            continue
        ab, ab_prev = sched.abar(t), sched.abar(t_prev)
        sigma = cfg.eta * np.sqrt((1 - ab_prev) / (1 - ab) * (1 - ab / ab_prev))
        z0_hat = estimate_clean(z, eps_hat, int(t), sched)
        z = (
            np.sqrt(ab_prev) * z0_hat
            + np.sqrt(np.maximum(1 - ab_prev - sigma**2, 0.0)) * eps_hat
            + sigma * rng.standard_normal(z.shape)
        )
    return z
