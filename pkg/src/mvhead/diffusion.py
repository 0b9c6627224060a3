"""Forward/reverse diffusion over joint multi-view states.

The denoising chain treats a set of N camera views of the same head as a
single state and walks every view down the same timestep ladder, so that
cross-view coupling (attention in the denoiser) can act at every step.

Schedule convention: arrays are 0-indexed with ``betas[t-1] = beta_t`` for
t in 1..T, and ``alpha_bar(0) == 1.0``. Schedule math is kept in float64;
scalar lookups return Python floats so tensor ops stay in the operand dtype.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .cameras import CameraPose


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule for a T-step diffusion.

    alphas[t-1]     = 1 - beta_t
    alpha_bars[t-1] = prod_{s<=t} alpha_s
    sigmas[t-1]     = sqrt(beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t))
                      for t >= 2; the generic formula degenerates to 0 at t = 1,
                      so sigma_1^2 = beta_1 (the usual ancestral fallback).
    """

    num_steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        """Cumulative product of alphas; alpha_bar(0) == 1.0 by convention."""
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def sigma(self, t: int) -> float:
        """Posterior std of q(x_{t-1} | x_t, x_0)."""
        self._check_t(t)
        return float(self.sigmas[t - 1])

    def _check_t(self, t: int) -> None:
        if not (1 <= t <= self.num_steps):
            raise ValueError(f"timestep {t} outside [1, {self.num_steps}]")


def build_schedule(num_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule from beta_start to beta_end over num_steps steps."""
    if num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {num_steps}")
    if not (0.0 < beta_start < 1.0) or not (0.0 < beta_end < 1.0):
        raise ValueError(f"betas must lie in (0, 1), got [{beta_start}, {beta_end}]")
    if beta_end < beta_start:
        raise ValueError("beta_end must be >= beta_start")
    betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    prev_bars = np.concatenate([[1.0], alpha_bars[:-1]])
    sigmas = np.sqrt(betas * (1.0 - prev_bars) / (1.0 - alpha_bars))
    sigmas[0] = np.sqrt(betas[0])
    return NoiseSchedule(num_steps, betas, alphas, alpha_bars, sigmas)


@dataclass
class MultiViewState:
    """Joint noisy state of N views at a common timestep.

    views:  (N, C, H, W) tensor, all views share one t.
    poses:  one CameraPose per view, aligned with the first axis.
    """

    views: torch.Tensor
    poses: tuple[CameraPose, ...]
    t: int

    def __post_init__(self) -> None:
        if self.views.ndim != 4:
            raise ValueError(f"views must be (N, C, H, W), got shape {tuple(self.views.shape)}")
        if len(self.poses) != self.views.shape[0]:
            raise ValueError(
                f"{len(self.poses)} poses for {self.views.shape[0]} views"
            )
        if self.t < 0:
            raise ValueError(f"timestep must be >= 0, got {self.t}")

    @property
    def num_views(self) -> int:
        return self.views.shape[0]


def forward_diffuse(
    state: MultiViewState, t: int, noise: torch.Tensor, schedule: NoiseSchedule
) -> MultiViewState:
    """Jump a clean multi-view state to timestep t in closed form.

    x_t = sqrt(abar_t) * x_0 + sqrt(1 - abar_t) * eps, applied per view with the
    caller-supplied noise (per-view independent unless the caller chose to
    broadcast the same tensor across views).
    """
    if noise.shape != state.views.shape:
        raise ValueError(
            f"noise shape {tuple(noise.shape)} != views shape {tuple(state.views.shape)}"
        )
    abar = schedule.alpha_bar(t)
    if t < 1:
        raise ValueError(f"forward_diffuse needs t >= 1, got {t}")
    noisy = np.sqrt(abar) * state.views + np.sqrt(1.0 - abar) * noise
    return MultiViewState(views=noisy, poses=state.poses, t=t)


def posterior_mean(
    x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, schedule: NoiseSchedule
) -> torch.Tensor:
    """Mean of p(x_{t-1} | x_t) under an eps-prediction model.

    mu = (1/sqrt(alpha_t)) * (x_t - beta_t / sqrt(1 - abar_t) * eps_hat)
    """
    if t < 1:
        raise ValueError(f"posterior_mean needs t >= 1, got {t}")
    if eps_hat.shape != x_t.shape:
        raise ValueError(
            f"eps_hat shape {tuple(eps_hat.shape)} != x_t shape {tuple(x_t.shape)}"
        )
    alpha = schedule.alpha(t)
    beta = schedule.beta(t)
    abar = schedule.alpha_bar(t)
    return (x_t - (beta / np.sqrt(1.0 - abar)) * eps_hat) / np.sqrt(alpha)


def reverse_step(
    state: MultiViewState,
    eps_hat: torch.Tensor,
    schedule: NoiseSchedule,
    generator: Optional[torch.Generator] = None,
) -> MultiViewState:
    """One ancestral (DDPM) step t -> t-1 applied jointly to all views.

    x_{t-1} = mu(x_t, eps_hat) + sigma_t * z. When sigma_t == 0 the draw is
    skipped entirely so the output equals the posterior mean bit-for-bit.
    """
    t = state.t
    mu = posterior_mean(state.views, eps_hat, t, schedule)
    sigma = schedule.sigma(t)
    if sigma > 0.0:
        z = torch.randn(
            state.views.shape, generator=generator,
            dtype=state.views.dtype, device=state.views.device,
        )
        mu = mu + sigma * z
    return MultiViewState(views=mu, poses=state.poses, t=t - 1)


def ddim_step(
    state: MultiViewState,
    eps_hat: torch.Tensor,
    t_prev: int,
    schedule: NoiseSchedule,
    eta: float = 0.0,
    generator: Optional[torch.Generator] = None,
) -> MultiViewState:
    """Non-Markovian step t -> t_prev (t_prev may skip several levels).

    x0_hat  = (x_t - sqrt(1 - abar_t) * eps_hat) / sqrt(abar_t)
    sigma   = eta * sqrt((1 - abar_prev) / (1 - abar_t)) * sqrt(1 - abar_t / abar_prev)
    x_prev  = sqrt(abar_prev) * x0_hat + sqrt(1 - abar_prev - sigma^2) * eps_hat + sigma * z

    eta = 0 gives the deterministic variant.
    """
    t = state.t
    if not (0 <= t_prev < t):
        raise ValueError(f"need 0 <= t_prev < t, got t_prev={t_prev}, t={t}")
    if not (0.0 <= eta <= 1.0):
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    if eps_hat.shape != state.views.shape:
        raise ValueError(
            f"eps_hat shape {tuple(eps_hat.shape)} != views shape {tuple(state.views.shape)}"
        )
    abar_t = schedule.alpha_bar(t)
    abar_prev = schedule.alpha_bar(t_prev)
    x0_hat = (state.views - np.sqrt(1.0 - abar_t) * eps_hat) / np.sqrt(abar_t)
    sigma = eta * np.sqrt((1.0 - abar_prev) / (1.0 - abar_t)) * np.sqrt(1.0 - abar_t / abar_prev)
    dir_coef = np.sqrt(max(1.0 - abar_prev - sigma**2, 0.0))
    x_prev = np.sqrt(abar_prev) * x0_hat + dir_coef * eps_hat
    if eta > 0.0 and sigma > 0.0:
        z = torch.randn(
            state.views.shape, generator=generator,
            dtype=state.views.dtype, device=state.views.device,
        )
        x_prev = x_prev + sigma * z
    return MultiViewState(views=x_prev, poses=state.poses, t=t_prev)


def ddim_timesteps(num_steps: int, num_eval_steps: int) -> list[int]:
    """Strictly decreasing ladder T = t_0 > t_1 > ... > t_k = 0 with k = num_eval_steps."""
    if num_eval_steps < 1:
        raise ValueError(f"num_eval_steps must be >= 1, got {num_eval_steps}")
    num_eval_steps = min(num_eval_steps, num_steps)
    ts = np.linspace(num_steps, 0, num_eval_steps + 1)
    return [int(round(t)) for t in ts]


# ---------------------------------------------------------------------------
# Optional latent mode: fixed, exactly invertible 2x Haar analysis transform.
# Channels quadruple (average, horizontal, vertical, diagonal details) while
# each spatial side halves; no learned encoder at this scale.
# ---------------------------------------------------------------------------

def haar_encode(images: torch.Tensor) -> torch.Tensor:
    """(..., C, H, W) -> (..., 4C, H/2, W/2). H and W must be even."""
    h, w = images.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"spatial dims must be even, got {h}x{w}")
    a = images[..., 0::2, 0::2]
    b = images[..., 0::2, 1::2]
    c = images[..., 1::2, 0::2]
    d = images[..., 1::2, 1::2]
    avg = (a + b + c + d) / 4.0
    dh = (a - b + c - d) / 4.0
    dv = (a + b - c - d) / 4.0
    dd = (a - b - c + d) / 4.0
    return torch.cat([avg, dh, dv, dd], dim=-3)


def haar_decode(latents: torch.Tensor) -> torch.Tensor:
    """Exact inverse of haar_encode."""
    c4 = latents.shape[-3]
    if c4 % 4:
        raise ValueError(f"latent channel count must be divisible by 4, got {c4}")
    c = c4 // 4
    avg, dh, dv, dd = (latents[..., i * c:(i + 1) * c, :, :] for i in range(4))
    a = avg + dh + dv + dd
    b = avg - dh + dv - dd
    cc = avg + dh - dv - dd
    d = avg - dh - dv + dd
    h, w = latents.shape[-2:]
    out = latents.new_empty(latents.shape[:-3] + (c, 2 * h, 2 * w))
    out[..., 0::2, 0::2] = a
    out[..., 0::2, 1::2] = b
    out[..., 1::2, 0::2] = cc
    out[..., 1::2, 1::2] = d
    return out
