"""Noise schedules, forward marginals and the x0-parameterised reverse step.

Timesteps are 1-based: ``t`` runs over ``1..T`` and ``alpha_bar(0) = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import RejectedInput

SCHEDULE_KINDS = ("linear", "linear_scaled", "cosine")


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    timesteps: np.ndarray  # model-facing timestep for each entry (identity unless respaced)

    @property
    def T(self):
        return len(self.betas)

    @property
    def alphas(self):
        return 1.0 - self.betas

    @property
    def alpha_bars(self):
        return np.cumprod(self.alphas)

    def alpha_bar(self, t):
        t = np.asarray(t)
        ab = np.concatenate([[1.0], self.alpha_bars])
        return ab[t]

    def posterior(self, t):
        """Coefficients ``(c_x0, c_xt, var)`` of q(x_{t-1} | x_t, x0) at step ``t``."""
        t = np.asarray(t)
        beta = self.betas[t - 1]
        ab_t = self.alpha_bar(t)
        ab_prev = self.alpha_bar(t - 1)
        c_x0 = beta * np.sqrt(ab_prev) / (1.0 - ab_t)
        c_xt = (1.0 - ab_prev) * np.sqrt(1.0 - beta) / (1.0 - ab_t)
        var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
        return c_x0, c_xt, var


def make_schedule(T, kind="linear", beta_start=1e-4, beta_end=0.02):
    """``linear`` spans ``beta_start..beta_end``; ``linear_scaled`` multiplies both by 1000/T
    so that alpha_bar(T) is near zero for short chains."""
    T = int(T)
    if T < 2:
        raise RejectedInput(f"need at least 2 diffusion steps, got {T}")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "linear_scaled":
        s = 1000.0 / T
        betas = np.linspace(beta_start * s, beta_end * s, T, dtype=np.float64)
    elif kind == "cosine":
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + 0.008) / 1.008 * np.pi / 2) ** 2
        betas = 1.0 - f[1:] / f[:-1]
    else:
        raise RejectedInput(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    betas = np.clip(betas, 1e-8, 0.999)
    return NoiseSchedule(betas, np.arange(1, T + 1))


def respace(schedule, n_steps):
    """Sub-sample ``n_steps`` evenly spaced timesteps, keeping alpha_bar at the kept steps."""
    n_steps = int(n_steps)
    if not 1 <= n_steps <= schedule.T:
        raise RejectedInput(f"sampling steps must lie in [1, {schedule.T}], got {n_steps}")
    if n_steps == schedule.T:
        return schedule
    keep = np.unique(np.round(np.linspace(1, schedule.T, n_steps)).astype(int))
    ab = schedule.alpha_bar(keep)
    prev = np.concatenate([[1.0], ab[:-1]])
    betas = 1.0 - ab / prev
    return NoiseSchedule(betas, schedule.timesteps[keep - 1])


def _expand(coef, x):
    coef = torch.as_tensor(np.asarray(coef), dtype=x.dtype, device=x.device).reshape(-1)
    return coef.reshape(-1, *([1] * (x.dim() - 1)))


def _check_t(t, schedule):
    t = np.atleast_1d(np.asarray(t))
    if t.min() < 1 or t.max() > schedule.T:
        raise RejectedInput(f"timestep out of range [1, {schedule.T}]: {t.tolist()}")
    return t


def diffuse(x0, t, eps, schedule):
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps; ``t`` scalar or per-batch."""
    t = _check_t(t, schedule)
    ab = schedule.alpha_bar(t)
    return _expand(np.sqrt(ab), x0) * x0 + _expand(np.sqrt(1.0 - ab), x0) * eps


def reverse_step(x_t, x0_hat, t, schedule, noise=None):
    """One ancestral step from the posterior implied by the predicted clean sample."""
    t = _check_t(t, schedule)
    c_x0, c_xt, var = schedule.posterior(t)
    mean = _expand(c_x0, x_t) * x0_hat + _expand(c_xt, x_t) * x_t
    if noise is None:
        return mean
    return mean + _expand(np.sqrt(var), x_t) * noise
