"""Noise-schedule tables and the deterministic reverse (DDIM) step.

All operations are pure functions. Coefficients are scalars pulled out of
float64 tables, so they broadcast against numpy arrays and torch tensors
alike; callers keep their array library.

Timestep indexing is zero-based: t=0 is the least-noisy trained step.
``t_prev = -1`` denotes the boundary past the end of the chain, where the
cumulative signal weight is exactly 1 (the step that emits the clean image).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError, ShapeMismatchError

ALPHA_BAR_FLOOR = 1e-12


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep noising tables: betas, alphas = 1 - betas, and their
    running product alpha_bars (the cumulative signal weight)."""

    total_steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal weight at step ``t``; 1.0 at the t=-1 boundary."""
        if t < 0:
            return 1.0
        return float(self.alpha_bars[t])


def build_schedule(
    total_steps: int,
    kind: str = "linear",
    beta_min: float = 1e-4,
    beta_max: float = 0.02,
) -> NoiseSchedule:
    """Build the beta/alpha/alpha_bar tables.

    ``linear`` interpolates betas uniformly from beta_min to beta_max;
    ``cosine`` derives betas from the squared-cosine signal curve and ignores
    the beta range except as clipping bounds.
    """
    if total_steps < 2:
        raise ConfigError(f"total_steps must be >= 2, got {total_steps}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigError(
            f"beta range must satisfy 0 < beta_min <= beta_max < 1, "
            f"got beta_min={beta_min}, beta_max={beta_max}"
        )
    if kind == "linear":
        betas = np.linspace(beta_min, beta_max, total_steps, dtype=np.float64)
    elif kind == "cosine":
        steps = np.arange(total_steps + 1, dtype=np.float64) / total_steps
        curve = np.cos((steps + 0.008) / 1.008 * math.pi / 2) ** 2
        curve = curve / curve[0]
        betas = np.clip(1.0 - curve[1:] / curve[:-1], beta_min, 0.999)
    else:
        raise ConfigError(f"kind must be 'linear' or 'cosine', got {kind!r}")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(
        total_steps=total_steps, betas=betas, alphas=alphas, alpha_bars=alpha_bars
    )


def _check_t(t: int, schedule: NoiseSchedule) -> None:
    if not (0 <= t < schedule.total_steps):
        raise ConfigError(
            f"timestep t={t} outside [0, {schedule.total_steps})"
        )


def forward_diffuse(x0, t: int, eps, schedule: NoiseSchedule):
    """Noise a clean batch to step ``t``: sqrt(a_bar)*x0 + sqrt(1-a_bar)*eps."""
    _check_t(t, schedule)
    if getattr(x0, "shape", None) != getattr(eps, "shape", None):
        raise ShapeMismatchError(
            f"x0 shape {getattr(x0, 'shape', None)} != eps shape "
            f"{getattr(eps, 'shape', None)}"
        )
    a = schedule.alpha_bar(t)
    return math.sqrt(a) * x0 + math.sqrt(1.0 - a) * eps


def predict_x0(x_t, eps_pred, t: int, schedule: NoiseSchedule):
    """Invert the forward process given a noise estimate: the current clean-image
    prediction (x_t - sqrt(1-a_bar)*eps_pred) / sqrt(a_bar)."""
    _check_t(t, schedule)
    if getattr(x_t, "shape", None) != getattr(eps_pred, "shape", None):
        raise ShapeMismatchError(
            f"x_t shape {getattr(x_t, 'shape', None)} != eps_pred shape "
            f"{getattr(eps_pred, 'shape', None)}"
        )
    a = schedule.alpha_bar(t)
    if a < ALPHA_BAR_FLOOR:
        raise NumericalError(
            f"alpha_bar[{t}]={a:.3e} below {ALPHA_BAR_FLOOR}; cannot divide"
        )
    return (x_t - math.sqrt(1.0 - a) * eps_pred) / math.sqrt(a)


def ddim_step(x_t, eps_pred, t: int, t_prev: int, schedule: NoiseSchedule):
    """Deterministic reverse step from t to t_prev (no noise injection).

    Re-noises the current clean-image prediction to the t_prev level using
    the same predicted noise. ``t_prev = -1`` collapses to the prediction
    itself.
    """
    if t_prev >= t:
        raise ConfigError(f"t_prev={t_prev} must be smaller than t={t}")
    x0_hat = predict_x0(x_t, eps_pred, t, schedule)
    a_prev = schedule.alpha_bar(t_prev)
    return math.sqrt(a_prev) * x0_hat + math.sqrt(1.0 - a_prev) * eps_pred


def ddim_timesteps(total_steps: int, ddim_steps: int) -> np.ndarray:
    """Descending visited timesteps for a strided DDIM chain.

    Uniform stride total_steps // ddim_steps starting at 0, so the grid hits
    every multiple of the stride; the chain ends at t=0 and the final step
    maps to the t=-1 boundary.
    """
    if not (1 <= ddim_steps <= total_steps):
        raise ConfigError(
            f"ddim_steps={ddim_steps} must be in [1, total_steps={total_steps}]"
        )
    stride = total_steps // ddim_steps
    return np.arange(ddim_steps - 1, -1, -1, dtype=np.int64) * stride
