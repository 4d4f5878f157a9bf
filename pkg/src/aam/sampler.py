"""Three-stage adaptive sampler.

The reverse chain visits a strided DDIM grid. Outside the tuning window the
model runs at temperature 1.0. Inside the window (t1 >= t > t2) the
temperature logit is optimized per sample at every visited timestep to
minimize the memory-bank anomaly score of the current clean-image
prediction, using central finite differences and a scalar Adam update with
early stopping on the gradient magnitude. The logit carries over between
consecutive tuned timesteps and is periodically re-initialized to zero
(together with the Adam moments). At designated timesteps, regions whose
anomaly heatmap exceeds the calibrated threshold are replaced with fresh
Gaussian noise right after the reverse step.

With the tuning window empty the loop is the plain deterministic DDIM
sampler, bit for bit: there is no separate baseline code path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .anomaly import MemoryBank, score_batch
from .denoiser import (
    Denoiser,
    predict_eps,
    resolve_tau_map,
    temperature_from_logit,
)
from .errors import ConfigError, NumericalError
from .schedule import NoiseSchedule, ddim_step, ddim_timesteps, predict_x0
from .trainer import AUGMENT_CLAMP

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class SamplerConfig:
    """Complete parameterization of the adaptive sampling procedure."""

    total_steps: int  # diffusion T of the trained model
    t1: int  # tuning window upper bound (inclusive)
    t2: int  # tuning window lower bound (exclusive); t1 == t2 disables tuning
    opt_iters: int = 10  # max gradient evaluations per tuned timestep
    opt_lr: float = 0.01  # Adam learning rate on the temperature logit
    grad_tol: float = 0.001  # early stop when |gradient| falls below this
    reinit_interval: int = 40  # logit reset period, in timesteps below t1
    perturb_steps: tuple[int, ...] = ()  # timesteps requesting masked perturbation
    gamma: float = 2.0  # temperature range exponent: tau in (10^-g, 10^g)
    beta_multiplier: float = 1.5  # mask threshold = mu_s + multiplier*sigma_s
    ddim_steps: int = 250
    modulated_resolutions: tuple[int, ...] = ()  # empty = every attention resolution
    seed: int = 0
    fd_step: float = 0.01
    max_batch: int = 32  # forward chunking; never mixes samples

    def validate(self) -> None:
        if not (self.total_steps >= self.t1 >= self.t2 >= 0):
            raise ConfigError(
                f"stage bounds must satisfy T >= t1 >= t2 >= 0, "
                f"got T={self.total_steps}, t1={self.t1}, t2={self.t2}"
            )
        for ell in self.perturb_steps:
            if not (self.t2 < ell <= self.t1 + 1):
                raise ConfigError(
                    f"perturb step {ell} outside (t2={self.t2}, t1+1={self.t1 + 1}]"
                )
        if self.opt_iters < 1:
            raise ConfigError(f"opt_iters must be >= 1, got {self.opt_iters}")
        if self.opt_lr <= 0:
            raise ConfigError(f"opt_lr must be > 0, got {self.opt_lr}")
        if self.grad_tol < 0:
            raise ConfigError(f"grad_tol must be >= 0, got {self.grad_tol}")
        if self.reinit_interval <= 0:
            raise ConfigError(f"reinit_interval must be > 0, got {self.reinit_interval}")
        if self.fd_step <= 0:
            raise ConfigError(f"fd_step must be > 0, got {self.fd_step}")
        if self.gamma <= 0:
            raise ConfigError(f"gamma must be > 0, got {self.gamma}")
        if not (1 <= self.ddim_steps <= self.total_steps):
            raise ConfigError(
                f"ddim_steps={self.ddim_steps} outside [1, T={self.total_steps}]"
            )


def default_config(total_steps: int, **overrides) -> SamplerConfig:
    """Stock parameterization scaled from T: tuning window [0.6T, 0.92T],
    10 Adam iterations at lr 0.01, gradient tolerance 1e-3, re-initialization
    every 0.04T steps, perturbation just before the first three
    re-initializations."""
    if total_steps < 100:
        raise ConfigError(f"total_steps must be >= 100, got {total_steps}")
    t1 = round(0.92 * total_steps)
    interval = round(0.04 * total_steps)
    cfg = SamplerConfig(
        total_steps=total_steps,
        t1=t1,
        t2=round(0.6 * total_steps),
        reinit_interval=interval,
        perturb_steps=tuple(t1 - interval * k + 1 for k in range(3)),
        ddim_steps=min(250, total_steps),
    )
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


@dataclass(frozen=True)
class TraceRecord:
    timestep: int
    iterations: int
    tau_logit: float
    tau: float
    score: float
    perturbed: bool
    masked_fraction: float
    # in-memory only; not part of the trace file format
    reinitialized: bool = False
    last_gradient: float = 0.0


@dataclass
class TuningState:
    """Per-sample optimizer state carried along the chain."""

    tau_logit: float = 0.0
    iterations_used: int = 0
    last_gradient: float = 0.0
    adam_m: float = 0.0
    adam_v: float = 0.0
    adam_count: int = 0
    trace: list[TraceRecord] = field(default_factory=list)

    def reset(self) -> None:
        self.tau_logit = 0.0
        self.adam_m = 0.0
        self.adam_v = 0.0
        self.adam_count = 0


def fd_gradient(objective, x: float, fd_step: float) -> float:
    """Central-difference derivative (f(x+h) - f(x-h)) / 2h."""
    if fd_step <= 0:
        raise ConfigError(f"fd_step must be > 0, got {fd_step}")
    f_hi = objective(x + fd_step)
    f_lo = objective(x - fd_step)
    if not (math.isfinite(f_hi) and math.isfinite(f_lo)):
        raise NumericalError(
            f"objective non-finite near x={x} (f(x+h)={f_hi}, f(x-h)={f_lo})"
        )
    return (f_hi - f_lo) / (2.0 * fd_step)


@dataclass
class DescentStep:
    x: float
    gradient: float
    value: float  # midpoint estimate (f(x+h)+f(x-h))/2


def adam_descent(
    objective,
    x0: float = 0.0,
    lr: float = 0.01,
    max_iters: int = 10,
    grad_tol: float = 0.001,
    fd_step: float = 0.01,
) -> tuple[float, list[DescentStep]]:
    """Scalar Adam descent driven by central-difference gradients.

    Each iteration evaluates the gradient first and stops *before* updating
    when its magnitude is already below ``grad_tol``, so a converged point is
    left untouched. Returns the final point and the per-iteration history.
    """
    x = float(x0)
    m = v = 0.0
    count = 0
    history: list[DescentStep] = []
    for _ in range(max_iters):
        f_hi = objective(x + fd_step)
        f_lo = objective(x - fd_step)
        if not (math.isfinite(f_hi) and math.isfinite(f_lo)):
            raise NumericalError(f"objective non-finite near x={x}")
        g = (f_hi - f_lo) / (2.0 * fd_step)
        history.append(DescentStep(x=x, gradient=g, value=0.5 * (f_hi + f_lo)))
        if abs(g) < grad_tol:
            break
        count += 1
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
        m_hat = m / (1.0 - ADAM_BETA1 ** count)
        v_hat = v / (1.0 - ADAM_BETA2 ** count)
        x -= lr * m_hat / (math.sqrt(v_hat) + ADAM_EPS)
    return x, history


def _score_objective(x_t: np.ndarray, t: int, bank: MemoryBank, model: Denoiser,
                     schedule: NoiseSchedule, config: SamplerConfig):
    """Batched anomaly objective: rows of x_t denoised at per-sample
    temperatures, inverted to clean-image predictions, clamped like the bank
    augmentation inputs, and scored against the bank."""
    resolutions = config.modulated_resolutions or model.config.attention_resolutions

    def objective(logits: np.ndarray, rows: np.ndarray) -> np.ndarray:
        taus = temperature_from_logit(logits, config.gamma)
        tau_map = resolve_tau_map({int(r): taus for r in resolutions}, model)
        x_sel = x_t[rows]
        eps = predict_eps(model, x_sel, t, tau_map, max_batch=config.max_batch)
        x0_hat = np.clip(predict_x0(x_sel, eps, t, schedule), -AUGMENT_CLAMP, AUGMENT_CLAMP)
        scores, _, _ = score_batch(bank, x0_hat, model, t, max_batch=config.max_batch)
        return scores

    return objective


def optimize_tau(
    x_t: np.ndarray,
    t: int,
    states: list[TuningState],
    bank: MemoryBank | None,
    model: Denoiser | None,
    schedule: NoiseSchedule | None,
    config: SamplerConfig,
    objective=None,
) -> list[TuningState]:
    """Tune each sample's temperature logit at timestep t (in place).

    Re-initializes logits and Adam moments first when (t1 - t) is a multiple
    of the re-initialization interval. Then runs up to ``opt_iters``
    synchronized Adam iterations per sample; a sample whose gradient
    magnitude falls below ``grad_tol`` stops immediately, before the update.
    ``objective(logits, rows) -> scores`` may be injected for testing;
    by default it is the memory-bank score of the clean-image prediction.
    """
    if not (config.t1 >= t > config.t2):
        raise ConfigError(f"t={t} outside tuning window ({config.t2}, {config.t1}]")
    if objective is None:
        objective = _score_objective(x_t, t, bank, model, schedule, config)

    if (config.t1 - t) % config.reinit_interval == 0:
        for st in states:
            st.reset()

    n = len(states)
    logits = np.array([st.tau_logit for st in states], dtype=np.float64)
    m = np.array([st.adam_m for st in states], dtype=np.float64)
    v = np.array([st.adam_v for st in states], dtype=np.float64)
    counts = np.array([st.adam_count for st in states], dtype=np.int64)
    iters = np.zeros(n, dtype=np.int64)
    last_g = np.array([st.last_gradient for st in states], dtype=np.float64)
    active = np.ones(n, dtype=bool)
    h = config.fd_step

    for _ in range(config.opt_iters):
        if not active.any():
            break
        rows = np.nonzero(active)[0]
        # one batched call for both central-difference sides
        both = objective(
            np.concatenate([logits[rows] + h, logits[rows] - h]),
            np.concatenate([rows, rows]),
        )
        f_hi, f_lo = both[: len(rows)], both[len(rows):]
        if not np.isfinite(f_hi).all() or not np.isfinite(f_lo).all():
            raise NumericalError(f"anomaly objective non-finite at timestep {t}")
        g = (f_hi - f_lo) / (2.0 * h)
        iters[rows] += 1
        last_g[rows] = g
        stopped = np.abs(g) < config.grad_tol
        upd = rows[~stopped]
        if upd.size:
            gu = g[~stopped]
            counts[upd] += 1
            m[upd] = ADAM_BETA1 * m[upd] + (1.0 - ADAM_BETA1) * gu
            v[upd] = ADAM_BETA2 * v[upd] + (1.0 - ADAM_BETA2) * gu * gu
            m_hat = m[upd] / (1.0 - ADAM_BETA1 ** counts[upd])
            v_hat = v[upd] / (1.0 - ADAM_BETA2 ** counts[upd])
            logits[upd] -= config.opt_lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        active[rows[stopped]] = False

    for i, st in enumerate(states):
        st.tau_logit = float(logits[i])
        st.adam_m = float(m[i])
        st.adam_v = float(v[i])
        st.adam_count = int(counts[i])
        st.iterations_used = int(iters[i])
        st.last_gradient = float(last_g[i])
    return states


def masked_perturb(x_next: np.ndarray, heat: np.ndarray, beta: float, seed) -> np.ndarray:
    """Replace pixels whose heatmap value exceeds beta with fresh standard
    normal noise; pixels at or below the threshold are returned bit-identical.

    ``heat`` is (H, W) or (B, H, W) matching x_next's spatial shape; ``seed``
    is anything ``numpy.random.default_rng`` accepts.
    """
    heat = np.asarray(heat)
    if heat.ndim == 2:
        heat = np.broadcast_to(heat, (x_next.shape[0],) + heat.shape)
    if heat.shape[-2:] != x_next.shape[-2:]:
        raise ConfigError(
            f"heatmap spatial shape {heat.shape[-2:]} != image {x_next.shape[-2:]}"
        )
    mask = heat > beta
    zeta = np.random.default_rng(seed).standard_normal(x_next.shape).astype(x_next.dtype)
    return np.where(mask[:, None, :, :], zeta, x_next)


@dataclass
class SampleResult:
    images: np.ndarray
    states: list[TuningState]


def map_perturb_steps(config: SamplerConfig, visited: np.ndarray) -> dict[int, list[int]]:
    """Resolve each requested perturbation step to the nearest visited
    tuning-window timestep at or below it; each resolved timestep perturbs
    once (a collision satisfies all of its requests in one event)."""
    window = [int(t) for t in visited if config.t1 >= t > config.t2]
    mapping: dict[int, list[int]] = {}
    for ell in config.perturb_steps:
        candidates = [t for t in window if t <= ell]
        if not candidates:
            continue
        hit = max(candidates)
        mapping.setdefault(hit, []).append(int(ell))
    return mapping


def sample(
    model: Denoiser,
    bank: MemoryBank | None,
    schedule: NoiseSchedule,
    config: SamplerConfig,
    count: int,
    seed: int | None = None,
    progress=None,
) -> SampleResult:
    """Run the full three-stage chain for ``count`` samples.

    Initial noise is drawn per sample from seed (seed, index), so runs with
    different tuning settings but the same seed share their starting points.
    Everything downstream is deterministic: DDIM is noise-free, the
    finite-difference objective is deterministic, and perturbation noise is
    seed-derived per (sample, timestep).
    """
    config.validate()
    if schedule.total_steps != config.total_steps:
        raise ConfigError(
            f"schedule T={schedule.total_steps} != config T={config.total_steps}"
        )
    tuning_enabled = config.t1 > config.t2
    if tuning_enabled:
        if bank is None or not bank.calibrated:
            raise ConfigError("adaptive sampling requires a calibrated memory bank")
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    if seed is None:
        seed = config.seed

    size = model.config.image_size
    channels = model.config.in_channels
    x = np.stack(
        [
            np.random.default_rng([seed, i])
            .standard_normal((channels, size, size))
            .astype(np.float32)
            for i in range(count)
        ]
    )
    states = [TuningState() for _ in range(count)]
    visited = ddim_timesteps(config.total_steps, config.ddim_steps)
    perturb_at = map_perturb_steps(config, visited) if tuning_enabled else {}

    for step_idx, t in enumerate(visited):
        t = int(t)
        t_prev = int(visited[step_idx + 1]) if step_idx + 1 < len(visited) else -1
        if tuning_enabled and config.t1 >= t > config.t2:
            reinit = (config.t1 - t) % config.reinit_interval == 0
            optimize_tau(x, t, states, bank, model, schedule, config)
            logits = np.array([st.tau_logit for st in states], dtype=np.float64)
            taus = temperature_from_logit(logits, config.gamma)
            resolutions = config.modulated_resolutions or model.config.attention_resolutions
            tau_map = resolve_tau_map({int(r): taus for r in resolutions}, model)
            eps = predict_eps(model, x, t, tau_map, max_batch=config.max_batch)
            x_next = ddim_step(x, eps, t, t_prev, schedule)
            x0_hat = np.clip(predict_x0(x, eps, t, schedule), -AUGMENT_CLAMP, AUGMENT_CLAMP)
            scores, heat, _ = score_batch(bank, x0_hat, model, t, max_batch=config.max_batch)
            perturbed = t in perturb_at
            fractions = np.zeros(count)
            if perturbed:
                beta = bank.mask_threshold(config.beta_multiplier)
                for i in range(count):
                    fractions[i] = float((heat[i] > beta).mean())
                    x_next[i] = masked_perturb(
                        x_next[i: i + 1], heat[i: i + 1], beta, [seed, i, t]
                    )[0]
            for i, st in enumerate(states):
                st.trace.append(
                    TraceRecord(
                        timestep=t,
                        iterations=st.iterations_used,
                        tau_logit=st.tau_logit,
                        tau=float(taus[i]),
                        score=float(scores[i]),
                        perturbed=perturbed,
                        masked_fraction=float(fractions[i]),
                        reinitialized=reinit,
                        last_gradient=st.last_gradient,
                    )
                )
        else:
            eps = predict_eps(model, x, t, None, max_batch=config.max_batch)
            x_next = ddim_step(x, eps, t, t_prev, schedule)
        x = x_next
        if progress is not None:
            progress(step_idx + 1, len(visited), t)
    return SampleResult(images=x, states=states)


def baseline_sample(
    model: Denoiser,
    schedule: NoiseSchedule,
    ddim_steps: int,
    count: int,
    seed: int = 0,
    max_batch: int = 32,
) -> np.ndarray:
    """Plain deterministic DDIM chain at temperature 1.0 (the control arm);
    literally the adaptive sampler with an empty tuning window."""
    cfg = SamplerConfig(
        total_steps=schedule.total_steps,
        t1=0,
        t2=0,
        ddim_steps=ddim_steps,
        seed=seed,
        max_batch=max_batch,
    )
    return sample(model, None, schedule, cfg, count, seed).images


def fixed_tau_sample(
    model: Denoiser,
    schedule: NoiseSchedule,
    ddim_steps: int,
    tau_by_resolution: dict[int, float],
    count: int,
    seed: int = 0,
    max_batch: int = 32,
) -> np.ndarray:
    """Deterministic DDIM chain with a constant per-resolution temperature
    applied at every step (the manual-sweep mode). Initial noise matches
    ``sample``/``baseline_sample`` for equal seeds."""
    for res, tau in tau_by_resolution.items():
        if tau <= 0:
            raise ConfigError(f"sweep temperature for resolution {res} must be > 0, got {tau}")
    tau_map = resolve_tau_map(dict(tau_by_resolution), model)
    size = model.config.image_size
    x = np.stack(
        [
            np.random.default_rng([seed, i])
            .standard_normal((model.config.in_channels, size, size))
            .astype(np.float32)
            for i in range(count)
        ]
    )
    visited = ddim_timesteps(schedule.total_steps, ddim_steps)
    for step_idx, t in enumerate(visited):
        t = int(t)
        t_prev = int(visited[step_idx + 1]) if step_idx + 1 < len(visited) else -1
        eps = predict_eps(model, x, t, tau_map, max_batch=max_batch)
        x = ddim_step(x, eps, t, t_prev, schedule)
    return x


TRACE_HEADER = "timestep,iterations,tau_logit,tau,score,perturbed,masked_fraction"


def write_trace(path: str, state: TuningState) -> None:
    """One text record per tuned timestep, newline-delimited, with header."""
    lines = [TRACE_HEADER]
    for r in state.trace:
        lines.append(
            f"{r.timestep},{r.iterations},{r.tau_logit:.10g},{r.tau:.10g},"
            f"{r.score:.10g},{int(r.perturbed)},{r.masked_fraction:.6g}"
        )
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_trace(path: str) -> list[TraceRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or lines[0] != TRACE_HEADER:
        raise ConfigError(f"{path}: missing trace header")
    for ln in lines[1:]:
        t, it, tl, tau, s, p, mf = ln.split(",")
        records.append(
            TraceRecord(
                timestep=int(t),
                iterations=int(it),
                tau_logit=float(tl),
                tau=float(tau),
                score=float(s),
                perturbed=bool(int(p)),
                masked_fraction=float(mf),
            )
        )
    return records
