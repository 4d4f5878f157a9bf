"""Synthetic shapes dataset and noise-prediction training.

Images are binary (background -1, shape +1), split into three equal vertical
columns that hold, left to right, a triangle, a square, and a pentagon; each
shape appears independently with a fixed probability, with small jitter in
center and size so the distribution is nondegenerate. Shapes never cross
their column boundary.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .denoiser import Denoiser, DenoiserConfig, predict_eps
from .errors import ConfigError, NumericalError, TrainingError
from .schedule import NoiseSchedule, predict_x0

DATASET_MAGIC = b"AAMS"
DATASET_VERSION = 1

SHAPE_SIDES = (3, 4, 5)  # triangle, square, pentagon, left to right
AUGMENT_CLAMP = 1.5

# Shape geometry relative to the column width w: base circumradius, size
# jitter fraction, center jitter fraction. Max extent 0.1w + 0.3*1.2w < w/2,
# so shapes stay strictly inside their column.
BASE_RADIUS_FRAC = 0.30
SIZE_JITTER = 0.2
CENTER_JITTER_FRAC = 0.1


@dataclass(frozen=True)
class ShapesDatasetSpec:
    count: int
    image_size: int = 32
    shape_probability: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.count < 1:
            raise ConfigError(f"count must be >= 1, got {self.count}")
        s = self.image_size
        if s < 8 or (s & (s - 1)) != 0:
            raise ConfigError(f"image_size must be a power of two >= 8, got {s}")
        if s % 4 != 0:
            raise ConfigError(f"image_size must be divisible by 4, got {s}")
        if not (0.0 <= self.shape_probability <= 1.0):
            raise ConfigError(
                f"shape_probability must be in [0, 1], got {self.shape_probability}"
            )


def column_bounds(image_size: int) -> list[tuple[int, int]]:
    """Pixel-column ranges [lo, hi) of the three vertical regions."""
    w = image_size
    return [(0, w // 3), (w // 3, 2 * w // 3), (2 * w // 3, w)]


def _polygon_mask(xs, ys, cx: float, cy: float, radius: float, sides: int) -> np.ndarray:
    # Regular polygon, apex up (square is axis-aligned via the 45-degree start).
    start = -math.pi / 4 if sides == 4 else -math.pi / 2
    angles = start + 2.0 * math.pi * np.arange(sides) / sides
    vx = cx + radius * np.cos(angles)
    vy = cy + radius * np.sin(angles)
    ex, ey = np.roll(vx, -1) - vx, np.roll(vy, -1) - vy
    cross = (
        ex[:, None, None] * (ys[None] - vy[:, None, None])
        - ey[:, None, None] * (xs[None] - vx[:, None, None])
    )
    return np.all(cross >= 0, axis=0) | np.all(cross <= 0, axis=0)


def shape_draws(rng: np.random.Generator, image_size: int, p: float) -> list[tuple]:
    """Jittered shape geometry for one image: (column index, sides, cx, cy,
    circumradius) per present shape. Draw order is part of the determinism
    contract."""
    draws = []
    for column, ((lo, hi), sides) in enumerate(zip(column_bounds(image_size), SHAPE_SIDES)):
        if rng.random() >= p:
            continue
        w = hi - lo
        jx, jy = rng.uniform(-1.0, 1.0, size=2) * CENTER_JITTER_FRAC * w
        radius = BASE_RADIUS_FRAC * w * (1.0 + rng.uniform(-1.0, 1.0) * SIZE_JITTER)
        cx = (lo + hi) / 2.0 + jx
        cy = image_size / 2.0 + jy
        draws.append((column, sides, cx, cy, radius))
    return draws


def _render_image(rng: np.random.Generator, image_size: int, p: float) -> np.ndarray:
    xs, ys = np.meshgrid(
        np.arange(image_size, dtype=np.float64) + 0.5,
        np.arange(image_size, dtype=np.float64) + 0.5,
        indexing="xy",
    )
    img = np.zeros((image_size, image_size), dtype=np.float32)
    bounds = column_bounds(image_size)
    for column, sides, cx, cy, radius in shape_draws(rng, image_size, p):
        lo, hi = bounds[column]
        mask = _polygon_mask(xs, ys, cx, cy, radius, sides)
        if not mask.any():
            # tiny polygons (small image sizes) may miss every pixel center;
            # a present shape still has to occupy its column
            ix = int(np.clip(round(cx - 0.5), lo, hi - 1))
            iy = int(np.clip(round(cy - 0.5), 0, image_size - 1))
            mask[iy, ix] = True
        img[mask] = 1.0
    return img


def generate_shapes_dataset(spec: ShapesDatasetSpec) -> np.ndarray:
    """Render the dataset as a (count, 1, S, S) float32 array in {-1, +1}.

    Deterministic per (seed, image index), so generation could be sharded
    without changing the result.
    """
    spec.validate()
    images = np.empty((spec.count, 1, spec.image_size, spec.image_size), dtype=np.float32)
    for i in range(spec.count):
        rng = np.random.default_rng([spec.seed, i])
        images[i, 0] = _render_image(rng, spec.image_size, spec.shape_probability)
    return images * 2.0 - 1.0


def save_dataset(path: str, images: np.ndarray, spec: ShapesDatasetSpec) -> None:
    """Cache file: magic/version/count/size header + one byte per pixel
    (0 or 255), with a JSON sidecar recording the generating spec."""
    packed = ((images > 0).astype(np.uint8) * 255).tobytes()
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(DATASET_MAGIC)
            f.write(np.uint32(DATASET_VERSION).tobytes())
            f.write(np.uint32(images.shape[0]).tobytes())
            f.write(np.uint32(images.shape[-1]).tobytes())
            f.write(packed)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    with open(path + ".json", "w", encoding="utf-8") as f:
        json.dump(asdict(spec), f, indent=2)


def load_dataset(path: str) -> tuple[np.ndarray, ShapesDatasetSpec]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != DATASET_MAGIC:
        raise ConfigError(f"{path}: not a dataset cache (bad magic)")
    count = int(np.frombuffer(blob, "<u4", count=1, offset=8)[0])
    size = int(np.frombuffer(blob, "<u4", count=1, offset=12)[0])
    pixels = np.frombuffer(blob, np.uint8, count=count * size * size, offset=16)
    images = pixels.astype(np.float32).reshape(count, 1, size, size) / 127.5 - 1.0
    with open(path + ".json", "r", encoding="utf-8") as f:
        spec = ShapesDatasetSpec(**json.load(f))
    return images, spec


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int = 32
    learning_rate: float = 2e-4
    total_steps: int = 1000  # diffusion T; must match the sampling schedule
    ema_decay: float = 0.999  # 0 disables
    grad_clip: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not (0.0 <= self.ema_decay < 1.0):
            raise ConfigError(f"ema_decay must be in [0, 1), got {self.ema_decay}")


@dataclass
class TrainResult:
    model: Denoiser
    losses: np.ndarray


def train(
    dataset: np.ndarray,
    config: TrainConfig,
    schedule: NoiseSchedule,
    model_config: DenoiserConfig | None = None,
) -> TrainResult:
    """Noise-prediction MSE training with gradient clipping and an EMA of the
    weights (warmup-adjusted decay); the returned model carries the EMA
    weights when EMA is enabled."""
    config.validate()
    if dataset.shape[0] == 0:
        raise ConfigError("dataset is empty")
    if schedule.total_steps != config.total_steps:
        raise ConfigError(
            f"schedule has T={schedule.total_steps} but config.total_steps={config.total_steps}"
        )
    if model_config is None:
        model_config = DenoiserConfig(image_size=dataset.shape[-1])

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = Denoiser(model_config)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    sqrt_ab = np.sqrt(schedule.alpha_bars).astype(np.float32)
    sqrt_1mab = np.sqrt(1.0 - schedule.alpha_bars).astype(np.float32)
    data = torch.from_numpy(np.ascontiguousarray(dataset, dtype=np.float32))

    ema = None
    if config.ema_decay > 0:
        ema = {k: v.detach().clone() for k, v in model.state_dict().items()}

    losses = np.empty(config.steps, dtype=np.float64)
    for step in range(config.steps):
        idx = rng.integers(0, data.shape[0], size=config.batch_size)
        t = rng.integers(0, schedule.total_steps, size=config.batch_size)
        x0 = data[idx]
        eps = torch.randn_like(x0)
        a = torch.from_numpy(sqrt_ab[t]).view(-1, 1, 1, 1)
        b = torch.from_numpy(sqrt_1mab[t]).view(-1, 1, 1, 1)
        x_t = a * x0 + b * eps
        try:
            pred = model(x_t, torch.from_numpy(t))
            loss = torch.nn.functional.mse_loss(pred, eps)
        except NumericalError as exc:
            raise TrainingError(f"diverged at step {step}: {exc}") from exc
        if not torch.isfinite(loss):
            raise TrainingError(f"loss diverged (non-finite) at step {step}")
        optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        optimizer.step()
        losses[step] = loss.item()
        if ema is not None:
            # shadow += (1-d)(w - shadow): exact no-op when weights are unchanged
            decay = min(config.ema_decay, (1.0 + step) / (10.0 + step))
            with torch.no_grad():
                for k, v in model.state_dict().items():
                    ema[k] += (1.0 - decay) * (v - ema[k])

    if ema is not None:
        model.load_state_dict(ema)
    model.eval()
    return TrainResult(model=model, losses=losses)


def augment_block(
    dataset: np.ndarray,
    schedule: NoiseSchedule,
    model,
    t: int,
    seed_key: tuple[int, ...],
    max_batch: int = 32,
) -> np.ndarray:
    """Clean-image predictions recovered after noising ``dataset`` to step t:
    one prediction per source image, clamped to [-AUGMENT_CLAMP, AUGMENT_CLAMP].

    ``model`` is either a Denoiser or a callable (x_t, t) -> eps over numpy
    batches; the noise draw is determined by ``seed_key``.
    """
    if not (0 <= t < schedule.total_steps):
        raise ConfigError(f"timestep {t} outside [0, {schedule.total_steps})")
    if isinstance(model, Denoiser):
        eps_fn = lambda x, tt: predict_eps(model, x, tt, max_batch=max_batch)
    else:
        eps_fn = model
    rng = np.random.default_rng(list(seed_key))
    eps = rng.standard_normal(dataset.shape).astype(np.float32)
    a = math.sqrt(schedule.alpha_bar(t))
    b = math.sqrt(1.0 - schedule.alpha_bar(t))
    x_t = a * dataset.astype(np.float32) + b * eps
    x0_hat = predict_x0(x_t, eps_fn(x_t, int(t)), int(t), schedule)
    return np.clip(x0_hat, -AUGMENT_CLAMP, AUGMENT_CLAMP)


def make_noise_augmented_set(
    dataset: np.ndarray,
    schedule: NoiseSchedule,
    model,
    t_grid: list[int],
    per_image: int,
    seed: int = 0,
    max_batch: int = 32,
) -> np.ndarray:
    """Clean images plus their clean-image predictions recovered from noised
    copies at each grid timestep (the inputs the anomaly model will see at
    inference).

    Layout: all originals first, then one block per (t, draw).
    """
    if per_image < 0:
        raise ConfigError(f"per_image must be >= 0, got {per_image}")
    if per_image > 0 and len(t_grid) == 0:
        raise ConfigError("t_grid is empty but per_image > 0 requests augmentation")
    parts = [dataset.astype(np.float32).copy()]
    for t in t_grid:
        for j in range(per_image):
            parts.append(
                augment_block(dataset, schedule, model, int(t), (seed, int(t), j), max_batch)
            )
    return np.concatenate(parts)
