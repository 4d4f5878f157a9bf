"""Training-free anomaly scoring against a memory bank of patch features.

Features come from the denoiser's own encoder taps: each tap is smoothed
with a 3x3 local average, all taps are aligned onto the coarsest tap grid,
and the channel dimensions are concatenated, giving one feature row per
coarse-grid cell. The bank holds a greedy farthest-point coreset of
in-distribution rows; a query location's anomaly is its L2 distance to the
nearest bank row, the image score is the maximum over locations, and the
heatmap is the bilinear upsampling of the location grid to image resolution.

Nearest-neighbor search is an exact linear scan: a fast quadratic-expansion
pass proposes candidates, whose distances are then recomputed in exact
difference form, so results match a brute-force scan bit for bit.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
import torch

from .denoiser import Denoiser
from .errors import ConfigError, NumericalError
from .schedule import NoiseSchedule
from . import trainer

BANK_MAGIC = b"AAMB"
BANK_VERSION = 1
DUPLICATE_EPS = 1e-9


@dataclass
class MemoryBank:
    """Coreset rows plus calibration statistics of in-distribution scores."""

    features: np.ndarray  # (rows, D) float32, the coreset rows themselves
    coreset_indices: np.ndarray  # original row index of each kept row
    descriptor: dict = field(default_factory=dict)
    mu_s: float = 0.0
    sigma_s: float = 0.0
    calibration_count: int = 0

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def calibrated(self) -> bool:
        return self.calibration_count > 0

    def mask_threshold(self, multiplier: float = 1.5) -> float:
        """Heatmap cutoff mu + multiplier*sigma from the calibration stats."""
        if not self.calibrated:
            raise ConfigError("memory bank is not calibrated (no mu_s/sigma_s)")
        return self.mu_s + multiplier * self.sigma_s


@dataclass(frozen=True)
class AnomalyResult:
    """Image anomaly score, its location grid, and the upsampled heatmap.

    ``score`` is the maximum of ``grid`` (asserted before upsampling);
    ``heatmap`` is the bilinear upsampling of ``grid`` to image resolution.
    """

    score: float
    heatmap: np.ndarray
    grid: np.ndarray


def patch_grid_shape(model: Denoiser) -> tuple[int, int]:
    """Spatial shape of the coarsest tapped feature map (one row per cell)."""
    res = min(model.encoder_plan[i][1] for i in model.config.feature_tap_indices)
    return (res, res)


def feature_dim(model: Denoiser) -> int:
    return sum(model.encoder_plan[i][2] for i in model.config.feature_tap_indices)


def extract_patch_features(
    images: np.ndarray,
    model: Denoiser,
    t: int,
    max_batch: int = 32,
) -> np.ndarray:
    """Per-location features, shape (batch, cells, D) with cells in raster
    order over the coarsest tap grid and D the concatenated tap channels."""
    gh, gw = patch_grid_shape(model)
    parts = []
    with torch.no_grad():
        for lo in range(0, images.shape[0], max_batch):
            chunk = torch.from_numpy(
                np.ascontiguousarray(images[lo:lo + max_batch], dtype=np.float32)
            )
            taps = model.encoder_features(chunk, t)
            aligned = []
            for tap in taps:
                smooth = torch.nn.functional.avg_pool2d(
                    tap, 3, stride=1, padding=1, count_include_pad=False
                )
                if smooth.shape[-2:] != (gh, gw):
                    smooth = torch.nn.functional.adaptive_avg_pool2d(smooth, (gh, gw))
                aligned.append(smooth)
            feats = torch.cat(aligned, dim=1)  # (b, D, gh, gw)
            feats = feats.reshape(feats.shape[0], feats.shape[1], gh * gw).transpose(1, 2)
            parts.append(feats.numpy())
    out = np.concatenate(parts)
    if not np.isfinite(out).all():
        raise NumericalError("non-finite patch features (untrained or corrupt weights?)")
    return out


def _greedy_kcenter(
    features: np.ndarray, k: int, start: int, stop_below: float | None = None
) -> np.ndarray:
    """Farthest-point selection in float64; optionally stops early once every
    remaining row is within ``stop_below`` (L2) of the selection."""
    x = features.astype(np.float64, copy=False)
    selected = [start]
    diff = x - x[start]
    min_d2 = np.einsum("ij,ij->i", diff, diff)
    while len(selected) < k:
        nxt = int(np.argmax(min_d2))
        if stop_below is not None and min_d2[nxt] <= stop_below * stop_below:
            break
        selected.append(nxt)
        diff = x - x[nxt]
        d2 = np.einsum("ij,ij->i", diff, diff)
        np.minimum(min_d2, d2, out=min_d2)
    return np.asarray(selected, dtype=np.int64)


def coreset_subsample(features: np.ndarray, fraction: float, seed: int = 0) -> np.ndarray:
    """Greedy farthest-point subsampling to ceil(fraction*n) rows, starting
    from a seeded random row; returns indices in selection order."""
    if features.shape[0] == 0:
        raise ConfigError("features matrix is empty")
    if not (0.0 < fraction <= 1.0):
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    n = features.shape[0]
    k = math.ceil(fraction * n)
    start = int(np.random.default_rng(seed).integers(n))
    return _greedy_kcenter(features, k, start)


def build_memory_bank(
    features: np.ndarray,
    fraction: float,
    seed: int = 0,
    descriptor: dict | None = None,
) -> MemoryBank:
    """Coreset-subsample ``features`` into an uncalibrated bank. Selection
    stops early when only (near-)duplicates of selected rows remain, so bank
    rows are unique."""
    if features.shape[0] == 0:
        raise ConfigError("features matrix is empty")
    if not (0.0 < fraction <= 1.0):
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    n = features.shape[0]
    k = math.ceil(fraction * n)
    start = int(np.random.default_rng(seed).integers(n))
    idx = _greedy_kcenter(features, k, start, stop_below=DUPLICATE_EPS)
    return MemoryBank(
        features=features[idx].astype(np.float32),
        coreset_indices=idx,
        descriptor=dict(descriptor or {}),
    )


def nearest_distances(queries: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Exact L2 distance from each query to its nearest row.

    Candidates are found with the fast ||q||^2+||r||^2-2qr expansion, then
    re-evaluated in exact difference form; the margin is orders of magnitude
    above float64 expansion error, so the returned distances (and their
    minima) are identical to a full difference-form scan.
    """
    if queries.shape[1] != rows.shape[1]:
        raise ConfigError(
            f"query dim {queries.shape[1]} != bank dim {rows.shape[1]}"
        )
    q = queries.astype(np.float64, copy=False)
    r = rows.astype(np.float64, copy=False)
    r_sq = np.einsum("ij,ij->i", r, r)
    out = np.empty(q.shape[0], dtype=np.float64)
    chunk = max(1, int(4e6) // max(1, r.shape[0]))
    for lo in range(0, q.shape[0], chunk):
        qc = q[lo:lo + chunk]
        d2 = np.einsum("ij,ij->i", qc, qc)[:, None] + r_sq[None, :] - 2.0 * (qc @ r.T)
        best = d2.min(axis=1)
        margin = 1e-6 * (1.0 + np.abs(best))
        qi, ri = np.nonzero(d2 <= (best + margin)[:, None])
        # plain per-row square-and-sum, matching a brute-force scan bit for bit
        exact = ((qc[qi] - r[ri]) ** 2).sum(axis=1)
        refined = np.full(qc.shape[0], np.inf)
        np.minimum.at(refined, qi, exact)
        out[lo:lo + chunk] = refined
    return np.sqrt(out)


def score_batch(
    bank: MemoryBank,
    images: np.ndarray,
    model: Denoiser,
    t: int,
    max_batch: int = 32,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Anomaly scores for a batch: (scores (B,), heatmaps (B,H,W),
    grids (B,gh,gw)). Deterministic; scores are grid maxima."""
    if bank.features.shape[0] == 0:
        raise ConfigError("memory bank is empty")
    gh, gw = patch_grid_shape(model)
    feats = extract_patch_features(images, model, t, max_batch=max_batch)
    b = feats.shape[0]
    dists = nearest_distances(feats.reshape(b * gh * gw, -1), bank.features)
    grids = dists.reshape(b, gh, gw)
    scores = grids.reshape(b, -1).max(axis=1)
    size = images.shape[-1]
    heat = torch.nn.functional.interpolate(
        torch.from_numpy(grids[:, None]), size=(size, size),
        mode="bilinear", align_corners=False,
    )[:, 0].numpy()
    return scores, heat, grids


def score(bank: MemoryBank, image: np.ndarray, model: Denoiser, t: int) -> AnomalyResult:
    """Score a single image (accepts (C,H,W) or (1,C,H,W))."""
    batch = image[None] if image.ndim == 3 else image
    scores, heat, grids = score_batch(bank, batch, model, t)
    return AnomalyResult(score=float(scores[0]), heatmap=heat[0], grid=grids[0])


def calibration_stats(scores: np.ndarray) -> tuple[float, float]:
    """Sample mean and population (divisor n) standard deviation."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ConfigError("no scores to calibrate from")
    return float(s.mean()), float(s.std())


def calibrate(
    bank: MemoryBank,
    holdout: np.ndarray,
    model: Denoiser,
    schedule: NoiseSchedule,
    t_grid: list[int],
    seed: int = 0,
    max_batch: int = 32,
) -> MemoryBank:
    """Set mu_s/sigma_s from scores of re-augmented holdout images (one
    clean-image prediction per holdout image per grid timestep, scored at
    that timestep). The holdout must be disjoint from the bank's sources."""
    if holdout.shape[0] == 0:
        raise ConfigError("calibration holdout is empty")
    if len(t_grid) == 0:
        raise ConfigError("calibration t_grid is empty")
    all_scores = []
    for t in t_grid:
        block = trainer.augment_block(
            holdout, schedule, model, int(t), (seed, int(t), 0), max_batch
        )
        scores, _, _ = score_batch(bank, block, model, int(t), max_batch=max_batch)
        all_scores.append(scores)
    mu, sigma = calibration_stats(np.concatenate(all_scores))
    bank.mu_s = mu
    bank.sigma_s = sigma
    bank.calibration_count = sum(len(s) for s in all_scores)
    return bank


def collect_bank_features(
    images: np.ndarray,
    model: Denoiser,
    schedule: NoiseSchedule,
    t_grid: list[int],
    per_image: int = 1,
    seed: int = 0,
    max_batch: int = 32,
) -> np.ndarray:
    """Stacked patch features of the clean images (extracted at t=0) and of
    their re-augmented predictions at each grid timestep (extracted at that
    timestep), as bank-building input."""
    gh, gw = patch_grid_shape(model)
    rows = [extract_patch_features(images, model, 0, max_batch).reshape(-1, feature_dim(model))]
    for t in t_grid:
        for j in range(per_image):
            block = trainer.augment_block(
                images, schedule, model, int(t), (seed, int(t), j), max_batch
            )
            feats = extract_patch_features(block, model, int(t), max_batch)
            rows.append(feats.reshape(-1, feature_dim(model)))
    return np.concatenate(rows)


def save_bank(bank: MemoryBank, path: str) -> None:
    """Versioned binary bank: magic, version, length-prefixed JSON descriptor
    (includes calibration count), D, row count, coreset indices, mu_s,
    sigma_s, then row-major little-endian float32 rows. Atomic write."""
    desc = dict(bank.descriptor)
    desc["calibration_count"] = bank.calibration_count
    desc_bytes = json.dumps(desc).encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(BANK_MAGIC)
            f.write(np.uint32(BANK_VERSION).tobytes())
            f.write(np.uint32(len(desc_bytes)).tobytes())
            f.write(desc_bytes)
            f.write(np.uint32(bank.dim).tobytes())
            f.write(np.uint32(bank.features.shape[0]).tobytes())
            f.write(bank.coreset_indices.astype("<i8").tobytes())
            f.write(np.float64(bank.mu_s).tobytes())
            f.write(np.float64(bank.sigma_s).tobytes())
            f.write(bank.features.astype("<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_bank(path: str) -> MemoryBank:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != BANK_MAGIC:
        raise ConfigError(f"{path}: not a memory bank file (bad magic)")
    version = int(np.frombuffer(blob, "<u4", count=1, offset=4)[0])
    if version != BANK_VERSION:
        raise ConfigError(f"{path}: unsupported bank version {version}")
    desc_len = int(np.frombuffer(blob, "<u4", count=1, offset=8)[0])
    offset = 12
    desc = json.loads(blob[offset:offset + desc_len].decode("utf-8"))
    offset += desc_len
    dim = int(np.frombuffer(blob, "<u4", count=1, offset=offset)[0])
    rows = int(np.frombuffer(blob, "<u4", count=1, offset=offset + 4)[0])
    offset += 8
    indices = np.frombuffer(blob, "<i8", count=rows, offset=offset).copy()
    offset += 8 * rows
    mu = float(np.frombuffer(blob, "<f8", count=1, offset=offset)[0])
    sigma = float(np.frombuffer(blob, "<f8", count=1, offset=offset + 8)[0])
    offset += 16
    features = np.frombuffer(blob, "<f4", count=rows * dim, offset=offset)
    offset += 4 * rows * dim
    if offset != len(blob):
        raise ConfigError(f"{path}: trailing bytes ({len(blob) - offset}) after rows")
    count = int(desc.pop("calibration_count", 0))
    return MemoryBank(
        features=features.copy().reshape(rows, dim),
        coreset_indices=indices,
        descriptor=desc,
        mu_s=mu,
        sigma_s=sigma,
        calibration_count=count,
    )
