"""Hallucination detection and distribution metrics for generated batches.

A shapes image hallucinates when any of its three vertical columns contains
two or more connected components after binarization; the detector labels
4-connected components within each column independently and ignores
speckle below a minimum area. The distribution metric is the Frechet
distance between Gaussians fit to per-image pooled encoder features of the
generated and reference sets.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .anomaly import extract_patch_features
from .denoiser import Denoiser
from .errors import ConfigError, NumericalError, ShapeMismatchError
from .trainer import column_bounds

DEFAULT_MIN_AREA = 4  # pixels; filters binarization speckle
BINARIZE_THRESHOLD = 0.0  # in [-1, 1] space


@dataclass(frozen=True)
class HallucinationVerdict:
    is_hallucinated: bool
    column_counts: tuple[int, int, int]
    threshold: float


def detect_shape_hallucination(
    image: np.ndarray,
    threshold: float = BINARIZE_THRESHOLD,
    min_area: int = DEFAULT_MIN_AREA,
) -> HallucinationVerdict:
    """Count filled components per vertical column; two or more in any
    column is a hallucination. Accepts (H, W), (1, H, W) or (1, 1, H, W)."""
    img = np.asarray(image)
    img = img.reshape(img.shape[-2:]) if img.ndim in (3, 4) and all(
        s == 1 for s in img.shape[:-2]
    ) else img
    if img.ndim != 2:
        raise ShapeMismatchError(f"expected a single-channel image, got shape {image.shape}")
    if img.shape[0] != img.shape[1]:
        raise ShapeMismatchError(f"expected a square image, got shape {img.shape}")
    binary = img > threshold
    counts = []
    for lo, hi in column_bounds(img.shape[1]):
        labels, n = ndimage.label(binary[:, lo:hi])  # default structure: 4-connectivity
        if n == 0:
            counts.append(0)
            continue
        sizes = np.bincount(labels.ravel())[1:]
        counts.append(int((sizes >= min_area).sum()))
    return HallucinationVerdict(
        is_hallucinated=any(c >= 2 for c in counts),
        column_counts=tuple(counts),
        threshold=threshold,
    )


def _covariance(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = features.mean(axis=0)
    cov = np.cov(features, rowvar=False)
    cov = np.atleast_2d(cov)
    if not np.isfinite(cov).all():
        raise NumericalError("non-finite covariance in Frechet computation")
    n, d = features.shape
    trace = float(np.trace(cov))
    if n <= d and trace > 0:
        # not enough rows for a full-rank estimate: light diagonal loading
        cov = cov + (1e-3 * trace / d) * np.eye(d)
    return mu, cov


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_feature_distance(real_features: np.ndarray, gen_features: np.ndarray) -> float:
    """Frechet (Wasserstein-2) distance between Gaussians fit to the two
    feature sets: ||mu1-mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)).

    The cross term is evaluated through the symmetric PSD matrix
    sqrt(S1)^T S2 sqrt(S1); its tiny negative eigenvalues (within a
    scale-relative 1e-8) are clamped to zero, anything more negative is a
    numerical error. The result is clamped to be non-negative.
    """
    for name, feats in (("real", real_features), ("generated", gen_features)):
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise ConfigError(f"{name} feature matrix needs >= 2 rows, got {feats.shape}")
    if real_features.shape[1] != gen_features.shape[1]:
        raise ShapeMismatchError(
            f"feature dims differ: {real_features.shape[1]} vs {gen_features.shape[1]}"
        )
    mu1, cov1 = _covariance(real_features.astype(np.float64))
    mu2, cov2 = _covariance(gen_features.astype(np.float64))
    root1 = _psd_sqrt(cov1)
    inner = root1 @ cov2 @ root1
    vals = np.linalg.eigvalsh(inner)
    tol = 1e-8 * max(1.0, float(vals[-1]) if vals.size else 1.0)
    if vals.size and vals[0] < -tol:
        raise NumericalError(f"cross-covariance eigenvalue {vals[0]:.3e} below -{tol:.1e}")
    cross = float(np.sqrt(np.clip(vals, 0.0, None)).sum())
    diff = mu1 - mu2
    fd = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * cross)
    return max(fd, 0.0)


@dataclass(frozen=True)
class MetricsReport:
    label: str
    config_hash: str
    sample_count: int
    hallucination_rate: float
    frechet_distance: float

    def to_json_line(self) -> str:
        return json.dumps(asdict(self))


def pooled_image_features(images: np.ndarray, model: Denoiser, t: int = 0) -> np.ndarray:
    """One feature row per image: patch features averaged over locations."""
    return extract_patch_features(images, model, t).mean(axis=1)


def evaluate_arm(
    images: np.ndarray,
    real_reference: np.ndarray,
    model: Denoiser,
    label: str,
    config_hash: str = "",
) -> MetricsReport:
    """Hallucination rate of ``images`` plus the Frechet distance between
    their pooled encoder features and the reference set's."""
    if images.shape[0] == 0 or real_reference.shape[0] == 0:
        raise ConfigError("both image sets must be nonempty")
    verdicts = [detect_shape_hallucination(img) for img in images]
    rate = float(np.mean([v.is_hallucinated for v in verdicts]))
    gen_feats = pooled_image_features(images, model)
    ref_feats = pooled_image_features(real_reference, model)
    fd = frechet_feature_distance(ref_feats, gen_feats)
    return MetricsReport(
        label=label,
        config_hash=config_hash,
        sample_count=images.shape[0],
        hallucination_rate=rate,
        frechet_distance=fd,
    )


RESULTS_CSV_HEADER = "label,config_hash,n,hal_rate,frechet"


def append_report_csv(path: str, report: MetricsReport) -> None:
    """Append one row to the results CSV, writing the header on creation."""
    import os

    fresh = not os.path.exists(path)
    with open(path, "a", encoding="utf-8") as f:
        if fresh:
            f.write(RESULTS_CSV_HEADER + "\n")
        f.write(
            f"{report.label},{report.config_hash},{report.sample_count},"
            f"{report.hallucination_rate:.6g},{report.frechet_distance:.6g}\n"
        )
