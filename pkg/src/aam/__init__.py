"""Diffusion sampling with adaptive attention temperature.

A small DDPM/DDIM stack whose self-attention temperature is optimized at
inference time against a memory-bank anomaly score, with masked perturbation
of anomalous regions, to reduce hallucinated content in unconditional
generation. Verified end to end on a synthetic shapes dataset with an
automated hallucination detector.
"""

from .schedule import NoiseSchedule, build_schedule, ddim_step, forward_diffuse, predict_x0
from .denoiser import (
    Denoiser,
    DenoiserConfig,
    TemperatureControl,
    attention_forward,
    denoise,
    load_checkpoint,
    save_checkpoint,
    temperature_from_logit,
)
from .trainer import (
    ShapesDatasetSpec,
    TrainConfig,
    generate_shapes_dataset,
    make_noise_augmented_set,
    train,
)
from .anomaly import (
    AnomalyResult,
    MemoryBank,
    build_memory_bank,
    calibrate,
    coreset_subsample,
    extract_patch_features,
    load_bank,
    save_bank,
    score,
)
from .sampler import (
    SamplerConfig,
    TuningState,
    baseline_sample,
    default_config,
    fd_gradient,
    masked_perturb,
    optimize_tau,
    sample,
)
from .evaluate import (
    HallucinationVerdict,
    MetricsReport,
    detect_shape_hallucination,
    evaluate_arm,
    frechet_feature_distance,
)

__version__ = "0.1.0"
