"""Flat key=value run configuration.

The config file format is deliberately diff-friendly: one ``section.key =
value`` pair per line, ``#`` comments, no nesting. A run writes its fully
resolved configuration back in the same format next to its outputs, and that
snapshot is itself a valid config file, so any artifact directory can be
reproduced from the snapshot alone.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

from .denoiser import DenoiserConfig
from .errors import ConfigError
from .sampler import SamplerConfig, default_config
from .trainer import ShapesDatasetSpec, TrainConfig


@dataclass(frozen=True)
class BankConfig:
    source_images: int = 170  # dataset prefix used to build the bank
    holdout_images: int = 100  # following block, used only for calibration
    t_grid: tuple[int, ...] = ()  # empty: t_grid_size points spread over (t2, t1]
    t_grid_size: int = 5
    per_image: int = 1
    coreset_fraction: float = 0.1

    def validate(self) -> None:
        if self.source_images < 1:
            raise ConfigError(f"bank.source_images must be >= 1, got {self.source_images}")
        if self.holdout_images < 1:
            raise ConfigError(f"bank.holdout_images must be >= 1, got {self.holdout_images}")
        if self.t_grid_size < 1 and not self.t_grid:
            raise ConfigError("bank.t_grid_size must be >= 1 when bank.t_grid is empty")
        if not (0.0 < self.coreset_fraction <= 1.0):
            raise ConfigError(
                f"bank.coreset_fraction must be in (0, 1], got {self.coreset_fraction}"
            )
        if self.per_image < 0:
            raise ConfigError(f"bank.per_image must be >= 0, got {self.per_image}")


@dataclass(frozen=True)
class RunConfig:
    profile: str
    seed: int
    dataset: ShapesDatasetSpec
    train: TrainConfig
    sampler: SamplerConfig
    bank: BankConfig
    base_channels: int = 32
    temb_dim: int = 128
    feature_taps: tuple[int, ...] = (5, 8)
    sample_count: int = 20  # samples per arm
    sweep_taus: dict = field(default_factory=dict)  # resolution -> tau ladder

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(
            image_size=self.dataset.image_size,
            base_channels=self.base_channels,
            temb_dim=self.temb_dim,
            feature_tap_indices=self.feature_taps,
        )

    def bank_t_grid(self) -> tuple[int, ...]:
        """Explicit grid if configured, else evenly spread over the tuning
        window (inclusive of both ends)."""
        if self.bank.t_grid:
            return self.bank.t_grid
        lo, hi = self.sampler.t2, self.sampler.t1
        if hi <= lo:
            lo, hi = 0, self.sampler.total_steps - 1
        k = self.bank.t_grid_size
        if k == 1:
            return (hi,)
        step = (hi - lo) / (k - 1)
        return tuple(sorted({int(round(lo + i * step)) for i in range(k)}))

    def validate(self) -> None:
        self.dataset.validate()
        self.train.validate()
        self.sampler.validate()
        self.bank.validate()
        if self.sample_count < 1:
            raise ConfigError(f"sampler.count must be >= 1, got {self.sample_count}")
        if self.train.total_steps != self.sampler.total_steps:
            raise ConfigError(
                f"train.T={self.train.total_steps} must equal sampler.T="
                f"{self.sampler.total_steps}"
            )
        self.denoiser_config().validate()


def sampler_fingerprint(cfg: SamplerConfig) -> str:
    """Stable short hash of the sampler parameterization."""
    payload = json.dumps(asdict(cfg), sort_keys=True).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()[:12]


PROFILES = {
    "smoke": {
        "seed": "0",
        "dataset.count": "256",
        "dataset.image_size": "8",
        "dataset.shape_probability": "0.5",
        "train.steps": "200",
        "train.batch_size": "16",
        "train.learning_rate": "1e-3",
        "train.T": "100",
        "sampler.T": "100",
        "sampler.ddim_steps": "50",
        "sampler.count": "20",
        "sampler.max_batch": "32",
        "bank.source_images": "32",
        "bank.holdout_images": "16",
        "bank.t_grid_size": "3",
        "bank.per_image": "1",
        "bank.coreset_fraction": "0.25",
    },
    "desk": {
        "seed": "0",
        "dataset.count": "5000",
        "dataset.image_size": "32",
        "dataset.shape_probability": "0.5",
        "train.steps": "3000",
        "train.batch_size": "32",
        "train.learning_rate": "5e-4",
        "train.T": "1000",
        "sampler.T": "1000",
        "sampler.ddim_steps": "250",
        "sampler.count": "200",
        "sampler.max_batch": "50",
        "bank.source_images": "170",
        "bank.holdout_images": "100",
        "bank.t_grid_size": "5",
        "bank.per_image": "1",
        "bank.coreset_fraction": "0.1",
    },
}

_KNOWN_KEYS = {
    "profile", "seed",
    "dataset.count", "dataset.image_size", "dataset.shape_probability", "dataset.seed",
    "model.base_channels", "model.temb_dim", "model.feature_taps",
    "train.steps", "train.batch_size", "train.learning_rate", "train.T",
    "train.ema_decay", "train.grad_clip", "train.seed",
    "sampler.T", "sampler.T1", "sampler.T2", "sampler.N", "sampler.eta",
    "sampler.delta", "sampler.lambda", "sampler.L", "sampler.gamma",
    "sampler.beta_multiplier", "sampler.ddim_steps", "sampler.resolutions",
    "sampler.fd_step", "sampler.max_batch", "sampler.count",
    "bank.source_images", "bank.holdout_images", "bank.t_grid",
    "bank.t_grid_size", "bank.per_image", "bank.coreset_fraction",
}


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment, blank lines ignored."""
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def _to_int(key: str, value: str) -> int:
    try:
        return int(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected integer, got {value!r}") from exc


def _to_float(key: str, value: str) -> float:
    try:
        return float(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected number, got {value!r}") from exc


def _to_int_tuple(key: str, value: str) -> tuple[int, ...]:
    if not value:
        return ()
    return tuple(_to_int(key, part.strip()) for part in value.split(",") if part.strip())


def _to_float_tuple(key: str, value: str) -> tuple[float, ...]:
    if not value:
        return ()
    return tuple(_to_float(key, part.strip()) for part in value.split(",") if part.strip())


def build_run_config(pairs: dict[str, str]) -> RunConfig:
    """Resolve raw key/value pairs (already merged with profile defaults)
    into a validated RunConfig."""
    sweep = {}
    for key in pairs:
        if key.startswith("sweep.tau."):
            continue
        if key not in _KNOWN_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
    for key, value in pairs.items():
        if key.startswith("sweep.tau."):
            res = _to_int(key, key.rsplit(".", 1)[1])
            sweep[res] = _to_float_tuple(key, value)

    def get(key: str, default: str | None = None) -> str:
        if key in pairs:
            return pairs[key]
        if default is None:
            raise ConfigError(f"missing required config key {key!r}")
        return default

    seed = _to_int("seed", get("seed", "0"))
    dataset = ShapesDatasetSpec(
        count=_to_int("dataset.count", get("dataset.count")),
        image_size=_to_int("dataset.image_size", get("dataset.image_size", "32")),
        shape_probability=_to_float(
            "dataset.shape_probability", get("dataset.shape_probability", "0.5")
        ),
        seed=_to_int("dataset.seed", get("dataset.seed", str(seed))),
    )
    total_steps = _to_int("sampler.T", get("sampler.T", get("train.T", "1000")))
    train = TrainConfig(
        steps=_to_int("train.steps", get("train.steps")),
        batch_size=_to_int("train.batch_size", get("train.batch_size", "32")),
        learning_rate=_to_float("train.learning_rate", get("train.learning_rate", "2e-4")),
        total_steps=_to_int("train.T", get("train.T", str(total_steps))),
        ema_decay=_to_float("train.ema_decay", get("train.ema_decay", "0.999")),
        grad_clip=_to_float("train.grad_clip", get("train.grad_clip", "1.0")),
        seed=_to_int("train.seed", get("train.seed", str(seed))),
    )
    if total_steps >= 100:
        base = default_config(total_steps)
    else:
        # too short for the stock scaling; stage bounds must be explicit
        base = SamplerConfig(
            total_steps=total_steps, t1=0, t2=0, ddim_steps=min(50, total_steps)
        )
    sampler = SamplerConfig(
        total_steps=total_steps,
        t1=_to_int("sampler.T1", get("sampler.T1", str(base.t1))),
        t2=_to_int("sampler.T2", get("sampler.T2", str(base.t2))),
        opt_iters=_to_int("sampler.N", get("sampler.N", str(base.opt_iters))),
        opt_lr=_to_float("sampler.eta", get("sampler.eta", str(base.opt_lr))),
        grad_tol=_to_float("sampler.delta", get("sampler.delta", str(base.grad_tol))),
        reinit_interval=_to_int(
            "sampler.lambda", get("sampler.lambda", str(base.reinit_interval))
        ),
        perturb_steps=_to_int_tuple(
            "sampler.L",
            get("sampler.L", ",".join(str(x) for x in base.perturb_steps)),
        ),
        gamma=_to_float("sampler.gamma", get("sampler.gamma", str(base.gamma))),
        beta_multiplier=_to_float(
            "sampler.beta_multiplier", get("sampler.beta_multiplier", "1.5")
        ),
        ddim_steps=_to_int("sampler.ddim_steps", get("sampler.ddim_steps", str(base.ddim_steps))),
        modulated_resolutions=_to_int_tuple(
            "sampler.resolutions", get("sampler.resolutions", "")
        ),
        seed=seed,
        fd_step=_to_float("sampler.fd_step", get("sampler.fd_step", "0.01")),
        max_batch=_to_int("sampler.max_batch", get("sampler.max_batch", "32")),
    )
    bank = BankConfig(
        source_images=_to_int("bank.source_images", get("bank.source_images", "170")),
        holdout_images=_to_int("bank.holdout_images", get("bank.holdout_images", "100")),
        t_grid=_to_int_tuple("bank.t_grid", get("bank.t_grid", "")),
        t_grid_size=_to_int("bank.t_grid_size", get("bank.t_grid_size", "5")),
        per_image=_to_int("bank.per_image", get("bank.per_image", "1")),
        coreset_fraction=_to_float(
            "bank.coreset_fraction", get("bank.coreset_fraction", "0.1")
        ),
    )
    cfg = RunConfig(
        profile=get("profile", "custom"),
        seed=seed,
        dataset=dataset,
        train=train,
        sampler=sampler,
        bank=bank,
        base_channels=_to_int("model.base_channels", get("model.base_channels", "32")),
        temb_dim=_to_int("model.temb_dim", get("model.temb_dim", "128")),
        feature_taps=_to_int_tuple("model.feature_taps", get("model.feature_taps", "5,8")),
        sample_count=_to_int("sampler.count", get("sampler.count", "20")),
        sweep_taus=sweep,
    )
    cfg.validate()
    return cfg


def load_run_config(
    path: str | None = None,
    profile: str | None = None,
    overrides: dict[str, str] | None = None,
) -> RunConfig:
    """Merge profile defaults, an optional config file, and CLI overrides
    (highest precedence last)."""
    pairs: dict[str, str] = {}
    file_pairs: dict[str, str] = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            file_pairs = parse_config_text(f.read())
    profile = profile or file_pairs.get("profile")
    if profile and profile != "custom":
        if profile not in PROFILES:
            raise ConfigError(
                f"unknown profile {profile!r}; available: {sorted(PROFILES)}"
            )
        pairs.update(PROFILES[profile])
        pairs["profile"] = profile
    pairs.update(file_pairs)
    if profile:
        pairs["profile"] = profile
    pairs.update(overrides or {})
    if "dataset.count" not in pairs or "train.steps" not in pairs:
        missing = [k for k in ("dataset.count", "train.steps") if k not in pairs]
        raise ConfigError(
            f"missing required config key(s) {missing}; pass --profile or a config file"
        )
    return build_run_config(pairs)


def to_flat_pairs(cfg: RunConfig) -> dict[str, str]:
    """Fully resolved key/value view; parsing it back reproduces the config."""
    pairs = {
        "profile": cfg.profile,
        "seed": str(cfg.seed),
        "dataset.count": str(cfg.dataset.count),
        "dataset.image_size": str(cfg.dataset.image_size),
        "dataset.shape_probability": repr(cfg.dataset.shape_probability),
        "dataset.seed": str(cfg.dataset.seed),
        "model.base_channels": str(cfg.base_channels),
        "model.temb_dim": str(cfg.temb_dim),
        "model.feature_taps": ",".join(str(i) for i in cfg.feature_taps),
        "train.steps": str(cfg.train.steps),
        "train.batch_size": str(cfg.train.batch_size),
        "train.learning_rate": repr(cfg.train.learning_rate),
        "train.T": str(cfg.train.total_steps),
        "train.ema_decay": repr(cfg.train.ema_decay),
        "train.grad_clip": repr(cfg.train.grad_clip),
        "train.seed": str(cfg.train.seed),
        "sampler.T": str(cfg.sampler.total_steps),
        "sampler.T1": str(cfg.sampler.t1),
        "sampler.T2": str(cfg.sampler.t2),
        "sampler.N": str(cfg.sampler.opt_iters),
        "sampler.eta": repr(cfg.sampler.opt_lr),
        "sampler.delta": repr(cfg.sampler.grad_tol),
        "sampler.lambda": str(cfg.sampler.reinit_interval),
        "sampler.L": ",".join(str(x) for x in cfg.sampler.perturb_steps),
        "sampler.gamma": repr(cfg.sampler.gamma),
        "sampler.beta_multiplier": repr(cfg.sampler.beta_multiplier),
        "sampler.ddim_steps": str(cfg.sampler.ddim_steps),
        "sampler.resolutions": ",".join(str(r) for r in cfg.sampler.modulated_resolutions),
        "sampler.fd_step": repr(cfg.sampler.fd_step),
        "sampler.max_batch": str(cfg.sampler.max_batch),
        "sampler.count": str(cfg.sample_count),
        "bank.source_images": str(cfg.bank.source_images),
        "bank.holdout_images": str(cfg.bank.holdout_images),
        "bank.t_grid": ",".join(str(t) for t in cfg.bank.t_grid),
        "bank.t_grid_size": str(cfg.bank.t_grid_size),
        "bank.per_image": str(cfg.bank.per_image),
        "bank.coreset_fraction": repr(cfg.bank.coreset_fraction),
    }
    for res, ladder in sorted(cfg.sweep_taus.items()):
        pairs[f"sweep.tau.{res}"] = ",".join(repr(t) for t in ladder)
    return pairs


def snapshot_text(cfg: RunConfig) -> str:
    lines = ["# resolved run configuration"]
    lines += [f"{k} = {v}" for k, v in to_flat_pairs(cfg).items()]
    return "\n".join(lines) + "\n"
