"""Noise-predicting UNet with temperature-scaled self-attention.

The network is small on purpose: a three-level resolution ladder
(S, S/2, S/4) with one self-attention block per resolution on both the
encoder and decoder sides, single-head attention, and a sinusoidal timestep
embedding. Attention logits at a block can be divided by a temperature
looked up per resolution; temperature 1.0 goes through the identical code
path, so a run with no temperature machinery is bit-equal to one with the
neutral setting.

Mid-level encoder activations ("taps") are exported for the anomaly model;
which blocks are tapped is part of the architecture config.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .errors import ConfigError, NumericalError

CHECKPOINT_MAGIC = b"AAMD"
CHECKPOINT_VERSION = 1


def temperature_from_logit(tau_logit, gamma: float):
    """Map an unconstrained logit to a positive temperature 10**(gamma*tanh(logit)).

    Strictly increasing in the logit, bounded in (10**-gamma, 10**gamma),
    and exactly 1.0 at logit 0. Accepts scalars or numpy arrays.
    """
    if gamma <= 0:
        raise ConfigError(f"gamma must be positive, got {gamma}")
    if isinstance(tau_logit, np.ndarray):
        return np.power(10.0, gamma * np.tanh(tau_logit))
    return 10.0 ** (gamma * math.tanh(tau_logit))


@dataclass(frozen=True)
class TemperatureControl:
    """Scalar (or per-sample vector) temperature logit plus the resolutions
    whose attention it modulates; unlisted resolutions stay at 1.0."""

    tau_logit: float | np.ndarray = 0.0
    gamma: float = 2.0
    modulated_resolutions: tuple[int, ...] = ()

    def tau(self):
        return temperature_from_logit(self.tau_logit, self.gamma)

    def tau_map(self) -> dict[int, float | np.ndarray]:
        tau = self.tau()
        return {int(r): tau for r in self.modulated_resolutions}


@dataclass(frozen=True)
class DenoiserConfig:
    """Architecture descriptor; fully determines every weight shape."""

    image_size: int = 32
    in_channels: int = 1
    base_channels: int = 32
    temb_dim: int = 128
    # Encoder block indices whose activations feed the anomaly model.
    # Defaults are the two mid-encoder attention blocks (at S/2 and S/4).
    feature_tap_indices: tuple[int, ...] = (5, 8)

    @property
    def attention_resolutions(self) -> tuple[int, int, int]:
        s = self.image_size
        return (s, s // 2, s // 4)

    def validate(self) -> None:
        s = self.image_size
        if s < 8 or (s & (s - 1)) != 0:
            raise ConfigError(f"image_size must be a power of two >= 8, got {s}")
        if self.base_channels % 8 != 0 or self.base_channels <= 0:
            raise ConfigError(
                f"base_channels must be a positive multiple of 8, got {self.base_channels}"
            )
        if self.temb_dim < 8 or self.temb_dim % 2 != 0:
            raise ConfigError(f"temb_dim must be an even integer >= 8, got {self.temb_dim}")
        n_blocks = len(_encoder_plan(self))
        for i in self.feature_tap_indices:
            if not (0 <= i < n_blocks):
                raise ConfigError(
                    f"feature_tap_indices entry {i} outside encoder range [0, {n_blocks})"
                )


def attention_forward(q: Tensor, k: Tensor, v: Tensor, tau, *, where: str = "attention") -> Tensor:
    """Single-head attention update: softmax(q k^T / (tau sqrt(d))) v.

    ``tau`` is a positive float or a per-sample tensor broadcastable against
    the batch dimension. With tau=1.0 this is plain scaled dot-product
    attention, bit for bit.
    """
    d = q.shape[-1]
    # scale q up front: one small multiply instead of dividing the full
    # token-by-token logit matrix
    if isinstance(tau, Tensor):
        inv_scale = (1.0 / (tau * math.sqrt(d))).view(-1, *([1] * (q.dim() - 1)))
    else:
        if tau <= 0:
            raise ConfigError(f"attention temperature must be positive, got {tau}")
        inv_scale = 1.0 / (tau * math.sqrt(d))
    logits = torch.matmul(q * inv_scale, k.transpose(-2, -1))
    weights = torch.softmax(logits, dim=-1)
    out = torch.matmul(weights, v)
    if not torch.isfinite(out).all():
        raise NumericalError(f"non-finite attention logits/output in {where}")
    return out


class _TimestepEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: Tensor) -> Tensor:
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1)
        )
        args = t.float()[:, None] * freqs[None, :]
        emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
        return self.mlp(emb)


class _ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(8, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(nn.functional.silu(self.norm1(x)))
        h = h + self.temb_proj(nn.functional.silu(temb))[:, :, None, None]
        h = self.conv2(nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class _AttentionBlock(nn.Module):
    def __init__(self, channels: int, resolution: int):
        super().__init__()
        self.resolution = resolution
        self.norm = nn.GroupNorm(8, channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: Tensor, tau) -> Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).chunk(3, dim=1)
        q = q.reshape(b, c, h * w).transpose(1, 2)
        k = k.reshape(b, c, h * w).transpose(1, 2)
        v = v.reshape(b, c, h * w).transpose(1, 2)
        delta = attention_forward(q, k, v, tau, where=f"attn{self.resolution}x{self.resolution}")
        delta = delta.transpose(1, 2).reshape(b, c, h, w)
        return x + self.proj(delta)


class _Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


class _Upsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(nn.functional.interpolate(x, scale_factor=2, mode="nearest"))


def _encoder_plan(cfg: DenoiserConfig) -> list[tuple[str, int, int]]:
    """(kind, output resolution, output channels) per encoder block, in
    forward order. This is the numbering feature_tap_indices refer to."""
    s, c = cfg.image_size, cfg.base_channels
    return [
        ("conv", s, c),
        ("res", s, c),
        ("attn", s, c),
        ("down", s // 2, c),
        ("res", s // 2, 2 * c),
        ("attn", s // 2, 2 * c),
        ("down", s // 4, 2 * c),
        ("res", s // 4, 2 * c),
        ("attn", s // 4, 2 * c),
    ]


class Denoiser(nn.Module):
    """Noise predictor; ``forward`` maps (x_t, t) to the noise estimate.

    ``tau_map`` is an optional {resolution: temperature} dict applied to the
    attention blocks operating at those resolutions (both encoder and
    decoder side); absent resolutions use temperature 1.0.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        config.validate()
        self.config = config
        s, c, te = config.image_size, config.base_channels, config.temb_dim
        self.encoder_plan = _encoder_plan(config)
        self.time_embed = _TimestepEmbedding(te)
        self.encoder = nn.ModuleList(
            [
                nn.Conv2d(config.in_channels, c, 3, padding=1),
                _ResBlock(c, c, te),
                _AttentionBlock(c, s),
                _Downsample(c),
                _ResBlock(c, 2 * c, te),
                _AttentionBlock(2 * c, s // 2),
                _Downsample(2 * c),
                _ResBlock(2 * c, 2 * c, te),
                _AttentionBlock(2 * c, s // 4),
            ]
        )
        self.middle = _ResBlock(2 * c, 2 * c, te)
        self.dec_res2 = _ResBlock(4 * c, 2 * c, te)
        self.dec_attn2 = _AttentionBlock(2 * c, s // 4)
        self.up2 = _Upsample(2 * c, 2 * c)
        self.dec_res1 = _ResBlock(4 * c, 2 * c, te)
        self.dec_attn1 = _AttentionBlock(2 * c, s // 2)
        self.up1 = _Upsample(2 * c, c)
        self.dec_res0 = _ResBlock(2 * c, c, te)
        self.dec_attn0 = _AttentionBlock(c, s)
        self.out_norm = nn.GroupNorm(8, c)
        self.out_conv = nn.Conv2d(c, config.in_channels, 3, padding=1)

    def _tau(self, tau_map, resolution: int):
        if not tau_map:
            return 1.0
        return tau_map.get(resolution, 1.0)

    def _embed_t(self, t, batch: int) -> Tensor:
        if isinstance(t, Tensor):
            tt = t
        else:
            tt = torch.full((batch,), int(t), dtype=torch.long)
        return self.time_embed(tt)

    def _run_encoder(self, x: Tensor, temb: Tensor, tau_map, taps: dict[int, Tensor] | None):
        h = x
        skips = []
        for i, block in enumerate(self.encoder):
            kind, res, _ = self.encoder_plan[i]
            if kind == "res":
                h = block(h, temb)
            elif kind == "attn":
                h = block(h, self._tau(tau_map, res))
            else:
                h = block(h)
            if kind == "attn":
                skips.append(h)
            if taps is not None and i in taps:
                taps[i] = h
        return h, skips

    def forward(self, x: Tensor, t, tau_map: dict | None = None,
                tap_indices: tuple[int, ...] | None = None):
        temb = self._embed_t(t, x.shape[0])
        taps = dict.fromkeys(tap_indices) if tap_indices is not None else None
        h, (s0, s1, s2) = self._run_encoder(x, temb, tau_map, taps)
        cfg = self.config
        res2, res1, res0 = cfg.image_size // 4, cfg.image_size // 2, cfg.image_size
        h = self.middle(h, temb)
        h = self.dec_res2(torch.cat([h, s2], dim=1), temb)
        h = self.dec_attn2(h, self._tau(tau_map, res2))
        h = self.up2(h)
        h = self.dec_res1(torch.cat([h, s1], dim=1), temb)
        h = self.dec_attn1(h, self._tau(tau_map, res1))
        h = self.up1(h)
        h = self.dec_res0(torch.cat([h, s0], dim=1), temb)
        h = self.dec_attn0(h, self._tau(tau_map, res0))
        eps = self.out_conv(nn.functional.silu(self.out_norm(h)))
        if tap_indices is None:
            return eps
        return eps, [taps[i] for i in tap_indices]

    def encoder_features(self, x: Tensor, t, tau_map: dict | None = None,
                         tap_indices: tuple[int, ...] | None = None) -> list[Tensor]:
        """Encoder-only pass returning the tapped activations (cheaper than a
        full forward when only features are needed)."""
        if tap_indices is None:
            tap_indices = self.config.feature_tap_indices
        temb = self._embed_t(t, x.shape[0])
        taps = dict.fromkeys(tap_indices)
        self._run_encoder(x, temb, tau_map, taps)
        return [taps[i] for i in tap_indices]


def _validate_tau_map(tau_map: dict | None, model: Denoiser) -> None:
    if not tau_map:
        return
    ladder = set(model.config.attention_resolutions)
    unknown = sorted(set(tau_map) - ladder)
    if unknown:
        raise ConfigError(
            f"modulated resolutions {unknown} not in architecture ladder {sorted(ladder)}"
        )


def resolve_tau_map(temps: TemperatureControl | dict | None, model: Denoiser) -> dict | None:
    """Normalize a TemperatureControl (or raw {resolution: tau} dict) into the
    tau_map the network consumes, converting per-sample arrays to tensors."""
    if temps is None:
        return None
    tau_map = temps.tau_map() if isinstance(temps, TemperatureControl) else dict(temps)
    _validate_tau_map(tau_map, model)
    return {
        r: torch.as_tensor(v, dtype=torch.float32) if isinstance(v, np.ndarray) else v
        for r, v in tau_map.items()
    }


def denoise(
    x_t: np.ndarray,
    t: int,
    temps: TemperatureControl | None,
    model: Denoiser,
    max_batch: int = 32,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Numpy-boundary inference: noise prediction plus tapped encoder features.

    Chunks the batch to bound attention memory; chunking never mixes samples,
    so results per sample do not depend on the other samples present.
    """
    tau_map = resolve_tau_map(temps, model)
    taps = model.config.feature_tap_indices
    eps_parts, tap_parts = [], [[] for _ in taps]
    with torch.no_grad():
        for lo in range(0, x_t.shape[0], max_batch):
            chunk = torch.from_numpy(np.ascontiguousarray(x_t[lo:lo + max_batch], dtype=np.float32))
            chunk_map = _slice_tau_map(tau_map, lo, lo + chunk.shape[0])
            eps, chunk_taps = model(chunk, t, chunk_map, tap_indices=taps)
            eps_parts.append(eps.numpy())
            for buf, tap in zip(tap_parts, chunk_taps):
                buf.append(tap.numpy())
    return np.concatenate(eps_parts), [np.concatenate(buf) for buf in tap_parts]


def predict_eps(
    model: Denoiser,
    x_t: np.ndarray,
    t: int,
    tau_map: dict | None = None,
    max_batch: int = 32,
) -> np.ndarray:
    """Chunked no-grad noise prediction on numpy batches (no feature taps)."""
    parts = []
    with torch.no_grad():
        for lo in range(0, x_t.shape[0], max_batch):
            chunk = torch.from_numpy(np.ascontiguousarray(x_t[lo:lo + max_batch], dtype=np.float32))
            chunk_map = _slice_tau_map(tau_map, lo, lo + chunk.shape[0])
            parts.append(model(chunk, t, chunk_map).numpy())
    return np.concatenate(parts)


def _slice_tau_map(tau_map: dict | None, lo: int, hi: int) -> dict | None:
    if not tau_map:
        return tau_map
    return {
        r: v[lo:hi] if isinstance(v, Tensor) and v.dim() > 0 else v
        for r, v in tau_map.items()
    }


def save_checkpoint(model: Denoiser, path: str) -> None:
    """Versioned binary checkpoint: magic, version, length-prefixed JSON
    architecture descriptor, then raw little-endian float32 weights in
    state-dict order. Written atomically (temp file + rename)."""
    desc = json.dumps(asdict(model.config)).encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(np.uint32(CHECKPOINT_VERSION).tobytes())
            f.write(np.uint32(len(desc)).tobytes())
            f.write(desc)
            for tensor in model.state_dict().values():
                f.write(tensor.numpy().astype("<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> Denoiser:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a denoiser checkpoint (bad magic)")
    version = int(np.frombuffer(blob, "<u4", count=1, offset=4)[0])
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    desc_len = int(np.frombuffer(blob, "<u4", count=1, offset=8)[0])
    desc = json.loads(blob[12:12 + desc_len].decode("utf-8"))
    desc["feature_tap_indices"] = tuple(desc["feature_tap_indices"])
    model = Denoiser(DenoiserConfig(**desc))
    offset = 12 + desc_len
    state = model.state_dict()
    for name, tensor in state.items():
        n = tensor.numel()
        values = np.frombuffer(blob, "<f4", count=n, offset=offset)
        state[name] = torch.from_numpy(values.copy()).reshape(tensor.shape)
        offset += 4 * n
    if offset != len(blob):
        raise ConfigError(f"{path}: trailing bytes ({len(blob) - offset}) after weights")
    model.load_state_dict(state)
    model.eval()
    return model
