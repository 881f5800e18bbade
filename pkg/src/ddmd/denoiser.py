"""Conditional noise predictor: a small U-Net over the stacked conditioning pack.

Pack channel order is fixed: C modalities, then X (light/full), then Y (full
only), then the noisy mask x_{b,t} last. Only the mask channel is noised, so
the network predicts a single noise channel.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .weights import load_state, save_state

VARIANTS = {"mini": 0, "light": 1, "full": 2}


class ChannelMismatchError(ValueError):
    """Conditioning variant or channel count disagrees with the predictor."""


def extra_channels(variant: str) -> int:
    try:
        return VARIANTS[variant]
    except KeyError:
        raise ValueError(f"variant must be one of {sorted(VARIANTS)}, got {variant!r}") from None


def input_channels(variant: str, modalities: int) -> int:
    return modalities + extra_channels(variant) + 1


@dataclass
class DenoiserConfig:
    variant: str = "full"
    modalities: int = 4
    base_width: int = 64
    depth: int = 4
    num_res_blocks: int = 2
    channel_mult: tuple[int, ...] | None = None
    time_embed_dim: int | None = None
    dropout: float = 0.0
    in_channels: int | None = None
    out_channels: int = 1
    # per-step learned gain from the noisy mask channel straight to the output
    mask_skip: bool = True

    def __post_init__(self) -> None:
        expected = input_channels(self.variant, self.modalities)
        if self.in_channels is None:
            self.in_channels = expected
        elif self.in_channels != expected:
            raise ChannelMismatchError(
                f"variant {self.variant!r} with {self.modalities} modalities needs {expected} input channels, "
                f"config says {self.in_channels}"
            )
        if self.out_channels != 1:
            raise ValueError("only the mask channel is noised: out_channels must be 1")
        if self.depth < 1 or self.base_width < 1 or self.num_res_blocks < 1:
            raise ValueError("depth, base_width and num_res_blocks must be positive")
        if self.channel_mult is None:
            self.channel_mult = tuple(1 if i == 0 else 2 for i in range(self.depth))
        self.channel_mult = tuple(int(m) for m in self.channel_mult)
        if len(self.channel_mult) != self.depth:
            raise ValueError("channel_mult needs one entry per level")
        if self.time_embed_dim is None:
            self.time_embed_dim = 4 * self.base_width

    @property
    def min_divisor(self) -> int:
        return 2 ** (self.depth - 1)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of (N,) step indices -> (N, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.double()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(ch, 8), ch)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int, dropout: float):
        super().__init__()
        self.norm1 = _norm(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.norm2 = _norm(cout)
        self.drop = nn.Dropout(dropout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(emb))[:, :, None, None]
        h = self.conv2(self.drop(F.silu(self.norm2(h))))
        return self.skip(x) + h


class NoisePredictor(nn.Module):
    """U-Net predicting the mask-channel noise from a conditioning pack and step t."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.config = cfg
        self.T: int | None = None
        w, temb = cfg.base_width, cfg.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(w, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = nn.Conv2d(cfg.in_channels, w, 3, padding=1)

        self.down = nn.ModuleList()
        skips = [w]
        ch = w
        for level, mult in enumerate(cfg.channel_mult):
            for _ in range(cfg.num_res_blocks):
                self.down.append(ResBlock(ch, w * mult, temb, cfg.dropout))
                ch = w * mult
                skips.append(ch)
            if level < cfg.depth - 1:
                self.down.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                skips.append(ch)

        self.mid = nn.ModuleList([ResBlock(ch, ch, temb, cfg.dropout), ResBlock(ch, ch, temb, cfg.dropout)])

        self.up = nn.ModuleList()
        for level, mult in reversed(list(enumerate(cfg.channel_mult))):
            for _ in range(cfg.num_res_blocks + 1):
                self.up.append(ResBlock(ch + skips.pop(), w * mult, temb, cfg.dropout))
                ch = w * mult
            if level > 0:
                self.up.append(nn.Upsample(scale_factor=2, mode="nearest"))
                self.up.append(nn.Conv2d(ch, ch, 3, padding=1))

        self.norm_out = _norm(ch)
        self.conv_out = nn.Conv2d(ch, cfg.out_channels, 3, padding=1)
        # start from a zero prediction
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)
        # eps_hat is nearly x_t / sqrt(1 - alpha_bar_t) at large t; a convolutional path only learns that
        # gain approximately, and the shortfall compounds over the stochastic reverse chain
        self.mask_gain = None
        if cfg.mask_skip:
            self.mask_gain = nn.Linear(temb, 1)
            nn.init.zeros_(self.mask_gain.weight)
            nn.init.zeros_(self.mask_gain.bias)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        emb = self.time_mlp(timestep_embedding(t, self.config.base_width).to(x.dtype))
        h = self.conv_in(x)
        hs = [h]
        for layer in self.down:
            h = layer(h, emb) if isinstance(layer, ResBlock) else layer(h)
            hs.append(h)
        for layer in self.mid:
            h = layer(h, emb)
        for layer in self.up:
            if isinstance(layer, ResBlock):
                h = layer(torch.cat([h, hs.pop()], dim=1), emb)
            else:
                h = layer(h)
        out = self.conv_out(F.silu(self.norm_out(h)))
        if self.mask_gain is not None:
            out = out + self.mask_gain(F.silu(emb))[:, :, None, None] * x[:, -1:]
        return out


def build_denoiser(config: DenoiserConfig, seed: int = 0) -> NoisePredictor:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return NoisePredictor(config)


# --- conditioning packs -----------------------------------------------------


@dataclass
class ConditioningPack:
    stacked: np.ndarray  # (C + extra + 1, H, W)
    t: int
    variant: str = field(default="full")


def stack_conditioning(b, X, Y, x_t, variant: str):
    """Concatenate [b, X?, Y?, x_t] along the channel axis.

    Works batched ((N, C, H, W) images with (N, H, W) maps and (N, 1, H, W)
    masks) or unbatched (no leading N). numpy or torch, not mixed.
    """
    k = extra_channels(variant)
    parts = [b]
    if k >= 1:
        if X is None:
            raise ChannelMismatchError(f"variant {variant!r} needs the inter-discrepancy map")
        parts.append(X[..., None, :, :])
    if k >= 2:
        if Y is None:
            raise ChannelMismatchError(f"variant {variant!r} needs the intra-discrepancy map")
        parts.append(Y[..., None, :, :])
    parts.append(x_t)
    if isinstance(b, torch.Tensor):
        return torch.cat(parts, dim=-3)
    return np.concatenate(parts, axis=-3)


def build_pack(b, features, x_t, t: int, variant: str) -> ConditioningPack:
    X = features.X if features is not None else None
    Y = features.Y if features is not None else None
    x_t = np.asarray(x_t, dtype=np.float32)
    if x_t.ndim == 2:
        x_t = x_t[None]
    stacked = stack_conditioning(np.asarray(b, dtype=np.float32),
                                 None if X is None else np.asarray(X, dtype=np.float32),
                                 None if Y is None else np.asarray(Y, dtype=np.float32), x_t, variant)
    return ConditioningPack(stacked.astype(np.float32), int(t), variant)


def check_input(predictor: NoisePredictor, x: torch.Tensor) -> None:
    cfg = predictor.config
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ChannelMismatchError(
            f"predictor ({cfg.variant}, {cfg.in_channels} channels) got input of shape {tuple(x.shape)}"
        )
    if x.shape[2] % cfg.min_divisor or x.shape[3] % cfg.min_divisor:
        raise ValueError(f"spatial size {tuple(x.shape[2:])} must be divisible by {cfg.min_divisor}")


@torch.no_grad()
def predict_noise(predictor: NoisePredictor, pack: ConditioningPack) -> np.ndarray:
    """Predicted mask-channel noise (1, H, W) for one pack."""
    if pack.variant != predictor.config.variant:
        raise ChannelMismatchError(f"pack variant {pack.variant!r} vs predictor {predictor.config.variant!r}")
    x = torch.from_numpy(np.asarray(pack.stacked, dtype=np.float32))[None]
    check_input(predictor, x)
    if not torch.isfinite(x).all():
        raise ValueError("conditioning pack contains non-finite values")
    if pack.t < 1 or (predictor.T is not None and pack.t > predictor.T):
        raise ValueError(f"step {pack.t} out of range for predictor with T={predictor.T}")
    was_training = predictor.training
    predictor.eval()
    out = predictor(x, torch.tensor([pack.t]))
    predictor.train(was_training)
    return out[0].numpy()


# --- mask value range -------------------------------------------------------


def mask_to_model(mask):
    """{0, 1} mask -> {-1, +1} diffusion data range."""
    return 2.0 * mask - 1.0


def model_to_mask(x):
    """Inverse affine map back to [0, 1], clamped."""
    if isinstance(x, torch.Tensor):
        return ((x + 1.0) / 2.0).clamp(0.0, 1.0)
    return np.clip((x + 1.0) / 2.0, 0.0, 1.0)


# --- checkpoints ------------------------------------------------------------


def save_predictor(predictor: NoisePredictor, directory: str | Path, metadata: dict | None = None) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    digest = save_state(directory / "weights.wts", predictor.state_dict())
    cfg = asdict(predictor.config)
    cfg["channel_mult"] = list(cfg["channel_mult"])
    descriptor = {
        "format": "ddmd-denoiser",
        "version": 1,
        "variant": predictor.config.variant,
        "config": cfg,
        "T": predictor.T,
        "weights": {"file": "weights.wts", "sha256": digest},
        "training": metadata or {},
    }
    (directory / "descriptor.json").write_text(json.dumps(descriptor, indent=1))
    return descriptor


def load_predictor(directory: str | Path) -> NoisePredictor:
    directory = Path(directory)
    d = json.loads((directory / "descriptor.json").read_text())
    if d.get("format") != "ddmd-denoiser" or d.get("version") != 1:
        raise ValueError(f"{directory} is not a version-1 denoiser checkpoint")
    predictor = NoisePredictor(DenoiserConfig(**d["config"]))
    predictor.load_state_dict(load_state(directory / d["weights"]["file"]))
    predictor.T = d.get("T")
    predictor.eval()
    return predictor
