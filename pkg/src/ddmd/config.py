"""Experiment configuration: one YAML file, nested sections, CLI overrides.

Defaults follow the published setup (256x256, T=1000, L=3, lr 1e-4, batch 10,
200 autoencoder epochs, 120k diffusion iterations). ``PRESETS`` holds
scaled-down variants for desk runs and CI.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .denoiser import VARIANTS

OUTPUT_ROOT_ENV = "DDMD_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class PathsSection:
    output_dir: str = "runs/default"
    manifest: str | None = None  # defaults to <output_dir>/data/manifest.json


@dataclass
class DataSection:
    n_normal: int = 64
    n_abnormal: int = 64
    C: int = 4
    H: int = 256
    W: int = 256
    lesion_fraction: tuple[float, float] = (0.02, 0.08)
    lesion_contrast: float = 0.3
    test_fraction: float = 0.25
    normalization: str = "minmax"
    balance: bool = False


@dataclass
class ScheduleSection:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class AutoencoderSection:
    L: int = 3
    epochs: int = 200
    lr: float = 1e-4
    batch_size: int = 16
    latent_dim: int = 128
    width_schedule: tuple[int, ...] = (32, 64, 128, 256)
    encoder_conv_layers: int = 4
    decoder_deconv_layers: int = 4
    bottleneck_fc_layers: int = 3


@dataclass
class FeaturesSection:
    normalize: bool = False


@dataclass
class DenoiserSection:
    base_width: int = 64
    depth: int = 4
    num_res_blocks: int = 2
    channel_mult: tuple[int, ...] | None = None
    dropout: float = 0.0
    mask_skip: bool = True


@dataclass
class TrainSection:
    batch_size: int = 10
    lr: float = 1e-4
    iterations: int = 120_000
    checkpoint_every: int = 0
    grad_clip: float | None = None
    ema_decay: float | None = None
    use_feature_cache: bool = False
    log_every: int = 500


@dataclass
class SamplerSection:
    n_samples: int = 5
    threshold: float = 0.5
    capture_steps: list[int] | None = None
    split: str = "test"
    max_batch: int = 256


@dataclass
class MetricsSection:
    histogram_bins: int = 20


@dataclass
class ExperimentConfig:
    seed: int = 0
    variant: str = "light"
    paths: PathsSection = field(default_factory=PathsSection)
    data: DataSection = field(default_factory=DataSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    autoencoder: AutoencoderSection = field(default_factory=AutoencoderSection)
    features: FeaturesSection = field(default_factory=FeaturesSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    train: TrainSection = field(default_factory=TrainSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)

    # -- paths

    @property
    def output_dir(self) -> Path:
        p = Path(self.paths.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not p.is_absolute():
            p = Path(root) / p
        return p

    @property
    def manifest_path(self) -> Path:
        return Path(self.paths.manifest) if self.paths.manifest else self.output_dir / "data" / "manifest.json"

    # -- (de)serialization

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def section_hash(self, *names: str) -> str:
        d = self.to_dict()
        payload = {n: d[n] for n in names}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    def validate(self) -> "ExperimentConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {sorted(VARIANTS)}, got {self.variant!r}")
        d = self.data
        if d.H < 32 or d.W < 32 or d.C < 1:
            raise ConfigError(f"data dimensions must be C>=1, H,W>=32; got C={d.C} H={d.H} W={d.W}")
        if d.n_normal < 1:
            raise ConfigError("n_normal must be >= 1: the normal-only ensemble needs healthy slices")
        if d.n_abnormal < 0:
            raise ConfigError("n_abnormal must be >= 0")
        f = 2**self.autoencoder.encoder_conv_layers
        if d.H % f or d.W % f:
            raise ConfigError(f"H and W must be divisible by {f} for the autoencoder")
        g = 2 ** (self.denoiser.depth - 1)
        if d.H % g or d.W % g:
            raise ConfigError(f"H and W must be divisible by {g} for the denoiser")
        if len(self.autoencoder.width_schedule) != self.autoencoder.encoder_conv_layers:
            raise ConfigError("autoencoder.width_schedule needs one width per encoder layer")
        if self.autoencoder.L < 2:
            raise ConfigError("autoencoder.L must be >= 2")
        s = self.schedule
        if s.T < 1 or not (0 < s.beta_start <= s.beta_end < 1):
            raise ConfigError("schedule needs T >= 1 and 0 < beta_start <= beta_end < 1")
        if not (0 < self.sampler.threshold < 1) or self.sampler.n_samples < 1:
            raise ConfigError("sampler needs 0 < threshold < 1 and n_samples >= 1")
        if self.sampler.split not in ("train", "test", "all"):
            raise ConfigError("sampler.split must be train, test or all")
        if self.train.iterations < 1:
            raise ConfigError("train.iterations must be >= 1")
        if not self.output_dir.parent.exists() and not self.output_dir.parent.parent.exists():
            raise ConfigError(f"output directory {self.output_dir} is not creatable")
        return self


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _merge(dc, updates: dict, where: str):
    for key, value in updates.items():
        names = {f.name: f for f in fields(dc)}
        if key not in names:
            raise ConfigError(f"unknown config key {where}{key}")
        current = getattr(dc, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}{key} must be a mapping")
            _merge(current, value, f"{where}{key}.")
        else:
            if current is None and isinstance(value, str) and "float" in str(names[key].type):
                current = 0.0
            setattr(dc, key, _coerce(value, current, f"{where}{key}"))
    return dc


def _coerce(value, current, name):
    # YAML 1.1 reads "1e-4" as a string, so numbers are converted by the field's current type
    if isinstance(current, tuple) and isinstance(value, list):
        return tuple(value)
    if isinstance(current, bool) or current is None or value is None:
        return value
    if isinstance(current, (int, float)) and isinstance(value, (str, int, float)) and not isinstance(value, bool):
        try:
            num = float(value)
        except ValueError:
            raise ConfigError(f"{name} must be a number, got {value!r}") from None
        if isinstance(current, int):
            if num != int(num):
                raise ConfigError(f"{name} must be an integer, got {value!r}")
            return int(num)
        return num
    return value


def from_dict(d: dict | None) -> ExperimentConfig:
    return _merge(ExperimentConfig(), d or {}, "")


def read_config_file(path: str | Path) -> dict:
    try:
        d = yaml.safe_load(Path(path).read_text()) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file is not valid YAML: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError("config file must hold a mapping at top level")
    return d


def load_config(path: str | Path | None, overrides: dict | None = None,
                preset_name: str | None = None) -> ExperimentConfig:
    """Resolve a config: preset (or defaults), then the file, then ``overrides``."""
    cfg = preset(preset_name) if preset_name else ExperimentConfig()
    if path is not None:
        _merge(cfg, read_config_file(path), "")
    if overrides:
        _merge(cfg, overrides, "")
    return cfg.validate()


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


_SMOKE = {
    "data": {"n_normal": 4, "n_abnormal": 4, "H": 32, "W": 32, "test_fraction": 0.25},
    "schedule": {"T": 50, "beta_start": 2e-3, "beta_end": 0.35},
    "autoencoder": {"epochs": 20, "lr": 1e-3, "batch_size": 8, "latent_dim": 32, "width_schedule": [8, 16, 16, 16]},
    "denoiser": {"base_width": 8, "depth": 2, "num_res_blocks": 1},
    "train": {"batch_size": 4, "lr": 1e-3, "iterations": 40, "log_every": 20},
    "sampler": {"n_samples": 2, "split": "all"},
}

_DESK = {
    "data": {"n_normal": 100, "n_abnormal": 100, "H": 32, "W": 32, "test_fraction": 0.25, "lesion_contrast": 0.6},
    "schedule": {"T": 100, "beta_start": 1e-3, "beta_end": 0.2},
    "autoencoder": {"epochs": 100, "lr": 1e-3, "batch_size": 8, "latent_dim": 256, "width_schedule": [16, 32, 64],
                    "encoder_conv_layers": 3, "decoder_deconv_layers": 3},
    "denoiser": {"base_width": 16, "depth": 3, "num_res_blocks": 1},
    "train": {"lr": 5e-4, "iterations": 2000, "log_every": 250, "use_feature_cache": True},
}

PRESETS = {"paper": {}, "desk": _DESK, "smoke": _SMOKE}


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return from_dict(copy.deepcopy(PRESETS[name]))
