"""Reverse diffusion from pure noise to a lesion mask, plus n-sample averaging.

Sample i of an image uses its own generator seeded with ``seed + i``, so a
sample is reproducible on its own and does not depend on batching.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .denoiser import NoisePredictor, check_input, extra_channels, model_to_mask, stack_conditioning
from .discrepancy import EnsembleModule, compute_features
from .schedule import NoiseSchedule, reverse_step


@dataclass
class SamplerConfig:
    n_samples: int = 5
    threshold: float = 0.5
    capture_steps: list[int] | None = None
    seed: int = 0
    max_batch: int = 256

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not (0.0 < self.threshold < 1.0):
            raise ValueError("threshold must lie strictly between 0 and 1")


@dataclass
class SoftMask:
    values: np.ndarray  # (H, W) in [0, 1]
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)  # t -> raw x_{b,t}, (H, W)


@dataclass
class Prediction:
    binary: np.ndarray  # (H, W) uint8
    mean_soft: np.ndarray  # (H, W)
    soft: list[np.ndarray]
    seeds: list[int]


def _randn(shape, generators: list[torch.Generator]) -> torch.Tensor:
    return torch.stack([torch.randn(shape, generator=g) for g in generators])


@torch.no_grad()
def reverse_diffusion(cond: torch.Tensor, predictor: Callable, schedule: NoiseSchedule,
                      generators: list[torch.Generator], capture=None, zero_noise: bool = False,
                      x_T: torch.Tensor | None = None, on_step: Callable | None = None):
    """Run t = T..1 on a batch; returns (x_0, snapshots).

    ``cond`` is (N, K, H, W) holding the fixed channels; the evolving mask
    channel is appended last at every step. ``predictor(inp, t)`` returns
    (N, 1, H, W). Snapshots map t -> x_{b,t} for every t in ``capture``
    (t = T is the starting noise, t = 0 the output).
    """
    N, _, H, W = cond.shape
    if len(generators) != N:
        raise ValueError("need one generator per batch item")
    capture = set(capture or ())
    x = _randn((1, H, W), generators) if x_T is None else x_T.clone()
    snaps = {}
    if schedule.T in capture:
        snaps[schedule.T] = x.clone()
    for t in range(schedule.T, 0, -1):
        inp = torch.cat([cond, x], dim=1)
        if on_step is not None:
            on_step(t, inp)
        eps_hat = predictor(inp, torch.full((N,), t, dtype=torch.long))
        if t == 1 or zero_noise:
            z = torch.zeros_like(x)
        else:
            z = _randn((1, H, W), generators)
        x = reverse_step(x, eps_hat, t, z, schedule)
        if t - 1 in capture:
            snaps[t - 1] = x.clone()
    return x, snaps


def _check_T(predictor, schedule: NoiseSchedule) -> None:
    T = getattr(predictor, "T", None)
    if T is not None and T != schedule.T:
        raise ValueError(f"predictor was trained with T={T} but the schedule has T={schedule.T}")


def conditioning(images: torch.Tensor, ae1, ae2, variant: str, normalize_features: bool = False) -> torch.Tensor:
    """Fixed conditioning channels [b, X?, Y?] for a batch of images (N, C, H, W)."""
    k = extra_channels(variant)
    if k == 0:
        return images
    if ae1 is None or ae2 is None:
        raise ValueError(f"variant {variant!r} needs both ensembles")
    f = compute_features(images, ae1, ae2, normalize=normalize_features)
    X, Y = torch.from_numpy(f.X), torch.from_numpy(f.Y)
    # stack with a dummy mask channel, then drop it
    dummy = torch.zeros(images.shape[0], 1, *images.shape[2:])
    return stack_conditioning(images, X, Y, dummy, variant)[:, :-1]


def _images(b) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(b) if not isinstance(b, torch.Tensor) else b, dtype=torch.float32)
    return x[None] if x.ndim == 3 else x


def sample_mask(b, ae1: EnsembleModule | None, ae2: EnsembleModule | None, predictor: NoisePredictor,
                schedule: NoiseSchedule, seed: int = 0, capture=None, normalize_features: bool = False) -> SoftMask:
    """One reverse-diffusion sample for a single image, mapped back to [0, 1]."""
    _check_T(predictor, schedule)
    images = _images(b)
    if images.shape[0] != 1:
        raise ValueError("sample_mask takes a single C x H x W image")
    cond = conditioning(images, ae1, ae2, predictor.config.variant, normalize_features)
    check_input(predictor, torch.cat([cond, images[:, :1]], dim=1))
    predictor.eval()
    x0, snaps = reverse_diffusion(cond, predictor, schedule, [torch.Generator().manual_seed(seed)], capture)
    return SoftMask(model_to_mask(x0)[0, 0].numpy(), {t: s[0, 0].numpy() for t, s in snaps.items()})


def predict_batch(images, ae1, ae2, predictor: NoisePredictor, schedule: NoiseSchedule,
                  cfg: SamplerConfig, normalize_features: bool = False) -> list[Prediction]:
    """n-sample averaged binary masks for a batch of images (N, C, H, W)."""
    _check_T(predictor, schedule)
    images = _images(images)
    cond = conditioning(images, ae1, ae2, predictor.config.variant, normalize_features)
    check_input(predictor, torch.cat([cond, images[:, :1]], dim=1))
    predictor.eval()
    seeds = [cfg.seed + i for i in range(cfg.n_samples)]
    n = cfg.n_samples
    jobs = [(k, i) for k in range(len(images)) for i in range(n)]
    soft = torch.empty(len(images), n, *images.shape[2:])
    for start in range(0, len(jobs), cfg.max_batch):
        chunk = jobs[start : start + cfg.max_batch]
        c = torch.stack([cond[k] for k, _ in chunk])
        gens = [torch.Generator().manual_seed(seeds[i]) for _, i in chunk]
        x0, _ = reverse_diffusion(c, predictor, schedule, gens)
        for j, (k, i) in enumerate(chunk):
            soft[k, i] = model_to_mask(x0[j, 0])
    out = []
    for k in range(len(images)):
        s = soft[k].numpy()
        mean = average_soft_masks(list(s))
        out.append(Prediction(threshold_mask(mean, cfg.threshold), mean, list(s), seeds))
    return out


def average_soft_masks(masks: list[np.ndarray]) -> np.ndarray:
    return np.mean(np.stack([np.clip(m, 0.0, 1.0) for m in masks]).astype(np.float64), axis=0)


def threshold_mask(mean_soft: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Foreground where the mean strictly exceeds the threshold."""
    return (np.asarray(mean_soft) > threshold).astype(np.uint8)


def ensemble_predict(b, ae1, ae2, predictor: NoisePredictor, schedule: NoiseSchedule,
                     cfg: SamplerConfig, normalize_features: bool = False) -> Prediction:
    """Average ``cfg.n_samples`` masks (seeds seed+i) and threshold the mean."""
    images = _images(b)
    if images.shape[0] != 1:
        raise ValueError("ensemble_predict takes a single C x H x W image; use predict_batch for batches")
    return predict_batch(images, ae1, ae2, predictor, schedule, cfg, normalize_features)[0]


def write_prediction(directory: str | Path, record_id: str, pred: Prediction, meta: dict,
                     snapshots: dict[int, np.ndarray] | None = None) -> dict:
    """Write <id>.soft.f32 (mean soft mask), <id>.mask.u8 and an <id>.json sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"{record_id}.soft.f32").write_bytes(np.ascontiguousarray(pred.mean_soft, dtype="<f4").tobytes())
    (directory / f"{record_id}.mask.u8").write_bytes(np.ascontiguousarray(pred.binary, dtype=np.uint8).tobytes())
    sidecar = {"id": record_id, "shape": list(pred.binary.shape), "seeds": pred.seeds, **meta}
    if snapshots:
        snap_dir = directory / record_id / "snapshots"
        snap_dir.mkdir(parents=True, exist_ok=True)
        for t, arr in sorted(snapshots.items()):
            (snap_dir / f"t_{t:05d}.f32").write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        sidecar["snapshots"] = sorted(int(t) for t in snapshots)
    (directory / f"{record_id}.json").write_text(json.dumps(sidecar, indent=1))
    return sidecar


def read_binary_mask(directory: str | Path, record_id: str) -> np.ndarray:
    directory = Path(directory)
    meta = json.loads((directory / f"{record_id}.json").read_text())
    raw = np.frombuffer((directory / f"{record_id}.mask.u8").read_bytes(), dtype=np.uint8)
    return raw.reshape(meta["shape"])
