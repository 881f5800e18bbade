"""Diffusion training loop: noise only the mask, condition on image + discrepancy maps."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .denoiser import (
    ChannelMismatchError,
    NoisePredictor,
    check_input,
    extra_channels,
    mask_to_model,
    save_predictor,
    stack_conditioning,
)
from .discrepancy import EnsembleModule, compute_features
from .schedule import NoiseSchedule, q_sample
from .weights import state_digest

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    T: int = 1000
    batch_size: int = 10
    lr: float = 1e-4
    iterations: int = 120_000
    variant: str = "full"
    seed: int = 0
    checkpoint_every: int = 0
    grad_clip: float | None = None
    ema_decay: float | None = None
    normalize_features: bool = False
    use_feature_cache: bool = False
    log_every: int = 500

    def __post_init__(self) -> None:
        extra_channels(self.variant)
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainResult:
    predictor: NoisePredictor
    loss_history: list[float] = field(default_factory=list)


def compute_loss(eps, eps_hat):
    """Mean squared difference between true and predicted noise."""
    if tuple(eps.shape) != tuple(eps_hat.shape):
        raise ValueError(f"shape mismatch: eps {tuple(eps.shape)} vs eps_hat {tuple(eps_hat.shape)}")
    if isinstance(eps, torch.Tensor):
        return ((eps - eps_hat) ** 2).mean()
    return float(np.mean((np.asarray(eps, dtype=np.float64) - np.asarray(eps_hat, dtype=np.float64)) ** 2))


def sample_timesteps(n: int, T: int, generator: torch.Generator) -> torch.Tensor:
    """n steps drawn uniformly from {1, ..., T}."""
    return torch.randint(1, T + 1, (n,), generator=generator)


class FeatureCache:
    """Discrepancy maps precomputed once per record, as (N, H, W) tensors."""

    def __init__(self, X: torch.Tensor, Y: torch.Tensor):
        self.X, self.Y = X, Y

    @classmethod
    def build(cls, images: torch.Tensor, ae1: EnsembleModule, ae2: EnsembleModule,
              normalize: bool = False) -> "FeatureCache":
        f = compute_features(images, ae1, ae2, normalize=normalize)
        return cls(torch.from_numpy(f.X), torch.from_numpy(f.Y))

    def get(self, idx: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.X[idx], self.Y[idx]


def _stack_records(records) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.from_numpy(np.stack([r.modalities for r in records]).astype(np.float32))
    masks = torch.from_numpy(np.stack([r.mask for r in records]).astype(np.float32))[:, None]
    return images, mask_to_model(masks)


class _Batches:
    """Shuffled epochs without replacement; a short final batch is allowed."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n, self.bs = n, batch_size
        self.rng = np.random.default_rng(seed)
        self.order = np.empty(0, dtype=np.int64)
        self.pos = 0

    def next(self) -> torch.Tensor:
        if self.pos >= len(self.order):
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.order[self.pos : self.pos + self.bs]
        self.pos += self.bs
        return torch.from_numpy(idx)


def train_ddmd(dataset, ae1: EnsembleModule | None, ae2: EnsembleModule | None,
               predictor: NoisePredictor, schedule: NoiseSchedule, cfg: TrainConfig,
               checkpoint_dir: str | Path | None = None) -> TrainResult:
    """Train ``predictor`` in place and return it with the per-iteration loss history.

    Each iteration: draw a batch of (b, x_b); get (X, Y) from the frozen
    ensembles; draw t ~ U{1..T} and eps ~ N(0, I); noise the mask to x_{b,t};
    stack [b, X?, Y?, x_{b,t}]; take an Adam step on mean ||eps - eps_theta||^2.
    The variant decides which maps are stacked; "mini" never touches the ensembles.
    """
    records = list(dataset)
    if not records:
        raise ValueError("empty training set")
    if cfg.T != schedule.T:
        raise ValueError(f"TrainConfig.T={cfg.T} but schedule has T={schedule.T}")
    if predictor.config.variant != cfg.variant:
        raise ChannelMismatchError(f"predictor variant {predictor.config.variant!r} vs train variant {cfg.variant!r}")
    k = extra_channels(cfg.variant)
    if k > 0:
        if ae1 is None or ae2 is None:
            raise ValueError(f"variant {cfg.variant!r} needs both trained ensembles")
        for ae in (ae1, ae2):
            if any(p.requires_grad for m in ae.members for p in m.parameters()):
                raise ValueError(f"ensemble {ae.role!r} is not frozen")
        digests = [state_digest(m) for ae in (ae1, ae2) for m in ae.members]

    images, masks = _stack_records(records)
    check_input(predictor, torch.zeros(1, predictor.config.in_channels, *images.shape[2:]))
    cache = None
    if k > 0 and cfg.use_feature_cache:
        cache = FeatureCache.build(images, ae1, ae2, cfg.normalize_features)

    gen = torch.Generator().manual_seed(cfg.seed)
    batches = _Batches(len(records), cfg.batch_size, cfg.seed)
    opt = torch.optim.Adam(predictor.parameters(), lr=cfg.lr)
    ema = copy.deepcopy(predictor).requires_grad_(False) if cfg.ema_decay else None
    predictor.train()
    predictor.T = schedule.T
    history: list[float] = []

    for it in range(1, cfg.iterations + 1):
        idx = batches.next()
        b, x_b = images[idx], masks[idx]
        X = Y = None
        if k > 0:
            if cache is not None:
                X, Y = cache.get(idx)
            else:
                f = compute_features(b, ae1, ae2, normalize=cfg.normalize_features)
                X, Y = torch.from_numpy(f.X), torch.from_numpy(f.Y)
        t = sample_timesteps(len(idx), schedule.T, gen)
        eps = torch.randn(x_b.shape, generator=gen)
        x_bt = q_sample(x_b, t, eps, schedule)
        pack = stack_conditioning(b, X, Y, x_bt, cfg.variant)

        loss = compute_loss(eps, predictor(pack, t))
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(
                f"non-finite loss {value} at iteration {it} (t={t.tolist()}, lr={cfg.lr}); "
                f"last finite loss {history[-1] if history else 'n/a'}"
            )
        opt.zero_grad()
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(predictor.parameters(), cfg.grad_clip)
        opt.step()
        if ema is not None:
            with torch.no_grad():
                for pe, p in zip(ema.parameters(), predictor.parameters()):
                    pe.mul_(cfg.ema_decay).add_(p.detach(), alpha=1.0 - cfg.ema_decay)
        history.append(value)

        if cfg.log_every and it % cfg.log_every == 0:
            log.info("iter %d  loss %.4f (mean of last %d: %.4f)", it, value, cfg.log_every,
                     float(np.mean(history[-cfg.log_every:])))
        if checkpoint_dir and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            save_predictor(ema or predictor, Path(checkpoint_dir) / f"iter_{it:07d}", {"iteration": it})

    if k > 0:
        after = [state_digest(m) for ae in (ae1, ae2) for m in ae.members]
        if after != digests:
            raise RuntimeError("ensemble parameters changed during diffusion training")

    if ema is not None:
        predictor.load_state_dict(ema.state_dict())
    predictor.eval()
    return TrainResult(predictor, history)


def write_loss_csv(history: list[float], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for i, v in enumerate(history, start=1):
            w.writerow([i, repr(float(v))])
