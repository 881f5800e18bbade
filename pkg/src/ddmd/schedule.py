"""Closed-form diffusion arithmetic: schedule tables, forward noising, one reverse step.

Step indices are 1-based (t = 1..T) everywhere in the public API. Tables are
stored 0-based, so ``schedule.beta[t - 1]`` is β_t.

All functions work on numpy arrays and torch tensors alike. ``t`` may be a
plain int, or a 1-D integer array/tensor with one step per leading-axis item.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed β/α/ᾱ/σ tables (float64) over ``T`` steps."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    sigma: np.ndarray = field(repr=False)
    beta_start: float = 0.0
    beta_end: float = 0.0

    def __post_init__(self) -> None:
        for name in ("beta", "alpha", "alpha_bar", "sigma"):
            arr = getattr(self, name)
            if arr.shape != (self.T,):
                raise ValueError(f"{name} must have shape ({self.T},), got {arr.shape}")
            arr.setflags(write=False)

    def check_step(self, t) -> None:
        lo, hi = _step_bounds(t)
        if lo < 1 or hi > self.T:
            raise ValueError(f"step index out of range 1..{self.T}: {t!r}")

    def to_dict(self) -> dict:
        return {"kind": "linear", "T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        if d.get("kind", "linear") != "linear":
            raise ValueError(f"unsupported schedule kind {d.get('kind')!r}")
        return make_linear_schedule(int(d["T"]), float(d["beta_start"]), float(d["beta_end"]))


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if not isinstance(T, (int, np.integer)) or isinstance(T, bool) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
        )
    T = int(T)
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(beta)
    # last reverse step (t=1) is deterministic
    sigma[0] = 0.0
    return NoiseSchedule(
        T=T,
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        sigma=sigma,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
    )


def scaled_linear_schedule(T: int, reference_T: int = 1000, beta_start: float = 1e-4,
                           beta_end: float = 0.02) -> NoiseSchedule:
    """Linear schedule for a shorter chain with the same total noise budget.

    Endpoints are multiplied by ``reference_T / T`` (capped below 1) so that
    ᾱ_T stays near zero when T is much smaller than 1000.
    """
    scale = reference_T / T
    return make_linear_schedule(T, min(beta_start * scale, 0.5), min(beta_end * scale, 0.999))


def _step_bounds(t) -> tuple[int, int]:
    if isinstance(t, (int, np.integer)) and not isinstance(t, bool):
        return int(t), int(t)
    if isinstance(t, torch.Tensor):
        if t.dtype.is_floating_point:
            raise TypeError("step indices must be integers")
        return int(t.min()), int(t.max())
    arr = np.asarray(t)
    if not np.issubdtype(arr.dtype, np.integer):
        raise TypeError("step indices must be integers")
    return int(arr.min()), int(arr.max())


def _coef(table: np.ndarray, t, like):
    """Look up ``table`` at 1-based ``t``, shaped to broadcast against ``like``."""
    if isinstance(t, (int, np.integer)):
        return float(table[int(t) - 1])
    if isinstance(like, torch.Tensor):
        idx = torch.as_tensor(t, device=like.device).long() - 1
        vals = torch.tensor(table, dtype=like.dtype, device=like.device)[idx]
    else:
        vals = table[np.asarray(t) - 1].astype(np.result_type(like.dtype, np.float32), copy=False)
    return vals.reshape((-1,) + (1,) * (like.ndim - 1))


def _check_same_shape(a, b, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {what} {tuple(a.shape)} vs {tuple(b.shape)}")


def q_sample(x0, t, eps, schedule: NoiseSchedule):
    """Noise ``x0`` to step ``t``: sqrt(ᾱ_t)·x0 + sqrt(1−ᾱ_t)·eps."""
    _check_same_shape(x0, eps, "x0/eps")
    schedule.check_step(t)
    ab = _coef(schedule.alpha_bar, t, x0)
    if isinstance(ab, float):
        return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps
    return ab**0.5 * x0 + (1.0 - ab) ** 0.5 * eps


def reverse_step(x_t, eps_hat, t, z, schedule: NoiseSchedule):
    """One ancestral step x_t -> x_{t-1} from a noise prediction.

    ``z`` is the caller's unit Gaussian draw; it is ignored where t == 1.
    """
    _check_same_shape(x_t, eps_hat, "x_t/eps_hat")
    _check_same_shape(x_t, z, "x_t/z")
    schedule.check_step(t)
    a = _coef(schedule.alpha, t, x_t)
    ab = _coef(schedule.alpha_bar, t, x_t)
    sig = _coef(schedule.sigma, t, x_t)
    if isinstance(a, float):
        mean = (x_t - ((1.0 - a) / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(a)
        return mean if int(t) == 1 else mean + sig * z
    mean = (x_t - ((1.0 - a) / (1.0 - ab) ** 0.5) * eps_hat) / a**0.5
    # sigma table is already 0 at t=1
    return mean + sig * z
