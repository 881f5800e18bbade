"""Autoencoder ensembles and the inter/intra discrepancy maps derived from them.

AE-1 ("mixture") is trained on every training slice, AE-2 ("normal_only") on
healthy slices only. For an image b with ensemble mean reconstructions mu1,
mu2 and AE-2 member reconstructions r_j::

    X = mean_c |mu1_c - mu2_c|                       (inter-discrepancy)
    Y = sqrt(mean_j mean_c (r_j,c - mu2_c)^2)        (intra-discrepancy)

Both maps are H x W and nonnegative. Their spatial means are the discrepancy
scores; restricting the channel mean to one modality gives per-modality scores.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .weights import load_state, save_state

log = logging.getLogger(__name__)

ROLES = ("mixture", "normal_only")


@dataclass
class AutoencoderConfig:
    in_channels: int = 4
    height: int = 256
    width: int = 256
    encoder_conv_layers: int = 4
    decoder_deconv_layers: int = 4
    bottleneck_fc_layers: int = 3
    latent_dim: int = 128
    width_schedule: tuple[int, ...] = (32, 64, 128, 256)

    def __post_init__(self) -> None:
        self.width_schedule = tuple(int(w) for w in self.width_schedule)
        if len(self.width_schedule) != self.encoder_conv_layers:
            raise ValueError("width_schedule needs one entry per encoder conv layer")
        if self.decoder_deconv_layers != self.encoder_conv_layers:
            raise ValueError("decoder must mirror the encoder (equal layer counts) to restore the input shape")
        if self.bottleneck_fc_layers < 2:
            raise ValueError("need at least 2 fully connected layers (into and out of the latent)")
        f = 2**self.encoder_conv_layers
        if self.height % f or self.width % f:
            raise ValueError(f"spatial size {self.height}x{self.width} must be divisible by {f}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.in_channels, self.height, self.width)


class ConvAutoencoder(nn.Module):
    """Strided conv encoder, fully connected bottleneck, transposed-conv decoder."""

    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        self.cfg = cfg
        act = lambda: nn.LeakyReLU(0.1)  # noqa: E731
        enc: list[nn.Module] = []
        ch = cfg.in_channels
        for w in cfg.width_schedule:
            enc += [nn.Conv2d(ch, w, 3, stride=2, padding=1), act()]
            ch = w
        self.encoder = nn.Sequential(*enc)

        f = 2**cfg.encoder_conv_layers
        self._grid = (ch, cfg.height // f, cfg.width // f)
        flat = ch * self._grid[1] * self._grid[2]
        dims = [flat] + [cfg.latent_dim] * (cfg.bottleneck_fc_layers - 1) + [flat]
        fc: list[nn.Module] = []
        for a, b in zip(dims[:-1], dims[1:]):
            fc += [nn.Linear(a, b), act()]
        self.bottleneck = nn.Sequential(*fc)

        dec: list[nn.Module] = []
        widths = list(reversed(cfg.width_schedule))
        for i, w in enumerate(widths):
            out = widths[i + 1] if i + 1 < len(widths) else cfg.in_channels
            dec.append(nn.ConvTranspose2d(w, out, 4, stride=2, padding=1))
            if i + 1 < len(widths):
                dec.append(act())
        self.decoder = nn.Sequential(*dec)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.encoder(x)
        h = self.bottleneck(h.flatten(1)).view(-1, *self._grid)
        return self.decoder(h)


def build_autoencoder(cfg: AutoencoderConfig, seed: int) -> ConvAutoencoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ConvAutoencoder(cfg)


@dataclass
class EnsembleModule:
    role: str
    members: list[ConvAutoencoder]
    config: AutoencoderConfig
    seeds: list[int]
    metadata: dict = field(default_factory=dict)
    calls: int = 0  # number of ensemble inference calls, for profiling

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        if len(self.members) < 2:
            raise ValueError("an ensemble needs L >= 2 members")

    @property
    def L(self) -> int:
        return len(self.members)

    def freeze(self) -> "EnsembleModule":
        for m in self.members:
            m.eval()
            m.requires_grad_(False)
        return self

    @torch.no_grad()
    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        """Member reconstructions of a batch, stacked as (L, N, C, H, W)."""
        self.calls += 1
        return torch.stack([m(x) for m in self.members])


def _select(records, role: str):
    if role not in ROLES:
        raise ValueError(f"role must be one of {ROLES}, got {role!r}")
    if role == "normal_only":
        records = [r for r in records if r.label == 0]
        if not records:
            raise ValueError("normal_only ensemble requested but the dataset has no normal samples")
    return records


def _as_batch(records) -> torch.Tensor:
    if isinstance(records, (np.ndarray, torch.Tensor)):
        return torch.as_tensor(np.asarray(records), dtype=torch.float32)
    return torch.from_numpy(np.stack([r.modalities for r in records]).astype(np.float32))


def member_seeds(seed: int, L: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(L)]


def train_ensemble(dataset, role: str, config: AutoencoderConfig, L: int = 3, epochs: int = 200,
                   lr: float = 1e-4, seed: int = 0, batch_size: int = 16) -> EnsembleModule:
    """Train L autoencoders with MSE reconstruction loss and Adam at a fixed rate.

    ``dataset`` is a list of SliceRecord; "normal_only" keeps label-0 records.
    Members are trained independently (the ensemble loss is a sum over members).
    """
    records = _select(list(dataset), role)
    if not records:
        raise ValueError("cannot train an ensemble on an empty dataset")
    if L < 2:
        raise ValueError("an ensemble needs L >= 2 members")
    data = _as_batch(records)
    if tuple(data.shape[1:]) != config.shape:
        raise ValueError(f"data shape {tuple(data.shape[1:])} does not match config {config.shape}")

    seeds = member_seeds(seed, L)
    members, histories = [], []
    for j, s in enumerate(seeds):
        model = build_autoencoder(config, s)
        opt = torch.optim.Adam(model.parameters(), lr=lr)
        rng = np.random.default_rng(s)
        history = []
        for epoch in range(epochs):
            order = torch.from_numpy(rng.permutation(len(data)))
            total = 0.0
            for start in range(0, len(data), batch_size):
                batch = data[order[start : start + batch_size]]
                loss = torch.mean((model(batch) - batch) ** 2)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(batch)
            history.append(total / len(data))
        log.info("%s member %d/%d: final epoch MSE %.3g", role, j + 1, L, history[-1] if history else float("nan"))
        members.append(model)
        histories.append(history)

    module = EnsembleModule(role, members, config, seeds)
    module.freeze()
    module.metadata = {
        "epochs": epochs,
        "lr": lr,
        "batch_size": batch_size,
        "n_train": len(records),
        "seed": seed,
        # summed per-member MSE, one value per epoch
        "loss_history": [float(sum(v)) for v in zip(*histories)] if epochs else [],
        "final_loss": ensemble_loss(module, records),
    }
    return module


@torch.no_grad()
def ensemble_loss(module: EnsembleModule, dataset) -> float:
    """(1/M) * sum over images and members of the per-image mean squared error."""
    data = _as_batch(dataset)
    total = 0.0
    for start in range(0, len(data), 64):
        batch = data[start : start + 64]
        recon = module.reconstruct(batch)
        total += float(((recon - batch[None]) ** 2).mean(dim=(2, 3, 4)).sum(dim=0).double().sum())
    return total / len(data)


def _check_image(b, module: EnsembleModule) -> tuple[torch.Tensor, bool]:
    """Return b as a float32 batch plus whether it was a single image."""
    single = np.ndim(b) == 3
    x = torch.as_tensor(np.asarray(b) if not isinstance(b, torch.Tensor) else b, dtype=torch.float32)
    if single:
        x = x[None]
    if tuple(x.shape[1:]) != module.config.shape:
        raise ValueError(f"image shape {tuple(x.shape[1:])} does not match ensemble shape {module.config.shape}")
    return x, single


def reconstruct_mean(b, module: EnsembleModule):
    """Mean reconstruction and the list of member reconstructions.

    Accepts one C x H x W image or an N x C x H x W batch (numpy or torch);
    numpy input gives numpy output.
    """
    x, single = _check_image(b, module)
    recon = module.reconstruct(x)
    if single:
        recon = recon[:, 0]
    mean = recon.mean(dim=0)
    members = list(recon)
    if not isinstance(b, torch.Tensor):
        return mean.numpy(), [m.numpy() for m in members]
    return mean, members


def inter_discrepancy(mu_ae1, mu_ae2):
    """Channel-mean absolute difference of two mean reconstructions (..., C, H, W) -> (..., H, W)."""
    if tuple(mu_ae1.shape) != tuple(mu_ae2.shape):
        raise ValueError(f"shape mismatch {tuple(mu_ae1.shape)} vs {tuple(mu_ae2.shape)}")
    return abs(mu_ae1 - mu_ae2).mean(axis=-3)


def intra_discrepancy(members_ae2, mu_ae2):
    """Root mean square spread of AE-2 members around their mean, over members and channels."""
    L = len(members_ae2)
    if L < 2:
        raise ValueError("intra-discrepancy needs at least 2 members")
    for m in members_ae2:
        if tuple(m.shape) != tuple(mu_ae2.shape):
            raise ValueError(f"shape mismatch {tuple(m.shape)} vs {tuple(mu_ae2.shape)}")
    acc = sum(((m - mu_ae2) ** 2).mean(axis=-3) for m in members_ae2)
    return (acc / L) ** 0.5


@dataclass
class DiscrepancyFeatures:
    X: np.ndarray  # inter, (H, W) or (N, H, W)
    Y: np.ndarray  # intra, same shape


@dataclass
class DiscrepancyScores:
    inter_global: float
    intra_global: float
    inter_per_modality: np.ndarray
    intra_per_modality: np.ndarray

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inter_per_modality"] = [float(v) for v in self.inter_per_modality]
        d["intra_per_modality"] = [float(v) for v in self.intra_per_modality]
        return d


def minmax_map(m: np.ndarray) -> np.ndarray:
    """Min-max scale each H x W map to [0, 1]; constant maps become zeros."""
    m = np.asarray(m, dtype=np.float32)
    flat = m.reshape(-1, m.shape[-2] * m.shape[-1])
    lo = flat.min(axis=1, keepdims=True)
    span = flat.max(axis=1, keepdims=True) - lo
    out = np.where(span > 0, (flat - lo) / np.where(span > 0, span, 1.0), 0.0)
    return out.reshape(m.shape).astype(np.float32)


def _check_pair(ae1: EnsembleModule, ae2: EnsembleModule) -> None:
    if ae1.config.shape != ae2.config.shape:
        raise ValueError(f"ensemble shapes differ: {ae1.config.shape} vs {ae2.config.shape}")


def compute_features(b, ae1: EnsembleModule, ae2: EnsembleModule, normalize: bool = False,
                     batch_size: int = 64) -> DiscrepancyFeatures:
    """X and Y maps for one image (C, H, W) or a batch (N, C, H, W)."""
    _check_pair(ae1, ae2)
    x, single = _check_image(b, ae1)
    Xs, Ys = [], []
    for start in range(0, len(x), batch_size):
        chunk = x[start : start + batch_size]
        r1 = ae1.reconstruct(chunk)
        r2 = ae2.reconstruct(chunk)
        mu2 = r2.mean(dim=0)
        Xs.append(inter_discrepancy(r1.mean(dim=0), mu2))
        Ys.append(intra_discrepancy(list(r2), mu2))
    X = torch.cat(Xs).numpy()
    Y = torch.cat(Ys).numpy()
    if normalize:
        X, Y = minmax_map(X), minmax_map(Y)
    if single:
        X, Y = X[0], Y[0]
    return DiscrepancyFeatures(X, Y)


def discrepancy_scores(b, ae1: EnsembleModule, ae2: EnsembleModule):
    """Global and per-modality scores; a list of scores when ``b`` is a batch."""
    _check_pair(ae1, ae2)
    x, single = _check_image(b, ae1)
    out = []
    for start in range(0, len(x), 64):
        chunk = x[start : start + 64]
        r1 = ae1.reconstruct(chunk).double()
        r2 = ae2.reconstruct(chunk).double()
        mu1, mu2 = r1.mean(dim=0), r2.mean(dim=0)
        X = inter_discrepancy(mu1, mu2)
        Y = intra_discrepancy(list(r2), mu2)
        # per-modality maps: (N, C, H, W)
        X_c = (mu1 - mu2).abs()
        Y_c = ((r2 - mu2[None]) ** 2).mean(dim=0).sqrt()
        for i in range(len(chunk)):
            out.append(DiscrepancyScores(
                inter_global=float(X[i].mean()),
                intra_global=float(Y[i].mean()),
                inter_per_modality=X_c[i].mean(dim=(1, 2)).numpy(),
                intra_per_modality=Y_c[i].mean(dim=(1, 2)).numpy(),
            ))
    return out[0] if single else out


# --- checkpoints ------------------------------------------------------------


def save_ensemble(module: EnsembleModule, directory: str | Path) -> dict:
    """Write descriptor.json plus one weight blob per member; returns the descriptor."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for j, m in enumerate(module.members):
        name = f"member_{j}.wts"
        digest = save_state(directory / name, m.state_dict())
        files.append({"file": name, "sha256": digest, "seed": module.seeds[j]})
    cfg = asdict(module.config)
    cfg["width_schedule"] = list(cfg["width_schedule"])
    descriptor = {
        "format": "ddmd-ensemble",
        "version": 1,
        "role": module.role,
        "L": module.L,
        "config": cfg,
        "seeds": list(module.seeds),
        "members": files,
        "training": module.metadata,
    }
    (directory / "descriptor.json").write_text(json.dumps(descriptor, indent=1))
    return descriptor


def load_ensemble(directory: str | Path) -> EnsembleModule:
    directory = Path(directory)
    d = json.loads((directory / "descriptor.json").read_text())
    if d.get("format") != "ddmd-ensemble" or d.get("version") != 1:
        raise ValueError(f"{directory} is not a version-1 ensemble checkpoint")
    cfg = AutoencoderConfig(**d["config"])
    members = []
    for entry in d["members"]:
        m = ConvAutoencoder(cfg)
        m.load_state_dict(load_state(directory / entry["file"]))
        members.append(m)
    module = EnsembleModule(d["role"], members, cfg, list(d["seeds"]), d.get("training", {}))
    return module.freeze()
