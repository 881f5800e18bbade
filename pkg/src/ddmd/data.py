"""Slice records, label derivation, I_A/I_B splits, synthetic phantoms and the on-disk format.

On-disk layout written by :func:`write_dataset`::

    <root>/manifest.json
    <root>/blobs/<id>.img.f32     C*H*W little-endian float32, C order (channel, row, col)
    <root>/blobs/<id>.mask.u8     H*W uint8, values 0/1, row-major

Manifest schema (version 1)::

    {"version": 1, "C": int, "H": int, "W": int, "normalization": str,
     "records": [{"id": str, "modality_blob": str, "mask_blob": str,
                  "label": 0|1, "split": str}, ...]}

Blob paths are relative to the manifest's directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

MANIFEST_VERSION = 1


class DatasetError(Exception):
    """Base class for dataset ingestion failures."""


class ManifestError(DatasetError):
    pass


class MissingFileError(DatasetError):
    pass


class ShapeMismatchError(DatasetError):
    pass


class CorruptBlobError(DatasetError):
    pass


class LabelMismatchError(DatasetError):
    pass


@dataclass
class SliceRecord:
    modalities: np.ndarray  # (C, H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    label: int
    id: str = ""
    split: str = "train"

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.modalities.shape)


@dataclass
class DatasetManifest:
    C: int
    H: int
    W: int
    records: list[dict] = field(default_factory=list)
    normalization: str = "minmax"
    version: int = MANIFEST_VERSION

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "C": self.C,
            "H": self.H,
            "W": self.W,
            "normalization": self.normalization,
            "records": self.records,
        }


def derive_label(mask: np.ndarray) -> int:
    mask = np.asarray(mask)
    if mask.size and not np.isin(mask, (0, 1)).all():
        raise ValueError("mask must be binary (values in {0, 1})")
    return int(mask.any())


def split_datasets(records: list[SliceRecord]) -> tuple[list[SliceRecord], list[SliceRecord]]:
    """Return (I_A, I_B): the normal-only subset and the full mixture."""
    if not records:
        raise ValueError("no records to split")
    normal = [r for r in records if r.label == 0]
    if not normal:
        raise ValueError("no healthy (label 0) records: the normal-only ensemble cannot be trained")
    return normal, list(records)


def balance_records(records: list[SliceRecord], seed: int = 0) -> list[SliceRecord]:
    """Downsample the majority label so both labels have equal counts (within one)."""
    rng = np.random.default_rng(seed)
    normal = [r for r in records if r.label == 0]
    abnormal = [r for r in records if r.label == 1]
    n = min(len(normal), len(abnormal))
    keep = []
    for group in (normal, abnormal):
        idx = np.sort(rng.choice(len(group), size=n, replace=False)) if len(group) > n else range(len(group))
        keep.extend(group[i] for i in idx)
    order = {id(r): i for i, r in enumerate(records)}
    return sorted(keep, key=lambda r: order[id(r)])


def normalize_minmax(img: np.ndarray) -> np.ndarray:
    """Per-channel min-max to [0, 1]; constant channels map to all zeros."""
    img = np.asarray(img, dtype=np.float32)
    out = np.zeros_like(img)
    for c in range(img.shape[0]):
        lo, hi = float(img[c].min()), float(img[c].max())
        if hi > lo:
            out[c] = (img[c] - lo) / (hi - lo)
    return out


def zscore_dataset(records: list[SliceRecord]) -> list[SliceRecord]:
    """Per-dataset, per-channel z-scoring (alternative to per-slice min-max)."""
    stack = np.stack([r.modalities for r in records]).astype(np.float64)
    mean = stack.mean(axis=(0, 2, 3), keepdims=True)[0]
    std = stack.std(axis=(0, 2, 3), keepdims=True)[0]
    std[std == 0] = 1.0
    return [
        SliceRecord(((r.modalities - mean) / std).astype(np.float32), r.mask, r.label, r.id, r.split)
        for r in records
    ]


# --- synthetic phantoms -----------------------------------------------------

# Lesion intensity offset from the tissue base level per modality, cycled when
# C > 4. Loosely mimics T1 (slightly dark), T1ce, T2, FLAIR (bright). Lesion
# pixels blend toward base + lesion_contrast * signature.
_LESION_SIGNATURE = np.array([-0.35, 0.8, 0.55, 1.0])
# Normal tissue offsets, same modality order.
_CORTEX = np.array([-0.08, -0.05, 0.1, 0.06])
_VENTRICLE = np.array([-0.25, -0.2, 0.3, -0.25])
_NUCLEUS = np.array([0.08, 0.06, -0.08, 0.02])


def _ellipse(yy, xx, cy, cx, ry, rx, theta):
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v


def _phantom(rng: np.random.Generator, C: int, H: int, W: int, abnormal: bool,
             lesion_fraction: tuple[float, float], lesion_contrast: float):
    yy, xx = np.meshgrid(np.linspace(-1, 1, H), np.linspace(-1, 1, W), indexing="ij")
    px = 2.0 / max(H, W)
    scale = max(H, W) / 64.0

    cy, cx = rng.uniform(-0.05, 0.05, size=2)
    ry, rx = rng.uniform(0.78, 0.9), rng.uniform(0.68, 0.8)
    rot = rng.uniform(-0.3, 0.3)
    q_head = _ellipse(yy, xx, cy, cx, ry, rx, rot)
    brain = (q_head <= 1.0).astype(np.float64)
    # bright scalp ring: anchors per-slice min-max so lesions do not rescale the slice
    scalp = ((q_head > 1.0) & (q_head <= 1.12**2)).astype(np.float64)

    gain = rng.uniform(0.85, 1.15, size=C)
    base = rng.uniform(0.4, 0.5, size=C)
    img = brain[None] * base[:, None, None] + scalp[None] * rng.uniform(1.25, 1.4, size=C)[:, None, None]

    def tissue(region, contrast):
        jitter = rng.uniform(0.8, 1.2, size=C)
        return (region * brain)[None] * (np.resize(contrast, C) * jitter)[:, None, None]

    # cortex band just inside the brain outline
    img += tissue(q_head > rng.uniform(0.72, 0.8) ** 2, _CORTEX)
    # paired structures, mirrored about the midline (in the head frame)
    c, s = np.cos(rot), np.sin(rot)
    for (oy, ox, ay, ax), contrast in ((( -0.12, 0.2, 0.3, 0.11), _VENTRICLE), ((0.25, 0.32, 0.12, 0.1), _NUCLEUS)):
        dy, dx = oy + rng.normal(0, 0.03), ox + rng.normal(0, 0.03)
        ay, ax = ay * rng.uniform(0.85, 1.15), ax * rng.uniform(0.85, 1.15)
        for side in (-1, 1):
            py, px_ = cy + dy * c + side * dx * s, cx - dy * s + side * dx * c
            img += tissue(_ellipse(yy, xx, py, px_, ay * ry, ax * rx, rot + side * 0.15) <= 1.0, contrast)
    # low-contrast individual variation
    for _ in range(rng.integers(0, 3)):
        r = np.sqrt(rng.uniform(0, 0.5**2))
        a = rng.uniform(0, 2 * np.pi)
        region = _ellipse(yy, xx, cy + r * np.sin(a) * ry, cx + r * np.cos(a) * rx,
                          rng.uniform(0.06, 0.15), rng.uniform(0.06, 0.15), rng.uniform(0, np.pi)) <= 1.0
        img += tissue(region, rng.uniform(-0.06, 0.06, size=C))

    mask = np.zeros((H, W), dtype=bool)
    if abnormal:
        n_blobs = int(rng.integers(1, 4))
        frac = rng.uniform(*lesion_fraction)
        area = frac * H * W / n_blobs
        signature = np.resize(_LESION_SIGNATURE, C) * lesion_contrast
        for _ in range(n_blobs):
            aspect = rng.uniform(0.65, 1.5)
            # semi-axes in pixels from area = pi * a * b
            b_px = np.sqrt(area / (np.pi * aspect))
            a_px = aspect * b_px
            r = np.sqrt(rng.uniform(0, 0.45**2))
            ang = rng.uniform(0, 2 * np.pi)
            ly, lx = cy + r * np.sin(ang) * ry, cx + r * np.cos(ang) * rx
            q = _ellipse(yy, xx, ly, lx, a_px * px, b_px * px, rng.uniform(0, np.pi))
            blob = (q <= 1.0) & (brain > 0)
            if not blob.any():
                # force at least the center pixel
                iy = int(np.clip(round((ly + 1) / 2 * (H - 1)), 0, H - 1))
                ix = int(np.clip(round((lx + 1) / 2 * (W - 1)), 0, W - 1))
                blob[iy, ix] = True
            weight = (blob * (0.7 + 0.3 * np.clip(1.0 - q, 0.0, 1.0)))[None]
            target = (base + signature * rng.uniform(0.8, 1.2, size=C))[:, None, None]
            img = (1.0 - weight) * img + weight * target
            mask |= blob

    img *= gain[:, None, None]
    for c in range(C):
        img[c] = ndimage.gaussian_filter(img[c], sigma=0.8 * scale)
        img[c] += 0.04 * ndimage.gaussian_filter(rng.standard_normal((H, W)), sigma=3.0 * scale) * 3.0
        img[c] += 0.01 * rng.standard_normal((H, W))
    return normalize_minmax(img), mask.astype(np.uint8)


def generate_synthetic(n_normal: int, n_abnormal: int, C: int = 4, H: int = 64, W: int = 64,
                       seed: int = 0, *, lesion_fraction: tuple[float, float] = (0.02, 0.08),
                       lesion_contrast: float = 0.6, test_fraction: float = 0.0) -> list[SliceRecord]:
    """Deterministic multimodal brain-like phantoms with exact lesion masks.

    Each record draws from its own child seed, so record ``i`` does not depend
    on how many other records are generated. ``test_fraction`` tags a
    label-stratified share of records with split "test".
    """
    if H < 32 or W < 32:
        raise ValueError(f"H and W must be >= 32, got {H}x{W}")
    if C < 1:
        raise ValueError(f"C must be >= 1, got {C}")
    if n_normal < 0 or n_abnormal < 0 or n_normal + n_abnormal == 0:
        raise ValueError("need nonnegative counts with at least one record")
    lo, hi = lesion_fraction
    if not (0.0 < lo <= hi < 1.0):
        raise ValueError(f"invalid lesion_fraction {lesion_fraction}")
    if not (0.0 <= test_fraction < 1.0):
        raise ValueError(f"test_fraction must be in [0, 1), got {test_fraction}")

    n = n_normal + n_abnormal
    root = np.random.SeedSequence(seed)
    layout_rng = np.random.default_rng(root.spawn(1)[0])
    labels = np.array([0] * n_normal + [1] * n_abnormal)
    labels = labels[layout_rng.permutation(n)]
    split = np.array(["train"] * n, dtype=object)
    for lab in (0, 1):
        idx = np.flatnonzero(labels == lab)
        n_test = int(round(test_fraction * len(idx)))
        split[layout_rng.choice(idx, size=n_test, replace=False)] = "test"

    records = []
    for i, child in enumerate(np.random.SeedSequence([seed, 1]).spawn(n)):
        rng = np.random.default_rng(child)
        img, mask = _phantom(rng, C, H, W, bool(labels[i]), (lo, hi), lesion_contrast)
        records.append(SliceRecord(img, mask, int(labels[i]), f"s{seed}_{i:05d}", str(split[i])))
    return records


# --- on-disk format ---------------------------------------------------------


def write_dataset(records: list[SliceRecord], root: str | Path, normalization: str = "minmax") -> Path:
    if not records:
        raise ValueError("no records to write")
    root = Path(root)
    (root / "blobs").mkdir(parents=True, exist_ok=True)
    C, H, W = records[0].shape
    manifest = DatasetManifest(C=C, H=H, W=W, normalization=normalization)
    for r in records:
        if r.shape != (C, H, W) or r.mask.shape != (H, W):
            raise ShapeMismatchError(f"record {r.id!r} does not match {(C, H, W)}")
        img_rel = f"blobs/{r.id}.img.f32"
        mask_rel = f"blobs/{r.id}.mask.u8"
        (root / img_rel).write_bytes(np.ascontiguousarray(r.modalities, dtype="<f4").tobytes())
        (root / mask_rel).write_bytes(np.ascontiguousarray(r.mask, dtype=np.uint8).tobytes())
        manifest.records.append(
            {"id": r.id, "modality_blob": img_rel, "mask_blob": mask_rel, "label": int(r.label), "split": r.split}
        )
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest.to_dict(), indent=1))
    return path


def read_manifest(manifest_path: str | Path) -> DatasetManifest:
    path = Path(manifest_path)
    if not path.is_file():
        raise MissingFileError(f"manifest not found: {path}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    if d.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {d.get('version')!r}")
    try:
        return DatasetManifest(C=int(d["C"]), H=int(d["H"]), W=int(d["W"]), records=list(d["records"]),
                               normalization=d.get("normalization", "minmax"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"manifest missing or malformed field: {exc}") from exc


def _read_blob(path: Path, dtype: str, count: int, what: str) -> np.ndarray:
    if not path.is_file():
        raise MissingFileError(f"{what} blob not found: {path}")
    raw = path.read_bytes()
    itemsize = np.dtype(dtype).itemsize
    if len(raw) % itemsize:
        raise CorruptBlobError(f"{what} blob {path} has {len(raw)} bytes, not a multiple of {itemsize}")
    if len(raw) // itemsize != count:
        raise ShapeMismatchError(f"{what} blob {path} holds {len(raw) // itemsize} values, expected {count}")
    return np.frombuffer(raw, dtype=dtype)


def load_dataset(manifest_path: str | Path, normalization: str = "minmax") -> list[SliceRecord]:
    """Load, shape-check, validate and normalize every record in a manifest.

    ``normalization`` is "minmax" (per slice and channel), "zscore" (per
    dataset and channel) or "none".
    """
    manifest = read_manifest(manifest_path)
    root = Path(manifest_path).parent
    C, H, W = manifest.C, manifest.H, manifest.W
    records = []
    for entry in manifest.records:
        try:
            rid, img_rel, mask_rel = entry["id"], entry["modality_blob"], entry["mask_blob"]
            label = int(entry["label"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"malformed record entry {entry!r}") from exc
        img = _read_blob(root / img_rel, "<f4", C * H * W, "modality").reshape(C, H, W)
        if not np.isfinite(img).all():
            raise CorruptBlobError(f"modality blob for {rid!r} contains non-finite values")
        mask = _read_blob(root / mask_rel, "u1", H * W, "mask").reshape(H, W)
        if not np.isin(mask, (0, 1)).all():
            raise CorruptBlobError(f"mask blob for {rid!r} is not binary")
        if derive_label(mask) != label:
            raise LabelMismatchError(f"record {rid!r}: manifest label {label} disagrees with its mask")
        if normalization == "minmax":
            img = normalize_minmax(img)
        elif normalization in ("none", "zscore"):
            img = img.astype(np.float32)
        else:
            raise ValueError(f"unknown normalization {normalization!r}")
        records.append(SliceRecord(img, mask.copy(), label, rid, entry.get("split", "train")))
    if normalization == "zscore" and records:
        records = zscore_dataset(records)
    return records
