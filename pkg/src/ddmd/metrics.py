"""Segmentation metrics (Dice, two-class mean IoU, pixel accuracy) and score reports.

Conventions for empty classes: Dice is 1.0 when both masks are empty, and a
class absent from both masks has IoU 1.0. Mean IoU averages background and
lesion IoU.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata


def _check(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    for name, m in (("pred", pred), ("gt", gt)):
        if m.dtype != bool and not np.isin(m, (0, 1)).all():
            raise ValueError(f"{name} mask must be binary")
    return pred.astype(bool), gt.astype(bool)


def pixel_accuracy(pred, gt) -> float:
    p, g = _check(pred, gt)
    return float((p == g).sum() / p.size)


def dice(pred, gt) -> float:
    p, g = _check(pred, gt)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def _iou(p: np.ndarray, g: np.ndarray) -> float:
    union = int((p | g).sum())
    return 1.0 if union == 0 else int((p & g).sum()) / union


def lesion_iou(pred, gt) -> float:
    p, g = _check(pred, gt)
    return _iou(p, g)


def miou(pred, gt) -> float:
    p, g = _check(pred, gt)
    return 0.5 * (_iou(p, g) + _iou(~p, ~g))


@dataclass
class SegScores:
    dice: float
    miou: float
    pa: float


def score_masks(pred, gt) -> SegScores:
    return SegScores(dice(pred, gt), miou(pred, gt), pixel_accuracy(pred, gt))


def aggregate(scores: list[SegScores]) -> dict:
    """Per-image mean and population std for each metric."""
    if not scores:
        raise ValueError("no scores to aggregate")
    out = {}
    for key in ("dice", "miou", "pa"):
        vals = np.array([getattr(s, key) for s in scores], dtype=np.float64)
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


def pooled(preds, gts) -> SegScores:
    """Metrics over all pixels of all images at once."""
    p = np.concatenate([np.asarray(x).ravel() for x in preds])
    g = np.concatenate([np.asarray(x).ravel() for x in gts])
    return score_masks(p, g)


def evaluation_summary(ids: list[str], preds, gts, labels=None, fold: str | None = None) -> dict:
    per_image = [score_masks(p, g) for p, g in zip(preds, gts)]
    summary = {
        "n_images": len(per_image),
        "per_image_mean_std": aggregate(per_image),
        "pooled": asdict(pooled(preds, gts)),
        "conventions": {
            "miou": "mean of background and lesion IoU",
            "empty": "Dice=1 and class IoU=1 when both masks lack the class",
        },
        "rows": [{"id": i, **asdict(s)} for i, s in zip(ids, per_image)],
    }
    if labels is not None:
        summary["rows"] = [dict(r, label=int(lab)) for r, lab in zip(summary["rows"], labels)]
    if fold is not None:
        summary["fold"] = fold
    return summary


def write_evaluation(summary: dict, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = summary["rows"]
    with open(directory / "per_image.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)
    body = {k: v for k, v in summary.items() if k != "rows"}
    (directory / "summary.json").write_text(json.dumps(body, indent=1))


SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["n_images", "per_image_mean_std", "pooled", "conventions"],
    "properties": {
        "n_images": {"type": "integer", "minimum": 1},
        "per_image_mean_std": {
            "type": "object",
            "required": ["dice", "miou", "pa"],
            "additionalProperties": {
                "type": "object",
                "required": ["mean", "std"],
                "properties": {
                    "mean": {"type": "number", "minimum": 0, "maximum": 1},
                    "std": {"type": "number", "minimum": 0},
                },
            },
        },
        "pooled": {
            "type": "object",
            "required": ["dice", "miou", "pa"],
            "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1},
        },
        "conventions": {"type": "object"},
    },
}


# --- discrepancy score reports ---------------------------------------------


def auroc(negatives, positives) -> float:
    """Probability a random positive outscores a random negative (ties count half)."""
    neg = np.asarray(negatives, dtype=np.float64)
    pos = np.asarray(positives, dtype=np.float64)
    if neg.size == 0 or pos.size == 0:
        raise ValueError("AUROC needs at least one sample per class")
    ranks = rankdata(np.concatenate([neg, pos]))
    u = ranks[len(neg):].sum() - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(neg) * len(pos)))


def overlap_coefficient(counts_a, counts_b) -> float:
    """Shared mass of two histograms after normalizing each to sum 1."""
    a = np.asarray(counts_a, dtype=np.float64)
    b = np.asarray(counts_b, dtype=np.float64)
    if a.sum() == 0 or b.sum() == 0:
        return 0.0
    return float(np.minimum(a / a.sum(), b / b.sum()).sum())


def normalize_scores(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.full_like(v, 0.5)
    return (v - lo) / (hi - lo)


def _family(values: np.ndarray, labels: np.ndarray, bins: int) -> dict:
    norm = normalize_scores(values)
    edges = np.linspace(0.0, 1.0, bins + 1)
    c0, _ = np.histogram(norm[labels == 0], bins=edges)
    c1, _ = np.histogram(norm[labels == 1], bins=edges)
    fam = {
        "edges": edges.tolist(),
        "counts_normal": c0.tolist(),
        "counts_abnormal": c1.tolist(),
        "overlap": overlap_coefficient(c0, c1),
        "auroc": None,
    }
    if (labels == 0).any() and (labels == 1).any():
        fam["auroc"] = auroc(norm[labels == 0], norm[labels == 1])
    return fam


def histogram_report(scores, labels, bins: int = 20) -> dict:
    """Normalized score histograms by label, overlap and AUROC per score family.

    Families are "inter_global", "intra_global" and "inter_c{k}"/"intra_c{k}"
    for every modality k. Each family is min-max scaled to [0, 1] over all
    images (a constant family maps to 0.5).
    """
    scores = list(scores)
    if not scores:
        raise ValueError("empty score list")
    labels = np.asarray(labels, dtype=int)
    if len(labels) != len(scores):
        raise ValueError("need one label per score")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    families = {
        "inter_global": np.array([s.inter_global for s in scores]),
        "intra_global": np.array([s.intra_global for s in scores]),
    }
    C = len(scores[0].inter_per_modality)
    for c in range(C):
        families[f"inter_c{c}"] = np.array([s.inter_per_modality[c] for s in scores])
        families[f"intra_c{c}"] = np.array([s.intra_per_modality[c] for s in scores])
    return {
        "bins": bins,
        "n_normal": int((labels == 0).sum()),
        "n_abnormal": int((labels == 1).sum()),
        "families": {name: _family(v, labels, bins) for name, v in families.items()},
    }


def write_histogram_csv(report: dict, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["family", "bin_lo", "bin_hi", "count_normal", "count_abnormal"])
        for name, fam in report["families"].items():
            edges = fam["edges"]
            for k in range(len(edges) - 1):
                w.writerow([name, edges[k], edges[k + 1], fam["counts_normal"][k], fam["counts_abnormal"][k]])
