"""Overlap and surface-distance segmentation metrics.

Conventions: a class absent from both masks scores 1.0 for Dice/IoU and has no
distance (``None``); distances are also ``None`` when only one mask contains
the class. Boundaries use 8-connectivity with everything outside the image
counted as background, and HD95 takes the nearest-rank 95th percentile of the
pooled directed boundary distances.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

_EIGHT = np.ones((3, 3), dtype=bool)

CSV_FIELDS = ("run_id", "round", "site", "class", "dice", "iou", "hd95", "assd")


def _binary(mask, cls: int | None) -> np.ndarray:
    mask = np.asarray(mask)
    return mask.astype(bool) if cls is None else mask == cls


def dice(pred, gt, cls: int | None = None) -> float:
    p, g = _binary(pred, cls), _binary(gt, cls)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    total = p.sum() + g.sum()
    if total == 0:
        return 1.0
    return 2.0 * np.logical_and(p, g).sum() / total


def iou(pred, gt, cls: int | None = None) -> float:
    p, g = _binary(pred, cls), _binary(gt, cls)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return np.logical_and(p, g).sum() / union


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 8-neighbour outside the mask."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_EIGHT, border_value=0)


def surface_distances(pred, gt, cls: int | None = None) -> np.ndarray | None:
    """Pooled directed distances pred->gt and gt->pred between boundary pixels, sorted."""
    p, g = _binary(pred, cls), _binary(gt, cls)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    if not p.any() or not g.any():
        return None
    bp, bg = boundary(p), boundary(g)
    to_g = ndimage.distance_transform_edt(~bg)
    to_p = ndimage.distance_transform_edt(~bp)
    return np.sort(np.concatenate([to_g[bp], to_p[bg]]))


def nearest_rank(values, q: float) -> float:
    ordered = np.sort(np.asarray(values, dtype=np.float64))
    rank = max(1, math.ceil(q / 100.0 * len(ordered)))
    return float(ordered[rank - 1])


def hd95(pred, gt, cls: int | None = None) -> float | None:
    d = surface_distances(pred, gt, cls)
    return None if d is None else nearest_rank(d, 95)


def assd(pred, gt, cls: int | None = None) -> float | None:
    d = surface_distances(pred, gt, cls)
    # exactly rounded sum of the sorted list, so the value is symmetric bit for bit
    return None if d is None else math.fsum(d) / len(d)


# ================================================================== reports

@dataclass
class ClassScores:
    dice: float
    iou: float
    hd95: float | None
    assd: float | None


def _nanmean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def score_masks(preds: np.ndarray, gts: np.ndarray, classes=(1, 2, 3)) -> dict[int, ClassScores]:
    """Per-class scores averaged over a stack of 2-D masks."""
    preds, gts = np.asarray(preds), np.asarray(gts)
    if preds.ndim == 2:
        preds, gts = preds[None], gts[None]
    out = {}
    for cls in classes:
        rows = [(dice(p, g, cls), iou(p, g, cls), hd95(p, g, cls), assd(p, g, cls))
                for p, g in zip(preds, gts)]
        out[cls] = ClassScores(dice=float(np.mean([r[0] for r in rows])),
                               iou=float(np.mean([r[1] for r in rows])),
                               hd95=_nanmean(r[2] for r in rows),
                               assd=_nanmean(r[3] for r in rows))
    return out


@dataclass
class MetricReport:
    """Per-site, per-class scores for one evaluation round."""

    round: int
    sites: dict[str, dict[int, ClassScores]] = field(default_factory=dict)

    def add(self, site: str, preds, gts, classes=(1, 2, 3)) -> None:
        self.sites[site] = score_masks(preds, gts, classes)

    def site_mean(self, site: str, metric: str = "dice") -> float | None:
        return _nanmean(getattr(s, metric) for s in self.sites[site].values())

    def mean(self, metric: str = "dice") -> float | None:
        return _nanmean(self.site_mean(s, metric) for s in self.sites)

    def rows(self, run_id: str):
        for site, per_class in self.sites.items():
            for cls, s in per_class.items():
                yield dict(run_id=run_id, round=self.round, site=site, **{"class": cls},
                           dice=s.dice, iou=s.iou, hd95=s.hd95, assd=s.assd)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_FIELDS)
        for row in rows:
            writer.writerow([_fmt(row[k]) for k in CSV_FIELDS])
    return path


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for k in ("dice", "iou", "hd95", "assd"):
            row[k] = float(row[k]) if row[k] != "" else None
        row["round"] = int(row["round"])
        row["class"] = int(row["class"])
    return rows
