"""Segmentation metrics: confusion-matrix IoU and boundary IoU."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .core import IGNORE_INDEX

_SQUARE3 = np.ones((3, 3), bool)


def _np(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


def boundary_radius(hw, d: float) -> int:
    """max(1, round(d * image diagonal))."""
    if d <= 0:
        raise ValueError(f"dilation factor must be positive, got {d}")
    h, w = hw
    return max(1, int(round(d * math.sqrt(h * h + w * w))))


def mask_boundary(mask: np.ndarray, radius: int) -> np.ndarray:
    """Pixels of ``mask`` within ``radius`` (chessboard) of its contour.

    Pixels outside the image count as background, so the image border is contour.
    """
    if not mask.any():
        return mask.copy()
    eroded = ndimage.binary_erosion(mask, structure=_SQUARE3, iterations=radius, border_value=0)
    return mask & ~eroded


def boundary_counts(pred, gt, num_classes: int, radius: int):
    """Per-class boundary intersection and union counts for one [H, W] pair."""
    pred, gt = _np(pred), _np(gt)
    valid = gt != IGNORE_INDEX
    inter = np.zeros(num_classes, np.int64)
    union = np.zeros(num_classes, np.int64)
    for c in range(num_classes):
        g = gt == c
        p = (pred == c) & valid
        if not g.any() and not p.any():
            continue
        gb = mask_boundary(g, radius)
        pb = mask_boundary(p, radius)
        inter[c] = np.count_nonzero(gb & pb)
        union[c] = np.count_nonzero(gb | pb)
    return inter, union


def boundary_iou(pred, gt, d: float = 0.005, num_classes: int | None = None) -> np.ndarray:
    """Per-class boundary IoU for one label map pair; NaN where a class is absent in both."""
    pred, gt = _np(pred), _np(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} differ")
    if num_classes is None:
        vals = np.concatenate([pred[pred != IGNORE_INDEX], gt[gt != IGNORE_INDEX]])
        num_classes = int(vals.max()) + 1 if vals.size else 0
    inter, union = boundary_counts(pred, gt, num_classes, boundary_radius(gt.shape[-2:], d))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.maximum(union, 1), np.nan)


def _iou(inter: np.ndarray, union: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.maximum(union, 1), np.nan)


def _nanmean(x: np.ndarray) -> float:
    x = x[~np.isnan(x)]
    return float(x.mean()) if x.size else float("nan")


@dataclass
class MetricReport:
    num_classes: int
    boundary_d: float = 0.005
    class_names: list[str] | None = None
    confusion: np.ndarray = None  # [gt, pred]
    boundary_inter: np.ndarray = None
    boundary_union: np.ndarray = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        k = self.num_classes
        if self.confusion is None:
            self.confusion = np.zeros((k, k), np.int64)
        if self.boundary_inter is None:
            self.boundary_inter = np.zeros(k, np.int64)
        if self.boundary_union is None:
            self.boundary_union = np.zeros(k, np.int64)

    def update(self, pred, gt, boundary: bool = True) -> "MetricReport":
        return update_confusion(self, pred, gt, boundary)

    def merge(self, other: "MetricReport") -> "MetricReport":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge reports with different class counts")
        return MetricReport(self.num_classes, self.boundary_d, self.class_names,
                            self.confusion + other.confusion,
                            self.boundary_inter + other.boundary_inter,
                            self.boundary_union + other.boundary_union)

    @property
    def iou(self) -> np.ndarray:
        tp = np.diag(self.confusion).astype(np.float64)
        union = self.confusion.sum(0) + self.confusion.sum(1) - np.diag(self.confusion)
        return _iou(tp, union)

    @property
    def miou(self) -> float:
        return _nanmean(self.iou)

    @property
    def boundary_iou(self) -> np.ndarray:
        return _iou(self.boundary_inter.astype(np.float64), self.boundary_union)

    @property
    def boundary_miou(self) -> float:
        return _nanmean(self.boundary_iou)

    def to_dict(self) -> dict:
        def clean(a):
            return [None if np.isnan(v) else float(v) for v in a]
        miou, bmiou = self.miou, self.boundary_miou
        return {
            "num_classes": self.num_classes,
            "class_names": self.class_names,
            "boundary_d": self.boundary_d,
            "confusion": self.confusion.tolist(),
            "iou": clean(self.iou),
            "miou": None if math.isnan(miou) else miou,
            "boundary_inter": self.boundary_inter.tolist(),
            "boundary_union": self.boundary_union.tolist(),
            "boundary_iou": clean(self.boundary_iou),
            "boundary_miou": None if math.isnan(bmiou) else bmiou,
            **({"extra": self.extra} if self.extra else {}),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(d["num_classes"], d["boundary_d"], d.get("class_names"),
                   np.asarray(d["confusion"], np.int64).reshape(d["num_classes"], d["num_classes"]),
                   np.asarray(d["boundary_inter"], np.int64), np.asarray(d["boundary_union"], np.int64),
                   d.get("extra", {}))

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls.from_dict(json.loads(text))


def update_confusion(report: MetricReport, pred, gt, boundary: bool = True) -> MetricReport:
    """Accumulate a [B, H, W] (or [H, W]) prediction into the report; IGNORE pixels are skipped."""
    pred, gt = _np(pred), _np(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} differ")
    k = report.num_classes
    valid = gt != IGNORE_INDEX
    g = gt[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    if g.size and (g.max() >= k or p.min() < 0 or p.max() >= k):
        raise ValueError(f"labels outside [0, {k})")
    report.confusion += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
    if boundary:
        pairs = [(pred, gt)] if pred.ndim == 2 else zip(pred, gt)
        for pi, gi in pairs:
            inter, union = boundary_counts(pi, gi, k, boundary_radius(gi.shape, report.boundary_d))
            report.boundary_inter += inter
            report.boundary_union += union
    return report
