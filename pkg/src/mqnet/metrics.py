"""Segmentation metrics: per-image IoU, overall IoU, mean IoU and precision at IoU thresholds."""
from __future__ import annotations

import json
from fractions import Fraction
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

THRESHOLDS = (0.5, 0.7, 0.9)


def _counts(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int]:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return int(np.count_nonzero(pred & gt)), int(np.count_nonzero(pred | gt))


def exact_mean(counts: Iterable[tuple[int, int]]) -> float:
    """Mean of ``inter / union`` ratios summed exactly and rounded once (empty union counts as 1)."""
    fracs = [Fraction(1) if u == 0 else Fraction(i, u) for i, u in counts]
    return float(sum(fracs) / len(fracs))


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union of two binary masks; 1.0 when both are empty."""
    inter, union = _counts(pred, gt)
    return 1.0 if union == 0 else inter / union


@dataclass
class ConfusionTotals:
    intersections: list[int] = field(default_factory=list)
    unions: list[int] = field(default_factory=list)

    def add(self, pred: np.ndarray, gt: np.ndarray) -> None:
        i, u = _counts(pred, gt)
        self.intersections.append(i)
        self.unions.append(u)

    def extend(self, other: "ConfusionTotals") -> "ConfusionTotals":
        self.intersections.extend(other.intersections)
        self.unions.extend(other.unions)
        return self

    @property
    def total_intersection(self) -> int:
        return sum(self.intersections)

    @property
    def total_union(self) -> int:
        return sum(self.unions)

    def ious(self) -> list[float]:
        return [1.0 if u == 0 else i / u for i, u in zip(self.intersections, self.unions)]

    def report(self) -> "MetricsReport":
        n = len(self.unions)
        if n == 0:
            raise ValueError("no images to evaluate")
        ious = self.ious()
        su = self.total_union
        oiou = 1.0 if su == 0 else self.total_intersection / su
        prec = [sum(v >= t for v in ious) / n for t in THRESHOLDS]
        return MetricsReport(oIoU=oiou, mIoU=exact_mean(zip(self.intersections, self.unions)), P50=prec[0], P70=prec[1], P90=prec[2],
                             n_images=n)


@dataclass
class MetricsReport:
    oIoU: float
    mIoU: float
    P50: float
    P70: float
    P90: float
    n_images: int

    COLUMNS = ("P@0.5", "P@0.7", "P@0.9", "oIoU", "mIoU")

    def row(self) -> list[float]:
        return [self.P50, self.P70, self.P90, self.oIoU, self.mIoU]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def format(self) -> str:
        head = "".join(f"{c:>9}" for c in self.COLUMNS) + f"{'images':>9}"
        vals = "".join(f"{100 * v:9.2f}" for v in self.row()) + f"{self.n_images:9d}"
        return head + "\n" + vals


def evaluate(pairs: Iterable[tuple[np.ndarray, np.ndarray]]) -> MetricsReport:
    """Metrics over ``(prediction, ground truth)`` pairs."""
    totals = ConfusionTotals()
    for pred, gt in pairs:
        totals.add(pred, gt)
    if not totals.unions:
        raise ValueError("evaluate needs at least one (prediction, ground truth) pair")
    return totals.report()


def per_category(pairs: Iterable[tuple[np.ndarray, np.ndarray]], labels: Iterable[str]) -> dict[str, float]:
    """Mean IoU per category label."""
    groups: dict[str, list[tuple[int, int]]] = {}
    for (pred, gt), label in zip(pairs, labels):
        groups.setdefault(label, []).append(_counts(pred, gt))
    return {k: exact_mean(v) for k, v in sorted(groups.items())}
