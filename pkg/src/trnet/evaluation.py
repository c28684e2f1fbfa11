"""Center-point metrics with boundary-tolerant matching."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .phantom import ConfigError

METRIC_NAMES = ("acc", "sens", "spec", "ppv", "npv", "f1", "mcc")
TABLE_COLUMNS = ("Method", "ACC", "Sens", "Spec", "PPV", "NPV", "F1", "MCC")


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError(f"confusion counts must be nonnegative: {self}")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsReport:
    acc: float
    sens: float
    spec: float
    ppv: float
    npv: float
    f1: float
    mcc: float
    undefined: frozenset = field(default_factory=frozenset)
    counts: ConfusionCounts | None = None

    def as_row(self, digits: int = 2) -> list[str]:
        return ["--" if m in self.undefined and m != "mcc" else f"{getattr(self, m):.{digits}f}"
                for m in METRIC_NAMES]

    def to_dict(self) -> dict:
        d = {m: (None if m in self.undefined and m != "mcc" else getattr(self, m)) for m in METRIC_NAMES}
        d["undefined"] = sorted(self.undefined)
        if self.counts is not None:
            d["counts"] = self.counts.to_dict()
        return d


def exact_confusion(pred, truth) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    return ConfusionCounts(int(np.sum(pred & truth)), int(np.sum(pred & ~truth)),
                           int(np.sum(~pred & ~truth)), int(np.sum(~pred & truth)))


def tolerant_confusion(pred_labels, centers, track, tolerance: int = 5,
                       symmetric: bool = True) -> ConfusionCounts:
    """Confusion counts at the given centers with boundary forgiveness.

    A predicted-positive center is a TP when some ground-truth-positive voxel
    lies at distance < ``tolerance`` (the center's own voxel always counts),
    else an FP. Predicted negatives mirror this against ground-truth-negative
    voxels; with ``symmetric=False`` they are judged on the center voxel only.
    """
    if tolerance < 0:
        raise ConfigError(f"tolerance must be >= 0, got {tolerance}")
    track = np.asarray(track).astype(bool)
    pred = np.asarray(pred_labels).astype(bool)
    centers = np.asarray(centers, dtype=int)
    n = len(track)
    if len(pred) != len(centers):
        raise ValueError("pred_labels and centers must align")
    if len(centers) and (centers.min() < 0 or centers.max() >= n):
        raise ValueError("center index outside the centerline")
    r = max(tolerance - 1, 0)
    # windowed any() via prefix sums over [c - r, c + r]
    pos_cum = np.concatenate([[0], np.cumsum(track)])
    neg_cum = np.concatenate([[0], np.cumsum(~track)])
    lo = np.clip(centers - r, 0, n)
    hi = np.clip(centers + r + 1, 0, n)
    pos_near = (pos_cum[hi] - pos_cum[lo]) > 0
    neg_near = (neg_cum[hi] - neg_cum[lo]) > 0
    if not symmetric:
        neg_near = ~track[centers]
    tp = int(np.sum(pred & pos_near))
    fp = int(np.sum(pred & ~pos_near))
    tn = int(np.sum(~pred & neg_near))
    fn = int(np.sum(~pred & ~neg_near))
    return ConfusionCounts(tp, fp, tn, fn)


def _ratio(num, den, name, undefined):
    if den == 0:
        undefined.add(name)
        return math.nan
    return num / den


def compute_metrics(counts: ConfusionCounts) -> MetricsReport:
    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    total = counts.total
    if total == 0:
        raise ValueError("cannot compute metrics from all-zero confusion counts")
    undefined: set[str] = set()
    acc = (tp + tn) / total
    sens = _ratio(tp, tp + fn, "sens", undefined)
    spec = _ratio(tn, tn + fp, "spec", undefined)
    ppv = _ratio(tp, tp + fp, "ppv", undefined)
    npv = _ratio(tn, tn + fn, "npv", undefined)
    if "sens" in undefined or "ppv" in undefined or ppv + sens == 0:
        undefined.add("f1")
        f1 = math.nan
    else:
        f1 = 2 * ppv * sens / (ppv + sens)
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if den == 0:
        undefined.add("mcc")
        mcc = 0.0
    else:
        mcc = (tp * tn - fp * fn) / math.sqrt(den)
    return MetricsReport(acc, sens, spec, ppv, npv, f1, mcc, frozenset(undefined), counts)


def aggregate_folds(per_fold: list[ConfusionCounts]) -> MetricsReport:
    """Micro-average: pool the raw counts, then compute metrics once."""
    pooled = ConfusionCounts()
    for c in per_fold:
        pooled = pooled + c
    return compute_metrics(pooled)


def confusion_for_predictions(predictions, tracks: dict, tolerance: int = 5,
                              symmetric: bool = True) -> ConfusionCounts:
    """Pooled tolerant confusion for a list of PredictionSequence objects."""
    total = ConfusionCounts()
    for p in predictions:
        total = total + tolerant_confusion(p.labels, p.center_indices, tracks[p.source_id],
                                           tolerance, symmetric)
    return total


def format_table(rows: list[tuple[str, MetricsReport]], sep: str = "\t") -> str:
    lines = [sep.join(TABLE_COLUMNS)]
    for name, report in rows:
        lines.append(sep.join([name, *report.as_row()]))
    return "\n".join(lines) + "\n"
