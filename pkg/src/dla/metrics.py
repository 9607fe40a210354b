"""Vessel-class confusion tables, per-case metrics and cohort confidence intervals."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Sequence, Tuple

import numpy as np
from scipy import stats

from dla.errors import DataError, ShapeMismatchError
from dla.volume import VESSEL

__all__ = [
    "METRIC_NAMES",
    "CaseMetrics",
    "CohortSummary",
    "ConfusionTable",
    "aggregate_ci",
    "cohort_tsv",
    "confusion",
    "metrics_from_table",
    "summarize_cohort",
]

METRIC_NAMES = ("sensitivity", "ppv", "dsc", "accuracy")
_COLUMN_TITLES = {"sensitivity": "Sensitivity", "ppv": "PPV", "dsc": "DSC", "accuracy": "Accuracy"}


@dataclass(frozen=True)
class ConfusionTable:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v}")
            object.__setattr__(self, name, int(v))

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class CaseMetrics:
    sensitivity: float
    ppv: float
    dsc: float
    accuracy: float
    undefined: FrozenSet[str] = field(default_factory=frozenset)

    def as_dict(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}


def confusion(pred: np.ndarray, truth) -> ConfusionTable:
    """Tally the vessel class over the voxels listed in ``truth``.

    ``pred`` is a full label volume; ``truth`` a LabeledVoxelSet on the same grid.
    """
    pred = np.asarray(pred)
    if pred.shape != tuple(truth.shape):
        raise ShapeMismatchError(f"prediction {pred.shape} vs truth {tuple(truth.shape)}")
    if len(truth) == 0:
        raise DataError("truth set is empty")
    p = pred.ravel()[truth.indices] == VESSEL
    t = truth.classes == VESSEL
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionTable(tp, fp, fn, int(t.size) - tp - fp - fn)


def _ratio(num, den, name, undefined):
    if den == 0:
        undefined.add(name)
        return 0.0
    return num / den


def metrics_from_table(t: ConfusionTable) -> CaseMetrics:
    """Sensitivity, PPV, DSC and accuracy.

    A metric whose denominator is zero is reported as 0 and named in
    ``undefined``.
    """
    if t.total == 0:
        raise ValueError("confusion table is all zero")
    undefined = set()
    sens = _ratio(t.tp, t.tp + t.fn, "sensitivity", undefined)
    ppv = _ratio(t.tp, t.tp + t.fp, "ppv", undefined)
    dsc = _ratio(2 * t.tp, 2 * t.tp + t.fp + t.fn, "dsc", undefined)
    acc = (t.tp + t.tn) / t.total
    return CaseMetrics(sens, ppv, dsc, acc, frozenset(undefined))


def aggregate_ci(values: Sequence[float], confidence: float = 0.95) -> Tuple[float, float, float]:
    """Mean and Student-t confidence interval ``(mean, lo, hi)``, unclamped."""
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise ValueError("need at least two values for a confidence interval")
    mean = float(x.mean())
    half = float(stats.t.ppf(0.5 + confidence / 2, x.size - 1) * x.std(ddof=1) / np.sqrt(x.size))
    return mean, mean - half, mean + half


@dataclass(frozen=True)
class CohortSummary:
    """Per metric: mean and 95% CI clamped to [0, 1], plus the case count."""

    rows: Dict[str, Tuple[float, float, float]]
    n_cases: int

    def to_tsv(self, dataset: str = "test") -> str:
        return cohort_tsv({dataset: self})


def cohort_tsv(summaries: Dict[str, CohortSummary]) -> str:
    """One row per dataset, mean and CI bounds per metric."""
    head = ["Dataset", "n"]
    for name in METRIC_NAMES:
        t = _COLUMN_TITLES[name]
        head += [f"{t} Mean", f"{t} CI low", f"{t} CI high"]
    lines = ["\t".join(head)]
    for dataset, summary in summaries.items():
        row = [dataset, str(summary.n_cases)]
        for name in METRIC_NAMES:
            row += [f"{v:.6f}" for v in summary.rows[name]]
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def summarize_cohort(cases: Sequence[CaseMetrics]) -> CohortSummary:
    rows = {}
    for name in METRIC_NAMES:
        mean, lo, hi = aggregate_ci([getattr(c, name) for c in cases])
        rows[name] = (mean, max(0.0, lo), min(1.0, hi))
    return CohortSummary(rows, len(cases))
