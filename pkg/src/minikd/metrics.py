"""Binary classification metrics and per-fold report tables."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "ConfusionCounts",
    "MetricRow",
    "FoldReport",
    "METRIC_NAMES",
    "confusion_from_pairs",
    "compute_metrics",
    "fold_average",
    "improvement_row",
    "render_improvement",
    "param_reduction",
    "render_percent",
    "emit_report",
    "read_csv_report",
    "report_from_dict",
]

METRIC_NAMES = ("accuracy", "precision", "specificity", "recall", "f1", "balanced_accuracy")
CSV_COLUMNS = ("fold", "acc", "precision", "specificity", "recall", "f1", "balanced_acc")
TABLE_HEADER = ("Fold No.", "Acc", "Precision", "Specificity", "Recall(sensitivity)", "F1 score", "Balanced-Acc")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if int(v) != v or v < 0:
                raise ValueError(f"confusion count {f.name} must be a non-negative integer, got {v}")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


def confusion_from_pairs(predicted, actual, positive: int = 1) -> ConfusionCounts:
    predicted = np.asarray(predicted) == positive
    actual = np.asarray(actual) == positive
    return ConfusionCounts(
        tp=int(np.sum(predicted & actual)),
        tn=int(np.sum(~predicted & ~actual)),
        fp=int(np.sum(predicted & ~actual)),
        fn=int(np.sum(~predicted & actual)),
    )


@dataclass(frozen=True)
class MetricRow:
    accuracy: float
    precision: float
    specificity: float
    recall: float
    f1: float
    balanced_accuracy: float
    degenerate: tuple = field(default=(), compare=False)

    def values(self) -> tuple:
        return tuple(getattr(self, n) for n in METRIC_NAMES)

    def as_dict(self) -> dict:
        return {n: getattr(self, n) for n in METRIC_NAMES}


def _ratio(num: float, den: float, name: str, flags: list) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def compute_metrics(c: ConfusionCounts) -> MetricRow:
    """The six metrics of a confusion matrix; 0/0 yields 0 and a flag."""
    if c.total == 0:
        raise ValueError("metrics need at least one counted item")
    flags: list = []
    precision = _ratio(c.tp, c.tp + c.fp, "precision", flags)
    recall = _ratio(c.tp, c.tp + c.fn, "recall", flags)
    specificity = _ratio(c.tn, c.tn + c.fp, "specificity", flags)
    f1 = _ratio(2 * precision * recall, precision + recall, "f1", flags)
    return MetricRow(
        accuracy=(c.tp + c.tn) / c.total,
        precision=precision,
        specificity=specificity,
        recall=recall,
        f1=f1,
        balanced_accuracy=(specificity + recall) / 2,
        degenerate=tuple(flags),
    )


def fold_average(rows: Sequence[MetricRow]) -> MetricRow:
    if not rows:
        raise ValueError("cannot average an empty list of metric rows")
    arr = np.array([r.values() for r in rows], dtype=np.float64)
    return MetricRow(*arr.mean(axis=0).tolist())


def improvement_row(before: MetricRow, after: MetricRow) -> dict:
    """Percentage-point change per metric, ``(after - before) * 100``."""
    return {n: (getattr(after, n) - getattr(before, n)) * 100 for n in METRIC_NAMES}


def render_percent(value: float) -> str:
    text = f"{value:.1f}"
    if text in ("-0.0",):
        text = "0.0"
    return f"{text} %"


def render_improvement(delta: dict) -> list:
    return [render_percent(delta[n]) for n in METRIC_NAMES]


def param_reduction(teacher_params: int, student_params: int) -> float:
    """Relative parameter change in percent (negative means fewer)."""
    if teacher_params <= 0:
        raise ValueError("teacher parameter count must be positive")
    return (student_params - teacher_params) / teacher_params * 100


@dataclass
class FoldReport:
    title: str
    rows: list
    improvement_over: Optional[MetricRow] = None
    teacher_params: Optional[int] = None
    student_params: Optional[int] = None

    def __post_init__(self):
        if not self.rows:
            raise ValueError(f"report {self.title!r} has no fold rows")

    @property
    def average(self) -> MetricRow:
        return fold_average(self.rows)

    @property
    def improvement(self) -> Optional[dict]:
        if self.improvement_over is None:
            return None
        return improvement_row(self.improvement_over, self.average)

    def to_dict(self) -> dict:
        d = {
            "title": self.title,
            "folds": [r.as_dict() for r in self.rows],
            "average": self.average.as_dict(),
        }
        if self.improvement is not None:
            d["improvement_pp"] = self.improvement
        if self.teacher_params is not None and self.student_params is not None:
            d["teacher_params"] = self.teacher_params
            d["student_params"] = self.student_params
            d["param_reduction_percent"] = param_reduction(self.teacher_params, self.student_params)
        return d

    def text_table(self) -> str:
        lines = [self.title, "\t".join(TABLE_HEADER)]
        for i, r in enumerate(self.rows, start=1):
            lines.append("\t".join([str(i)] + [f"{v:.3f}" for v in r.values()]))
        lines.append("\t".join(["Average"] + [f"{v:.3f}" for v in self.average.values()]))
        if self.improvement is not None:
            lines.append("\t".join(["%Improvement"] + render_improvement(self.improvement)))
        if self.teacher_params is not None and self.student_params is not None:
            lines.append(f"Teacher parameters\t{self.teacher_params:,}")
            lines.append(f"Student parameters\t{self.student_params:,}")
            lines.append(
                f"Number of Parameters Reduction (%)\t{render_percent(param_reduction(self.teacher_params, self.student_params))}"
            )
        return "\n".join(lines) + "\n"


def emit_report(report: FoldReport, format: str, path) -> Path:
    """Write a report as ``csv``, ``json`` or ``text`` (tab-separated table)."""
    path = Path(path)
    if not report.rows:
        raise ValueError("report has no fold rows")
    try:
        if format == "csv":
            with path.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(CSV_COLUMNS)
                for i, r in enumerate(report.rows, start=1):
                    w.writerow([i] + [f"{v:.3f}" for v in r.values()])
                w.writerow(["average"] + [f"{v:.3f}" for v in report.average.values()])
        elif format == "json":
            path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        elif format in ("text", "text-table"):
            path.write_text(report.text_table())
        else:
            raise ValueError(f"unknown report format {format!r}")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path


def read_csv_report(path) -> list:
    """Parse fold rows (not the average line) from a report CSV."""
    rows = []
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV header {header}")
        for rec in reader:
            if rec[0] == "average":
                continue
            rows.append(MetricRow(*[float(v) for v in rec[1:]]))
    return rows


def report_from_dict(d: dict) -> FoldReport:
    rows = [MetricRow(**r) for r in d["folds"]]
    return FoldReport(d.get("title", ""), rows)

