"""
Answer-distribution metrics: accuracy, cross-entropy, total variation distance and Brier
score, with per-(rule, attribute) accuracy.
"""

import dataclasses
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .exceptions import ConfigurationError, ShapeError
from .utils import build_dataclass_repr

TINY = np.finfo(np.float64).tiny


@dataclasses.dataclass
class BreakdownEntry:
    count: int = 0
    correct: int = 0

    @property
    def accuracy(self) -> float:
        return self.correct / self.count if self.count else 0.0


@dataclasses.dataclass
class MetricReport:
    """
    Sums over a set of instances; the means derive from them so that merging shards is a
    weighted mean.
    """

    count: int = 0
    correct: int = 0
    ce_total: float = 0.0
    tvd_total: float = 0.0
    brier_total: float = 0.0
    breakdown: Dict[str, BreakdownEntry] = dataclasses.field(default_factory=dict)

    def __repr__(self):
        return build_dataclass_repr(self, ignored_field_names=("breakdown",))

    ### PROPERTIES ###

    @property
    def accuracy(self) -> float:
        return self.correct / self.count

    @property
    def ce(self) -> float:
        return self.ce_total / self.count

    @property
    def tvd(self) -> float:
        return self.tvd_total / self.count

    @property
    def brier(self) -> float:
        return self.brier_total / self.count

    ### CONSTRUCTORS ###

    @classmethod
    def from_log_probabilities(
        cls,
        log_probabilities,
        targets,
        labels: Optional[Sequence[Iterable[str]]] = None,
    ) -> "MetricReport":
        """
        ``targets`` are answer indices (or one-hot rows); ``labels`` name the
        (rule, attribute) pairs of every instance for the breakdown.
        """
        log_probabilities = np.asarray(log_probabilities, dtype=np.float64)
        if log_probabilities.ndim != 2:
            raise ShapeError(f"Expected (N, n_a) scores, got {log_probabilities.shape}")
        count, classes = log_probabilities.shape
        if not count:
            raise ConfigurationError("Cannot evaluate an empty dataset")
        targets = target_indices(targets, classes)
        if len(targets) != count:
            raise ShapeError(f"{len(targets)} targets for {count} predictions")
        probabilities = np.exp(log_probabilities)
        expected = np.eye(classes)[targets]
        rows = np.arange(count)
        hits = probabilities.argmax(axis=1) == targets
        report = cls(
            count=count,
            correct=int(hits.sum()),
            ce_total=float(-log_probabilities[rows, targets].sum()),
            tvd_total=float(0.5 * np.abs(probabilities - expected).sum()),
            brier_total=float(((probabilities - expected) ** 2).sum()),
        )
        for hit, names in zip(hits, labels or ()):
            for name in names:
                entry = report.breakdown.setdefault(name, BreakdownEntry())
                entry.count += 1
                entry.correct += int(hit)
        return report

    @classmethod
    def from_logits(cls, logits, targets, labels=None) -> "MetricReport":
        logits = np.asarray(logits, dtype=np.float64)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        return cls.from_log_probabilities(shifted - log_z, targets, labels)

    @classmethod
    def from_probabilities(cls, probabilities, targets, labels=None) -> "MetricReport":
        probabilities = np.asarray(probabilities, dtype=np.float64)
        return cls.from_log_probabilities(
            np.log(np.maximum(probabilities, TINY)), targets, labels
        )

    ### PUBLIC METHODS ###

    @classmethod
    def merge(cls, reports: Iterable["MetricReport"]) -> "MetricReport":
        merged = cls()
        for report in reports:
            merged.count += report.count
            merged.correct += report.correct
            merged.ce_total += report.ce_total
            merged.tvd_total += report.tvd_total
            merged.brier_total += report.brier_total
            for name, entry in report.breakdown.items():
                target = merged.breakdown.setdefault(name, BreakdownEntry())
                target.count += entry.count
                target.correct += entry.correct
        if not merged.count:
            raise ConfigurationError("Cannot merge empty reports")
        return merged

    def summary(self) -> Dict[str, float]:
        return {
            "count": self.count,
            "accuracy": self.accuracy,
            "ce": self.ce,
            "tvd": self.tvd,
            "brier": self.brier,
            "ce_total": self.ce_total,
            "tvd_total": self.tvd_total,
            "brier_total": self.brier_total,
        }

    def table(self) -> str:
        rows = [["metric", "mean", "total"]]
        rows.append(
            ["accuracy", f"{self.accuracy:.4f}", f"{self.correct}/{self.count}"]
        )
        for name in ("ce", "tvd", "brier"):
            mean, total = getattr(self, name), getattr(self, name + "_total")
            rows.append([name, f"{mean:.4f}", f"{total:.4f}"])
        return format_table(rows)

    def breakdown_table(self) -> str:
        rows = [["rule:attribute", "count", "accuracy"]]
        for name in sorted(self.breakdown):
            entry = self.breakdown[name]
            rows.append([name, str(entry.count), f"{entry.accuracy:.4f}"])
        return format_table(rows)

    def to_csv(self) -> str:
        lines = ["metric,value"]
        lines.extend(f"{key},{value}" for key, value in self.summary().items())
        lines.extend(
            f"accuracy[{name}],{self.breakdown[name].accuracy}"
            for name in sorted(self.breakdown)
        )
        return "\n".join(lines) + "\n"


def target_indices(targets, classes: int) -> np.ndarray:
    targets = np.asarray(targets)
    if targets.ndim == 2:
        targets = targets.argmax(axis=1)
    targets = targets.astype(np.int64).reshape(-1)
    if targets.size and (targets.min() < 0 or targets.max() >= classes):
        raise ConfigurationError(f"Target index out of range [0, {classes})")
    return targets


def format_table(rows: List[List[str]]) -> str:
    "Left-aligned first column, right-aligned others."
    widths = [max(len(row[column]) for row in rows) for column in range(len(rows[0]))]
    lines = []
    for index, row in enumerate(rows):
        cells = [row[0].ljust(widths[0])]
        cells.extend(cell.rjust(width) for cell, width in zip(row[1:], widths[1:]))
        lines.append("  ".join(cells).rstrip())
        if index == 0:
            lines.append("  ".join("-" * width for width in widths))
    return "\n".join(lines)
