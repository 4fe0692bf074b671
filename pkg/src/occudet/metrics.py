"""Binary classification metrics and multi-trial aggregation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class MetricsValues:
    accuracy: float
    precision: float
    recall: float
    f1: float
    # undefined ratios (zero denominators) are reported as 0 and flagged
    precision_defined: bool = True
    recall_defined: bool = True
    f1_defined: bool = True


@dataclass(frozen=True)
class MetricsRecord:
    case_id: str
    model_id: str
    seed: int
    accuracy: float
    precision: float
    recall: float
    f1: float


def confusion(predictions, labels, positive: int = 1) -> ConfusionCounts:
    """Tally a binary confusion matrix; `positive` denotes the occupied class."""
    pred = np.asarray(predictions)
    lab = np.asarray(labels)
    if pred.size == 0:
        raise ValueError("cannot tally an empty prediction sequence")
    if pred.shape != lab.shape:
        raise ValueError(
            f"prediction/label length mismatch: {pred.shape} vs {lab.shape}")
    p = pred == positive
    a = lab == positive
    return ConfusionCounts(
        tp=int(np.sum(p & a)),
        tn=int(np.sum(~p & ~a)),
        fp=int(np.sum(p & ~a)),
        fn=int(np.sum(~p & a)),
    )


def compute_metrics(counts: ConfusionCounts) -> MetricsValues:
    if counts.total == 0:
        raise ValueError("metrics need at least one sample")
    accuracy = (counts.tp + counts.tn) / counts.total
    precision_defined = (counts.tp + counts.fp) > 0
    recall_defined = (counts.tp + counts.fn) > 0
    precision = counts.tp / (counts.tp + counts.fp) if precision_defined else 0.0
    recall = counts.tp / (counts.tp + counts.fn) if recall_defined else 0.0
    f1_defined = (precision + recall) > 0
    f1 = 2.0 * precision * recall / (precision + recall) if f1_defined else 0.0
    return MetricsValues(accuracy, precision, recall, f1,
                         precision_defined, recall_defined, f1_defined)


def accuracy_f1(predictions, labels, positive: int = 1) -> tuple[float, float]:
    m = compute_metrics(confusion(predictions, labels, positive))
    return m.accuracy, m.f1


@dataclass(frozen=True)
class CaseAverage:
    case_id: str
    n_trials: int
    accuracy: float
    f1: float


@dataclass(frozen=True)
class Aggregate:
    model_id: str
    cases: tuple[CaseAverage, ...]
    accuracy: float  # mean of the per-case means
    f1: float


def aggregate(records) -> list[Aggregate]:
    """Per-case trial means and their overall average, one entry per model.

    The overall row averages the per-case means (not the raw trials), so
    cases with different trial counts weigh equally.
    """
    if not records:
        raise ValueError("no records to aggregate")
    by_model: dict[str, dict[str, list]] = {}
    for r in records:
        by_model.setdefault(r.model_id, {}).setdefault(r.case_id, []).append(r)
    out = []
    for model_id in sorted(by_model):
        cases = []
        for case_id in sorted(by_model[model_id]):
            rs = by_model[model_id][case_id]
            cases.append(CaseAverage(
                case_id, len(rs),
                float(np.mean([r.accuracy for r in rs])),
                float(np.mean([r.f1 for r in rs])),
            ))
        out.append(Aggregate(
            model_id, tuple(cases),
            float(np.mean([c.accuracy for c in cases])),
            float(np.mean([c.f1 for c in cases])),
        ))
    return out


RESULTS_HEADER = "case,model,seed,acc,precision,recall,f1"


def write_results_csv(path, records) -> None:
    lines = [RESULTS_HEADER]
    for r in records:
        lines.append(f"{r.case_id},{r.model_id},{r.seed},{r.accuracy!r},"
                     f"{r.precision!r},{r.recall!r},{r.f1!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def summary_table(aggregates) -> str:
    """Plain-text results table: one row per case and metric, column per model."""
    models = [a.model_id for a in aggregates]
    case_ids = sorted({c.case_id for a in aggregates for c in a.cases})
    lookup = {(a.model_id, c.case_id): c for a in aggregates for c in a.cases}
    overall = {a.model_id: a for a in aggregates}

    width = max([len(m) for m in models] + [8])
    case_w = max([len(c) for c in case_ids] + [len("Average")])
    header = f"{'Case':<{case_w}}  Metric  " + "  ".join(f"{m:>{width}}" for m in models)
    rule = "-" * len(header)
    lines = [header, rule]
    for case_id in case_ids:
        for metric in ("ACC", "F1"):
            cells = []
            for m in models:
                c = lookup.get((m, case_id))
                val = (c.accuracy if metric == "ACC" else c.f1) if c else float("nan")
                cells.append(f"{val:>{width}.4f}")
            label = case_id if metric == "ACC" else ""
            lines.append(f"{label:<{case_w}}  {metric:<6}  " + "  ".join(cells))
    lines.append(rule)
    for metric in ("ACC", "F1"):
        cells = [f"{(overall[m].accuracy if metric == 'ACC' else overall[m].f1):>{width}.4f}"
                 for m in models]
        label = "Average" if metric == "ACC" else ""
        lines.append(f"{label:<{case_w}}  {metric:<6}  " + "  ".join(cells))
    return "\n".join(lines) + "\n"
