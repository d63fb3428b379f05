"""Balance diagnostics and run comparison.

The scalar balance statistic is the coefficient of variation (stddev / mean)
of the per-foreground-class head weight norms: a perfectly balanced
classifier has identical row norms and CV 0, and the more a few head classes
dominate, the larger the CV.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .classifier import Model, weight_norms
from .datagen import Dataset, GroupAssignment


def coefficient_of_variation(values) -> float:
    """Population stddev over mean; 0 for an all-zero vector."""
    v = np.asarray(values, dtype=float)
    mean = v.mean()
    if mean == 0:
        return 0.0
    return float(v.std() / mean)


@dataclass(frozen=True)
class BalanceReport:
    """Weight-norm balance plus grouped accuracy for one trained model."""

    class_order: np.ndarray    # 1-based class ids, descending training count
    counts_sorted: np.ndarray  # counts in that order
    norms_sorted: np.ndarray   # head row norms in that order
    norm_cv: float
    acc_overall: float
    acc_rare: float
    acc_common: float
    acc_frequent: float
    head_tail_gap: float       # acc_frequent - acc_rare


def balance_report(
    model: Model,
    dataset: Dataset,
    groups: GroupAssignment | None = None,
    eval_result=None,
) -> BalanceReport:
    """Assemble the report; runs an evaluation unless one is passed in."""
    if groups is None:
        groups = dataset.groups()
    if eval_result is None:
        from .trainer import evaluate

        eval_result = evaluate(model, dataset)
    norms = weight_norms(model.head)
    order = np.argsort(-dataset.counts, kind="stable")
    return BalanceReport(
        class_order=order + 1,
        counts_sorted=dataset.counts[order],
        norms_sorted=norms[order],
        norm_cv=coefficient_of_variation(norms),
        acc_overall=eval_result.acc_overall,
        acc_rare=eval_result.acc_rare,
        acc_common=eval_result.acc_common,
        acc_frequent=eval_result.acc_frequent,
        head_tail_gap=eval_result.acc_frequent - eval_result.acc_rare,
    )


def write_norm_curve(report: BalanceReport, path) -> None:
    """Plot-data file: x = class rank by count, y = weight norm."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("rank,class,count,weight_norm\n")
        for rank, (cid, n, norm) in enumerate(
            zip(report.class_order, report.counts_sorted, report.norms_sorted), start=1
        ):
            fh.write(f"{rank},{int(cid)},{int(n)},{norm:.10g}\n")


def write_balance_report(report: BalanceReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("metric,value\n")
        for name in (
            "norm_cv",
            "acc_overall",
            "acc_rare",
            "acc_common",
            "acc_frequent",
            "head_tail_gap",
        ):
            fh.write(f"{name},{getattr(report, name):.10g}\n")


@dataclass(frozen=True)
class RunComparison:
    """Aligned per-epoch series and final metrics across runs."""

    labels: tuple[str, ...]
    epoch_rows: tuple[dict, ...]  # one dict per (label, epoch)
    final_rows: tuple[dict, ...]  # one dict per label


_EPOCH_FIELDS = (
    "loss",
    "acc_overall",
    "acc_rare",
    "acc_common",
    "acc_frequent",
    "norm_cv",
)


def compare_runs(logs: Sequence) -> RunComparison:
    """Tabulate RunLogs side by side, keyed by each run's label.

    All runs must describe tasks with the same number of classes; comparing
    accuracies across different label spaces is meaningless.
    """
    if not logs:
        raise ValueError("compare_runs needs at least one run log")
    n_classes = {log.num_classes for log in logs}
    if len(n_classes) != 1:
        raise ValueError(
            f"run logs disagree on the number of classes: {sorted(n_classes)}"
        )
    labels = []
    for log in logs:
        label = log.label
        while label in labels:
            label += "+"
        labels.append(label)
    epoch_rows = []
    for label, log in zip(labels, logs):
        for row in log.rows:
            entry = {"label": label, "epoch": row.epoch}
            for f in _EPOCH_FIELDS:
                entry[f] = getattr(row, f)
            epoch_rows.append(entry)
    final_rows = []
    for label, log in zip(labels, logs):
        last = log.rows[-1]
        entry = {
            "label": label,
            "mode": log.mode,
            "indicator_kind": log.indicator_kind,
            "epochs": last.epoch,
        }
        for f in _EPOCH_FIELDS:
            entry[f] = getattr(last, f)
        final_rows.append(entry)
    return RunComparison(tuple(labels), tuple(epoch_rows), tuple(final_rows))


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def write_comparison(comparison: RunComparison, final_path, epochs_path) -> None:
    final_fields = ["label", "mode", "indicator_kind", "epochs", *_EPOCH_FIELDS]
    with open(final_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(final_fields) + "\n")
        for row in comparison.final_rows:
            fh.write(",".join(_fmt(row[f]) for f in final_fields) + "\n")
    epoch_fields = ["label", "epoch", *_EPOCH_FIELDS]
    with open(epochs_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(epoch_fields) + "\n")
        for row in comparison.epoch_rows:
            fh.write(",".join(_fmt(row[f]) for f in epoch_fields) + "\n")
