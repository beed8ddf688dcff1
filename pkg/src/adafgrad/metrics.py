"""Sequence-level evaluation: accuracy matrix and the seven metrics.

acc[t][i] is the accuracy on task i's test split after training through
task t. The lower triangle plus the first superdiagonal (each task evaluated
once right before its own training starts) is filled; everything else stays
NaN. rand[i] is the freshly-initialized model's accuracy on task i.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, FormatError, UndefinedMetricError


@dataclass
class TaskMaskRanges:
    """Half-open [start, end) logit index ranges, one per task."""

    ranges: list

    @classmethod
    def from_class_counts(cls, counts) -> "TaskMaskRanges":
        if any(c < 1 for c in counts):
            raise DimensionError(f"class counts must be >= 1, got {list(counts)}")
        ranges, start = [], 0
        for c in counts:
            ranges.append((start, start + c))
            start += c
        return cls(ranges)

    @property
    def total_classes(self) -> int:
        return self.ranges[-1][1] if self.ranges else 0

    def __iter__(self):
        return iter(self.ranges)

    def __getitem__(self, t):
        return self.ranges[t]


def class_il_accuracy(logit_rows, true_global_classes) -> float:
    """Fraction of rows whose overall argmax (lowest index wins ties) is right."""
    logits = np.asarray(logit_rows, dtype=np.float64)
    truth = np.asarray(true_global_classes)
    if logits.ndim != 2 or logits.shape[0] != truth.shape[0]:
        raise DimensionError(f"rows {logits.shape} vs truths {truth.shape}")
    return float(np.mean(np.argmax(logits, axis=1) == truth))


def masked_accuracy(logit_rows, true_global_classes, true_task_ids,
                    ranges: TaskMaskRanges) -> float:
    """Accuracy with each row's argmax restricted to its own task's logits."""
    logits = np.asarray(logit_rows, dtype=np.float64)
    truth = np.asarray(true_global_classes)
    tasks = np.asarray(true_task_ids)
    if logits.shape[0] != truth.shape[0] or truth.shape[0] != tasks.shape[0]:
        raise DimensionError("row / truth / task-id counts differ")
    hits = 0
    for row, y, t in zip(logits, truth, tasks):
        s, e = ranges[int(t)]
        hits += int(s + np.argmax(row[s:e]) == y)
    return hits / len(truth)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the average of their positions."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    sx = x[order]
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def macro_auc(score_rows, true_classes) -> float:
    """Mean one-vs-rest AUC over the classes of one test dataset.

    AUC per class uses the rank statistic with average ranks on ties. A class
    with no positives or no negatives is skipped with a warning; if nothing
    is left the metric is undefined.
    """
    scores = np.asarray(score_rows, dtype=np.float64)
    truth = np.asarray(true_classes)
    if scores.ndim != 2 or scores.shape[0] != truth.shape[0]:
        raise DimensionError(f"scores {scores.shape} vs truths {truth.shape}")
    aucs = []
    for c in range(scores.shape[1]):
        pos = truth == c
        n_pos = int(pos.sum())
        n_neg = len(truth) - n_pos
        if n_pos == 0 or n_neg == 0:
            warnings.warn(f"class {c} has no {'positives' if n_pos == 0 else 'negatives'}; "
                          "skipped in macro AUC")
            continue
        ranks = _average_ranks(scores[:, c])
        u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
        aucs.append(u / (n_pos * n_neg))
    if not aucs:
        raise UndefinedMetricError("every class was skipped; macro AUC undefined")
    return float(np.mean(aucs))


@dataclass
class AccMatrix:
    """Accuracy matrix plus the random-baseline vector."""

    n_tasks: int
    acc: np.ndarray                 # [N_t, N_t], NaN where never evaluated
    rand: np.ndarray                # [N_t]
    task_class_counts: list = field(default_factory=list)

    @classmethod
    def empty(cls, n_tasks: int, task_class_counts=()) -> "AccMatrix":
        return cls(n_tasks=n_tasks,
                   acc=np.full((n_tasks, n_tasks), np.nan),
                   rand=np.full(n_tasks, np.nan),
                   task_class_counts=list(task_class_counts))

    def _require_lower_triangle(self):
        if self.acc.shape != (self.n_tasks, self.n_tasks):
            raise UndefinedMetricError(
                f"sequence metrics need a {self.n_tasks}x{self.n_tasks} matrix, "
                f"got {self.acc.shape}")
        for t in range(self.n_tasks):
            for i in range(t + 1):
                if np.isnan(self.acc[t, i]):
                    raise UndefinedMetricError(f"acc[{t}][{i}] was never filled")


def mean_accuracy(m: AccMatrix) -> float:
    """Average over t of the mean accuracy across tasks 0..t after task t."""
    m._require_lower_triangle()
    per_stage = [float(np.mean(m.acc[t, : t + 1])) for t in range(m.n_tasks)]
    return float(np.mean(per_stage))


def backward_transfer(m: AccMatrix) -> float:
    """Mean final-minus-fresh accuracy change over all but the last task."""
    m._require_lower_triangle()
    if m.n_tasks < 2:
        raise UndefinedMetricError("backward transfer needs at least 2 tasks")
    last = m.n_tasks - 1
    deltas = [m.acc[last, t] - m.acc[t, t] for t in range(m.n_tasks - 1)]
    return float(np.mean(deltas))


def forward_transfer(m: AccMatrix) -> float:
    """Mean pre-training accuracy gain over the random baseline.

    Uses acc[t-1][t]: each task evaluated on the model trained through the
    previous task, before its own training.
    """
    if m.n_tasks < 2:
        raise UndefinedMetricError("forward transfer needs at least 2 tasks")
    if m.acc.shape != (m.n_tasks, m.n_tasks):
        raise UndefinedMetricError(
            f"forward transfer needs a square matrix, got {m.acc.shape}")
    deltas = []
    for t in range(1, m.n_tasks):
        if np.isnan(m.acc[t - 1, t]):
            raise UndefinedMetricError(f"acc[{t - 1}][{t}] (pre-training cell) missing")
        if np.isnan(m.rand[t]):
            raise UndefinedMetricError(f"rand[{t}] missing")
        deltas.append(m.acc[t - 1, t] - m.rand[t])
    return float(np.mean(deltas))


def forgetting(m: AccMatrix) -> float:
    """Mean drop from each task's best accuracy to its final accuracy."""
    m._require_lower_triangle()
    last = m.n_tasks - 1
    drops = []
    for t in range(m.n_tasks):
        best = max(m.acc[d, t] for d in range(t, m.n_tasks))
        drops.append(best - m.acc[last, t])
    return float(np.mean(drops))


def write_acc_matrix_csv(m: AccMatrix, path) -> None:
    """Header row, one row per training stage, blanks where NaN, and the
    random-baseline vector as a trailing commented row."""
    with open(path, "w", encoding="utf-8") as fh:
        cols = ",".join(f"task{i}" for i in range(m.acc.shape[1]))
        fh.write(f"after_task,{cols}\n")
        for t in range(m.acc.shape[0]):
            cells = ["" if np.isnan(v) else repr(float(v)) for v in m.acc[t]]
            fh.write(f"{t}," + ",".join(cells) + "\n")
        rand_cells = ["" if np.isnan(v) else repr(float(v)) for v in m.rand]
        fh.write("# rand," + ",".join(rand_cells) + "\n")


def read_acc_matrix_csv(path) -> AccMatrix:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("after_task,"):
        raise FormatError(f"missing accuracy-matrix header: {path}")
    n_tasks = len(lines[0].split(",")) - 1
    rows, rand = [], np.full(n_tasks, np.nan)
    for ln in lines[1:]:
        if ln.startswith("# rand,"):
            vals = ln.split(",")[1:]
            rand = np.array([np.nan if v == "" else float(v) for v in vals])
            continue
        cells = ln.split(",")
        rows.append([np.nan if v == "" else float(v) for v in cells[1:]])
    acc = np.array(rows) if rows else np.zeros((0, n_tasks))
    if acc.shape[1] != n_tasks:
        raise FormatError(f"ragged accuracy-matrix rows: {path}")
    return AccMatrix(n_tasks=n_tasks, acc=acc, rand=rand)
