"""Streaming per-class indicator statistics.

Six slowly-evolving statistics track how the classifier treats each
foreground class:

- ``image_freq`` (f) and ``instance_freq`` (F): static training frequencies,
  fixed at construction.
- ``cum_count`` (N): cumulative foreground samples seen, including
  hallucinated ones.
- ``mean_score`` (s): EMA of the per-class mean ground-truth-channel sigmoid
  probability.
- ``tpr``: cumulative true-positive rate under the foreground argmax.
- ``confusion_soft`` / ``confusion_hard`` (M): row-normalized confusion
  accumulator over foreground channels; the soft variant accumulates the
  foreground softmax, the hard variant one-hot argmax counts.

Each statistic yields, for a ground-truth class i and another class j, the
pair (l_i, l_j) feeding the pairwise margin, and a scalar in [0, 1] feeding
the hallucination sampling distribution.  Confusion rows start from one
uniform pseudo-count so cold-start margins are zero rather than undefined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .core import INDICATOR_KINDS
from .losses import MARGIN_CLIP, INDICATOR_FLOOR, softmax

SCALAR_KINDS = ("image_freq", "instance_freq", "cum_count", "mean_score", "tpr")
CONFUSION_KINDS = ("confusion_soft", "confusion_hard")


@dataclass(frozen=True)
class IndicatorSnapshot:
    """Immutable copy of all derived per-class values at one step.

    tpr entries with no ground-truth samples yet are reported as 0 with
    tpr_valid False.  M rows with no samples reduce to the uniform prior.
    """

    f: np.ndarray          # (C,) static image frequency
    F: np.ndarray          # (C,) static instance frequency
    N: np.ndarray          # (C,) cumulative counts
    s: np.ndarray          # (C,) mean-score EMA
    tpr: np.ndarray        # (C,)
    tpr_valid: np.ndarray  # (C,) bool
    M: np.ndarray          # (C, C) row-stochastic confusion matrix

    def __post_init__(self):
        for arr in (self.f, self.F, self.N, self.s, self.tpr, self.tpr_valid, self.M):
            arr.setflags(write=False)

    @property
    def num_classes(self) -> int:
        return self.f.size


class LongTermIndicators:
    """Mutable accumulators; snapshot() freezes the derived values."""

    def __init__(self, num_classes: int, static_f, static_F, kind: str = "confusion_soft"):
        static_f = np.asarray(static_f, dtype=float)
        static_F = np.asarray(static_F, dtype=float)
        if static_f.shape != (num_classes,) or static_F.shape != (num_classes,):
            raise ValueError(
                f"static frequency vectors must have shape ({num_classes},), "
                f"got {static_f.shape} and {static_F.shape}"
            )
        if np.any(static_f < 0) or np.any(static_F < 0):
            raise ValueError("static frequencies must be non-negative")
        if kind not in INDICATOR_KINDS:
            raise ValueError(f"unknown indicator kind {kind!r}")
        C = num_classes
        self.kind = kind
        self.f = static_f.copy()
        self.F = static_F.copy()
        self.N = np.zeros(C, dtype=np.int64)
        # Mean score starts at chance level for C+1 sigmoid channels.
        self.s = np.full(C, 1.0 / (C + 1))
        self.tpr_num = np.zeros(C, dtype=np.int64)
        self.tpr_den = np.zeros(C, dtype=np.int64)
        # One pseudo-count spread uniformly per row: derived M starts uniform,
        # so confusion margins are 0 before any data arrives.
        self.M_num = np.full((C, C), 1.0 / C)
        self.M_den = np.ones(C)

    @property
    def num_classes(self) -> int:
        return self.f.size

    def _check_foreground(self, labels: np.ndarray) -> np.ndarray:
        labels = np.asarray(labels, dtype=int)
        if labels.size and (labels.min() < 1 or labels.max() > self.num_classes):
            raise ValueError(
                f"indicator updates take foreground labels in 1..{self.num_classes}"
            )
        return labels

    def update_mean_score(self, probs, labels, gamma: float) -> None:
        """EMA toward each present class's batch-mean ground-truth probability.

        Classes absent from the batch keep their current value.
        """
        labels = self._check_foreground(labels)
        probs = np.asarray(probs, dtype=float)
        for i in np.unique(labels):
            batch_mean = probs[labels == i].mean()
            self.s[i - 1] = gamma * self.s[i - 1] + (1.0 - gamma) * batch_mean

    def update_counts_tpr(self, predicted, labels) -> None:
        """Accumulate per-class sample counts and argmax true positives."""
        labels = self._check_foreground(labels)
        predicted = np.asarray(predicted, dtype=int)
        i0 = labels - 1
        np.add.at(self.N, i0, 1)
        np.add.at(self.tpr_den, i0, 1)
        correct = predicted == labels
        np.add.at(self.tpr_num, i0[correct], 1)

    def update_confusion_soft(self, Z, labels) -> None:
        """Add each sample's foreground softmax to its ground-truth row."""
        labels = self._check_foreground(labels)
        Z = np.asarray(Z, dtype=float)
        P = softmax(Z[:, : self.num_classes])
        i0 = labels - 1
        np.add.at(self.M_num, i0, P)
        np.add.at(self.M_den, i0, 1.0)

    def update_confusion_hard(self, Z, labels) -> None:
        """Add a one-hot count at the foreground argmax instead of the softmax."""
        labels = self._check_foreground(labels)
        Z = np.asarray(Z, dtype=float)
        j0 = np.argmax(Z[:, : self.num_classes], axis=1)
        i0 = labels - 1
        np.add.at(self.M_num, (i0, j0), 1.0)
        np.add.at(self.M_den, i0, 1.0)

    def update(self, Z, labels, gamma: float) -> None:
        """One combined update from foreground logits.

        Maintains every statistic each step; the configured kind only decides
        whether the confusion matrix accumulates soft rows or hard argmax
        counts.
        """
        labels = self._check_foreground(labels)
        if labels.size == 0:
            return
        Z = np.asarray(Z, dtype=float)
        i0 = labels - 1
        gt_probs = expit(Z[np.arange(Z.shape[0]), i0])
        predicted = np.argmax(Z[:, : self.num_classes], axis=1) + 1
        self.update_mean_score(gt_probs, labels, gamma)
        self.update_counts_tpr(predicted, labels)
        if self.kind == "confusion_hard":
            self.update_confusion_hard(Z, labels)
        else:
            self.update_confusion_soft(Z, labels)

    def snapshot(self) -> IndicatorSnapshot:
        valid = self.tpr_den > 0
        tpr = np.zeros(self.num_classes)
        tpr[valid] = self.tpr_num[valid] / self.tpr_den[valid]
        M = self.M_num / self.M_den[:, None]
        return IndicatorSnapshot(
            f=self.f.copy(),
            F=self.F.copy(),
            N=self.N.astype(float),
            s=self.s.copy(),
            tpr=tpr,
            tpr_valid=valid.copy(),
            M=M,
        )


def init_indicators(
    num_classes: int, static_f, static_F, kind: str = "confusion_soft"
) -> LongTermIndicators:
    return LongTermIndicators(num_classes, static_f, static_F, kind)


def _scalar_values(snapshot: IndicatorSnapshot, kind: str) -> np.ndarray:
    if kind == "image_freq":
        return snapshot.f
    if kind == "instance_freq":
        return snapshot.F
    if kind == "cum_count":
        return snapshot.N
    if kind == "mean_score":
        return snapshot.s
    if kind == "tpr":
        return snapshot.tpr
    raise ValueError(f"unknown indicator kind {kind!r}")


def margin_inputs(snapshot: IndicatorSnapshot, kind: str, i: int, j: int):
    """The (l_i, l_j) pair feeding the pairwise margin for classes i != j.

    Scalar kinds return the classes' own values.  Confusion kinds measure how
    much each class leaks into the other: l_i = M[j, i] (others predicted as
    i) and l_j = M[i, j].
    """
    C = snapshot.num_classes
    if not (1 <= i <= C and 1 <= j <= C):
        raise ValueError(f"classes must be foreground ids in 1..{C}, got {i}, {j}")
    if i == j:
        raise ValueError("margin inputs need two distinct classes")
    if kind in SCALAR_KINDS:
        v = _scalar_values(snapshot, kind)
        return float(v[i - 1]), float(v[j - 1])
    if kind in CONFUSION_KINDS:
        return float(snapshot.M[j - 1, i - 1]), float(snapshot.M[i - 1, j - 1])
    raise ValueError(f"unknown indicator kind {kind!r}")


def dominates(snapshot: IndicatorSnapshot, kind: str, i: int, j: int) -> bool:
    """Dominance criterion for class i over class j under the given kind.

    Scalar kinds: v_i > v_j.  Confusion kinds: M[j, i] > M[i, j] (class i
    attracts more of j's mass than it leaks to j).
    """
    l_i, l_j = margin_inputs(snapshot, kind, i, j)
    return l_i > l_j


def margin_matrix(snapshot: IndicatorSnapshot, kind: str, alpha: float) -> np.ndarray:
    """Full (C, C) margin table; entry [i-1, j-1] is the margin applied to
    channel j when the ground truth is i.  Diagonal is 0.

    Values are alpha * log(l_j / l_i) with flooring and clipping identical to
    pairwise_margin.
    """
    C = snapshot.num_classes
    if kind in SCALAR_KINDS:
        v = np.maximum(_scalar_values(snapshot, kind), INDICATOR_FLOOR)
        logv = np.log(v)
        delta = alpha * (logv[None, :] - logv[:, None])
    elif kind in CONFUSION_KINDS:
        Mf = np.maximum(snapshot.M, INDICATOR_FLOOR)
        logM = np.log(Mf)
        # l_i = M[j, i], l_j = M[i, j] so delta[i, j] = a*(log M[i,j] - log M[j,i])
        delta = alpha * (logM - logM.T)
    else:
        raise ValueError(f"unknown indicator kind {kind!r}")
    delta = np.clip(delta, -MARGIN_CLIP, MARGIN_CLIP)
    np.fill_diagonal(delta, 0.0)
    return delta


def fhm_indicator_vector(snapshot: IndicatorSnapshot, kind: str) -> np.ndarray:
    """Per-class scalar in [0, 1] feeding the synthesis sampling weights.

    Unbounded kinds (f, F, N) are normalized by their maximum; an all-zero
    vector stays all-zero (the caller's normalization then falls back to
    uniform).  mean_score and tpr are already in [0, 1]; confusion kinds use
    the matrix diagonal.
    """
    if kind in CONFUSION_KINDS:
        return np.diag(snapshot.M).copy()
    v = _scalar_values(snapshot, kind)
    if kind in ("image_freq", "instance_freq", "cum_count"):
        top = v.max()
        return v / top if top > 0 else np.zeros_like(v)
    return v.copy()


def fhm_indicator(snapshot: IndicatorSnapshot, kind: str, i: int) -> float:
    """Scalar variant of fhm_indicator_vector for one foreground class."""
    C = snapshot.num_classes
    if not 1 <= i <= C:
        raise ValueError(f"class must be a foreground id in 1..{C}, got {i}")
    return float(fhm_indicator_vector(snapshot, kind)[i - 1])


def export_snapshot_csv(snapshot: IndicatorSnapshot, per_class_path, matrix_path) -> None:
    """Per-class table plus the full confusion matrix, as CSV."""
    C = snapshot.num_classes
    with open(per_class_path, "w", encoding="utf-8") as fh:
        fh.write("class,image_freq,instance_freq,cum_count,mean_score,tpr,tpr_valid,confusion_diag\n")
        for k in range(C):
            fh.write(
                f"{k + 1},{snapshot.f[k]:.10g},{snapshot.F[k]:.10g},"
                f"{snapshot.N[k]:.10g},{snapshot.s[k]:.10g},{snapshot.tpr[k]:.10g},"
                f"{int(snapshot.tpr_valid[k])},{snapshot.M[k, k]:.10g}\n"
            )
    with open(matrix_path, "w", encoding="utf-8") as fh:
        fh.write("gt_class," + ",".join(f"pred_{j + 1}" for j in range(C)) + "\n")
        for k in range(C):
            fh.write(f"{k + 1}," + ",".join(f"{v:.10g}" for v in snapshot.M[k]) + "\n")
