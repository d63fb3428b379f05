"""Synthetic long-tailed classification tasks.

A task is C foreground classes with power-law sample counts plus one
abundant background class.  Each class draws features from an isotropic
Gaussian around a fixed prototype; the background distribution is broad
enough to overlap every foreground class, so the objectness channel has a
real discrimination job.  Every example also carries a random axis-aligned
box inside the unit canvas; boxes only exercise the proposal-geometry path,
features are never recomputed from them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import IO

import numpy as np

from .core import Box, RngStreams

GROUP_NAMES = ("rare", "common", "frequent")
RARE_MAX = 10      # n <= 10
COMMON_MAX = 100   # 11..100; above is frequent

DATASET_FORMAT = "longtail-dataset-v1"


@dataclass(frozen=True)
class TaskSpec:
    """Parameters of a synthetic long-tailed task."""

    num_classes: int = 30
    feature_dim: int = 32
    max_count: int = 5000
    min_count: int = 5
    power: float = 2.0
    background_count: int = 3000
    class_sep: float = 1.0   # scale of prototype dispersion
    noise_scale: float = 1.0  # within-class standard deviation

    def __post_init__(self):
        if self.num_classes < 3:
            raise ValueError(
                f"num_classes={self.num_classes} must be >= 3 so all three "
                "frequency groups can be populated"
            )
        if self.feature_dim < 1:
            raise ValueError(f"feature_dim={self.feature_dim} must be >= 1")
        if self.min_count < 1:
            raise ValueError(f"min_count={self.min_count} must be >= 1")
        if self.max_count < self.min_count:
            raise ValueError(
                f"max_count={self.max_count} must be >= min_count={self.min_count}"
            )
        if self.background_count < 0:
            raise ValueError(f"background_count={self.background_count} must be >= 0")
        if self.power < 0:
            raise ValueError(f"power={self.power} must be >= 0")
        for name in ("class_sep", "noise_scale"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name}={v} must be finite and >= 0")


def power_for_range(max_count: int, min_count: int, num_classes: int) -> float:
    """Exponent making class counts span [min_count, max_count] over C classes."""
    if num_classes < 2 or max_count <= min_count:
        return 0.0
    return math.log(max_count / min_count) / math.log(num_classes)


def class_counts(spec: TaskSpec) -> np.ndarray:
    """Per-class sample counts: round(max_count * i^-power), clamped, head first."""
    idx = np.arange(1, spec.num_classes + 1, dtype=float)
    raw = np.round(spec.max_count * idx ** (-spec.power))
    return np.clip(raw, spec.min_count, spec.max_count).astype(int)


@dataclass(frozen=True)
class GroupAssignment:
    """Frequency-group tag per foreground class, derived from counts only."""

    groups: tuple[str, ...]

    def classes_in(self, group: str) -> np.ndarray:
        """1-based class ids carrying the tag."""
        if group not in GROUP_NAMES:
            raise ValueError(f"unknown group {group!r}, expected one of {GROUP_NAMES}")
        return np.array([i + 1 for i, g in enumerate(self.groups) if g == group], dtype=int)

    def mask(self, group: str) -> np.ndarray:
        return np.array([g == group for g in self.groups], dtype=bool)


def group_classes(counts) -> GroupAssignment:
    """Tag classes rare (n <= 10), common (11..100), or frequent (n > 100)."""
    counts = np.asarray(counts, dtype=int)
    if np.any(counts < 0):
        raise ValueError("counts must be >= 0")
    tags = []
    for n in counts:
        if n <= RARE_MAX:
            tags.append("rare")
        elif n <= COMMON_MAX:
            tags.append("common")
        else:
            tags.append("frequent")
    return GroupAssignment(tuple(tags))


@dataclass(frozen=True)
class Dataset:
    """A materialized task: generator parameters plus labeled examples.

    means has C+1 rows (background last); spreads is the per-class isotropic
    standard deviation.  labels are 1..C+1; boxes rows are [x1, y1, x2, y2].
    """

    spec: TaskSpec
    seed: int
    counts: np.ndarray          # (C,) foreground training counts
    means: np.ndarray           # (C+1, d) true class means
    spreads: np.ndarray         # (C+1,) true isotropic stddevs
    features: np.ndarray        # (N, d)
    labels: np.ndarray          # (N,) in 1..C+1
    boxes: np.ndarray           # (N, 4)

    def __post_init__(self):
        for arr in (self.counts, self.means, self.spreads, self.features, self.labels, self.boxes):
            arr.setflags(write=False)

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def size(self) -> int:
        return self.labels.size

    def groups(self) -> GroupAssignment:
        return group_classes(self.counts)


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray
    boxes: np.ndarray

    @property
    def size(self) -> int:
        return self.labels.size


def _random_boxes(rng: np.random.Generator, n: int) -> np.ndarray:
    """Valid boxes in the unit canvas: corner uniform, side in [0.1, 0.4]."""
    x1 = rng.uniform(0.0, 0.6, size=n)
    y1 = rng.uniform(0.0, 0.6, size=n)
    w = rng.uniform(0.1, 0.4, size=n)
    h = rng.uniform(0.1, 0.4, size=n)
    return np.column_stack([x1, y1, x1 + w, y1 + h])


def make_task(spec: TaskSpec, seed: int) -> Dataset:
    """Materialize a task deterministically from (spec, seed).

    Counts follow the clamped power law head-first; prototypes are drawn once
    from N(0, class_sep^2 I); examples are N(prototype, noise_scale^2 I).
    The background mean is the origin with spread sqrt(class_sep^2 +
    noise_scale^2), matching the overall foreground feature dispersion.
    """
    rng = RngStreams(seed).get("data")
    C, d = spec.num_classes, spec.feature_dim
    counts = class_counts(spec)

    means = np.zeros((C + 1, d))
    means[:C] = rng.normal(0.0, 1.0, size=(C, d)) * spec.class_sep
    spreads = np.full(C + 1, float(spec.noise_scale))
    spreads[C] = math.hypot(spec.class_sep, spec.noise_scale)

    n_total = int(counts.sum()) + spec.background_count
    features = np.empty((n_total, d))
    labels = np.empty(n_total, dtype=int)
    pos = 0
    for i in range(C):
        n = int(counts[i])
        features[pos : pos + n] = means[i] + rng.normal(size=(n, d)) * spreads[i]
        labels[pos : pos + n] = i + 1
        pos += n
    nb = spec.background_count
    features[pos : pos + nb] = means[C] + rng.normal(size=(nb, d)) * spreads[C]
    labels[pos : pos + nb] = C + 1

    boxes = _random_boxes(rng, n_total)
    return Dataset(
        spec=spec,
        seed=int(seed),
        counts=counts,
        means=means,
        spreads=spreads,
        features=features,
        labels=labels,
        boxes=boxes,
    )


def sample_batch(dataset: Dataset, batch_size: int, rng: np.random.Generator) -> Batch:
    """Uniform sample without replacement and without class rebalancing."""
    if batch_size < 1:
        raise ValueError(f"batch_size={batch_size} must be >= 1")
    if batch_size > dataset.size:
        raise ValueError(
            f"batch_size={batch_size} exceeds dataset size {dataset.size}"
        )
    idx = rng.permutation(dataset.size)[:batch_size]
    return Batch(dataset.features[idx], dataset.labels[idx], dataset.boxes[idx])


def epoch_batches(dataset: Dataset, batch_size: int, rng: np.random.Generator):
    """One pass over the dataset as shuffled minibatches (last may be short)."""
    if batch_size < 1:
        raise ValueError(f"batch_size={batch_size} must be >= 1")
    order = rng.permutation(dataset.size)
    for start in range(0, dataset.size, batch_size):
        idx = order[start : start + batch_size]
        yield Batch(dataset.features[idx], dataset.labels[idx], dataset.boxes[idx])


# ---------------------------------------------------------------------------
# Plain-text serialization.  Floats are written with repr so that a load of a
# save is bit-identical; one example per line after the header.
# ---------------------------------------------------------------------------

def _write_floats(fh: IO[str], name: str, arr: np.ndarray) -> None:
    flat = np.asarray(arr, dtype=float).ravel()
    fh.write(f"{name} " + " ".join(repr(float(v)) for v in flat) + "\n")


def save_dataset(dataset: Dataset, path) -> None:
    spec = dataset.spec
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"format {DATASET_FORMAT}\n")
        fh.write(f"seed {dataset.seed}\n")
        fh.write(
            "spec "
            f"num_classes={spec.num_classes} feature_dim={spec.feature_dim} "
            f"max_count={spec.max_count} min_count={spec.min_count} "
            f"power={spec.power!r} background_count={spec.background_count} "
            f"class_sep={spec.class_sep!r} noise_scale={spec.noise_scale!r}\n"
        )
        fh.write("counts " + " ".join(str(int(n)) for n in dataset.counts) + "\n")
        _write_floats(fh, "means", dataset.means)
        _write_floats(fh, "spreads", dataset.spreads)
        fh.write(f"examples {dataset.size}\n")
        for k in range(dataset.size):
            box = " ".join(repr(float(v)) for v in dataset.boxes[k])
            feat = " ".join(repr(float(v)) for v in dataset.features[k])
            fh.write(f"{int(dataset.labels[k])} {box} {feat}\n")


def load_dataset(path) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].split() != ["format", DATASET_FORMAT]:
        raise ValueError(f"{path}: not a {DATASET_FORMAT} file")
    seed = int(lines[1].split()[1])
    spec_kv = dict(tok.split("=", 1) for tok in lines[2].split()[1:])
    spec = TaskSpec(
        num_classes=int(spec_kv["num_classes"]),
        feature_dim=int(spec_kv["feature_dim"]),
        max_count=int(spec_kv["max_count"]),
        min_count=int(spec_kv["min_count"]),
        power=float(spec_kv["power"]),
        background_count=int(spec_kv["background_count"]),
        class_sep=float(spec_kv["class_sep"]),
        noise_scale=float(spec_kv["noise_scale"]),
    )
    C, d = spec.num_classes, spec.feature_dim
    counts = np.array([int(v) for v in lines[3].split()[1:]], dtype=int)
    means = np.array([float(v) for v in lines[4].split()[1:]]).reshape(C + 1, d)
    spreads = np.array([float(v) for v in lines[5].split()[1:]])
    n = int(lines[6].split()[1])
    labels = np.empty(n, dtype=int)
    boxes = np.empty((n, 4))
    features = np.empty((n, d))
    for k in range(n):
        parts = lines[7 + k].split()
        labels[k] = int(parts[0])
        boxes[k] = [float(v) for v in parts[1:5]]
        features[k] = [float(v) for v in parts[5:]]
    return Dataset(
        spec=spec,
        seed=seed,
        counts=counts,
        means=means,
        spreads=spreads,
        features=features,
        labels=labels,
        boxes=boxes,
    )


def save_groups(dataset: Dataset, path) -> None:
    """Per-class count and group tag as CSV."""
    assignment = dataset.groups()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("class,count,group\n")
        for i, (n, g) in enumerate(zip(dataset.counts, assignment.groups), start=1):
            fh.write(f"{i},{int(n)},{g}\n")
