"""Shared domain types, the hyperparameter record, and the RNG contract.

All real arithmetic in the package is double precision; gradient checks at
1e-6 relative tolerance require it.

Label convention: foreground categories are the integers 1..C, background is
C+1.  A logit vector has length C+1 with the background channel last.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, fields, replace
from typing import Mapping, Sequence

import numpy as np

# Foreground category ids are 1..C; the background channel id is C+1.
CategoryId = int

INDICATOR_KINDS = (
    "image_freq",
    "instance_freq",
    "cum_count",
    "mean_score",
    "tpr",
    "confusion_soft",
    "confusion_hard",
)

# Named RNG sub-streams.  Each subsystem owns one stream so adding draws in
# one place never perturbs another: "data" generates datasets, "batches"
# shuffles training batches, "init" draws parameters, "boxgen" jitters
# proposal geometry and features, the fhm streams drive class selection and
# synthesis noise, and "eval" draws held-out evaluation sets.
STREAM_NAMES = ("data", "batches", "init", "boxgen", "fhm-select", "fhm-noise", "eval")


@dataclass(frozen=True)
class HyperParams:
    """All tunables of the method in one validated record.

    Construction rejects any out-of-range field, so an instance that exists
    is always valid.
    """

    gamma: float = 0.9          # EMA rate of the mean-score statistic, [0, 1)
    alpha: float = 0.85         # margin scale on log indicator ratios, >= 0
    p_thresh: float = 0.7       # weight-mask probability threshold, (0, 1]
    beta: float = 0.9           # EMA rate of feature distributions, [0, 1)
    c_sampled: int = 8          # classes hallucinated per step, >= 0
    m_per_class: int = 12       # features synthesized per selected class, >= 0
    lr: float = 0.02
    lr_decay: float = 0.1
    lr_decay_epochs: tuple[int, ...] = (8, 11)  # decay applied after these epochs
    momentum: float = 0.9       # [0, 1)
    weight_decay: float = 1e-4  # >= 0
    epochs_stage1: int = 12
    epochs_stage2: int = 12
    indicator_kind: str = "confusion_soft"

    def __post_init__(self):
        if isinstance(self.lr_decay_epochs, list):
            object.__setattr__(self, "lr_decay_epochs", tuple(self.lr_decay_epochs))
        _check_params(self)


def _reject(name, value, legal):
    raise ValueError(f"hyperparameter {name}={value!r} outside legal range {legal}")


def _check_real(hp, name, lo, hi, lo_open=False, hi_open=False):
    v = getattr(hp, name)
    legal = f"{'(' if lo_open else '['}{lo}, {hi}{')' if hi_open else ']'}"
    if not isinstance(v, (int, float)) or isinstance(v, bool) or not np.isfinite(v):
        _reject(name, v, legal)
    if v < lo or (lo_open and v == lo) or v > hi or (hi_open and v == hi):
        _reject(name, v, legal)


def _check_int(hp, name, lo):
    v = getattr(hp, name)
    legal = f"integers >= {lo}"
    if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < lo:
        _reject(name, v, legal)


def _check_params(hp: "HyperParams") -> None:
    inf = float("inf")
    _check_real(hp, "gamma", 0.0, 1.0, hi_open=True)
    _check_real(hp, "alpha", 0.0, inf)
    _check_real(hp, "p_thresh", 0.0, 1.0, lo_open=True)
    _check_real(hp, "beta", 0.0, 1.0, hi_open=True)
    _check_int(hp, "c_sampled", 0)
    _check_int(hp, "m_per_class", 0)
    _check_real(hp, "lr", 0.0, inf, lo_open=True)
    _check_real(hp, "lr_decay", 0.0, 1.0, lo_open=True)
    de = hp.lr_decay_epochs
    if not isinstance(de, tuple) or any(
        not isinstance(e, (int, np.integer)) or isinstance(e, bool) or e < 1 for e in de
    ):
        _reject("lr_decay_epochs", de, "tuple of integers >= 1")
    if any(b <= a for a, b in zip(de, de[1:])):
        _reject("lr_decay_epochs", de, "strictly increasing epochs")
    _check_real(hp, "momentum", 0.0, 1.0, hi_open=True)
    _check_real(hp, "weight_decay", 0.0, inf)
    _check_int(hp, "epochs_stage1", 1)
    _check_int(hp, "epochs_stage2", 1)
    if hp.indicator_kind not in INDICATOR_KINDS:
        _reject("indicator_kind", hp.indicator_kind, f"one of {INDICATOR_KINDS}")


def validate_params(raw) -> HyperParams:
    """Build a validated HyperParams from a mapping, or re-validate a record.

    Raises ValueError naming the first violated field, its value, and the
    legal range.
    """
    if isinstance(raw, HyperParams):
        _check_params(raw)
        return raw
    if isinstance(raw, Mapping):
        known = {f.name for f in fields(HyperParams)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown hyperparameter key: {unknown[0]}")
        return HyperParams(**raw)
    raise ValueError(f"cannot validate hyperparameters from {type(raw).__name__}")


def with_overrides(hp: HyperParams, **overrides) -> HyperParams:
    """Copy hp with some fields replaced; the copy is re-validated."""
    return replace(hp, **overrides)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box with strictly positive width and height."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"box coordinates must be finite, got {vals}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box: need x2 > x1 and y2 > y1, got {vals}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=float)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    return float(iou_xyxy(a.as_array()[None, :], b.as_array()[None, :])[0])


def iou_xyxy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise IoU of two (n, 4) arrays of [x1, y1, x2, y2] rows."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ix = np.maximum(
        0.0, np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0])
    )
    iy = np.maximum(
        0.0, np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1])
    )
    inter = ix * iy
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def stream_seed(master_seed: int, name: str) -> np.random.SeedSequence:
    """Seed material for a named sub-stream of a master seed.

    The name is hashed so renaming or reordering streams in code never
    silently aliases two streams.
    """
    return np.random.SeedSequence(
        entropy=(int(master_seed), zlib.crc32(name.encode("utf-8")))
    )


class RngStreams:
    """Named, independent RNG streams split from one master seed.

    Each stream is created on first access and then owned by its caller;
    repeated access returns the same advancing generator.  Two RngStreams
    built from the same master seed replay identical draw sequences.
    """

    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed)
        self._gens: dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        if name not in self._gens:
            self._gens[name] = np.random.default_rng(
                stream_seed(self.master_seed, name)
            )
        return self._gens[name]


def check_logits(z: np.ndarray) -> np.ndarray:
    """Validate and return a logit vector: 1-d, length >= 2, finite."""
    z = np.asarray(z, dtype=float)
    if z.ndim != 1 or z.size < 2:
        raise ValueError(f"logits must be a 1-d vector of length C+1 >= 2, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    return z
