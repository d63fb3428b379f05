"""Feature hallucination: box-driven distribution tracking plus tail-biased
feature synthesis.

For every real foreground example the box generator jitters the ground-truth
box into 16 dense proposals; each proposal contributes the example's feature
perturbed by noise proportional to the proposal's offset magnitude.  Those
proposal features feed per-class EMA estimates of a feature prototype mu and
per-dimension spread sigma.  Classes the classifier treats worst (smallest
indicator value) are then sampled preferentially, and for each selected class
new features are synthesized as mu + eps * sigma with standard-normal eps.

Synthesis involves no trainable parameters, and hallucinated features never
feed back into the distribution estimates; only real proposals do.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Box
from .indicators import IndicatorSnapshot, fhm_indicator_vector

N_PROPOSALS = 16
# Proposal offsets are eta * side / OFFSET_DIVISOR per coordinate.
OFFSET_DIVISOR = 6.0
# Scale of the per-proposal feature perturbation (times mean |eta|).
PROPOSAL_NOISE = 0.1
# Defensive bound; valid inputs can never produce a degenerate proposal.
MAX_REDRAWS = 100


@dataclass
class FeatureDistribution:
    """Per-class EMA feature statistics.

    sigma is a per-dimension standard deviation (the elementwise-product
    synthesis form calls for stddev, not variance).  Classes with seen == 0
    have never been observed and are ineligible for synthesis.
    """

    mu: np.ndarray    # (C, d)
    sigma: np.ndarray  # (C, d), >= 0
    seen: np.ndarray  # (C,) update events per class


def init_distribution(num_classes: int, feature_dim: int) -> FeatureDistribution:
    return FeatureDistribution(
        mu=np.zeros((num_classes, feature_dim)),
        sigma=np.zeros((num_classes, feature_dim)),
        seen=np.zeros(num_classes, dtype=np.int64),
    )


def offset_box(box: Box, eta) -> Box:
    """Deterministic jitter: each coordinate moves by eta_k * (side / 6)."""
    e = np.asarray(eta, dtype=float)
    w, h = box.width, box.height
    return Box(
        box.x1 + e[0] * w / OFFSET_DIVISOR,
        box.y1 + e[1] * h / OFFSET_DIVISOR,
        box.x2 + e[2] * w / OFFSET_DIVISOR,
        box.y2 + e[3] * h / OFFSET_DIVISOR,
    )


def offset_boxes_xyxy(box_rows: np.ndarray, etas: np.ndarray) -> np.ndarray:
    """Array form of offset_box: (n, 4) boxes jittered by (n, 4) etas."""
    box_rows = np.asarray(box_rows, dtype=float)
    etas = np.asarray(etas, dtype=float)
    w = box_rows[:, 2] - box_rows[:, 0]
    h = box_rows[:, 3] - box_rows[:, 1]
    sides = np.column_stack([w, h, w, h]) / OFFSET_DIVISOR
    return box_rows + etas * sides


def generate_boxes(box: Box, rng: np.random.Generator, n_proposals: int = N_PROPOSALS):
    """n_proposals jittered copies of box with eta uniform in [-1, 1]^4.

    Returns (list of Box, eta array of shape (n_proposals, 4)).  Proposals
    are re-validated; a degenerate draw is redrawn (mathematically impossible
    for a valid input, kept as a defensive guard).
    """
    boxes: list[Box] = []
    etas = np.empty((n_proposals, 4))
    redraws = 0
    while len(boxes) < n_proposals:
        eta = rng.uniform(-1.0, 1.0, size=4)
        try:
            candidate = offset_box(box, eta)
        except ValueError:
            redraws += 1
            if redraws > MAX_REDRAWS:
                raise RuntimeError(
                    f"box generator produced {MAX_REDRAWS} consecutive degenerate "
                    f"proposals for {box}"
                )
            continue
        redraws = 0
        etas[len(boxes)] = eta
        boxes.append(candidate)
    return boxes, etas


def proposal_features(
    feature: np.ndarray, etas: np.ndarray, rng: np.random.Generator,
    noise_scale: float = PROPOSAL_NOISE,
) -> np.ndarray:
    """One feature row per proposal: the example feature plus noise scaled by
    the proposal's mean absolute offset.

    The identity proposal (eta = 0) reproduces the feature exactly; far
    offsets yield more feature variation, so denser geometry means more
    diverse statistics for the class.
    """
    feature = np.asarray(feature, dtype=float)
    etas = np.asarray(etas, dtype=float)
    scale = noise_scale * np.mean(np.abs(etas), axis=1, keepdims=True)
    eps = rng.standard_normal((etas.shape[0], feature.size))
    return feature[None, :] + eps * scale


def proposal_features_batch(
    features: np.ndarray, etas: np.ndarray, rng: np.random.Generator,
    noise_scale: float = PROPOSAL_NOISE,
) -> np.ndarray:
    """proposal_features over many examples at once.

    features is (n, d) and etas (n, k, 4); returns (n * k, d) rows ordered
    example-major so row n * k + j belongs to example n.
    """
    features = np.asarray(features, dtype=float)
    etas = np.asarray(etas, dtype=float)
    n, k, _ = etas.shape
    d = features.shape[1]
    scale = noise_scale * np.mean(np.abs(etas), axis=2)[..., None]  # (n, k, 1)
    eps = rng.standard_normal((n, k, d))
    return (features[:, None, :] + eps * scale).reshape(n * k, d)


def update_distribution(
    dist: FeatureDistribution, features: np.ndarray, labels: np.ndarray, beta: float
) -> None:
    """EMA update of (mu, sigma) from features grouped by foreground label.

    Per present class: batch mean u and per-dimension batch stddev v, then
    mu <- beta * mu + (1 - beta) * u and likewise for sigma.  A class's first
    observation sets mu = u and sigma = v directly.
    """
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=int)
    C = dist.mu.shape[0]
    if labels.size and (labels.min() < 1 or labels.max() > C):
        raise ValueError(f"distribution updates take foreground labels in 1..{C}")
    for i in np.unique(labels):
        rows = features[labels == i]
        u = rows.mean(axis=0)
        v = rows.std(axis=0)
        k = i - 1
        if dist.seen[k] == 0:
            dist.mu[k] = u
            dist.sigma[k] = v
        else:
            dist.mu[k] = beta * dist.mu[k] + (1.0 - beta) * u
            dist.sigma[k] = beta * dist.sigma[k] + (1.0 - beta) * v
        dist.seen[k] += 1


def sampling_probs(snapshot: IndicatorSnapshot, kind: str) -> np.ndarray:
    """Class-sampling distribution sp_i = (1 - l_i) / sum_k (1 - l_k).

    Classes with small indicator values (badly treated) get more synthesis.
    If every l_i is 1 the weights vanish; fall back to uniform.
    """
    l = fhm_indicator_vector(snapshot, kind)
    weights = 1.0 - l
    total = weights.sum()
    if total <= 0:
        return np.full(l.size, 1.0 / l.size)
    return weights / total


def select_classes(sp: np.ndarray, c_sampled: int, rng: np.random.Generator) -> list[int]:
    """c_sampled distinct 1-based class ids, weighted without replacement.

    When the remaining probability mass runs out (many exact zeros), the
    rest are filled uniformly from the unchosen classes, so c_sampled = C
    always selects every class.
    """
    sp = np.asarray(sp, dtype=float)
    C = sp.size
    if not 0 <= c_sampled <= C:
        raise ValueError(f"c_sampled={c_sampled} outside 0..{C}")
    available = np.arange(C)
    remaining = sp.copy()
    chosen: list[int] = []
    for _ in range(c_sampled):
        mass = remaining[available].sum()
        if mass > 0:
            pick = int(rng.choice(available, p=remaining[available] / mass))
        else:
            pick = int(available[rng.integers(available.size)])
        chosen.append(pick + 1)
        available = available[available != pick]
    return chosen


@dataclass(frozen=True)
class HallucinatedBatch:
    """Synthetic foreground features, flagged so they never enter
    distribution updates."""

    features: np.ndarray  # (m, d)
    labels: np.ndarray    # (m,) all equal to the source class
    synthetic: bool = True


def synthesize(
    dist: FeatureDistribution, class_id: int, m_per_class: int, rng: np.random.Generator
) -> HallucinatedBatch:
    """m_per_class features mu_i + eps * sigma_i with fresh standard-normal eps."""
    k = class_id - 1
    if not 0 <= k < dist.mu.shape[0]:
        raise ValueError(f"class {class_id} outside 1..{dist.mu.shape[0]}")
    if dist.seen[k] == 0:
        raise ValueError(
            f"class {class_id} has no observed features; cannot synthesize"
        )
    eps = rng.standard_normal((m_per_class, dist.mu.shape[1]))
    feats = dist.mu[k] + eps * dist.sigma[k]
    return HallucinatedBatch(feats, np.full(m_per_class, class_id, dtype=int))


def dump_distribution(dist: FeatureDistribution, path) -> None:
    """Per-class mu, sigma, and update count as CSV for audits."""
    d = dist.mu.shape[1]
    with open(path, "w", encoding="utf-8") as fh:
        header = (
            ["class", "seen"]
            + [f"mu_{k}" for k in range(d)]
            + [f"sigma_{k}" for k in range(d)]
        )
        fh.write(",".join(header) + "\n")
        for i in range(dist.mu.shape[0]):
            row = (
                [str(i + 1), str(int(dist.seen[i]))]
                + [f"{v:.10g}" for v in dist.mu[i]]
                + [f"{v:.10g}" for v in dist.sigma[i]]
            )
            fh.write(",".join(row) + "\n")
