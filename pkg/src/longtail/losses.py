"""Loss functions with hand-derived gradients.

Three losses share the (C+1)-logit layout (background channel last):

- ``softmax_ce``: plain softmax cross entropy over all C+1 channels.
- ``bce_objectness``: per-channel sigmoid BCE where a foreground sample is
  positive on its own channel only and a background sample is positive on
  the background channel only.
- ``fcbl``: foreground classification balance loss.  The ground-truth channel
  and the background channel keep their BCE terms; every other foreground
  channel j contributes -w_j * log(1 - sigmoid(z_j + delta_j)), i.e. its
  suppression is shifted by a pairwise margin and gated by a binary weight.

All gradients are with respect to the logits and are exact; there is no
autodiff anywhere in the package.  Log-sigmoids are computed via softplus
identities so nothing overflows for |z| up to ~700:

    -log(sigmoid(z))     = softplus(-z)
    -log(1 - sigmoid(z)) = softplus(z)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from .core import CategoryId, check_logits

# Indicator values entering a margin are floored here so log() is defined
# even for zero counts early in training.
INDICATOR_FLOOR = 1e-12
# Margins are clipped to keep adjusted logits in a numerically sane range.
MARGIN_CLIP = 20.0


@dataclass(frozen=True)
class LossResult:
    """Scalar loss plus the gradient wrt the (C+1) logits."""

    loss: float
    grad_z: np.ndarray


def sigmoid(z):
    """Numerically stable logistic function."""
    return expit(z)


def softplus(z):
    """log(1 + exp(z)) without overflow."""
    return np.logaddexp(0.0, z)


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_ce(z: np.ndarray, label: CategoryId) -> LossResult:
    """Softmax cross entropy over C+1 channels.

    grad_z[j] = softmax(z)[j] - 1[j == label].
    """
    z = check_logits(z)
    k = int(label) - 1
    if not 0 <= k < z.size:
        raise ValueError(f"label {label} outside 1..{z.size}")
    shifted = z - z.max()
    logsumexp = float(np.log(np.sum(np.exp(shifted))))
    loss = logsumexp - float(shifted[k])
    grad = np.exp(shifted) / np.exp(logsumexp)
    grad[k] -= 1.0
    return LossResult(loss, grad)


def _bce_targets(n_channels: int, label: CategoryId) -> np.ndarray:
    y = np.zeros(n_channels, dtype=float)
    k = int(label) - 1
    if not 0 <= k < n_channels:
        raise ValueError(f"label {label} outside 1..{n_channels}")
    y[k] = 1.0
    return y


def bce_objectness(z: np.ndarray, label: CategoryId) -> LossResult:
    """Sigmoid BCE over C+1 channels with an objectness background channel.

    A foreground sample of class i is positive on channel i only; a
    background sample is positive on the background channel only.
    grad_z = sigmoid(z) - y.
    """
    z = check_logits(z)
    y = _bce_targets(z.size, label)
    # -log p on positive channels, -log(1-p) on negative ones.
    loss = float(np.sum(np.where(y == 1.0, -log_expit(z), -log_expit(-z))))
    grad = expit(z) - y
    return LossResult(loss, grad)


def bce_objectness_batch(Z: np.ndarray, labels: np.ndarray):
    """Vectorized bce_objectness.

    Returns (per-sample losses of shape (n,), per-sample gradients (n, C+1)).
    """
    Z = np.asarray(Z, dtype=float)
    labels = np.asarray(labels, dtype=int)
    n, m = Z.shape
    Y = np.zeros((n, m), dtype=float)
    Y[np.arange(n), labels - 1] = 1.0
    losses = np.sum(np.where(Y == 1.0, -log_expit(Z), -log_expit(-Z)), axis=1)
    grads = expit(Z) - Y
    return losses, grads


def softmax_ce_batch(Z: np.ndarray, labels: np.ndarray):
    """Vectorized softmax_ce; returns (losses (n,), gradients (n, C+1))."""
    Z = np.asarray(Z, dtype=float)
    labels = np.asarray(labels, dtype=int)
    n = Z.shape[0]
    shifted = Z - Z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.sum(np.exp(shifted), axis=1))
    losses = logsumexp - shifted[np.arange(n), labels - 1]
    grads = np.exp(shifted - logsumexp[:, None])
    grads[np.arange(n), labels - 1] -= 1.0
    return losses, grads


def inference_probs(z: np.ndarray) -> np.ndarray:
    """Combined probability vector used at inference and as the short-term
    per-sample indicator.

    Foreground channels are gated by the complement of the background
    probability: out[i] = (1 - p_bg) * p[i] for i < C, out[C] = p_bg.
    """
    z = check_logits(z)
    return inference_probs_batch(z[None, :])[0]


def inference_probs_batch(Z: np.ndarray) -> np.ndarray:
    Z = np.asarray(Z, dtype=float)
    P = expit(Z)
    out = P.copy()
    out[..., :-1] *= 1.0 - P[..., -1:]
    return out


def pairwise_margin(l_i: float, l_j: float, alpha: float) -> float:
    """Margin alpha * log(l_j / l_i) between ground-truth class i and class j.

    Negative when class i dominates class j, shrinking j's suppression;
    positive when i is the weaker class.  Inputs are floored at
    INDICATOR_FLOOR so zero counts stay defined, and the result is clipped
    to [-MARGIN_CLIP, MARGIN_CLIP].
    """
    if alpha < 0:
        raise ValueError(f"alpha={alpha} must be >= 0")
    for name, v in (("l_i", l_i), ("l_j", l_j)):
        if not np.isfinite(v) or v < 0:
            raise ValueError(f"indicator {name}={v} must be finite and non-negative")
    li = max(float(l_i), INDICATOR_FLOOR)
    lj = max(float(l_j), INDICATOR_FLOOR)
    return float(np.clip(alpha * (np.log(lj) - np.log(li)), -MARGIN_CLIP, MARGIN_CLIP))


def adjusted_prob(z_j: float, delta: float) -> float:
    """Sigmoid of the margin-shifted logit z_j + delta."""
    return float(expit(z_j + delta))


def weight_terms(p_tilde: np.ndarray, label: CategoryId, p_thresh: float) -> np.ndarray:
    """Binary weights over foreground channels for a foreground sample.

    w[j] = 1 when class j is misclassified relative to the ground truth
    (p_tilde[j] >= p_tilde[i]) or over-confident (p_tilde[j] >= p_thresh);
    otherwise 0.  The ground-truth entry is defined 0.
    """
    p_tilde = np.asarray(p_tilde, dtype=float)
    C = p_tilde.size - 1
    i0 = int(label) - 1
    if not 0 <= i0 < C:
        raise ValueError(f"label {label} is not a foreground class in 1..{C}")
    fg = p_tilde[:C]
    w = ((fg >= fg[i0]) | (fg >= p_thresh)).astype(float)
    w[i0] = 0.0
    return w


def weight_terms_batch(
    P_tilde: np.ndarray, labels: np.ndarray, p_thresh: float
) -> np.ndarray:
    """Vectorized weight_terms: one (C,) row in {0,1} per foreground sample."""
    P_tilde = np.asarray(P_tilde, dtype=float)
    labels = np.asarray(labels, dtype=int)
    C = P_tilde.shape[1] - 1
    rows = np.arange(labels.size)
    i0 = labels - 1
    fg = P_tilde[:, :C]
    gt = fg[rows, i0][:, None]
    W = ((fg >= gt) | (fg >= p_thresh)).astype(float)
    W[rows, i0] = 0.0
    return W


def fcbl(
    z: np.ndarray,
    label: CategoryId,
    margins: np.ndarray,
    weights: np.ndarray,
) -> LossResult:
    """Foreground classification balance loss for one foreground sample.

    loss = -log p_i - log(1 - p_bg)
           - sum_{j != i, j <= C} w_j * log(1 - sigmoid(z_j + delta_j))

    margins and weights are length-C vectors indexed by foreground channel;
    their ground-truth entries are ignored.  Gradients:
    grad[i] = p_i - 1, grad[bg] = p_bg, grad[j] = w_j * sigmoid(z_j + delta_j).
    Background-labeled samples are a caller error; they belong in
    bce_objectness.
    """
    z = check_logits(z)
    C = z.size - 1
    i0 = int(label) - 1
    if not 0 <= i0 < C:
        raise ValueError(
            f"fcbl requires a foreground label in 1..{C}, got {label}"
        )
    margins = np.asarray(margins, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if margins.shape != (C,) or weights.shape != (C,):
        raise ValueError(
            f"margins and weights must have shape ({C},), got {margins.shape} and {weights.shape}"
        )
    losses, grads = fcbl_batch(
        z[None, :], np.array([label]), margins[None, :], weights[None, :]
    )
    return LossResult(float(losses[0]), grads[0])


def fcbl_batch(
    Z: np.ndarray,
    labels: np.ndarray,
    margins: np.ndarray,
    weights: np.ndarray,
):
    """Vectorized fcbl over foreground samples.

    Z is (n, C+1); labels (n,) foreground; margins and weights are (n, C)
    rows aligned with the samples.  Returns (losses (n,), gradients (n, C+1)).
    """
    Z = np.asarray(Z, dtype=float)
    labels = np.asarray(labels, dtype=int)
    n, m = Z.shape
    C = m - 1
    if np.any((labels < 1) | (labels > C)):
        bad = labels[(labels < 1) | (labels > C)][0]
        raise ValueError(f"fcbl requires foreground labels in 1..{C}, got {bad}")
    rows = np.arange(n)
    i0 = labels - 1

    W = np.asarray(weights, dtype=float).copy()
    W[rows, i0] = 0.0

    shifted = Z[:, :C] + np.asarray(margins, dtype=float)
    # Per-channel suppression terms -log(1 - sigmoid(.)), gated by W.
    suppression = W * softplus(shifted)
    own = softplus(-Z[rows, i0])        # -log p_i
    bg = softplus(Z[:, C])              # -log(1 - p_bg)
    losses = own + bg + suppression.sum(axis=1)

    grads = np.empty_like(Z)
    grads[:, :C] = W * expit(shifted)
    grads[rows, i0] = -expit(-Z[rows, i0])  # p_i - 1, computed stably
    grads[:, C] = expit(Z[:, C])
    return losses, grads
