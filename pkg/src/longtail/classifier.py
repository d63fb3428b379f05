"""The two-part model: a small tanh feature extractor and a linear head.

The extractor is one or two affine layers with tanh, smooth everywhere so
finite-difference gradient checks are clean.  The head maps features to C+1
logits (background channel last).  Gradients are hand-derived; the optimizer
is SGD with momentum and decoupled-from-nothing classic weight decay folded
into the gradient.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import HyperParams

CHECKPOINT_VERSION = 1


@dataclass
class FeatureExtractor:
    """One or two affine+tanh layers.  When frozen, parameters never change."""

    weights: list[np.ndarray]  # each (d_out, d_in)
    biases: list[np.ndarray]   # each (d_out,)
    frozen: bool = False

    def __post_init__(self):
        if len(self.weights) not in (1, 2) or len(self.weights) != len(self.biases):
            raise ValueError("extractor takes one or two (weight, bias) layers")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    def param_items(self):
        if self.frozen:
            return []
        out = []
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"ext.W{k}", W))
            out.append((f"ext.b{k}", b))
        return out


@dataclass
class ClassifierHead:
    """Linear map from d features to C+1 logits."""

    W: np.ndarray  # (C+1, d)
    b: np.ndarray  # (C+1,)

    @property
    def num_foreground(self) -> int:
        return self.W.shape[0] - 1

    def param_items(self):
        return [("head.W", self.W), ("head.b", self.b)]


@dataclass
class Model:
    extractor: FeatureExtractor
    head: ClassifierHead

    def params(self) -> dict[str, np.ndarray]:
        """Trainable parameters only; a frozen extractor contributes none."""
        return dict(self.extractor.param_items() + self.head.param_items())


def init_extractor(
    d_in: int, d_out: int, rng: np.random.Generator, n_layers: int = 2
) -> FeatureExtractor:
    """Symmetric-uniform init scaled by fan-in/fan-out."""
    dims = [d_in] + [d_out] * n_layers
    weights, biases = [], []
    for a, b in zip(dims, dims[1:]):
        limit = np.sqrt(6.0 / (a + b))
        weights.append(rng.uniform(-limit, limit, size=(b, a)))
        biases.append(np.zeros(b))
    return FeatureExtractor(weights, biases)


def init_head(num_classes: int, d: int, rng: np.random.Generator) -> ClassifierHead:
    """Small symmetric weights, zero bias, C+1 output channels."""
    W = rng.uniform(-0.01, 0.01, size=(num_classes + 1, d))
    return ClassifierHead(W, np.zeros(num_classes + 1))


def extract(extractor: FeatureExtractor, x: np.ndarray) -> np.ndarray:
    """Feature vector for a single input."""
    x = np.asarray(x, dtype=float)
    if x.shape != (extractor.input_dim,):
        raise ValueError(
            f"input shape {x.shape} does not match extractor input "
            f"({extractor.input_dim},)"
        )
    return extract_batch(extractor, x[None, :])[0]


def extract_batch(extractor: FeatureExtractor, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != extractor.input_dim:
        raise ValueError(
            f"input shape {X.shape} does not match extractor input width "
            f"{extractor.input_dim}"
        )
    H = X
    for W, b in zip(extractor.weights, extractor.biases):
        H = np.tanh(H @ W.T + b)
    return H


def extract_forward(extractor: FeatureExtractor, X: np.ndarray):
    """Forward pass keeping per-layer activations for the backward pass."""
    X = np.asarray(X, dtype=float)
    acts = [X]
    H = X
    for W, b in zip(extractor.weights, extractor.biases):
        H = np.tanh(H @ W.T + b)
        acts.append(H)
    return H, acts


def extract_backward(extractor: FeatureExtractor, acts, dH: np.ndarray):
    """Gradients wrt extractor parameters given dLoss/dH.

    acts is the activation list from extract_forward.  tanh' = 1 - tanh^2,
    read off the stored activations.
    """
    grads: dict[str, np.ndarray] = {}
    g = np.asarray(dH, dtype=float)
    for k in range(len(extractor.weights) - 1, -1, -1):
        out, inp = acts[k + 1], acts[k]
        g = g * (1.0 - out * out)
        grads[f"ext.W{k}"] = g.T @ inp
        grads[f"ext.b{k}"] = g.sum(axis=0)
        if k > 0:
            g = g @ extractor.weights[k]
    return grads


def forward_logits(head: ClassifierHead, h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    if h.shape != (head.W.shape[1],):
        raise ValueError(f"feature shape {h.shape} does not match head width {head.W.shape[1]}")
    return head.W @ h + head.b


def forward_logits_batch(head: ClassifierHead, H: np.ndarray) -> np.ndarray:
    return np.asarray(H, dtype=float) @ head.W.T + head.b


def head_backward(head: ClassifierHead, H: np.ndarray, dZ: np.ndarray):
    """Gradients wrt head parameters and features given dLoss/dZ."""
    grads = {"head.W": dZ.T @ H, "head.b": dZ.sum(axis=0)}
    dH = dZ @ head.W
    return grads, dH


@dataclass
class OptimizerState:
    """Momentum buffers plus the current learning rate and a step counter."""

    lr: float
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0


def lr_at_epoch(hp: HyperParams, epoch: int, total_epochs: int | None = None) -> float:
    """Learning rate for a 1-based epoch: initial * decay^(passed decay epochs).

    When total_epochs stretches past hp.epochs_stage1 (the end-to-end
    comparator trains for both stages' worth of epochs), decay epochs are
    scaled proportionally so the schedule keeps the same shape.
    """
    decay_epochs = hp.lr_decay_epochs
    if total_epochs is not None and total_epochs != hp.epochs_stage1:
        scale = total_epochs / hp.epochs_stage1
        decay_epochs = tuple(round(e * scale) for e in hp.lr_decay_epochs)
    passed = sum(1 for e in decay_epochs if epoch > e)
    return hp.lr * hp.lr_decay**passed


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    opt: OptimizerState,
    hp: HyperParams,
) -> OptimizerState:
    """One SGD step with momentum and weight decay, in place.

    v <- momentum * v + (grad + weight_decay * param)
    param <- param - lr * v
    """
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {name}")
        v = opt.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
            opt.velocity[name] = v
        v *= hp.momentum
        v += g + hp.weight_decay * p
        p -= opt.lr * v
    opt.step_count += 1
    return opt


def weight_norms(head: ClassifierHead) -> np.ndarray:
    """L2 norm of each foreground weight row (background row excluded)."""
    return np.linalg.norm(head.W[:-1], axis=1)


def clone_model(model: Model) -> Model:
    ext = FeatureExtractor(
        [W.copy() for W in model.extractor.weights],
        [b.copy() for b in model.extractor.biases],
        frozen=model.extractor.frozen,
    )
    return Model(ext, ClassifierHead(model.head.W.copy(), model.head.b.copy()))


def save_checkpoint(path, model: Model, meta: dict | None = None) -> None:
    """Versioned binary checkpoint (npz) with a JSON metadata blob."""
    arrays = {
        "format_version": np.array([CHECKPOINT_VERSION]),
        "n_layers": np.array([len(model.extractor.weights)]),
        "frozen": np.array([int(model.extractor.frozen)]),
        "head_W": model.head.W,
        "head_b": model.head.b,
        "meta": np.frombuffer(
            json.dumps(meta or {}, sort_keys=True).encode("utf-8"), dtype=np.uint8
        ),
    }
    for k, (W, b) in enumerate(zip(model.extractor.weights, model.extractor.biases)):
        arrays[f"ext_W{k}"] = W
        arrays[f"ext_b{k}"] = b
    np.savez(path, **arrays)


def load_checkpoint(path):
    """Load a checkpoint; returns (Model, meta dict)."""
    with np.load(path) as data:
        version = int(data["format_version"][0])
        if version != CHECKPOINT_VERSION:
            raise ValueError(
                f"checkpoint format version {version} unsupported "
                f"(expected {CHECKPOINT_VERSION})"
            )
        n_layers = int(data["n_layers"][0])
        weights = [data[f"ext_W{k}"].copy() for k in range(n_layers)]
        biases = [data[f"ext_b{k}"].copy() for k in range(n_layers)]
        ext = FeatureExtractor(weights, biases, frozen=bool(data["frozen"][0]))
        head = ClassifierHead(data["head_W"].copy(), data["head_b"].copy())
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
    return Model(ext, head), meta
