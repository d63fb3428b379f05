"""Two-stage decoupled training plus the end-to-end comparator.

Stage 1 trains extractor and head end to end with sigmoid BCE and an
objectness background channel.  Stage 2 freezes the extractor and fine-tunes
the head: each step jitters ground-truth boxes into dense proposals, updates
per-class feature distributions from the proposal features (real samples
only), synthesizes extra features for under-served classes, folds real plus
hallucinated foreground samples into the indicator statistics, and applies
the margin- and weight-masked foreground loss (background keeps plain BCE).
The baseline mode trains end to end with softmax CE for both stages' worth
of epochs so every comparison sees the same number of passes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .classifier import (
    Model,
    OptimizerState,
    clone_model,
    extract_batch,
    extract_forward,
    extract_backward,
    forward_logits_batch,
    head_backward,
    init_extractor,
    init_head,
    lr_at_epoch,
    sgd_step,
    weight_norms,
)
from .core import HyperParams, RngStreams, stream_seed
from .datagen import Batch, Dataset
from .fhm import (
    N_PROPOSALS,
    init_distribution,
    offset_boxes_xyxy,
    proposal_features_batch,
    sampling_probs,
    select_classes,
    synthesize,
    update_distribution,
)
from .indicators import LongTermIndicators, init_indicators, margin_matrix
from .losses import (
    bce_objectness_batch,
    fcbl_batch,
    inference_probs_batch,
    softmax_ce_batch,
    weight_terms_batch,
)
from .metrics import coefficient_of_variation

MODES = ("baseline_ce", "bce_objectness", "bacl")


@dataclass
class TrainConfig:
    """One training run: mode, batch size, and stage-2 component toggles."""

    hp: HyperParams
    mode: str
    batch_size: int = 512
    use_margin: bool = True
    use_weight_term: bool = True
    use_fhm: bool = True
    reinit_head: bool = False  # stage 2 reuses the stage-1 head by default
    eval_per_class: int = 100
    eval_background: int = 1000
    label: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode {self.mode!r} not one of {MODES}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size={self.batch_size} must be >= 1")

    def run_label(self) -> str:
        if self.label:
            return self.label
        if self.mode != "bacl":
            return self.mode
        parts = ["bacl", self.hp.indicator_kind]
        if not self.use_margin:
            parts.append("nomargin")
        if not self.use_weight_term:
            parts.append("noweight")
        if not self.use_fhm:
            parts.append("nofhm")
        return "-".join(parts)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    acc_overall: float
    acc_rare: float
    acc_common: float
    acc_frequent: float
    norm_cv: float


@dataclass
class RunLog:
    label: str
    mode: str
    indicator_kind: str
    num_classes: int
    rows: list[EpochRecord] = field(default_factory=list)

    @property
    def final(self) -> EpochRecord:
        return self.rows[-1]


RUNLOG_HEADER = "epoch,loss,acc_overall,acc_rare,acc_common,acc_frequent,norm_cv"


def write_runlog(log: RunLog, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(RUNLOG_HEADER + "\n")
        for r in log.rows:
            fh.write(
                f"{r.epoch},{r.loss:.10g},{r.acc_overall:.10g},{r.acc_rare:.10g},"
                f"{r.acc_common:.10g},{r.acc_frequent:.10g},{r.norm_cv:.10g}\n"
            )


def read_runlog(path, label: str, mode: str, indicator_kind: str, num_classes: int) -> RunLog:
    log = RunLog(label, mode, indicator_kind, num_classes)
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != RUNLOG_HEADER:
            raise ValueError(f"{path}: unexpected runlog header {header!r}")
        for line in fh:
            parts = line.strip().split(",")
            log.rows.append(
                EpochRecord(
                    epoch=int(parts[0]),
                    loss=float(parts[1]),
                    acc_overall=float(parts[2]),
                    acc_rare=float(parts[3]),
                    acc_common=float(parts[4]),
                    acc_frequent=float(parts[5]),
                    norm_cv=float(parts[6]),
                )
            )
    return log


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalResult:
    """Grouped accuracy on a balanced held-out draw from the task generators.

    Foreground items are scored by the argmax of the gated foreground
    probabilities; background items count as correct when the background
    probability reaches the 0.5 operating threshold.  Group accuracies are
    macro means over the classes in the group (nan for an empty group).
    """

    per_class: np.ndarray
    acc_overall: float
    acc_rare: float
    acc_common: float
    acc_frequent: float
    acc_background: float


def _group_mean(per_class: np.ndarray, mask: np.ndarray) -> float:
    if not mask.any():
        return float("nan")
    return float(per_class[mask].mean())


def evaluate(
    model: Model,
    dataset: Dataset,
    n_per_class: int = 100,
    n_background: int = 1000,
) -> EvalResult:
    """Balanced evaluation on fresh draws from the stored task generators.

    The evaluation set depends only on the dataset (its seed and generator
    parameters), never on training state, so repeated calls score successive
    epochs on identical data.
    """
    rng = np.random.default_rng(stream_seed(dataset.seed, "eval"))
    C, d = dataset.num_classes, dataset.spec.feature_dim
    X_fg = np.empty((C * n_per_class, d))
    for i in range(C):
        X_fg[i * n_per_class : (i + 1) * n_per_class] = dataset.means[i] + (
            rng.standard_normal((n_per_class, d)) * dataset.spreads[i]
        )
    X_bg = dataset.means[C] + rng.standard_normal((n_background, d)) * dataset.spreads[C]

    H = extract_batch(model.extractor, np.vstack([X_fg, X_bg]))
    Z = forward_logits_batch(model.head, H)
    P = inference_probs_batch(Z)

    preds = np.argmax(P[: C * n_per_class, :C], axis=1) + 1
    truth = np.repeat(np.arange(1, C + 1), n_per_class)
    correct = (preds == truth).reshape(C, n_per_class)
    per_class = correct.mean(axis=1)

    groups = dataset.groups()
    acc_background = (
        float((P[C * n_per_class :, C] >= 0.5).mean()) if n_background > 0 else float("nan")
    )
    return EvalResult(
        per_class=per_class,
        acc_overall=float(per_class.mean()),
        acc_rare=_group_mean(per_class, groups.mask("rare")),
        acc_common=_group_mean(per_class, groups.mask("common")),
        acc_frequent=_group_mean(per_class, groups.mask("frequent")),
        acc_background=acc_background,
    )


def _epoch_record(model, dataset, config, epoch, loss_sum, loss_count) -> EpochRecord:
    ev = evaluate(model, dataset, config.eval_per_class, config.eval_background)
    return EpochRecord(
        epoch=epoch,
        loss=loss_sum / max(loss_count, 1),
        acc_overall=ev.acc_overall,
        acc_rare=ev.acc_rare,
        acc_common=ev.acc_common,
        acc_frequent=ev.acc_frequent,
        norm_cv=coefficient_of_variation(weight_norms(model.head)),
    )


def _check_finite_loss(loss_sum, mode, epoch, step, labels) -> None:
    if np.isfinite(loss_sum):
        return
    hist = {int(k): int(v) for k, v in zip(*np.unique(labels, return_counts=True))}
    raise RuntimeError(
        f"non-finite loss in {mode} at epoch {epoch} step {step}; "
        f"batch class histogram: {hist}"
    )


# ---------------------------------------------------------------------------
# End-to-end loops (stage 1 and the softmax-CE comparator)
# ---------------------------------------------------------------------------

def _train_end_to_end(dataset, config, seed, loss_batch_fn, total_epochs, scale_schedule):
    hp = config.hp
    streams = RngStreams(seed)
    C, d = dataset.num_classes, dataset.spec.feature_dim
    extractor = init_extractor(d, d, streams.get("init"))
    head = init_head(C, d, streams.get("init"))
    model = Model(extractor, head)
    opt = OptimizerState(lr=hp.lr)
    log = RunLog(config.run_label(), config.mode, hp.indicator_kind, C)
    data_rng = streams.get("batches")
    N = dataset.size
    for epoch in range(1, total_epochs + 1):
        opt.lr = lr_at_epoch(hp, epoch, total_epochs if scale_schedule else None)
        loss_sum = 0.0
        order = data_rng.permutation(N)
        for step, start in enumerate(range(0, N, config.batch_size)):
            idx = order[start : start + config.batch_size]
            X, labels = dataset.features[idx], dataset.labels[idx]
            H, acts = extract_forward(extractor, X)
            Z = forward_logits_batch(head, H)
            losses, dZ = loss_batch_fn(Z, labels)
            batch_sum = float(losses.sum())
            _check_finite_loss(batch_sum, config.mode, epoch, step, labels)
            loss_sum += batch_sum
            dZ /= idx.size
            grads, dH = head_backward(head, H, dZ)
            grads.update(extract_backward(extractor, acts, dH))
            sgd_step(model.params(), grads, opt, hp)
        log.rows.append(_epoch_record(model, dataset, config, epoch, loss_sum, N))
    return model, log, {}


def train_stage1(dataset: Dataset, config: TrainConfig, seed: int):
    """Representation learning: extractor + head end to end with BCE."""
    return _train_end_to_end(
        dataset, config, seed, bce_objectness_batch,
        total_epochs=config.hp.epochs_stage1, scale_schedule=False,
    )


def train_baseline_ce(dataset: Dataset, config: TrainConfig, seed: int):
    """Softmax-CE comparator, end to end for both stages' worth of epochs.

    The decay epochs stretch proportionally so the schedule shape matches
    the two-stage pipeline's total budget.
    """
    total = config.hp.epochs_stage1 + config.hp.epochs_stage2
    return _train_end_to_end(
        dataset, config, seed, softmax_ce_batch,
        total_epochs=total, scale_schedule=True,
    )


# ---------------------------------------------------------------------------
# Stage 2: classifier learning
# ---------------------------------------------------------------------------

@dataclass
class StepBatch:
    """A minibatch already pushed through the (frozen) extractor."""

    h: np.ndarray       # (n, d) extractor outputs
    labels: np.ndarray  # (n,) in 1..C+1
    boxes: np.ndarray   # (n, 4)


@dataclass
class Stage2State:
    """Everything classifier_learning_step mutates."""

    model: Model
    opt: OptimizerState
    hp: HyperParams
    indicators: LongTermIndicators
    dist: object
    streams: RngStreams
    use_margin: bool = True
    use_weight_term: bool = True
    use_fhm: bool = True


def prepare_batch(state: Stage2State, batch: Batch) -> StepBatch:
    h = extract_batch(state.model.extractor, batch.features)
    return StepBatch(h, batch.labels, batch.boxes)


def classifier_learning_step(state: Stage2State, batch: StepBatch):
    """One stage-2 step.  Order within the step:

    1. jitter each real foreground box into dense proposals and build their
       noise-perturbed features;
    2. update per-class feature distributions from those proposals (real
       samples only);
    3. pick classes by sampling probability and synthesize features for the
       eligible ones;
    4. update indicator statistics with real plus hallucinated foreground
       samples;
    5. margin- and weight-masked foreground loss on real plus hallucinated
       samples, plain BCE on background samples, averaged over all of them;
    6. one SGD step on the head only.

    Returns (loss_sum, n_samples) so callers can aggregate epoch means.
    Steps 1-3 are skipped when use_fhm is off; a batch with no real
    foreground samples contributes only background loss and leaves every
    statistic untouched.
    """
    hp = state.hp
    head = state.model.head
    C = head.num_foreground
    labels = np.asarray(batch.labels, dtype=int)
    fg_mask = labels <= C
    n_fg = int(fg_mask.sum())

    synth_feats = np.empty((0, batch.h.shape[1]))
    synth_labels = np.empty(0, dtype=int)
    if state.use_fhm and n_fg > 0:
        boxgen = state.streams.get("boxgen")
        etas = boxgen.uniform(-1.0, 1.0, size=(n_fg, N_PROPOSALS, 4))
        props = offset_boxes_xyxy(
            np.repeat(batch.boxes[fg_mask], N_PROPOSALS, axis=0),
            etas.reshape(-1, 4),
        )
        if not np.all((props[:, 2] > props[:, 0]) & (props[:, 3] > props[:, 1])):
            raise RuntimeError("box generator produced a degenerate proposal")
        prop_feats = proposal_features_batch(batch.h[fg_mask], etas, boxgen)
        prop_labels = np.repeat(labels[fg_mask], N_PROPOSALS)
        update_distribution(state.dist, prop_feats, prop_labels, hp.beta)

        sp = sampling_probs(state.indicators.snapshot(), hp.indicator_kind)
        selected = select_classes(sp, min(hp.c_sampled, C), state.streams.get("fhm-select"))
        if hp.m_per_class > 0:
            parts = []
            for cid in selected:
                if state.dist.seen[cid - 1] > 0:
                    parts.append(
                        synthesize(state.dist, cid, hp.m_per_class, state.streams.get("fhm-noise"))
                    )
            if parts:
                synth_feats = np.vstack([p.features for p in parts])
                synth_labels = np.concatenate([p.labels for p in parts])

    Z_real = forward_logits_batch(head, batch.h)
    n_total = labels.size + synth_labels.size
    loss_sum = 0.0
    dZ_real = np.zeros_like(Z_real)
    dZ_synth = np.empty((0, C + 1))

    if n_fg > 0:
        if synth_labels.size:
            Z_synth = forward_logits_batch(head, synth_feats)
            Z_fg = np.vstack([Z_real[fg_mask], Z_synth])
            fg_labels = np.concatenate([labels[fg_mask], synth_labels])
        else:
            Z_fg = Z_real[fg_mask]
            fg_labels = labels[fg_mask]

        state.indicators.update(Z_fg, fg_labels, hp.gamma)

        i0 = fg_labels - 1
        if state.use_margin:
            deltas = margin_matrix(
                state.indicators.snapshot(), hp.indicator_kind, hp.alpha
            )[i0]
        else:
            deltas = np.zeros((fg_labels.size, C))
        if state.use_weight_term:
            W = weight_terms_batch(inference_probs_batch(Z_fg), fg_labels, hp.p_thresh)
        else:
            W = np.ones((fg_labels.size, C))
        fg_losses, fg_grads = fcbl_batch(Z_fg, fg_labels, deltas, W)
        loss_sum += float(fg_losses.sum())
        dZ_real[fg_mask] = fg_grads[:n_fg] / n_total
        dZ_synth = fg_grads[n_fg:] / n_total

    if n_fg < labels.size:
        bg_losses, bg_grads = bce_objectness_batch(Z_real[~fg_mask], labels[~fg_mask])
        loss_sum += float(bg_losses.sum())
        dZ_real[~fg_mask] = bg_grads / n_total

    if synth_labels.size:
        H_stack = np.vstack([batch.h, synth_feats])
        dZ_stack = np.vstack([dZ_real, dZ_synth])
    else:
        H_stack, dZ_stack = batch.h, dZ_real
    grads, _ = head_backward(head, H_stack, dZ_stack)
    sgd_step(dict(head.param_items()), grads, state.opt, hp)
    return loss_sum, n_total


def train_stage2(stage1_model: Model, dataset: Dataset, config: TrainConfig, seed: int):
    """Freeze the extractor, fine-tune the head per classifier_learning_step."""
    hp = config.hp
    streams = RngStreams(seed)
    model = clone_model(stage1_model)
    model.extractor.frozen = True
    C, d = dataset.num_classes, dataset.spec.feature_dim
    if model.head.num_foreground != C:
        raise ValueError(
            f"checkpoint head has {model.head.num_foreground} foreground classes, "
            f"dataset has {C}"
        )
    if config.reinit_head:
        model.head = init_head(C, d, streams.get("init"))

    counts = dataset.counts.astype(float)
    static_f = counts / dataset.size          # share of all training examples
    static_F = counts / counts.sum()          # share of foreground instances
    state = Stage2State(
        model=model,
        opt=OptimizerState(lr=hp.lr),
        hp=hp,
        indicators=init_indicators(C, static_f, static_F, hp.indicator_kind),
        dist=init_distribution(C, d),
        streams=streams,
        use_margin=config.use_margin,
        use_weight_term=config.use_weight_term,
        use_fhm=config.use_fhm,
    )

    # The extractor is frozen, so its outputs are precomputed once.
    H_all = extract_batch(model.extractor, dataset.features)
    log = RunLog(config.run_label(), config.mode, hp.indicator_kind, C)
    data_rng = streams.get("batches")
    N = dataset.size
    for epoch in range(1, hp.epochs_stage2 + 1):
        state.opt.lr = lr_at_epoch(hp, epoch)
        loss_sum = 0.0
        count = 0
        order = data_rng.permutation(N)
        for step, start in enumerate(range(0, N, config.batch_size)):
            idx = order[start : start + config.batch_size]
            sb = StepBatch(H_all[idx], dataset.labels[idx], dataset.boxes[idx])
            batch_sum, batch_n = classifier_learning_step(state, sb)
            _check_finite_loss(batch_sum, config.mode, epoch, step, sb.labels)
            loss_sum += batch_sum
            count += batch_n
        log.rows.append(_epoch_record(model, dataset, config, epoch, loss_sum, count))
    extras = {"indicators": state.indicators.snapshot(), "distribution": state.dist}
    return model, log, extras


def run_training(
    dataset: Dataset,
    config: TrainConfig,
    seed: int,
    stage1_model: Model | None = None,
):
    """Dispatch on mode; bacl requires a stage-1 model to fine-tune."""
    if config.mode == "baseline_ce":
        return train_baseline_ce(dataset, config, seed)
    if config.mode == "bce_objectness":
        return train_stage1(dataset, config, seed)
    if stage1_model is None:
        raise ValueError("bacl training requires a stage-1 checkpoint to start from")
    return train_stage2(stage1_model, dataset, config, seed)
