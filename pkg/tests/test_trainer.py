"""Training loops: evaluation, stage separation, step ordering, determinism."""

import math

import numpy as np
import pytest

from longtail.classifier import (
    ClassifierHead,
    FeatureExtractor,
    Model,
    OptimizerState,
    init_extractor,
    init_head,
)
from longtail.core import HyperParams, RngStreams
from longtail.datagen import TaskSpec, make_task
from longtail.fhm import init_distribution
from longtail.indicators import init_indicators, margin_matrix
from longtail.losses import fcbl_batch
from longtail.trainer import (
    EpochRecord,
    RunLog,
    Stage2State,
    StepBatch,
    TrainConfig,
    classifier_learning_step,
    evaluate,
    read_runlog,
    run_training,
    train_baseline_ce,
    train_stage1,
    train_stage2,
    write_runlog,
)


def tiny_spec(**overrides):
    # Counts 120/21/8/4 populate all three frequency groups, so epoch records
    # carry no nan fields and compare cleanly.
    base = dict(
        num_classes=4, feature_dim=6, max_count=120, min_count=4, power=2.5,
        background_count=24, class_sep=3.0, noise_scale=0.5,
    )
    base.update(overrides)
    return TaskSpec(**base)


def tiny_hp(**overrides):
    base = dict(epochs_stage1=2, epochs_stage2=2, lr=0.1, c_sampled=4, m_per_class=4)
    base.update(overrides)
    return HyperParams(**base)


def identity_model(C, d, head_scale=0.0):
    """Single identity layer (so extract is tanh) and a diagonal head.

    Stage-2 step tests bypass the extractor entirely by supplying features
    directly, so the head sees exactly the crafted vectors."""
    ext = FeatureExtractor([np.eye(d)], [np.zeros(d)])
    W = np.zeros((C + 1, d))
    np.fill_diagonal(W, head_scale)
    return Model(ext, ClassifierHead(W, np.zeros(C + 1)))


class TestRunLogIo:
    def test_round_trip(self, tmp_path):
        log = RunLog("demo", "bacl", "tpr", 4)
        log.rows.append(EpochRecord(1, 0.5, 0.8, 0.6, 0.75, 0.9, 0.2))
        log.rows.append(EpochRecord(2, 0.25, 0.85, 0.7, 0.8, 0.92, 0.15))
        path = tmp_path / "runlog.csv"
        write_runlog(log, path)
        back = read_runlog(path, "demo", "bacl", "tpr", 4)
        assert back.rows == log.rows
        assert back.final.epoch == 2

    def test_nan_group_survives_round_trip(self, tmp_path):
        log = RunLog("demo", "baseline_ce", "confusion_soft", 3)
        log.rows.append(EpochRecord(1, 0.5, 0.8, float("nan"), 0.75, 0.9, 0.2))
        path = tmp_path / "runlog.csv"
        write_runlog(log, path)
        back = read_runlog(path, "demo", "baseline_ce", "confusion_soft", 3)
        assert math.isnan(back.rows[0].acc_rare)
        assert back.rows[0].acc_common == pytest.approx(0.75)

    def test_wrong_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("epoch,loss\n1,0.5\n")
        with pytest.raises(ValueError, match="header"):
            read_runlog(path, "x", "bacl", "tpr", 3)


class TestRunLabel:
    def test_non_bacl_modes_use_mode_name(self):
        assert TrainConfig(HyperParams(), "baseline_ce").run_label() == "baseline_ce"
        assert TrainConfig(HyperParams(), "bce_objectness").run_label() == "bce_objectness"

    def test_bacl_label_encodes_kind_and_toggles(self):
        hp = HyperParams(indicator_kind="tpr")
        assert TrainConfig(hp, "bacl").run_label() == "bacl-tpr"
        cfg = TrainConfig(hp, "bacl", use_margin=False, use_fhm=False)
        assert cfg.run_label() == "bacl-tpr-nomargin-nofhm"
        assert TrainConfig(hp, "bacl", label="custom").run_label() == "custom"

    def test_bad_mode_and_batch_size_rejected(self):
        with pytest.raises(ValueError, match="mode"):
            TrainConfig(HyperParams(), "adam")
        with pytest.raises(ValueError, match="batch_size"):
            TrainConfig(HyperParams(), "bacl", batch_size=0)


class TestEvaluate:
    def test_repeated_calls_use_identical_data(self):
        """The held-out draw depends only on the dataset, so scoring the same
        model twice gives bitwise-identical results, even with other RNG
        activity in between."""
        ds = make_task(tiny_spec(), seed=101)
        model = identity_model(4, 6, head_scale=1.0)
        first = evaluate(model, ds, n_per_class=50, n_background=40)
        np.random.default_rng(0).normal(size=100)  # unrelated draws
        other = identity_model(4, 6, head_scale=-2.0)
        evaluate(other, ds, n_per_class=50, n_background=40)
        again = evaluate(model, ds, n_per_class=50, n_background=40)
        np.testing.assert_array_equal(first.per_class, again.per_class)
        assert first.acc_overall == again.acc_overall

    def test_unseparated_task_scores_at_chance(self):
        """With zero prototype separation every class looks identical, so
        macro accuracy lands at 1/C."""
        ds = make_task(tiny_spec(num_classes=5, class_sep=0.0, noise_scale=1.0), seed=102)
        rng = np.random.default_rng(103)
        model = Model(init_extractor(6, 6, rng), init_head(5, 6, rng))
        res = evaluate(model, ds, n_per_class=400, n_background=100)
        assert res.acc_overall == pytest.approx(0.2, abs=0.06)

    def test_background_operating_threshold(self):
        """A huge background bias drives background accuracy to 1; a huge
        negative bias drives it to 0."""
        ds = make_task(tiny_spec(), seed=104)
        confident = identity_model(4, 6)
        confident.head.b[4] = 100.0
        assert evaluate(confident, ds, 10, 50).acc_background == 1.0
        denier = identity_model(4, 6)
        denier.head.b[4] = -100.0
        assert evaluate(denier, ds, 10, 50).acc_background == 0.0

    def test_empty_group_reports_nan(self):
        ds = make_task(tiny_spec(max_count=400, min_count=200, power=0.5), seed=105)
        model = identity_model(4, 6, head_scale=1.0)
        res = evaluate(model, ds, 20, 10)
        assert math.isnan(res.acc_rare)
        assert math.isnan(res.acc_common)
        assert not math.isnan(res.acc_frequent)


class TestStage1:
    def test_deterministic_and_seed_sensitive(self):
        ds = make_task(tiny_spec(), seed=106)
        cfg = TrainConfig(tiny_hp(), "bce_objectness", batch_size=32)
        m1, log1, _ = train_stage1(ds, cfg, seed=7)
        m2, log2, _ = train_stage1(ds, cfg, seed=7)
        np.testing.assert_array_equal(m1.head.W, m2.head.W)
        np.testing.assert_array_equal(m1.extractor.weights[0], m2.extractor.weights[0])
        assert log1.rows == log2.rows
        m3, _, _ = train_stage1(ds, cfg, seed=8)
        assert not np.array_equal(m1.head.W, m3.head.W)

    def test_learns_a_separable_task(self):
        ds = make_task(tiny_spec(max_count=60, min_count=60, power=0.0), seed=107)
        cfg = TrainConfig(tiny_hp(epochs_stage1=4), "bce_objectness", batch_size=32)
        model, log, _ = train_stage1(ds, cfg, seed=9)
        assert len(log.rows) == 4
        assert [r.epoch for r in log.rows] == [1, 2, 3, 4]
        assert log.rows[-1].loss < log.rows[0].loss
        assert log.final.acc_overall >= 0.9

    def test_baseline_runs_both_stages_worth_of_epochs(self):
        ds = make_task(tiny_spec(), seed=108)
        cfg = TrainConfig(tiny_hp(epochs_stage1=2, epochs_stage2=3), "baseline_ce",
                          batch_size=32)
        _, log, _ = train_baseline_ce(ds, cfg, seed=10)
        assert len(log.rows) == 5
        assert all(np.isfinite(r.loss) for r in log.rows)


def make_stage2_state(C, d, hp, head_W=None, seed=0, **toggles):
    model = identity_model(C, d)
    if head_W is not None:
        model.head.W = head_W.astype(float)
    model.extractor.frozen = True
    state = Stage2State(
        model=model,
        opt=OptimizerState(lr=hp.lr),
        hp=hp,
        indicators=init_indicators(C, np.full(C, 1.0 / C), np.full(C, 1.0 / C),
                                   hp.indicator_kind),
        dist=init_distribution(C, d),
        streams=RngStreams(seed),
        **toggles,
    )
    return state


def valid_boxes(n):
    return np.tile([0.1, 0.1, 0.5, 0.5], (n, 1))


class TestClassifierLearningStep:
    def test_background_only_batch_touches_no_statistics(self):
        hp = tiny_hp()
        state = make_stage2_state(3, 4, hp)
        before = state.indicators.snapshot()
        h = np.random.default_rng(110).normal(0, 1, (5, 4))
        loss_sum, n_total = classifier_learning_step(
            state, StepBatch(h, np.full(5, 4), valid_boxes(5))
        )
        after = state.indicators.snapshot()
        np.testing.assert_array_equal(before.N, after.N)
        np.testing.assert_allclose(before.s, after.s, atol=1e-15)
        np.testing.assert_allclose(before.M, after.M, atol=1e-15)
        assert (state.dist.seen == 0).all()
        assert n_total == 5
        assert loss_sum > 0

    def test_fhm_disabled_skips_distributions_and_synthesis(self):
        hp = tiny_hp()
        state = make_stage2_state(3, 4, hp, use_fhm=False)
        h = np.random.default_rng(111).normal(0, 1, (6, 4))
        labels = np.array([1, 2, 3, 1, 4, 4])
        _, n_total = classifier_learning_step(state, StepBatch(h, labels, valid_boxes(6)))
        assert (state.dist.seen == 0).all()
        assert n_total == 6  # no hallucinated samples in the average
        # Real foreground samples still feed the indicators.
        np.testing.assert_array_equal(state.indicators.snapshot().N, [2, 1, 1])

    def test_selection_uses_pre_update_indicators(self):
        """Class selection happens before this batch's indicator update.

        The mean-score state (1, 1, 0) puts all sampling mass on class 3.
        The batch then saturates class 3's score and zeroes class 1's, so a
        post-update snapshot would put all mass on class 1 instead.  Only the
        pre-update choice hallucinates class 3."""
        hp = tiny_hp(gamma=0.0, c_sampled=1, m_per_class=2,
                     indicator_kind="mean_score")
        W = np.zeros((4, 4))
        np.fill_diagonal(W, 40.0)
        state = make_stage2_state(3, 4, hp, head_W=W)
        state.indicators.s = np.array([1.0, 1.0, 0.0])
        state.dist.seen[:] = 1  # every class already synthesizable
        h = np.array([
            [0.0, 0.0, 1.0, 0.0],   # class 3, gt logit +40 -> score 1.0
            [-1.0, 0.0, 0.0, 0.0],  # class 1, gt logit -40 -> score ~0
        ])
        _, n_total = classifier_learning_step(
            state, StepBatch(h, np.array([3, 1]), valid_boxes(2))
        )
        # 2 real + 2 hallucinated samples of the selected class.
        assert n_total == 4
        np.testing.assert_array_equal(state.indicators.N, [1, 0, 3])

    def test_real_proposals_update_distributions_but_synthetic_never_do(self):
        hp = tiny_hp(c_sampled=3, m_per_class=5, indicator_kind="mean_score")
        state = make_stage2_state(3, 4, hp)
        state.dist.seen[1] = 1
        state.dist.mu[1] = 7.0  # distinctive class-2 prototype
        mu2_before = state.dist.mu[1].copy()
        h = np.random.default_rng(112).normal(0, 1, (2, 4))
        classifier_learning_step(state, StepBatch(h, np.array([1, 3]), valid_boxes(2)))
        # Real classes 1 and 3 were observed via their proposals...
        assert state.dist.seen[0] == 1 and state.dist.seen[2] == 1
        # ...class 2 was only ever hallucinated, so its statistics held still.
        assert state.dist.seen[1] == 1
        np.testing.assert_array_equal(state.dist.mu[1], mu2_before)
        # All three classes were selected; hallucinations raised everyone's N.
        np.testing.assert_array_equal(state.indicators.N, [6, 5, 6])

    def test_margins_come_from_the_post_update_snapshot(self):
        """The step's loss uses margins recomputed after folding this batch
        into the confusion statistics, not the stale pre-batch margins."""
        hp = tiny_hp(indicator_kind="confusion_soft", alpha=0.85)
        W = np.zeros((3, 3))
        np.fill_diagonal(W, 2.0)
        state = make_stage2_state(2, 3, hp, head_W=W,
                                  use_fhm=False, use_weight_term=False)
        h = np.array([[0.2, 1.0, -0.3]])
        labels = np.array([1])
        Z = h @ W.T

        reference = init_indicators(2, np.full(2, 0.5), np.full(2, 0.5), "confusion_soft")
        reference.update(Z, labels, hp.gamma)
        post_margins = margin_matrix(reference.snapshot(), "confusion_soft", hp.alpha)[0]
        expected_post, _ = fcbl_batch(Z, labels, post_margins[None, :], np.ones((1, 2)))
        expected_pre, _ = fcbl_batch(Z, labels, np.zeros((1, 2)), np.ones((1, 2)))

        loss_sum, n_total = classifier_learning_step(
            state, StepBatch(h, labels, valid_boxes(1))
        )
        assert n_total == 1
        assert loss_sum == pytest.approx(float(expected_post.sum()), abs=1e-12)
        assert abs(loss_sum - float(expected_pre.sum())) > 1e-6

    def test_head_moves_but_extractor_does_not(self):
        hp = tiny_hp()
        rng = np.random.default_rng(113)
        ext = init_extractor(4, 4, rng)
        ext.frozen = True
        model = Model(ext, init_head(3, 4, rng))
        ext_before = [w.copy() for w in ext.weights]
        head_before = model.head.W.copy()
        state = Stage2State(
            model=model, opt=OptimizerState(lr=hp.lr), hp=hp,
            indicators=init_indicators(3, np.full(3, 1 / 3), np.full(3, 1 / 3)),
            dist=init_distribution(3, 4), streams=RngStreams(1),
        )
        h = rng.normal(0, 1, (6, 4))
        classifier_learning_step(
            state, StepBatch(h, np.array([1, 2, 3, 4, 4, 1]), valid_boxes(6))
        )
        assert not np.array_equal(model.head.W, head_before)
        for b, a in zip(ext_before, ext.weights):
            np.testing.assert_array_equal(b, a)


class TestStage2:
    def setup_method(self):
        self.ds = make_task(tiny_spec(), seed=120)
        self.cfg1 = TrainConfig(tiny_hp(), "bce_objectness", batch_size=32)
        self.stage1, _, _ = train_stage1(self.ds, self.cfg1, seed=11)

    def test_deterministic_and_seed_sensitive(self):
        cfg = TrainConfig(tiny_hp(), "bacl", batch_size=32)
        m1, log1, _ = train_stage2(self.stage1, self.ds, cfg, seed=12)
        m2, log2, _ = train_stage2(self.stage1, self.ds, cfg, seed=12)
        np.testing.assert_array_equal(m1.head.W, m2.head.W)
        assert log1.rows == log2.rows
        m3, _, _ = train_stage2(self.stage1, self.ds, cfg, seed=13)
        assert not np.array_equal(m1.head.W, m3.head.W)

    def test_extractor_frozen_and_stage1_model_unmodified(self):
        cfg = TrainConfig(tiny_hp(), "bacl", batch_size=32)
        head_before = self.stage1.head.W.copy()
        m2, _, _ = train_stage2(self.stage1, self.ds, cfg, seed=12)
        np.testing.assert_array_equal(self.stage1.head.W, head_before)
        for a, b in zip(self.stage1.extractor.weights, m2.extractor.weights):
            np.testing.assert_array_equal(a, b)
        assert m2.extractor.frozen
        assert not np.array_equal(m2.head.W, head_before)

    def test_reinit_head_changes_the_outcome(self):
        cfg_reuse = TrainConfig(tiny_hp(), "bacl", batch_size=32)
        cfg_fresh = TrainConfig(tiny_hp(), "bacl", batch_size=32, reinit_head=True)
        m_reuse, _, _ = train_stage2(self.stage1, self.ds, cfg_reuse, seed=12)
        m_fresh, _, _ = train_stage2(self.stage1, self.ds, cfg_fresh, seed=12)
        assert not np.array_equal(m_reuse.head.W, m_fresh.head.W)

    def test_extras_expose_indicators_and_distribution(self):
        cfg = TrainConfig(tiny_hp(), "bacl", batch_size=32)
        _, log, extras = train_stage2(self.stage1, self.ds, cfg, seed=12)
        assert len(log.rows) == 2
        snap = extras["indicators"]
        assert snap.N.sum() > 0
        assert (extras["distribution"].seen > 0).any()

    def test_head_class_count_mismatch_rejected(self):
        other = make_task(tiny_spec(num_classes=5, feature_dim=6), seed=121)
        cfg = TrainConfig(tiny_hp(), "bacl", batch_size=32)
        with pytest.raises(ValueError, match="foreground classes"):
            train_stage2(self.stage1, other, cfg, seed=12)

    def test_run_training_dispatch(self):
        cfg_b = TrainConfig(tiny_hp(), "baseline_ce", batch_size=32)
        _, log_b, _ = run_training(self.ds, cfg_b, seed=14)
        assert len(log_b.rows) == 4  # stage1 + stage2 epochs

        cfg_1 = TrainConfig(tiny_hp(), "bce_objectness", batch_size=32)
        _, log_1, _ = run_training(self.ds, cfg_1, seed=14)
        assert len(log_1.rows) == 2

        cfg_2 = TrainConfig(tiny_hp(), "bacl", batch_size=32)
        with pytest.raises(ValueError, match="stage-1"):
            run_training(self.ds, cfg_2, seed=14)
        _, log_2, extras = run_training(self.ds, cfg_2, seed=14, stage1_model=self.stage1)
        assert len(log_2.rows) == 2
        assert "indicators" in extras

    def test_ablation_toggles_change_the_trajectory(self):
        """Disabling each component produces a genuinely different run."""
        full = TrainConfig(tiny_hp(), "bacl", batch_size=32)
        m_full, _, _ = train_stage2(self.stage1, self.ds, full, seed=15)
        for toggle in ("use_margin", "use_weight_term", "use_fhm"):
            cfg = TrainConfig(tiny_hp(), "bacl", batch_size=32, **{toggle: False})
            m_off, _, _ = train_stage2(self.stage1, self.ds, cfg, seed=15)
            assert not np.array_equal(m_full.head.W, m_off.head.W), toggle
