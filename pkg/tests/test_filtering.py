"""Tests for the loss-gap filter: gap computation, calibration, verdicts."""

import numpy as np
import pytest

from breachlab import datagen, filtering, nnet
from breachlab.filtering import FilterState, calibrate, delta_max, delta_max_batch, judge, quantile_ceil
from breachlab.nnet import TrainConfig
from breachlab.versioning import train_version


@pytest.fixture(scope="module")
def version_pair(small_task):
    cfg = TrainConfig(epochs=12, seed=5)
    rng = np.random.default_rng(1)
    v1 = train_version(small_task, datagen.assign_per_label(3, rng=rng), cfg, 1)
    v2 = train_version(small_task, datagen.assign_per_label(3, rng=rng), cfg, 2)
    return v1, v2


def test_delta_zero_against_exact_copy(version_pair, small_task):
    _, v2 = version_pair
    deltas = delta_max_batch(small_task.val_x, v2.model, [v2.model])
    np.testing.assert_allclose(deltas, 0.0, atol=1e-12)


def test_delta_benign_centered_near_zero(version_pair, small_task):
    v1, v2 = version_pair
    deltas = delta_max_batch(small_task.val_x, v2.model, [v1.model])
    assert -0.5 <= float(np.median(deltas)) <= 0.5


def test_delta_max_takes_max_over_breached(version_pair, small_task):
    v1, v2 = version_pair
    x = small_task.val_x[:10]
    single = delta_max_batch(x, v2.model, [v1.model])
    with_copy = delta_max_batch(x, v2.model, [v1.model, v2.model])
    # the exact copy contributes gap 0, so the max is at least 0
    np.testing.assert_allclose(with_copy, np.maximum(single, 0.0), atol=1e-12)


def test_delta_rejects_empty_breached(version_pair):
    _, v2 = version_pair
    with pytest.raises(ValueError, match="empty"):
        delta_max(np.zeros(64), v2.model, [])


def test_delta_rejects_dimension_mismatch(version_pair):
    v1, v2 = version_pair
    with pytest.raises(ValueError, match="shape"):
        delta_max(np.zeros(63), v2.model, [v1.model])


def test_quantile_ceil_examples():
    values = np.array([0.01 * i for i in range(1, 101)])
    assert quantile_ceil(values, 0.95) == pytest.approx(0.95)
    assert quantile_ceil(values, 0.50) == pytest.approx(0.50)
    assert quantile_ceil(values, 1.00) == pytest.approx(1.00)
    odd = np.array([1.0, 2.0, 3.0])
    assert quantile_ceil(odd, 0.5) == 2.0  # median at the middle order statistic


def test_quantile_ceil_shuffled_input():
    rng = np.random.default_rng(0)
    values = rng.permutation([0.01 * i for i in range(1, 101)])
    assert quantile_ceil(values, 0.95) == pytest.approx(0.95)


def test_calibrate_threshold_and_fpr(version_pair, small_task):
    v1, v2 = version_pair
    state = calibrate(v2.model, [v1.model], small_task.val_x, target_fpr=0.05)
    deltas = delta_max_batch(small_task.val_x, v2.model, [v1.model])
    assert state.threshold == quantile_ceil(deltas, 0.95)
    # realized FPR on the calibration pool itself is at most the target
    assert np.mean(deltas >= state.threshold) <= 0.05 + 1.0 / len(deltas)


def test_calibrate_fpr_zero_uses_maximum(version_pair, small_task):
    v1, v2 = version_pair
    state = calibrate(v2.model, [v1.model], small_task.val_x, target_fpr=0.0)
    deltas = delta_max_batch(small_task.val_x, v2.model, [v1.model])
    assert state.threshold == pytest.approx(deltas.max())


def test_calibrate_rejects_small_pool(version_pair, small_task):
    v1, v2 = version_pair
    with pytest.raises(ValueError, match="100"):
        calibrate(v2.model, [v1.model], small_task.val_x[:50], 0.05)


def test_calibrate_rejects_bad_fpr(version_pair, small_task):
    v1, v2 = version_pair
    for bad in (-0.01, 0.5, 0.9):
        with pytest.raises(ValueError, match="target_fpr"):
            calibrate(v2.model, [v1.model], small_task.val_x, bad)


def test_judge_verdicts(version_pair, small_task):
    v1, v2 = version_pair
    state = calibrate(v2.model, [v1.model], small_task.val_x, 0.05)
    verdict = judge(small_task.test_x[0], state)
    assert verdict.flagged == (verdict.delta_max >= state.threshold)
    assert 0 <= verdict.label < 3
    # repeated calls agree (pure function)
    again = judge(small_task.test_x[0], state)
    assert again == verdict


def test_judge_flag_thresholds():
    # verdict decision is a pure function of delta vs threshold
    model = nnet.init_model((4, 4, 2), seed=0)
    state = FilterState(model, (model,), threshold=0.95, target_fpr=0.05, calibration_size=100)
    x = np.zeros(4)
    verdict = judge(x, state)
    assert verdict.delta_max == pytest.approx(0.0)
    assert not verdict.flagged  # 0 < 0.95


def test_judge_rejects_uncalibrated():
    model = nnet.init_model((4, 4, 2), seed=0)
    state = FilterState(model, (model,), threshold=float("nan"), target_fpr=0.05, calibration_size=0)
    with pytest.raises(ValueError, match="uncalibrated|finite"):
        judge(np.zeros(4), state)


def test_flag_monotone_in_threshold(version_pair, small_task):
    v1, v2 = version_pair
    deltas = delta_max_batch(small_task.test_x, v2.model, [v1.model])
    flags_by_fpr = []
    for fpr in (0.01, 0.05, 0.10, 0.25):
        t = quantile_ceil(delta_max_batch(small_task.val_x, v2.model, [v1.model]), 1 - fpr)
        flags_by_fpr.append(set(np.flatnonzero(deltas >= t)))
    for tighter, looser in zip(flags_by_fpr, flags_by_fpr[1:]):
        assert tighter <= looser  # lowering the threshold never unflags


def test_non_transferring_attacks_judged_clean_with_mismatch(version_pair, small_task):
    from breachlab import attacks
    from breachlab.attacks import AttackBudget
    from breachlab.experiment import pick_attack_inputs

    v1, v2 = version_pair
    state = calibrate(v2.model, [v1.model], small_task.val_x, 0.05)
    x, targets = pick_attack_inputs(small_task, v2.model, [v1.model], 40, seed=5)
    crafted = attacks.pgd_batch([v1.model], x, targets, AttackBudget(steps=60))
    src_hit = nnet.predict_batch(v1.model, crafted) == targets
    verdicts = [judge(row, state) for row in crafted]
    # crafted successfully on the leaked version but failed to transfer
    failed = [
        v for v, t, hit in zip(verdicts, targets, src_hit) if hit and v.label != t
    ]
    assert failed, "expected some source-successful attacks to fail to transfer"
    clean = [v for v in failed if not v.flagged]
    mismatched = [v for v in failed if v.label_mismatch]
    assert len(clean) >= 0.8 * len(failed)
    assert len(mismatched) >= 0.8 * len(failed)


def test_calibration_report_shape(version_pair, small_task):
    v1, v2 = version_pair
    state = calibrate(v2.model, [v1.model], small_task.val_x, 0.05)
    deltas = delta_max_batch(small_task.val_x, v2.model, [v1.model])
    report = filtering.calibration_report(state, deltas)
    assert report["fpr_target"] == 0.05
    assert report["n_validation"] == len(small_task.val_x)
    assert sum(report["histogram"]["counts"]) == len(deltas)
    assert len(report["histogram"]["bin_edges"]) == len(report["histogram"]["counts"]) + 1
