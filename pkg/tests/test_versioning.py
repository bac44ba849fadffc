"""Tests for SNNL, joint version training, and the version store."""

import math

import numpy as np
import pytest

from breachlab import datagen, nnet, versioning
from breachlab.nnet import TrainConfig
from breachlab.versioning import VersionStore, snnl, snnl_with_grad, train_version


def brute_force_snnl(features, labels):
    """Straight transcription of the definition, loops and all."""
    x = np.asarray(features, dtype=float)
    y = np.asarray(labels)
    n = len(x)
    terms = []
    for i in range(n):
        num = sum(
            math.exp(-float(np.sum((x[i] - x[j]) ** 2)))
            for j in range(n)
            if j != i and y[j] == y[i]
        )
        den = sum(math.exp(-float(np.sum((x[i] - x[k]) ** 2))) for k in range(n) if k != i)
        if num == 0.0:
            continue  # partner-less: term excluded
        terms.append(math.log(num / den))
    return -sum(terms) / len(terms)


# ---------------------------------------------------------------------------
# snnl


def test_snnl_all_identical_two_classes():
    feats = np.ones((4, 3))
    labels = np.array([0, 0, 1, 1])
    assert snnl(feats, labels) == pytest.approx(math.log(3.0), abs=1e-9)


def test_snnl_limit_separated_classes():
    feats = np.array([[0.0, 0.0], [0.0, 0.0], [50.0, 0.0], [50.0, 0.0]])
    labels = np.array([0, 0, 1, 1])
    assert snnl(feats, labels) == pytest.approx(0.0, abs=1e-12)


def test_snnl_matches_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(20):
        feats = rng.normal(size=(6, 4))
        labels = rng.integers(0, 2, size=6)
        if not all((labels == l).sum() >= 2 for l in np.unique(labels)):
            continue
        assert snnl(feats, labels) == pytest.approx(brute_force_snnl(feats, labels), abs=1e-12)


def test_snnl_partnerless_excluded():
    rng = np.random.default_rng(4)
    feats = rng.normal(size=(5, 3))
    labels = np.array([0, 0, 1, 1, 2])  # label 2 has no partner
    value, _, excluded = snnl_with_grad(feats, labels, need_grad=False)
    assert excluded == 1
    assert value == pytest.approx(brute_force_snnl(feats, labels), abs=1e-12)


def test_snnl_rejects_all_partnerless():
    with pytest.raises(ValueError, match="partner"):
        snnl(np.zeros((3, 2)), np.array([0, 1, 2]))


def test_snnl_rejects_single_sample():
    with pytest.raises(ValueError, match="at least 2"):
        snnl(np.zeros((1, 2)), np.array([0]))


def test_snnl_nonnegative():
    rng = np.random.default_rng(5)
    for _ in range(30):
        feats = rng.normal(scale=2.0, size=(8, 3))
        labels = np.repeat([0, 1], 4)
        assert snnl(feats, labels) >= 0.0


def test_snnl_grad_matches_finite_differences():
    rng = np.random.default_rng(6)
    h = 1e-6
    for _ in range(5):
        feats = rng.normal(size=(6, 3))
        labels = np.array([0, 0, 0, 1, 1, 1])
        _, grad, _ = snnl_with_grad(feats, labels)
        for idx in np.ndindex(feats.shape):
            fp, fm = feats.copy(), feats.copy()
            fp[idx] += h
            fm[idx] -= h
            want = (snnl(fp, labels) - snnl(fm, labels)) / (2 * h)
            assert grad[idx] == pytest.approx(want, rel=1e-4, abs=1e-7)


def test_snnl_grad_with_partnerless_sample():
    rng = np.random.default_rng(7)
    feats = rng.normal(size=(5, 3))
    labels = np.array([0, 0, 1, 1, 2])
    _, grad, _ = snnl_with_grad(feats, labels)
    h = 1e-6
    for idx in np.ndindex(feats.shape):
        fp, fm = feats.copy(), feats.copy()
        fp[idx] += h
        fm[idx] -= h
        want = (snnl(fp, labels) - snnl(fm, labels)) / (2 * h)
        assert grad[idx] == pytest.approx(want, rel=1e-4, abs=1e-7)


# ---------------------------------------------------------------------------
# train_version


def fast_config(**kw):
    defaults = dict(epochs=6, learning_rate=0.1, batch_size=32, seed=5)
    defaults.update(kw)
    return TrainConfig(**defaults)


def test_train_version_reduces_to_plain_sgd(small_task):
    cfg = fast_config(hidden_weight=0.0, snnl_weight=0.0)
    asg = datagen.assign_per_label(small_task.num_classes, rng=np.random.default_rng(1))
    v = train_version(small_task, asg, cfg)
    dims = (small_task.input_dim, *cfg.hidden_dims, small_task.num_classes)
    plain = nnet.sgd_train(
        nnet.init_model(dims, seed=cfg.seed), small_task.train_x, small_task.train_y, cfg
    )
    for (w0, b0), (w1, b1) in zip(nnet.model_params(v.model), nnet.model_params(plain.model)):
        assert w0.tobytes() == w1.tobytes()
        assert b0.tobytes() == b1.tobytes()


def test_train_version_deterministic(small_task):
    cfg = fast_config()
    asg = datagen.assign_per_label(small_task.num_classes, rng=np.random.default_rng(2))
    v1 = train_version(small_task, asg, cfg)
    v2 = train_version(small_task, asg, cfg)
    for (w0, _), (w1, _) in zip(nnet.model_params(v1.model), nnet.model_params(v2.model)):
        assert w0.tobytes() == w1.tobytes()


def test_different_assignments_differ(small_task):
    cfg = fast_config()
    rng = np.random.default_rng(3)
    va = train_version(small_task, datagen.assign_per_label(3, rng=rng), cfg)
    vb = train_version(small_task, datagen.assign_per_label(3, rng=rng), cfg)
    dist = sum(
        float(np.sum((wa - wb) ** 2))
        for (wa, _), (wb, _) in zip(nnet.model_params(va.model), nnet.model_params(vb.model))
    )
    assert dist > 0
    # loss surfaces differ on random off-manifold probes
    probes = np.random.default_rng(4).uniform(0, 1, size=(50, small_task.input_dim))
    labels = nnet.predict_batch(va.model, probes)
    la = nnet.loss_batch(va.model, probes, labels)
    lb = nnet.loss_batch(vb.model, probes, labels)
    assert np.abs(la - lb).max() > 0


def test_train_version_benign_accuracy(small_task, small_standard_model):
    cfg = fast_config(epochs=12)
    asg = datagen.assign_per_label(3, rng=np.random.default_rng(5))
    v = train_version(small_task, asg, cfg)
    standard_acc = nnet.accuracy(small_standard_model, small_task.test_x, small_task.test_y)
    assert v.benign_accuracy >= standard_acc - 0.03


def test_train_version_rejects_wrong_label_count(small_task):
    asg = datagen.assign_per_label(4, rng=np.random.default_rng(6))
    with pytest.raises(ValueError, match="covers 4 labels"):
        train_version(small_task, asg, fast_config())


def test_snnl_weight_tightens_intraclass_features(glyph_task):
    asg = datagen.assign_per_label(glyph_task.num_classes, rng=np.random.default_rng(8))
    with_snnl = train_version(glyph_task, asg, TrainConfig(snnl_weight=0.5))
    without = train_version(glyph_task, asg, TrainConfig(snnl_weight=0.0))

    hx, hy = datagen.hidden_pool(asg, glyph_task.input_dim, seed=9)
    all_x = np.vstack([glyph_task.train_x, hx])
    all_y = np.concatenate([glyph_task.train_y, hy])

    def mean_intraclass(model):
        feats = nnet.penultimate_features(model, all_x)
        dists = []
        for label in range(glyph_task.num_classes):
            f = feats[all_y == label]
            diffs = f[:, None, :] - f[None, :, :]
            dists.append(np.sqrt((diffs**2).sum(-1)).mean())
        return np.mean(dists)

    assert mean_intraclass(with_snnl.model) < mean_intraclass(without.model)


# ---------------------------------------------------------------------------
# version store


def quick_version(task, vid, seed):
    cfg = fast_config(epochs=2, seed=seed)
    asg = datagen.assign_per_label(task.num_classes, rng=np.random.default_rng(vid))
    return train_version(task, asg, cfg, version_id=vid)


def test_store_bootstrap_and_replacement_lifecycle(tmp_path, small_task):
    store = VersionStore(tmp_path / "store")
    assert store.deployed() is None
    rng = np.random.default_rng(0)
    v1 = versioning.retire_and_replace(store, small_task, 0.3, fast_config(epochs=2), rng)
    assert v1.version_id == 1 and v1.status == "deployed"
    for _ in range(2):
        versioning.retire_and_replace(store, small_task, 0.3, fast_config(epochs=2), rng)
    assert [v.version_id for v in store.versions] == [1, 2, 3]
    assert [v.status for v in store.versions] == ["retired", "retired", "deployed"]
    # every pair of assignments distinct
    for a in store.versions:
        for b in store.versions:
            if a is not b:
                for da, db in zip(a.assignment.distributions, b.assignment.distributions):
                    assert np.abs(da.latent - db.latent).sum() > 0


def test_store_round_trip_byte_equal(tmp_path, small_task):
    store = VersionStore(tmp_path / "store")
    rng = np.random.default_rng(1)
    versioning.retire_and_replace(store, small_task, 0.3, fast_config(epochs=2), rng)
    versioning.retire_and_replace(store, small_task, 0.3, fast_config(epochs=2), rng)

    reloaded = VersionStore(tmp_path / "store")
    assert [v.version_id for v in reloaded.versions] == [1, 2]
    assert [v.status for v in reloaded.versions] == ["retired", "deployed"]
    for orig, back in zip(store.versions, reloaded.versions):
        for (w0, b0), (w1, b1) in zip(nnet.model_params(orig.model), nnet.model_params(back.model)):
            assert w0.tobytes() == w1.tobytes()
            assert b0.tobytes() == b1.tobytes()
        assert back.benign_accuracy == orig.benign_accuracy
        assert back.config == orig.config
        for da, db in zip(orig.assignment.distributions, back.assignment.distributions):
            np.testing.assert_array_equal(da.latent, db.latent)


def test_store_persistence_failure_leaves_store_unchanged(tmp_path, small_task):
    store = VersionStore(tmp_path / "store")
    rng = np.random.default_rng(2)
    versioning.retire_and_replace(store, small_task, 0.3, fast_config(epochs=2), rng)
    # a file where the next version directory must go forces the I/O failure
    blocker = tmp_path / "store" / "versions" / "2"
    blocker.write_text("in the way")
    with pytest.raises(OSError):
        versioning.retire_and_replace(store, small_task, 0.3, fast_config(epochs=2), rng)
    assert [v.version_id for v in store.versions] == [1]
    assert store.deployed().version_id == 1
    reloaded = VersionStore(tmp_path / "store")
    assert [v.version_id for v in reloaded.versions] == [1]
    assert reloaded.deployed() is not None


def test_store_rejects_out_of_order_ids(tmp_path, small_task):
    store = VersionStore(tmp_path / "store")
    v5 = quick_version(small_task, 5, seed=0)
    with pytest.raises(ValueError, match="out of order"):
        store.commit_replacement(v5)
