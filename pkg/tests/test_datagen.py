"""Tests for task generation and the hidden-distribution renderer."""

import json
from pathlib import Path

import numpy as np
import pytest

from breachlab import datagen, nnet
from breachlab.datagen import (
    GlyphParams,
    HiddenDistribution,
    assign_per_label,
    gen_hidden_samples,
    make_task,
    render_lipschitz_bound,
    render_texture,
    render_textures,
    sample_latent,
)

GOLDEN = Path(__file__).parent / "golden"


# ---------------------------------------------------------------------------
# glyph tasks


def test_zero_noise_gives_identical_samples():
    task = make_task("synthetic_glyphs", {"noise": 0.0, "num_classes": 4,
                                          "train_per_class": 50}, seed=1)
    for label in range(4):
        rows = task.train_x[task.train_y == label]
        assert np.all(rows == rows[0])


def test_same_seed_same_dataset():
    a = make_task("synthetic_glyphs", {"num_classes": 3, "train_per_class": 50}, seed=9)
    b = make_task("synthetic_glyphs", {"num_classes": 3, "train_per_class": 50}, seed=9)
    np.testing.assert_array_equal(a.train_x, b.train_x)
    np.testing.assert_array_equal(a.test_x, b.test_x)


def test_different_seed_different_noise():
    a = make_task("synthetic_glyphs", {"num_classes": 3, "train_per_class": 50}, seed=9)
    b = make_task("synthetic_glyphs", {"num_classes": 3, "train_per_class": 50}, seed=10)
    assert not np.array_equal(a.train_x, b.train_x)


def test_default_task_reference_accuracy(glyph_task, standard_model):
    acc = nnet.accuracy(standard_model, glyph_task.test_x, glyph_task.test_y)
    assert acc >= 0.95


def test_glyph_param_validation():
    with pytest.raises(ValueError, match="num_classes"):
        make_task("synthetic_glyphs", {"num_classes": 1})
    with pytest.raises(ValueError, match="side"):
        make_task("synthetic_glyphs", {"side": 7})
    with pytest.raises(ValueError, match="train_per_class"):
        make_task("synthetic_glyphs", {"train_per_class": 20})
    with pytest.raises(ValueError, match="unknown"):
        make_task("synthetic_glyphs", {"bogus": 1})
    with pytest.raises(ValueError, match="kind"):
        make_task("telepathy")


def test_values_in_unit_box(glyph_task):
    for x in (glyph_task.train_x, glyph_task.val_x, glyph_task.test_x):
        assert x.min() >= 0.0 and x.max() <= 1.0


# ---------------------------------------------------------------------------
# CSV round trip and errors


def test_csv_round_trip(tmp_path, small_task):
    path = tmp_path / "task.csv"
    x = np.vstack([small_task.train_x, small_task.val_x, small_task.test_x])
    y = np.concatenate([small_task.train_y, small_task.val_y, small_task.test_y])
    datagen.save_dataset_csv(x, y, path)
    loaded = make_task("from_file", {"path": str(path)}, seed=3)
    assert loaded.num_classes == small_task.num_classes
    assert loaded.input_dim == small_task.input_dim
    total = len(loaded.train_x) + len(loaded.val_x) + len(loaded.test_x)
    assert total == len(x)
    # same multiset of rows, different split order
    assert sorted(np.sum(x, axis=1).round(9)) == pytest.approx(
        sorted(np.concatenate([loaded.train_x, loaded.val_x, loaded.test_x]).sum(axis=1).round(9))
    )


def test_csv_parse_error_names_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("0,0.5,0.5\n1,oops,0.5\n")
    with pytest.raises(ValueError, match="line 2"):
        make_task("from_file", {"path": str(path)})


def test_csv_out_of_range_names_offset(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("0,0.5,0.5\n1,0.5,1.5\n")
    with pytest.raises(ValueError, match="line 2.*offset 2"):
        make_task("from_file", {"path": str(path)})


def test_csv_ragged_rows_rejected(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("0,0.5,0.5\n1,0.5\n")
    with pytest.raises(ValueError, match="line 2"):
        make_task("from_file", {"path": str(path)})


# ---------------------------------------------------------------------------
# latent sampling


def test_latent_bounds_hold():
    rng = np.random.default_rng(5)
    draws = np.stack([sample_latent(rng) for _ in range(10_000)])
    assert draws.min() >= -0.5 and draws.max() <= 0.5


def test_latent_mean_near_zero():
    rng = np.random.default_rng(6)
    draws = np.stack([sample_latent(rng) for _ in range(100_000)])
    assert np.abs(draws.mean(axis=0)).max() <= 0.02


def test_latent_fixed_seed_fixed_vector():
    a = sample_latent(np.random.default_rng(42))
    b = sample_latent(np.random.default_rng(42))
    np.testing.assert_array_equal(a, b)


def test_assign_per_label_rejects_single_label():
    with pytest.raises(ValueError, match="at least 2"):
        assign_per_label(1, rng=np.random.default_rng(0))


def test_assign_per_label_latents_distinct():
    a = assign_per_label(5, rng=np.random.default_rng(1))
    b = assign_per_label(5, rng=np.random.default_rng(2))
    for da in list(a.distributions) + list(b.distributions):
        for db in b.distributions:
            if da is not db:
                assert np.abs(da.latent - db.latent).sum() > 0


def test_expected_pairwise_latent_l1_distance():
    # |u - v| for independent U(-1/2, 1/2) coordinates has mean 1/3
    rng = np.random.default_rng(8)
    dists = [
        np.abs(sample_latent(rng) - sample_latent(rng)).sum() for _ in range(10_000)
    ]
    expected = datagen.LATENT_DIM / 3.0
    assert np.mean(dists) == pytest.approx(expected, rel=0.05)


def test_assignment_json_round_trip():
    asg = assign_per_label(4, rng=np.random.default_rng(3))
    back = datagen.HiddenAssignment.from_json_dict(json.loads(json.dumps(asg.to_json_dict())))
    assert len(back) == 4
    for d0, d1 in zip(asg.distributions, back.distributions):
        np.testing.assert_array_equal(d0.latent, d1.latent)
        assert d0.spread == d1.spread


# ---------------------------------------------------------------------------
# hidden sample rendering


def test_spread_to_zero_limit_collapses_to_mean_render():
    z = sample_latent(np.random.default_rng(12))
    dist = HiddenDistribution(z, spread=1e-12)
    samples = gen_hidden_samples(dist, 8, seed=4, input_dim=64)
    np.testing.assert_allclose(samples, np.tile(render_texture(z, 64), (8, 1)), atol=1e-9)


def test_hidden_samples_deterministic():
    z = sample_latent(np.random.default_rng(13))
    dist = HiddenDistribution(z)
    a = gen_hidden_samples(dist, 16, seed=21, input_dim=64)
    b = gen_hidden_samples(dist, 16, seed=21, input_dim=64)
    np.testing.assert_array_equal(a, b)
    c = gen_hidden_samples(dist, 16, seed=22, input_dim=64)
    assert not np.array_equal(a, c)


def test_hidden_samples_in_unit_box():
    z = sample_latent(np.random.default_rng(14))
    samples = gen_hidden_samples(HiddenDistribution(z), 64, seed=1, input_dim=100)
    assert samples.min() >= 0.0 and samples.max() <= 1.0
    assert samples.shape == (64, 100)


def test_separation_margins_match_golden():
    golden = json.loads((GOLDEN / "hidden_separation.json").read_text())
    d = golden["input_dim"]
    z0 = np.full(golden["latent_dim"], -0.25)
    z_far = np.full(golden["latent_dim"], +0.25)
    z_near = z0 + golden["near_l1_distance"] / golden["latent_dim"]
    m0 = gen_hidden_samples(HiddenDistribution(z0), golden["samples"], golden["seed"], d).mean(axis=0)
    m_far = gen_hidden_samples(HiddenDistribution(z_far), golden["samples"], golden["seed"], d).mean(axis=0)
    m_near = gen_hidden_samples(HiddenDistribution(z_near), golden["samples"], golden["seed"], d).mean(axis=0)
    far = float(np.linalg.norm(m0 - m_far))
    near = float(np.linalg.norm(m0 - m_near))
    assert far == pytest.approx(golden["far_margin"], rel=1e-9)
    assert near == pytest.approx(golden["near_margin"], rel=1e-9)
    assert far > 0 and far >= 10.0 * near


def test_render_lipschitz_bound_holds():
    rng = np.random.default_rng(15)
    k = render_lipschitz_bound(64)
    for _ in range(300):
        z1 = sample_latent(rng)
        z2 = sample_latent(rng)
        lhs = np.linalg.norm(render_texture(z1, 64) - render_texture(z2, 64))
        assert lhs <= k * np.abs(z1 - z2).sum() + 1e-12


def test_latent_locality_monotone_medians():
    rng = np.random.default_rng(16)
    mags = [0.4, 0.2, 0.1, 0.05, 0.025, 0.0125]
    medians = []
    for mag in mags:
        gaps = []
        for _ in range(60):
            z = sample_latent(rng) * 0.5  # keep z + delta inside the box
            delta = rng.uniform(-1, 1, size=16)
            delta *= mag / np.abs(delta).sum()
            gaps.append(np.linalg.norm(render_texture(z, 64) - render_texture(z + delta, 64)))
        medians.append(np.median(gaps))
    assert all(a >= b for a, b in zip(medians, medians[1:]))
    assert medians[-1] < 0.1 * medians[0]


def test_hidden_samples_orthogonal_to_task(glyph_task, standard_model):
    # a task-only model should be near-uniformly unsure on hidden textures
    asg = assign_per_label(glyph_task.num_classes, rng=np.random.default_rng(9))
    hx, _ = datagen.hidden_pool(asg, glyph_task.input_dim, seed=77)
    probs = nnet.forward_batch(standard_model, hx)
    entropy = -np.sum(probs * np.log(np.clip(probs, 1e-12, None)), axis=1)
    assert entropy.mean() >= 0.8 * np.log(glyph_task.num_classes)


def test_render_textures_batch_matches_single():
    rng = np.random.default_rng(17)
    zs = np.stack([sample_latent(rng) for _ in range(5)])
    batch = render_textures(zs, 64)
    for i in range(5):
        np.testing.assert_array_equal(batch[i], render_texture(zs[i], 64))
