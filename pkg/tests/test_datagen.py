"""Generator tests: photometric ops, source sets, bounded warps, pairs."""

import os

import numpy as np
import pytest
from scipy import stats

from alignkit import datagen as dg
from alignkit.errors import (
    FormatError,
    RejectionBudgetExhausted,
    ShapeMismatch,
    SourceTooSmall,
)
from alignkit.grid import FeatureGrid, warp_grid
from alignkit.tensorio import load_fgt1, save_image
from alignkit.training import corner_error_pct
from alignkit.warp import Homography, grid_corners


@pytest.fixture(scope="module")
def small_sources():
    src = dg.SourceSet.synthetic(4, 256, 256, seed=3, perturb=dg.PhotometricConfig())
    return dg.split_train_test(src, 0.25)


SMALL = dg.PairConfig(patch_min=24, patch_max=32, max_noop_error_pct=10.0)


# ----------------------------------------------------------------------
# photometric perturbation


def test_neutral_perturbation_is_bit_exact():
    rng = np.random.default_rng(0)
    g = FeatureGrid(rng.random((3, 20, 20)))
    out = dg.photometric_perturb(g, dg.PhotometricConfig.neutral(), 1)
    np.testing.assert_array_equal(out.data, g.data)


def test_gain_is_multiplicative():
    # gain-only config: the first draw is the gain, so it can be recomputed
    cfg = dg.PhotometricConfig(gain=0.5, bias=0, channel_gain=0, log_gamma=0,
                               noise_sigma=0, shading=0)
    g = FeatureGrid(np.full((1, 8, 8), 0.3))
    out = dg.photometric_perturb(g, cfg, 123)
    gain = 1.0 + np.random.default_rng(123).uniform(-0.5, 0.5)
    np.testing.assert_allclose(out.data, 0.3 * gain, rtol=0, atol=1e-15)


def test_bias_is_additive():
    cfg = dg.PhotometricConfig(gain=0, bias=0.1, channel_gain=0, log_gamma=0,
                               noise_sigma=0, shading=0)
    g = FeatureGrid(np.full((1, 8, 8), 0.5))
    out = dg.photometric_perturb(g, cfg, 7)
    bias = np.random.default_rng(7).uniform(-0.1, 0.1)
    np.testing.assert_allclose(out.data, 0.5 + bias, atol=1e-15)


def test_noise_statistics_match_sigma():
    cfg = dg.PhotometricConfig(gain=0, bias=0, channel_gain=0, log_gamma=0,
                               noise_sigma=0.05, shading=0)
    g = FeatureGrid(np.full((1, 1000, 1000), 0.5))
    out = dg.photometric_perturb(g, cfg, 11)
    dev = out.data - 0.5
    assert abs(dev.std() - 0.05) / 0.05 < 0.05
    assert abs(dev.mean()) < 5e-4


def test_channel_gains_are_independent():
    cfg = dg.PhotometricConfig(gain=0, bias=0, channel_gain=0.4, log_gamma=0,
                               noise_sigma=0, shading=0)
    g = FeatureGrid(np.full((3, 16, 16), 0.4))
    out = dg.photometric_perturb(g, cfg, 5)
    per_channel = out.data.reshape(3, -1)
    assert all(np.ptp(ch) < 1e-12 for ch in per_channel)  # uniform within channel
    assert len({ch[0] for ch in per_channel}) == 3  # but differs across channels


def test_output_clamped_to_unit_interval():
    rng = np.random.default_rng(2)
    g = FeatureGrid(rng.random((1, 64, 64)))
    out = dg.photometric_perturb(g, dg.PhotometricConfig(gain=3.0, bias=1.0), 9)
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0


def test_perturbation_deterministic():
    g = FeatureGrid(np.random.default_rng(4).random((1, 32, 32)))
    a = dg.photometric_perturb(g, dg.PhotometricConfig(), 77)
    b = dg.photometric_perturb(g, dg.PhotometricConfig(), 77)
    np.testing.assert_array_equal(a.data, b.data)


def test_perturb_rejects_bad_channel_count():
    with pytest.raises(ShapeMismatch):
        dg.photometric_perturb(FeatureGrid(np.zeros((2, 8, 8))), dg.PhotometricConfig(), 0)


# ----------------------------------------------------------------------
# source sets and splits


def test_synthetic_frames_share_scene_but_differ():
    src = dg.SourceSet.synthetic(3, 64, 64, seed=1, perturb=dg.PhotometricConfig())
    assert src.num_frames == 3
    a, b = src.frames[0], src.frames[1]
    assert not np.array_equal(a, b)
    # photometric variants of one scene stay strongly correlated
    assert np.corrcoef(a.ravel(), b.ravel())[0, 1] > 0.8


def test_synthetic_is_deterministic():
    a = dg.SourceSet.synthetic(2, 48, 48, seed=6, perturb=dg.PhotometricConfig())
    b = dg.SourceSet.synthetic(2, 48, 48, seed=6, perturb=dg.PhotometricConfig())
    for fa, fb in zip(a.frames, b.frames):
        np.testing.assert_array_equal(fa, fb)


def test_source_set_rejects_mismatched_frames():
    with pytest.raises(ShapeMismatch):
        dg.SourceSet((np.zeros((1, 10, 10)), np.zeros((1, 10, 12))), ("a", "b"))


def test_split_fraction_example():
    src = dg.SourceSet((np.zeros((1, 40, 1000)),), ("f",))
    split = dg.split_train_test(src, 0.2)
    assert split.split_column == 800
    assert split.test_mask()[:, 800:].all() and split.test_mask().sum() == 40 * 200


def test_masks_partition_the_frame(small_sources):
    train, test = small_sources.train_mask(), small_sources.test_mask()
    assert not (train & test).any()
    assert (train | test).all()


def test_resplit_is_deterministic(small_sources):
    again = dg.split_train_test(small_sources, 0.25)
    np.testing.assert_array_equal(again.train_mask(), small_sources.train_mask())


def test_manifest_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    for name in ("a.png", "b.png"):
        save_image(tmp_path / name, rng.random((1, 32, 48)))
    manifest = tmp_path / "sources.txt"
    manifest.write_text(
        "# co-registered captures\nsplit 0.25\na.png\nb.png  # second frame\n"
    )
    src = dg.SourceSet.from_manifest(manifest)
    assert src.num_frames == 2
    assert src.test_fraction == 0.25
    assert src.frames[0].shape == (1, 32, 48)
    assert src.split_column == 36


def test_manifest_bad_split_raises(tmp_path):
    bad = tmp_path / "m.txt"
    bad.write_text("split oops\na.png\n")
    with pytest.raises(FormatError):
        dg.SourceSet.from_manifest(bad)


def test_manifest_without_images_raises(tmp_path):
    empty = tmp_path / "m.txt"
    empty.write_text("# nothing\nsplit 0.5\n")
    with pytest.raises(FormatError):
        dg.SourceSet.from_manifest(empty)


# ----------------------------------------------------------------------
# bounded random warps


def test_every_draw_respects_the_bound():
    ident = Homography.identity()
    corners = grid_corners(64, 64)
    for seed in range(300):
        h = dg.random_bounded_warp(64, 30.0, seed)
        assert corner_error_pct(ident, h, corners, 64) <= 30.0 + 1e-12


def test_tiny_bound_gives_near_identity():
    # as the bound shrinks the displacement box shrinks and H -> identity
    h = dg.random_bounded_warp(64, 0.05, 3)
    corners = grid_corners(64, 64)
    disp = np.linalg.norm(h.apply(corners) - corners, axis=1)
    assert disp.max() <= 1.3 * 0.0005 * 64 * np.sqrt(2)  # within the tiny draw box
    assert corner_error_pct(Homography.identity(), h, corners, 64) <= 0.05


def test_monte_carlo_max_approaches_the_bound():
    errs = [
        corner_error_pct(
            Homography.identity(),
            dg.random_bounded_warp(96, 30.0, s),
            grid_corners(96, 96),
            96,
        )
        for s in range(2000)
    ]
    assert 25.0 < max(errs) <= 30.0


def test_bound_validation():
    with pytest.raises(ValueError):
        dg.random_bounded_warp(64, 0.0, 0)
    with pytest.raises(ValueError):
        dg.random_bounded_warp(64, 75.0, 0)


def test_exhausted_budget_raises(monkeypatch):
    monkeypatch.setattr(dg, "REJECTION_BUDGET", 0)
    with pytest.raises(RejectionBudgetExhausted):
        dg.random_bounded_warp(64, 30.0, 0)


# ----------------------------------------------------------------------
# pair sampling


def test_pair_sampling_deterministic(small_sources):
    a = dg.sample_pair(small_sources, SMALL, 42)
    b = dg.sample_pair(small_sources, SMALL, 42)
    np.testing.assert_array_equal(a.template.data, b.template.data)
    np.testing.assert_array_equal(a.image.data, b.image.data)
    np.testing.assert_array_equal(a.gt_warp.m, b.gt_warp.m)
    assert a.provenance == b.provenance


def test_pair_uses_two_distinct_frames(small_sources):
    for seed in range(10):
        p = dg.sample_pair(small_sources, SMALL, seed)
        assert p.provenance.template_frame != p.provenance.image_frame


def test_single_frame_source_reuses_the_frame():
    src = dg.split_train_test(dg.SourceSet.synthetic(1, 200, 200, seed=9), 0.3)
    p = dg.sample_pair(src, SMALL, 7)
    assert p.provenance.template_frame == p.provenance.image_frame == 0
    y0, x0 = p.provenance.origin_y, p.provenance.origin_x
    patch = src.frames[0][
        :, y0 + p.pad : y0 + p.pad + p.patch_size, x0 + p.pad : x0 + p.pad + p.patch_size
    ]
    np.testing.assert_array_equal(p.template.data, patch)


def test_pair_invariants_hold_at_the_default_bound():
    src = dg.split_train_test(dg.SourceSet.synthetic(2, 640, 640, seed=2), 0.2)
    cfg = dg.PairConfig(patch_min=64, patch_max=96, max_noop_error_pct=30.0)
    for seed in range(20):
        p = dg.sample_pair(src, cfg, seed)
        mapped = p.gt_warp.apply(grid_corners(p.patch_size, p.patch_size))
        lo, hi = -p.pad, p.patch_size - 1 + p.pad
        assert np.all(mapped >= lo) and np.all(mapped <= hi)
        assert p.noop_error_pct() <= 30.0 + 1e-9
        assert p.pad == int(np.ceil(0.35 * p.patch_size))
        assert p.image.shape[1:] == (p.patch_size + 2 * p.pad,) * 2


def test_patch_sizes_uniform_by_chi_square(small_sources):
    sizes = [dg.sample_pair(small_sources, SMALL, s).patch_size for s in range(1000)]
    counts = np.bincount(sizes, minlength=33)[24:33]
    expected = len(sizes) / 9.0
    chi2 = ((counts - expected) ** 2 / expected).sum()
    assert stats.chi2.sf(chi2, df=8) > 0.001, f"chi2={chi2:.1f}, counts={counts}"


def test_ground_truth_consistency():
    # unwarping the image side must reproduce the template's content
    src = dg.split_train_test(dg.SourceSet.synthetic(1, 320, 320, seed=5), 0.2)
    cfg = dg.PairConfig(patch_min=64, patch_max=64, max_noop_error_pct=10.0)
    for seed in range(3):
        p = dg.sample_pair(src, cfg, seed)
        t_pad = Homography.translation(p.pad, p.pad)
        fwd = t_pad.compose(p.gt_warp).compose(t_pad.inverse())
        recon, mask = warp_grid(p.image, fwd, p.image.shape[1:])
        sl = slice(p.pad, p.pad + p.patch_size)
        valid = mask.mask[sl, sl]
        diff = np.abs(recon.data[:, sl, sl] - p.template.data)[:, valid]
        assert diff.mean() <= 1e-3


def test_source_too_small():
    src = dg.split_train_test(dg.SourceSet.synthetic(1, 64, 64, seed=0), 0.5)
    with pytest.raises(SourceTooSmall):
        dg.sample_pair(src, SMALL, 0)  # 32 free columns < padded patch


def test_train_and_test_regions_disjoint(small_sources):
    gen = dg.SourcePairGenerator(small_sources, SMALL, seed=1)
    split = small_sources.split_column
    for j in range(5):
        tr = gen.training_pair(0, j)
        padded = tr.patch_size + 2 * tr.pad
        assert tr.provenance.origin_x + padded <= split
        va = gen.validation_pair(j)
        assert va.provenance.origin_x >= split
        assert va.provenance.region == "test"


def test_generator_streams_are_reproducible(small_sources):
    g1 = dg.SourcePairGenerator(small_sources, SMALL, seed=4)
    g2 = dg.SourcePairGenerator(small_sources, SMALL, seed=4)
    a, b = g1.training_pair(17, 2), g2.training_pair(17, 2)
    np.testing.assert_array_equal(a.image.data, b.image.data)
    c, d = g1.validation_pair(3), g2.validation_pair(3)
    np.testing.assert_array_equal(c.image.data, d.image.data)


def test_generator_requires_a_split():
    src = dg.SourceSet.synthetic(2, 128, 128, seed=0)
    with pytest.raises(ValueError):
        dg.SourcePairGenerator(src, SMALL, seed=0)


# ----------------------------------------------------------------------
# export


def test_dump_pairs_round_trip(tmp_path, small_sources):
    pairs = [dg.sample_pair(small_sources, SMALL, s) for s in range(3)]
    out = tmp_path / "dump"
    dg.dump_pairs(pairs, out)
    text = (out / "ground_truth.csv").read_text().splitlines()
    assert text[0].startswith("#")
    assert text[2] == "pair,m00,m01,m02,m10,m11,m12,m20,m21,m22"
    ids = [line.split(",")[0] for line in text[3:]]
    assert ids == sorted(ids) == ["0000", "0001", "0002"]
    got = load_fgt1(out / "pair_0001_template.fgt1")
    np.testing.assert_array_equal(got, pairs[1].template.data)
    vals = np.array([float(v) for v in text[4].split(",")[1:]]).reshape(3, 3)
    np.testing.assert_allclose(vals, pairs[1].gt_warp.m, rtol=1e-8, atol=1e-10)
