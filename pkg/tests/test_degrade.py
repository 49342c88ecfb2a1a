import json
import math

import numpy as np
import pytest

from fusenas import degrade as dg


def test_zero_velocity_trajectory_is_delta():
    k = dg.gen_motion_kernel(3, 15, steps=1, velocity=0.0).data
    expected = np.zeros((15, 15))
    expected[7, 7] = 1.0
    np.testing.assert_array_equal(k, expected)


@pytest.mark.parametrize("seed", range(10))
def test_motion_kernel_normalized(seed):
    k = dg.gen_motion_kernel(seed, 13 + 2 * (seed % 8)).data
    assert k.min() >= 0
    assert abs(k.sum() - 1) < 1e-6


def test_motion_kernel_deterministic():
    a = dg.gen_motion_kernel(7, 15).data
    b = dg.gen_motion_kernel(7, 15).data
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, dg.gen_motion_kernel(8, 15).data)


@pytest.mark.parametrize("size", [12, 14, 11, 29])
def test_bad_kernel_size_rejected(size):
    with pytest.raises(dg.ConfigError):
        dg.gen_motion_kernel(0, size)


def test_motion_kernel_is_not_trivial():
    # a 50-step walk at 0.7 px/step must spread over many pixels
    k = dg.gen_motion_kernel(1, 21).data
    assert (k > 1e-3).sum() > 10


def test_gaussian_isotropic_rotation_invariant():
    a = dg.gen_gaussian_kernel(2.0, 2.0, 0.0, 15).data
    for angle in (0.3, 1.1, 2.5):
        b = dg.gen_gaussian_kernel(2.0, 2.0, angle, 15).data
        np.testing.assert_allclose(a, b, atol=1e-6)
    np.testing.assert_allclose(a, np.rot90(a), atol=1e-12)


def test_gaussian_closed_form():
    k = dg.gen_gaussian_kernel(2.0, 1.0, 0.0, 13).data
    ref = np.zeros((13, 13))
    for row in range(13):
        for col in range(13):
            u, v = col - 6, row - 6
            ref[row, col] = math.exp(-u * u / 8.0 - v * v / 2.0)
    ref /= ref.sum()
    np.testing.assert_allclose(k, ref, atol=1e-12)
    assert abs(k.sum() - 1) < 1e-6


@pytest.mark.parametrize("sx,sy", [(0.0, 1.0), (-1.0, 2.0), (1.0, 0.0)])
def test_gaussian_rejects_nonpositive_sigma(sx, sy):
    with pytest.raises(dg.ConfigError):
        dg.gen_gaussian_kernel(sx, sy, 0.0)


def test_gaussian_grid():
    grid = dg.gaussian_grid()
    assert len(grid) == 12
    for k in grid:
        assert k.data.min() >= 0 and abs(k.data.sum() - 1) < 1e-6
        assert 13 <= k.size <= 27


def test_all_disabled_is_identity():
    x = np.random.default_rng(0).random((9, 10, 3))
    pair = dg.apply_degradation(x, dg.DegradationConfig(seed=5))
    assert pair.degraded.tobytes() == x.tobytes()
    assert pair.label.as_list() == [0, 0, 0]


def test_white_image_darkening_closed_form():
    x = np.ones((8, 8, 3))
    cfg = dg.DegradationConfig(blur=dg.delta_kernel(13), low_light_r=0.5)
    out = dg.apply_degradation(x, cfg).degraded
    expected = (0.5 * 1.0 ** 2.2) ** (1 / 2.2)
    np.testing.assert_allclose(out, expected, atol=1e-12)
    assert abs(expected - 0.7297) < 1e-4


def test_bnl_row_label():
    cfg = dg.DegradationConfig(blur=dg.gen_motion_kernel(0, 13), low_light_r=0.15,
                               sigma_s=0.1, sigma_c=0.05, seed=1)
    pair = dg.apply_degradation(np.full((16, 16, 3), 0.5), cfg)
    assert pair.label.as_list() == [1, 1, 1]
    assert pair.degraded.min() >= 0 and pair.degraded.max() <= 1


@pytest.mark.parametrize("kwargs", [
    {"low_light_r": 0.6},
    {"low_light_r": 0.01},
    {"sigma_s": 0.2, "sigma_c": 0.05},
    {"sigma_s": 0.05, "sigma_c": 0.5},
    {"sigma_s": 0.05},
])
def test_out_of_range_config_rejected(kwargs):
    with pytest.raises(dg.ConfigError):
        dg.apply_degradation(np.zeros((4, 4, 3)), dg.DegradationConfig(**kwargs))


def test_bad_image_rejected():
    with pytest.raises(dg.ConfigError):
        dg.apply_degradation(np.full((4, 4, 3), 1.5), dg.DegradationConfig())
    with pytest.raises(dg.ConfigError):
        dg.apply_degradation(np.zeros((4, 4)), dg.DegradationConfig())


@pytest.mark.parametrize("level", [0.2, 0.8])
def test_noise_variance(level):
    ss, sc = 0.1, 0.05
    irr = np.full(200_000, level)
    noise = dg.camera_noise(irr, ss, sc, np.random.default_rng(0))
    expected = sc ** 2 + level * ss ** 2
    assert abs(noise.var() - expected) / expected < 0.05


def test_monotone_darkening():
    x = np.random.default_rng(1).random((12, 12, 3))
    k = dg.gen_gaussian_kernel(1.5, 2.5, 0.4)
    outs = [dg.apply_degradation(x, dg.DegradationConfig(blur=k, low_light_r=r)).degraded
            for r in (0.05, 0.1, 0.3, 0.5)]
    for lo, hi in zip(outs, outs[1:]):
        assert (lo <= hi).all()


@pytest.mark.parametrize("label", dg.ALL_LABELS, ids=lambda l: "".join(map(str, l.as_list())))
def test_label_matches_enabled_stages(label):
    cfg = dg.sample_config(np.random.default_rng(3), label, seed=3)
    assert cfg.label == label
    pair = dg.apply_degradation(np.full((20, 20, 3), 0.6), cfg)
    assert pair.label == label


def test_degradation_deterministic():
    x = np.random.default_rng(2).random((16, 16, 3))
    cfg = dg.sample_config(np.random.default_rng(9), dg.DegradationLabel(1, 1, 1), seed=9)
    a = dg.apply_degradation(x, cfg, "s").degraded
    b = dg.apply_degradation(x, cfg, "s").degraded
    assert a.tobytes() == b.tobytes()


def test_crf_round_trip():
    t = np.linspace(0, 1, 101)
    np.testing.assert_allclose(dg.crf(dg.inverse_crf(t)), t, atol=1e-12)


def test_mosaic_pattern():
    rgb = np.zeros((4, 4, 3))
    rgb[..., 0], rgb[..., 1], rgb[..., 2] = 1.0, 2.0, 3.0
    expected = np.array([[1, 2, 1, 2], [2, 3, 2, 3], [1, 2, 1, 2], [2, 3, 2, 3]], dtype=float)
    np.testing.assert_array_equal(dg.mosaic(rgb), expected)


def test_demosaic_constant_exact():
    rgb = np.empty((7, 9, 3))
    rgb[...] = [0.2, 0.5, 0.9]
    np.testing.assert_allclose(dg.demosaic(dg.mosaic(rgb)), rgb, atol=1e-12)


def test_testset_grids():
    n = dg.testset_grid("Test-N")
    assert sorted((g["sigma_s"], g["sigma_c"]) for g in n) == [(0.05, 0.05), (0.05, 0.1), (0.1, 0.05), (0.1, 0.1)]
    rs = sorted({g["low_light_r"] for g in dg.testset_grid("Test-L")})
    assert rs == [0.1, 0.15, 0.2, 0.25, 0.3, 0.35]
    assert len(dg.testset_grid("Test-B", n_motion=4, n_gauss=2)) == 6
    assert len(dg.testset_grid("Test-BNL", n_motion=4, n_gauss=2)) == 12
    with pytest.raises(dg.ConfigError):
        dg.testset_grid("Test-X")


def _clean_dir(tmp_path, n=1, size=16):
    d = tmp_path / "clean"
    d.mkdir()
    rng = np.random.default_rng(0)
    for i in range(n):
        dg.write_image(d / f"img{i}.png", rng.random((size, size, 3)))
    return d


def test_build_testset_noise_rows(tmp_path):
    clean = _clean_dir(tmp_path)
    out = tmp_path / "out"
    records = dg.build_testset("Test-N", clean, out, seed=0)
    assert len(records) == 4
    lines = (out / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 4
    rec = json.loads(lines[0])
    assert tuple(rec) == dg.MANIFEST_FIELDS
    assert rec["kernel_kind"] is None and rec["r"] is None
    assert rec["label"] == [0, 1, 0]
    for r in dg.read_manifest(out / "manifest.jsonl"):
        assert dg.read_image(r["degraded_path"]).shape == (16, 16, 3)


def test_build_testset_deterministic(tmp_path):
    clean = _clean_dir(tmp_path, n=2)
    a = dg.build_testset("Test-BNL", clean, tmp_path / "a", seed=4, n_motion=2, n_gauss=1)
    b = dg.build_testset("Test-BNL", clean, tmp_path / "b", seed=4, n_motion=2, n_gauss=1)
    assert len(a) == 2 * 3 * 2
    for ra, rb in zip(a, b):
        pa = (tmp_path / "a" / ra["degraded_path"]).read_bytes()
        pb = (tmp_path / "b" / rb["degraded_path"]).read_bytes()
        assert pa == pb


def test_build_testset_empty_rejected(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(dg.ConfigError, match="no clean images"):
        dg.build_testset("Test-N", tmp_path / "empty", tmp_path / "out")


def test_build_trainset_covers_labels(tmp_path):
    clean = _clean_dir(tmp_path, n=1, size=20)
    records = dg.build_trainset(clean, tmp_path / "train", seed=1)
    assert sorted(tuple(r["label"]) for r in records) == sorted(tuple(l.as_list()) for l in dg.ALL_LABELS)
