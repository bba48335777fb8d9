import numpy as np
import pytest

from plumekit.exceptions import DomainError, LoadError
from plumekit.injection import inject_enhancement
from plumekit.io import read_raster, write_raster
from plumekit.retrieval import (MatchedFilter, MatchedFilterBackend, load_external,
                                matched_filter, origin_centroid, save_external,
                                threshold_instances, unit_absorption_spectrum)
from plumekit.scenes import flat_scene, synthetic_scene
from plumekit.slot_match import SlotPrediction
from plumekit.spectral_lut import query_ratio


@pytest.fixture(scope="module")
def sig(swir_lut):
    return unit_absorption_spectrum(swir_lut, 2.0)


def test_unit_absorption_far_bands_near_zero(sig, swir_wavelengths):
    far = (swir_wavelengths < 1.55) | ((swir_wavelengths > 1.8) & (swir_wavelengths < 2.05))
    assert far.any()
    assert np.all(np.abs(sig.k[far]) < 1e-6)


def test_unit_absorption_matches_lut_at_100(sig, swir_lut):
    np.testing.assert_allclose(np.exp(-sig.k * 100), query_ratio(swir_lut, 100, 2.0),
                               rtol=1e-12)


def test_unit_absorption_near_linear(sig, swir_lut):
    secant = -np.log(query_ratio(swir_lut, 1000, 2.0)) / 1000
    strong = sig.k > 1e-5
    gap = np.abs(sig.k[strong] - secant[strong]) / sig.k[strong]
    unsat = np.exp(-sig.k[strong] * 1000) > 0.5
    assert np.all(gap[unsat] < 0.10)


def test_matched_filter_white_noise_null(swir_srfs, pair, sig, rng):
    cube = flat_scene((96, 96), swir_srfs, pair)
    noisy = cube.with_values(cube.values * (1 + rng.standard_normal(cube.values.shape) / 300))
    enh = matched_filter(noisy, sig)
    stderr = enh.std() / np.sqrt(enh.size)
    assert abs(enh.mean()) < 3 * stderr


@pytest.fixture(scope="module")
def scene(swir_srfs, pair):
    cube, _ = synthetic_scene((128, 128), swir_srfs, pair, np.random.default_rng(7), snr=400)
    return cube


def _plume_mean(cube, lut, sig, level):
    enh = np.zeros((cube.rows, cube.cols))
    enh[52:76, 52:76] = level
    out = matched_filter(inject_enhancement(cube, enh, lut), sig)
    return out[52:76, 52:76].mean()


def test_matched_filter_round_trip_500(scene, swir_lut, sig):
    assert _plume_mean(scene, swir_lut, sig, 500) == pytest.approx(500, rel=0.10)


def test_matched_filter_linearity(scene, swir_lut, sig):
    a = _plume_mean(scene, swir_lut, sig, 250)
    b = _plume_mean(scene, swir_lut, sig, 500)
    assert b / a == pytest.approx(2.0, rel=0.05)


def test_matched_filter_refine_excludes_plume_tails(scene, swir_lut, sig):
    rr, cc = np.ogrid[:128, :128]
    enh = 1500 * np.exp(-((rr - 64) ** 2 + (cc - 64) ** 2) / (2 * 8.0**2))
    plumed = inject_enhancement(scene, enh, swir_lut)
    null = enh < 0.5
    clean_std = matched_filter(scene, sig)[null].std()
    refined = matched_filter(plumed, sig)
    single = matched_filter(plumed, sig, refine_iter=1, refine_dilate_px=0)
    # a single pixelwise trim leaves the tail ring in the background covariance
    assert single[null].std() > 2 * clean_std
    assert refined[null].std() == pytest.approx(clean_std, rel=0.1)
    assert abs(refined[null].mean()) < 1.0
    assert refined[enh > 50].mean() > single[enh > 50].mean()


def test_matched_filter_get_params(sig):
    mf = MatchedFilter(sig, shrinkage=0.1)
    assert mf.get_params()["shrinkage"] == 0.1


def test_threshold_instances():
    p = np.full((2, 4, 4), 0.5)
    pred = SlotPrediction(np.zeros_like(p), p, p)
    assert threshold_instances(pred, 0.0).all()
    assert threshold_instances(pred, 0.4).all()
    assert not threshold_instances(pred, 0.6).any()
    r = np.random.default_rng(0).uniform(size=(3, 8, 8))
    pr = SlotPrediction(np.zeros_like(r), r, r)
    prev = threshold_instances(pr, 0.0)
    for t in np.linspace(0.05, 1.0, 20):
        cur = threshold_instances(pr, t)
        assert not np.any(cur & ~prev)
        prev = cur
    with pytest.raises(DomainError):
        threshold_instances(pred, 1.5)


def test_origin_centroid_examples():
    p = np.zeros((5, 5))
    p[2, 3] = 0.8
    assert origin_centroid(p) == pytest.approx((2.0, 3.0), abs=1e-12)
    q = np.zeros((3, 3))
    q[1, 0], q[1, 1] = 0.6, 0.9
    assert origin_centroid(q)[1] == pytest.approx(0.6, abs=1e-12)
    rr, cc = np.ogrid[:21, :21]
    disc = np.where((rr - 10) ** 2 + (cc - 10) ** 2 <= 25, 0.7, 0.0)
    assert origin_centroid(disc) == pytest.approx((10.0, 10.0))
    assert origin_centroid(np.full((4, 4), 0.3)) is None


def test_backend_splits_two_plumes():
    enh = np.zeros((128, 128))
    rr, cc = np.ogrid[:128, :128]
    enh += 400 * np.exp(-((rr - 40) ** 2 + (cc - 40) ** 2) / 60)
    enh += 250 * np.exp(-((rr - 90) ** 2 + (cc - 90) ** 2) / 60)
    be = MatchedFilterBackend(signature=object()).fit()
    pred = be.slots_from_enhancement(enh)
    masks = threshold_instances(pred, 0.4)
    assert masks[0, 40, 40] and masks[1, 90, 90]
    assert not masks[2:].any()
    o0 = origin_centroid(pred.origin_prob[0])
    assert np.hypot(o0[0] - 40, o0[1] - 40) < 1.0


def test_backend_empty_tile():
    be = MatchedFilterBackend(signature=object()).fit()
    pred = be.slots_from_enhancement(np.zeros((64, 64)))
    assert not pred.mask_prob.any()


def _pred(rng, P=3, shape=(16, 16)):
    return SlotPrediction(rng.uniform(0, 300, (P,) + shape), rng.uniform(size=(P,) + shape),
                          rng.uniform(size=(P,) + shape))


def test_external_round_trip(tmp_path, rng):
    pred = _pred(rng)
    pred = SlotPrediction(pred.enh.astype(np.float32), pred.mask_prob.astype(np.float32),
                          pred.origin_prob.astype(np.float32))
    ext = load_external(save_external(pred, tmp_path, "t1"), (16, 16))
    assert ext.clipped == 0 and ext.nan_count == 0
    for h in ("enh", "mask_prob", "origin_prob"):
        np.testing.assert_array_equal(getattr(ext.prediction, h), getattr(pred, h))


def test_external_clips_probability(tmp_path, rng):
    pred = _pred(rng)
    m = save_external(pred, tmp_path, "t2")
    bad = np.asarray(read_raster(tmp_path / "t2_mask_prob_1.rst").data).copy()
    bad[0, 3, 3] = 1.2
    write_raster(tmp_path / "t2_mask_prob_1.rst", bad)
    ext = load_external(m)
    assert ext.clipped == 1
    assert ext.prediction.mask_prob[1, 3, 3] == 1.0


def test_external_missing_slot_named(tmp_path, rng):
    m = save_external(_pred(rng), tmp_path, "t3")
    (tmp_path / "t3_origin_prob_2.rst").unlink()
    with pytest.raises(LoadError, match="slot 2"):
        load_external(m)


def test_external_nan_budget(tmp_path, rng):
    m = save_external(_pred(rng), tmp_path, "t4")
    arr = read_raster(tmp_path / "t4_enh_0.rst").data.copy()
    arr[0, :4] = np.nan
    write_raster(tmp_path / "t4_enh_0.rst", arr)
    with pytest.raises(LoadError, match="NaN"):
        load_external(m)
