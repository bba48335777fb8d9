import itertools

import numpy as np
import pytest
from scipy import ndimage

from plumekit.exceptions import DomainError, NoBackgroundError
from plumekit.injection import inject_enhancement
from plumekit.scenes import flat_scene, synthetic_scene
from plumekit.spectral_fit import (FitResult, SpectralFitter, classify, fit_enhancement,
                                   fit_scores, match_bg, methane_fit_bands, select_bg_pixels,
                                   select_in_pixels, write_fit_report)
from plumekit.spectral_lut import query_ratio
from plumekit.cube import RadianceCube


def test_select_in_pixels_disjoint_neighbourhoods():
    mask = np.zeros((60, 60), bool)
    enh = np.zeros((60, 60))
    pts = [(5 + 4 * (i // 6), 5 + 4 * (i % 6)) for i in range(31)]
    for k, (r, c) in enumerate(pts):
        mask[r, c] = True
        enh[r, c] = 1000 - k
    # 31 pixels: floor(1%) drops none, top 30 taken
    px = select_in_pixels(mask, enh)
    assert len(px) == 270


def test_select_in_pixels_small_and_shared():
    mask = np.zeros((20, 20), bool)
    mask[10, 5:15] = True
    enh = mask * 100.0
    px = select_in_pixels(mask, enh)
    assert len(px) == 3 * 12
    assert len({tuple(p) for p in px}) == len(px)
    with pytest.raises(DomainError):
        select_in_pixels(np.zeros((4, 4), bool), np.zeros((4, 4)))


def test_select_in_pixels_drops_top_percent():
    mask = np.ones((20, 20), bool)
    enh = np.arange(400, dtype=float).reshape(20, 20)
    px = select_in_pixels(mask, enh, n_top=1)
    # top 4 (1% of 400) dropped: strongest remaining is 395 at (19, 15)
    assert {tuple(p) for p in px} == {(r, c) for r in (18, 19) for c in (14, 15, 16)}


def test_select_bg_pixels_rules():
    mask = np.zeros((50, 50), bool)
    mask[24:26, 24:26] = True
    enh = np.zeros((50, 50))
    pool = select_bg_pixels(mask, [], enh, radius=5)
    d = ndimage.distance_transform_edt(~mask)
    expect = (d <= 5) & ~mask
    assert len(pool) == expect.sum()
    other = np.zeros_like(mask)
    other[20:22, 20:30] = True
    pool2 = {tuple(p) for p in select_bg_pixels(mask, [other], enh, radius=5)}
    assert not any(other[r, c] for r, c in pool2)
    with pytest.raises(NoBackgroundError, match="no clean background"):
        select_bg_pixels(mask, [], np.full((50, 50), 31.0), radius=5)


def _cube_from(values):
    return RadianceCube(np.asarray(values, float))


def test_match_bg_duplicates_and_permutation(rng):
    vals = rng.uniform(1, 2, (4, 6, 5))
    vals[3, :3] = vals[0, :3]  # duplicates of row 0 spectra live in row 3
    cube = _cube_from(vals)
    in_px = np.array([[0, 0], [0, 1], [0, 2]])
    pool = np.array([[3, 2], [3, 0], [1, 4], [3, 1], [2, 2]])
    bg, cost = match_bg(in_px, pool, cube, np.arange(5))
    assert cost == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_array_equal(bg, [[3, 0], [3, 1], [3, 2]])
    perm = pool[rng.permutation(len(pool))]
    assert match_bg(in_px, perm, cube, np.arange(5))[1] == pytest.approx(cost, abs=1e-12)
    with pytest.raises(NoBackgroundError):
        match_bg(in_px, pool[:2], cube, np.arange(5))


def test_match_bg_brute_force(rng):
    for _ in range(20):
        vals = rng.uniform(size=(2, 3, 4))
        cube = _cube_from(vals)
        in_px = np.array([[0, 0], [0, 1], [0, 2]])
        pool = np.array([[1, 0], [1, 1], [1, 2]])
        _, cost = match_bg(in_px, pool, cube, np.arange(4))
        a, b = vals[0], vals[1]
        best = min(sum(np.linalg.norm(a[i] - b[p[i]]) for i in range(3))
                   for p in itertools.permutations(range(3)))
        assert cost == pytest.approx(best, abs=1e-12)


@pytest.fixture(scope="module")
def fit_bands(lut, wavelengths):
    return methane_fit_bands(wavelengths, lut, 2.0)


def test_fit_self_consistency(lut, wavelengths, fit_bands):
    q = query_ratio(lut, 500, 2.0)
    r = fit_enhancement(q, np.ones_like(q), lut, 2.0, wavelengths, fit_bands)
    assert r.fit_enh == pytest.approx(500, rel=0.01)
    assert r.a0 == pytest.approx(1.0, abs=1e-4) and r.a1 == pytest.approx(0.0, abs=1e-4)
    r0 = fit_enhancement(np.ones_like(q), np.ones_like(q), lut, 2.0, wavelengths, fit_bands)
    assert r0.fit_enh < 1.0
    r2 = fit_enhancement(1.02 * q, np.ones_like(q), lut, 2.0, wavelengths, fit_bands)
    assert r2.fit_enh == pytest.approx(500, rel=0.02)
    assert r2.a0 + r2.a1 * wavelengths[fit_bands].mean() == pytest.approx(1.02, rel=1e-3)


def test_fit_errors(lut, wavelengths):
    q = np.ones(lut.n_bands)
    with pytest.raises(DomainError):
        fit_enhancement(q, q, lut, 2.0, wavelengths, np.zeros(lut.n_bands, bool))
    with pytest.raises(DomainError):
        fit_enhancement(-q, q, lut, 2.0, wavelengths)


def test_fit_scores(lut, fit_bands, rng):
    rho = query_ratio(lut, 500, 2.0)[fit_bands]
    assert fit_scores(rho, rho) == (0.0, 0.0)
    assert fit_scores(rho, 2 - rho)[0] == pytest.approx(2.0)
    assert fit_scores(np.ones(5), np.ones(5))[0] == 2.0
    sigma = 0.002
    ratios = []
    for _ in range(100):
        obs = rho + rng.normal(0, sigma, rho.size)
        ratios.append(fit_scores(obs, rho)[1])
    expect = sigma / np.sqrt(np.mean((rho - 1) ** 2))
    assert np.mean(ratios) == pytest.approx(expect, rel=0.10)


def test_classify_examples_and_monotone():
    assert classify(d_cor=0.2, d_norm=0.3, fit_enh=50)
    assert classify(d_cor=0.9, d_norm=0.9, fit_enh=150)
    assert not classify(d_cor=0.9, d_norm=0.9, fit_enh=50)
    assert not classify(d_cor=0.4, d_norm=0.3, fit_enh=100)
    assert classify(d_cor=0.39, d_norm=0.49, fit_enh=0)
    for dc, dn, fe in itertools.product([0.1, 0.5], [0.2, 0.7], [50, 120]):
        if classify(d_cor=dc, d_norm=dn, fit_enh=fe):
            assert classify(d_cor=dc / 2, d_norm=dn / 2, fit_enh=fe * 2)


def test_fitter_flat_round_trip(lut, srfs, pair, wavelengths):
    sf = SpectralFitter(lut=lut, wavelengths=wavelengths).fit()
    cube = flat_scene((80, 80), srfs, pair)
    enh = np.zeros((80, 80))
    enh[30:50, 30:50] = 800
    res = sf.score_plume(inject_enhancement(cube, enh, lut), ndimage.binary_erosion(enh > 0), enh)
    assert res.fit_enh == pytest.approx(800, rel=0.01)
    assert res.valid and res.n_in == res.n_bg


def test_fitter_noisy_end_to_end(lut, srfs, pair, wavelengths):
    sf = SpectralFitter(lut=lut, wavelengths=wavelengths).fit()
    cube, _ = synthetic_scene((128, 128), srfs, pair, np.random.default_rng(3))
    rr, cc = np.ogrid[:128, :128]
    enh = 700 * np.exp(-((rr - 64) ** 2 + (cc - 64) ** 2) / (2 * 8.0**2))
    mask = enh > 50
    res = sf.score_plume(inject_enhancement(cube, enh, lut), mask, enh)
    assert res.fit_enh == pytest.approx(res.obs_enh, rel=0.15)
    assert res.valid


def test_fit_report(tmp_path):
    r = FitResult(120.0, 0.1, 0.2, 110.0, n_in=100, n_bg=100)
    write_fit_report(tmp_path / "f.csv", [("p0", r)])
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0].startswith("plume_id") and lines[1].startswith("p0,120.0000")
