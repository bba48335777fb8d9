import numpy as np
import pytest
from dataclasses import replace
from scipy import ndimage

from plumekit.exceptions import ConfigError, DomainError
from plumekit.puff_sim import (
    DURATION_BUCKETS_S, SimConfig, SimplexWindField, crop_tile, deposit_puffs,
    emission_schedule, extract_mask, mmol_to_ppm_m, ppm_m_to_mmol, sample_config,
    sample_origins, simulate_plume, simulate_tile,
)

QUIET = dict(mean_wind_speed_mps=0.0, diffusivity=0.0, center_relative_diff_scale=0.0,
             intermittency_off_mean_s=0.0)


def test_sample_config_deterministic():
    a = sample_config(np.random.default_rng(5))
    b = sample_config(np.random.default_rng(5))
    assert a == b


def test_sample_config_ranges():
    rng = np.random.default_rng(0)
    cfgs = [sample_config(rng) for _ in range(10000)]
    spread = np.array([c.puff_spread_rate for c in cfgs])
    assert spread.min() >= 1.002 and spread.max() <= 1.003
    for name, lo, hi in [("center_relative_diff_scale", 10, 20), ("puff_initial_radius_m", 3, 20),
                         ("mean_wind_speed_mps", 0, 10), ("diffusivity", 30, 50),
                         ("num_plumes", 1, 10)]:
        v = np.array([getattr(c, name) for c in cfgs])
        assert v.min() >= lo and v.max() <= hi, name
    dur = np.array([c.plume_duration_s for c in cfgs])
    for lo, hi in DURATION_BUCKETS_S:
        freq = np.mean((dur >= lo) & (dur < hi))
        assert freq == pytest.approx(0.25, abs=0.02)
    assert all(c.sim_duration_s == 3000 and c.grid_size_px == 384 for c in cfgs[:50])


def test_bad_dt_is_config_error():
    with pytest.raises(ConfigError):
        simulate_plume(SimConfig(dt_s=0.0), (10, 10), np.random.default_rng(0))


def test_origin_outside_grid():
    with pytest.raises(DomainError):
        simulate_plume(SimConfig(), (384, 10), np.random.default_rng(0))


def test_symmetry_without_wind():
    cfg = SimConfig(plume_duration_s=600.0, **QUIET)
    inst = simulate_plume(cfg, (192, 192), np.random.default_rng(1))
    win = inst.conc[192 - 40:192 + 41, 192 - 40:192 + 41]
    assert np.abs(np.rot90(win) - win).max() < 0.02 * win.max()


def test_radius_closed_form():
    cfg = SimConfig(plume_duration_s=100.0, **QUIET)
    inst, puffs = simulate_plume(cfg, (100, 100), np.random.default_rng(2), return_puffs=True)
    radii = np.array(sorted({round(p.radius_m, 9) for p in puffs}))
    # the oldest puffs were released at t=2900 and advected over 19 further steps
    steps = np.arange(20)
    expected = cfg.puff_initial_radius_m * cfg.puff_spread_rate ** (steps * cfg.dt_s)
    np.testing.assert_allclose(radii, np.sort(expected), rtol=1e-9)


def test_mass_conservation_interior():
    cfg = SimConfig(plume_duration_s=900.0, mean_wind_speed_mps=1.0,
                    center_relative_diff_scale=1.0, diffusivity=30.0)
    inst = simulate_plume(cfg, (192, 192), np.random.default_rng(3))
    deposited = inst.conc.sum() * cfg.pixel_size_m**2 / 1000.0
    assert inst.exited_mol == 0
    assert deposited == pytest.approx(inst.released_mol, rel=1e-9)
    assert inst.released_mol == pytest.approx(inst.active_s, rel=0.01)


def test_deposited_plus_exited_matches_emission():
    cfg = SimConfig(plume_duration_s=3000.0, mean_wind_speed_mps=9.0,
                    intermittency_off_mean_s=0.0)
    inst = simulate_plume(cfg, (192, 330), np.random.default_rng(4))
    deposited = inst.conc.sum() * cfg.pixel_size_m**2 / 1000.0
    assert inst.exited_mol > 0
    assert deposited + inst.exited_mol == pytest.approx(inst.active_s, rel=0.01)


def test_determinism_and_support():
    cfg = sample_config(np.random.default_rng(9))
    a = simulate_plume(cfg, (150, 200), np.random.default_rng(11))
    b = simulate_plume(cfg, (150, 200), np.random.default_rng(11))
    np.testing.assert_array_equal(a.conc, b.conc)
    assert a.conc.min() >= 0
    assert not np.any(a.mask & (a.conc <= 0))
    np.testing.assert_array_equal(a.mask, extract_mask(mmol_to_ppm_m(a.conc)))
    assert a.emit_window_s[1] == cfg.sim_duration_s


def test_wind_clipping():
    cfg = SimConfig(mean_wind_speed_mps=10.0, center_relative_diff_scale=100.0,
                    velocity_clip_mps=12.0, plume_duration_s=20.0,
                    intermittency_off_mean_s=0.0, sim_duration_s=20.0, puff_spread_rate=1.0)
    inst, puffs = simulate_plume(cfg, (192, 192), np.random.default_rng(0), return_puffs=True)
    src = 192.5 * cfg.pixel_size_m
    dist = np.array([np.hypot(p.pos_m[0] - src, p.pos_m[1] - src) for p in puffs])
    # at most three advection steps happened for any puff
    assert dist.max() <= 3 * cfg.velocity_clip_mps * cfg.dt_s + 1e-9


def test_emission_schedule_ends_on():
    cfg = SimConfig(plume_duration_s=1000.0)
    rng = np.random.default_rng(0)
    for _ in range(20):
        on = emission_schedule(cfg, rng, 600)
        assert on[-1]
        assert not on[:400].any()


def test_wind_field_mean_and_amplitude():
    cfg = SimConfig(mean_wind_speed_mps=5.0, wind_direction_rad=np.pi / 2, diffusivity=40.0)
    wind = SimplexWindField(cfg)
    pos = np.random.default_rng(0).uniform(0, cfg.region_size_m, (500, 2))
    v = wind.velocity(pos, 100.0)
    assert np.abs(v.mean(axis=0) - [5.0, 0.0]).max() < 2.0
    assert np.abs(v - [5.0, 0.0]).max() <= 4.0 + 1e-9


def test_deposit_small_puff_single_pixel():
    g = deposit_puffs([[30.0, 30.0]], [1.0], [2.0], 4, 60.0)
    assert g[0, 0] == pytest.approx(2.0 * 1000 / 3600)
    assert g.sum() == pytest.approx(g[0, 0])


def test_extract_mask_examples():
    assert not extract_mask(np.zeros((10, 10))).any()
    assert extract_mask(np.full((10, 10), 0.001)).all()
    z = np.zeros((10, 10))
    z[5, 5] = 1.0
    assert not extract_mask(z).any()
    # oracle: direct morphology
    rng = np.random.default_rng(0)
    field = rng.uniform(0, 0.0005, (30, 30))
    raw = field >= 0.00024
    padded = np.pad(raw, 1, constant_values=True)
    eroded = np.ones_like(raw)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            eroded &= padded[1 + dr:31 + dr, 1 + dc:31 + dc]
    padded = np.pad(eroded, 1, constant_values=False)
    dilated = np.zeros_like(raw)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            dilated |= padded[1 + dr:31 + dr, 1 + dc:31 + dc]
    np.testing.assert_array_equal(extract_mask(field), dilated)


def test_unit_conversion():
    assert mmol_to_ppm_m(0.00001) == pytest.approx(0.00024, rel=1e-12)
    assert mmol_to_ppm_m(0.0) == 0.0
    assert mmol_to_ppm_m(1 / 24) == pytest.approx(1.0, rel=1e-12)
    assert ppm_m_to_mmol(0.00024) == pytest.approx(0.00001, rel=1e-12)


def _fake(origin, rng):
    conc = rng.uniform(0, 1, (384, 384))
    from plumekit.puff_sim import PlumeInstance
    return PlumeInstance(conc, conc > 0.5, origin, (0.0, 3000.0))


def test_crop_center_and_offset():
    rng = np.random.default_rng(0)
    inst = _fake((200.0, 100.0), rng)
    a, off = crop_tile([inst], "center")
    b, _ = crop_tile([inst], "center")
    assert off == (64, 64)
    np.testing.assert_array_equal(a[0].conc, b[0].conc)
    assert a[0].origin_px == (136.0, 36.0)
    c, _ = crop_tile([inst], offset=(0, 0))
    np.testing.assert_array_equal(c[0].conc, inst.conc[:256, :256])
    np.testing.assert_array_equal(c[0].mask, inst.mask[:256, :256])


def test_crop_absent_origin_keeps_tail():
    inst = _fake((380.0, 380.0), np.random.default_rng(1))
    out, _ = crop_tile([inst], "center")
    assert out[0].origin_px is None
    assert out[0].mask.any()


def test_crop_random_offsets_in_range():
    rng = np.random.default_rng(2)
    inst = _fake((10.0, 10.0), rng)
    offs = np.array([crop_tile([inst], "random", rng)[1] for _ in range(400)])
    assert offs.min() == 0 and offs.max() == 128


def test_sample_origins_inside():
    o = sample_origins(50, np.random.default_rng(0))
    assert o.min() >= 0 and o.max() < 384


def test_simulate_tile_count():
    cfg = replace(sample_config(np.random.default_rng(3)), num_plumes=2)
    plumes = simulate_tile(cfg, np.random.default_rng(4))
    assert len(plumes) == 2
    assert all(p.conc.shape == (384, 384) for p in plumes)
