import json

import numpy as np
import pytest

from plumekit.exceptions import LoadError
from plumekit.io import read_raster, read_tile, write_geojson, write_raster, write_tile
from plumekit.puff_sim import PlumeInstance
from plumekit.scenes import flat_scene, synthetic_scene


@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.uint8, np.int32])
def test_raster_round_trip(tmp_path, rng, dtype):
    data = (rng.uniform(0, 100, (3, 7, 5))).astype(dtype)
    gt = (500000.0, 60.0, 0.0, 4000000.0, 0.0, -60.0)
    write_raster(tmp_path / "r.rst", data, gt)
    r = read_raster(tmp_path / "r.rst")
    np.testing.assert_array_equal(r.data, data)
    assert r.geotransform == gt
    assert r.pixel_to_geo(0, 0) == (500030.0, 3999970.0)


def test_raster_rejects_garbage(tmp_path):
    (tmp_path / "x").write_bytes(b"nope")
    with pytest.raises(LoadError):
        read_raster(tmp_path / "x")
    with pytest.raises(LoadError):
        read_raster(tmp_path / "missing")
    write_raster(tmp_path / "t", np.zeros((1, 4, 4), np.float32))
    blob = (tmp_path / "t").read_bytes()
    (tmp_path / "t").write_bytes(blob[:-4])
    with pytest.raises(LoadError, match="payload"):
        read_raster(tmp_path / "t")


def test_tile_round_trip(tmp_path, rng):
    conc = rng.uniform(0, 1, (12, 10)).astype(np.float32).astype(float)
    p1 = PlumeInstance(conc, conc > 0.5, (3.0, 4.0), (0.0, 2500.0), released_mol=5.0,
                       active_s=2000.0, wind_speed_mps=3.1)
    p2 = PlumeInstance(conc * 0, conc > 2, None, (100.0, 900.0))
    rad = rng.uniform(size=(12, 10, 4)).astype(np.float32)
    write_tile(tmp_path / "t.tile", [p1, p2], 60.0, rad, {"tile_id": "a"})
    t = read_tile(tmp_path / "t.tile")
    assert len(t.plumes) == 2 and t.manifest == {"tile_id": "a"}
    np.testing.assert_array_equal(t.plumes[0].conc, conc)
    np.testing.assert_array_equal(t.plumes[0].mask, p1.mask)
    assert t.plumes[0].origin_px == (3.0, 4.0) and t.plumes[1].origin_px is None
    assert t.plumes[0].released_mol == 5.0
    np.testing.assert_array_equal(t.radiance, rad)


def test_tile_truncated(tmp_path, rng):
    conc = rng.uniform(size=(8, 8))
    write_tile(tmp_path / "t", [PlumeInstance(conc, conc > 0.5, (1, 1), (0, 1))])
    blob = (tmp_path / "t").read_bytes()
    (tmp_path / "t").write_bytes(blob[:-3])
    with pytest.raises(LoadError):
        read_tile(tmp_path / "t")


def test_geojson(tmp_path):
    feat = {"type": "Feature", "geometry": {"type": "Point", "coordinates": [1, 2]},
            "properties": {"peak": np.float64(55.0), "n": np.int64(3)}}
    write_geojson(tmp_path / "g.json", [feat], {"water_filter_applied": False})
    fc = json.loads((tmp_path / "g.json").read_text())
    assert fc["features"][0]["properties"] == {"peak": 55.0, "n": 3}
    with pytest.raises(ValueError):
        write_geojson(tmp_path / "bad.json", [{"x": float("nan")}])


def test_scenes_shapes(swir_srfs, pair, rng):
    cube, water = synthetic_scene((32, 40), swir_srfs, pair, rng, water_fraction=0.2)
    assert cube.values.shape == (32, 40, len(swir_srfs))
    assert np.all(cube.values > 0)
    assert 0.1 < water.mean() < 0.3
    flat = flat_scene((4, 4), swir_srfs, pair)
    assert np.ptp(flat.values, axis=(0, 1)).max() == 0
