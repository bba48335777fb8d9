import numpy as np
import pytest

from plumekit.config import RunConfig, load_config, rng_stream, split_dataset
from plumekit.exceptions import ConfigError


def test_defaults_valid():
    cfg = RunConfig().validate()
    assert cfg.split_fractions == (0.70, 0.15, 0.15)
    assert cfg.plume_threshold == 0.4 and cfg.origin_threshold == 0.3


def test_load_config_layers(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nseed = 7\nplume_threshold = 0.35\nsim.diffusivity = 45\n"
                 "out = results  # trailing\n")
    cfg = load_config(p, env={"PLUMEKIT_SEED": "9", "PLUMEKIT_SIM__DT_S": "2.5"})
    assert cfg.seed == 9 and cfg.plume_threshold == 0.35 and cfg.out == "results"
    assert cfg.sim == {"diffusivity": 45, "dt_s": 2.5}
    assert load_config(p, env={}, overrides={"seed": 3}).seed == 3


def test_load_config_errors(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("split_train = 0.8\n")
    with pytest.raises(ConfigError, match="sum to 1"):
        load_config(p, env={})
    p.write_text("nonsense = 1\n")
    with pytest.raises(ConfigError, match="unknown"):
        load_config(p, env={})
    p.write_text("no equals sign\n")
    with pytest.raises(ConfigError):
        load_config(p, env={})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg", env={})


def test_rng_streams_independent_and_reproducible():
    a = rng_stream(1, "sim").uniform(size=4)
    np.testing.assert_array_equal(a, rng_stream(1, "sim").uniform(size=4))
    assert not np.allclose(a, rng_stream(1, "crop").uniform(size=4))
    assert not np.allclose(a, rng_stream(2, "sim").uniform(size=4))


def test_split_dataset_uniform_and_stable():
    ids = [f"t{i}" for i in range(100_000)]
    s = split_dataset(ids, seed=0)
    counts = {k: sum(v == k for v in s.values()) for k in ("train", "val", "test")}
    assert abs(counts["train"] - 70_000) <= 1000
    assert abs(counts["val"] - 15_000) <= 1000
    assert abs(counts["test"] - 15_000) <= 1000
    assert split_dataset(["t5"], seed=0)["t5"] == s["t5"]
    other = split_dataset(ids[:2000], seed=1)
    assert sum(other[i] != s[i] for i in ids[:2000]) > 500
    with pytest.raises(ConfigError):
        split_dataset(ids[:3], fractions=(0.5, 0.3, 0.3))
