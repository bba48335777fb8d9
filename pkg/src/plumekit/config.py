"""Run configuration, seeded random sub-streams and deterministic dataset splits."""
from __future__ import annotations

import hashlib
import os
import zlib
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .exceptions import ConfigError

ENV_PREFIX = "PLUMEKIT_"
SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = 1
    out: str = "out"
    # inputs
    transmittance_std: str = ""
    transmittance_ch4: str = ""
    srf: str = ""
    lut: str = ""
    tiles: str = ""
    granule: str = ""
    swir_min_um: float = 1.5
    # thresholds
    plume_threshold: float = 0.4
    origin_threshold: float = 0.3
    peak_enh_ppm_m: float = 50.0
    d_cor_max: float = 0.4
    d_norm_max: float = 0.5
    fit_enh_override: float = 100.0
    # dataset
    split_train: float = 0.70
    split_val: float = 0.15
    split_test: float = 0.15
    # free-form simulator overrides (``sim.<field> = value``)
    sim: dict = field(default_factory=dict)

    def validate(self) -> "RunConfig":
        fr = self.split_fractions
        if any(f <= 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must be positive and sum to 1, got {fr}")
        for name in ("plume_threshold", "origin_threshold"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")
        for name in ("peak_enh_ppm_m", "d_cor_max", "d_norm_max", "fit_enh_override"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        return self

    @property
    def split_fractions(self):
        return (self.split_train, self.split_val, self.split_test)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name, raw):
    default = getattr(RunConfig(), name)
    try:
        if isinstance(default, bool):
            return str(raw).strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc
    return str(raw)


def _sim_value(raw: str):
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def load_config(path=None, env=None, overrides: dict | None = None) -> RunConfig:
    """File values, then ``PLUMEKIT_*`` environment variables, then explicit overrides."""
    raw = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                raw.update(parse_config_text(fh.read()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    env = os.environ if env is None else env
    for k, v in env.items():
        if k.startswith(ENV_PREFIX):
            key = k[len(ENV_PREFIX):].lower().replace("__", ".")
            raw[key] = v
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k] = v
    values, sim = {}, {}
    for k, v in raw.items():
        if k.startswith("sim."):
            sim[k[4:]] = _sim_value(str(v))
        elif k in _FIELDS and k != "sim":
            values[k] = _coerce(k, v)
        else:
            raise ConfigError(f"unknown config key {k!r}")
    return replace(RunConfig(), sim=sim, **values).validate()


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named sub-stream of the root seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


def _unit_hash(item_id: str, seed: int) -> float:
    h = hashlib.sha256(f"{seed}:{item_id}".encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big") / 2.0**64


def split_dataset(ids, fractions=(0.70, 0.15, 0.15), seed: int = 0,
                  names=SPLIT_NAMES) -> dict:
    """Hash-based split: an ``(id, seed)`` pair always lands in the same split."""
    fr = np.asarray(fractions, dtype=float)
    if fr.size != len(names) or np.any(fr <= 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be positive and sum to 1, got {tuple(fr)}")
    edges = np.cumsum(fr)[:-1]
    return {i: names[int(np.searchsorted(edges, _unit_hash(str(i), seed), side="right"))]
            for i in ids}
