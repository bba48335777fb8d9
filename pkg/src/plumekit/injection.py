"""Scale unit-rate plumes and inject their absorption into radiance cubes."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cube import RadianceCube, as_cube
from .exceptions import DomainError
from .puff_sim import PlumeInstance, mmol_to_ppm_m
from .spectral_lut import MethaneLUT, path_length_multiplier, query_ratio

CH4_MOLAR_MASS_G = 16.04
KG_PER_HR_PER_MOL_S = 3600.0 * (CH4_MOLAR_MASS_G / 1000.0)  # 57.744
TRAINING_INTENSITY_BINS = (100.0, 200.0, 400.0, 800.0, 1600.0, 3200.0, 6400.0, 12800.0)
EVAL_EMISSION_RANGE = (100.0, 10000.0)


def kg_per_hr_to_mol_per_s(rate):
    r = np.asarray(rate, dtype=float)
    if np.any(r < 0):
        raise DomainError(f"emission rate must be non-negative, got {rate}")
    out = r / KG_PER_HR_PER_MOL_S
    return float(out) if out.ndim == 0 else out


def mol_per_s_to_kg_per_hr(rate):
    out = np.asarray(rate, dtype=float) * KG_PER_HR_PER_MOL_S
    return float(out) if out.ndim == 0 else out


def scale_plume(plume: PlumeInstance, rate_mol_s: float) -> np.ndarray:
    """ppm-m enhancement of a unit-rate plume emitting ``rate_mol_s``."""
    if rate_mol_s < 0:
        raise DomainError("emission rate must be non-negative")
    return mmol_to_ppm_m(plume.conc) * float(rate_mol_s)


def rate_for_peak(plume: PlumeInstance, target_ppm_m: float) -> float:
    """Emission rate (mol/s) at which the plume's maximum pixel equals ``target_ppm_m``."""
    peak = float(mmol_to_ppm_m(plume.conc).max())
    if peak <= 0:
        raise DomainError("plume has no enhancement to scale")
    return target_ppm_m / peak


def sample_training_intensity(rng) -> float:
    """Uniform over the 7 intensity bins, then uniform inside the chosen bin."""
    b = int(rng.integers(len(TRAINING_INTENSITY_BINS) - 1))
    return float(rng.uniform(TRAINING_INTENSITY_BINS[b], TRAINING_INTENSITY_BINS[b + 1]))


def sample_eval_emission(rng, size=None):
    lo, hi = EVAL_EMISSION_RANGE
    out = np.exp(rng.uniform(np.log(lo), np.log(hi), size=size))
    return float(out) if size is None else out


@dataclass(frozen=True, eq=False)
class InjectionSpec:
    plume: PlumeInstance
    emission_kg_per_hr: float
    solar_zenith_deg: float | np.ndarray = 0.0
    sat_zenith_deg: float | np.ndarray = 0.0

    def __post_init__(self):
        if not self.emission_kg_per_hr >= 0:
            raise DomainError("emission rate must be non-negative")
        path_length_multiplier(self.solar_zenith_deg, self.sat_zenith_deg)

    @property
    def enhancement_ppm_m(self) -> np.ndarray:
        return scale_plume(self.plume, kg_per_hr_to_mol_per_s(self.emission_kg_per_hr))


def inject_enhancement(cube, enhancement_ppm_m, lut: MethaneLUT, plm=2.0):
    """Multiply radiance by the LUT transmittance ratio of a ppm-m enhancement grid.

    ``plm`` may be a scalar or a per-pixel raster.  Pixels with zero
    enhancement are returned bit-identical.
    """
    cube = as_cube(cube)
    enh = np.asarray(enhancement_ppm_m, dtype=float)
    if enh.shape != (cube.rows, cube.cols):
        raise DomainError(f"enhancement grid {enh.shape} does not match cube "
                          f"{(cube.rows, cube.cols)}")
    if np.any(~np.isfinite(enh)) or np.any(enh < 0):
        raise DomainError("enhancement must be finite and non-negative")
    if lut.n_bands != cube.bands:
        raise DomainError(f"LUT has {lut.n_bands} bands, cube has {cube.bands}")
    out = cube.values.copy()
    hit = enh > 0
    if hit.any():
        plm_px = np.broadcast_to(np.asarray(plm, dtype=float), enh.shape)[hit]
        out[hit] = out[hit] * query_ratio(lut, enh[hit], plm_px)
    return cube.with_values(out)


def inject(cube, specs: Sequence[InjectionSpec], lut: MethaneLUT) -> RadianceCube:
    """Sum co-registered plume enhancements, then apply Beer-Lambert absorption once."""
    cube = as_cube(cube)
    if not specs:
        return cube
    total = np.zeros((cube.rows, cube.cols))
    for spec in specs:
        enh = spec.enhancement_ppm_m
        if enh.shape != total.shape:
            raise DomainError(f"plume grid {enh.shape} does not match cube {total.shape}")
        total += enh
    plm = path_length_multiplier(specs[0].solar_zenith_deg, specs[0].sat_zenith_deg)
    for spec in specs[1:]:
        other = path_length_multiplier(spec.solar_zenith_deg, spec.sat_zenith_deg)
        if not np.allclose(other, plm):
            raise DomainError("all plumes injected into one cube must share viewing geometry")
    return inject_enhancement(cube, total, lut, plm)


def choose_plume_subset(n_available: int, rng, max_plumes: int = 10) -> np.ndarray:
    """Indices of a uniformly chosen subset of 1..max_plumes plumes."""
    if n_available < 1:
        raise DomainError("no plumes available")
    k = int(rng.integers(1, min(max_plumes, n_available) + 1))
    return np.sort(rng.choice(n_available, size=k, replace=False))
