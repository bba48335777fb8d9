"""Radiance normalisation: solar blackbody scaling, cross-track destriping, band exclusion."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import constants
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .cube import RadianceCube, as_cube
from .exceptions import DomainError, LoadError
from .spectral_lut import BandSRF, WavelengthGrid, default_grid

SUN_TEMPERATURE_K = 5778.0
SOLAR_SCALE_CONSTANT = 4.0e-7
N_EDGE_BANDS = 3
N_OSF_BANDS = 7

# PLACEHOLDER: the exact order-sorting-filter band indices of the real
# instrument are not published alongside the method.  These seven indices
# (around 1.33 um on a 285-band EMIT-like grid) only keep the pipeline
# runnable; set ``osf_band_indices`` from instrument documentation.
DEFAULT_OSF_BANDS = (124, 125, 126, 127, 128, 129, 130)


def planck_spectral_radiance(lambda_um, temp_k):
    """Blackbody spectral radiance in W m^-2 sr^-1 um^-1."""
    lam = np.asarray(lambda_um, dtype=float)
    t = np.asarray(temp_k, dtype=float)
    if np.any(lam <= 0) or np.any(t <= 0):
        raise DomainError("wavelength and temperature must be positive")
    lam_m = lam * 1e-6
    h, c, k = constants.h, constants.c, constants.k
    radiance = 2.0 * h * c**2 / lam_m**5 / np.expm1(h * c / (lam_m * k * t))
    return radiance * 1e-6


class SolarNormalizer(TransformerMixin, BaseEstimator):
    """Divide radiance by SRF-weighted solar blackbody irradiance factors.

    ``factors_`` holds the band-averaged blackbody radiance; radiance is
    divided by ``factors_ * scale_constant`` to land roughly in [0, 1].
    """

    def __init__(self, srfs: Sequence[BandSRF] = (), grid: WavelengthGrid | None = None,
                 temperature_k: float = SUN_TEMPERATURE_K,
                 scale_constant: float = SOLAR_SCALE_CONSTANT):
        self.srfs = srfs
        self.grid = grid
        self.temperature_k = temperature_k
        self.scale_constant = scale_constant

    def fit(self, X=None, y=None):
        if not self.srfs:
            raise DomainError("SolarNormalizer needs at least one band SRF")
        grid = self.grid if self.grid is not None else default_grid()
        bb = planck_spectral_radiance(grid.wavelengths, self.temperature_k)
        factors = np.empty(len(self.srfs))
        for b, srf in enumerate(self.srfs):
            sl, w = srf.weights(grid, band=b)
            factors[b] = np.dot(w, bb[sl])
        self.factors_ = factors
        self.n_features_in_ = factors.size
        return self

    @property
    def divisors_(self):
        check_is_fitted(self, "factors_")
        return self.factors_ * self.scale_constant

    def _apply(self, X, op):
        check_is_fitted(self, "factors_")
        cube = X if isinstance(X, RadianceCube) else None
        values = cube.values if cube is not None else np.asarray(X, dtype=float)
        if values.shape[-1] != self.factors_.size:
            raise DomainError(
                f"input has {values.shape[-1]} bands, normalizer has {self.factors_.size}"
            )
        out = op(values, self.divisors_)
        return cube.with_values(out) if cube is not None else out

    def transform(self, X):
        return self._apply(X, np.divide)

    def inverse_transform(self, X):
        return self._apply(X, np.multiply)

    def save_factors(self, path):
        check_is_fitted(self, "factors_")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["band", "factor"])
            for b, f in enumerate(self.factors_):
                writer.writerow([b, repr(float(f))])

    @classmethod
    def from_factors_file(cls, path, scale_constant: float = SOLAR_SCALE_CONSTANT):
        rows = _read_csv_rows(path, 2)
        bands = [int(r[0]) for r in rows]
        if bands != list(range(len(bands))):
            raise LoadError(f"{path}: bands must be listed 0..n-1 in order")
        est = cls(scale_constant=scale_constant)
        est.factors_ = np.array([float(r[1]) for r in rows])
        if np.any(est.factors_ <= 0):
            raise LoadError(f"{path}: factors must be positive")
        est.n_features_in_ = est.factors_.size
        return est


def build_solar_normalizer(srfs: Sequence[BandSRF], grid: WavelengthGrid | None = None,
                           **kwargs) -> SolarNormalizer:
    return SolarNormalizer(srfs, grid, **kwargs).fit()


# --------------------------------------------------------------------------
# cross-track correction

@dataclass(frozen=True, eq=False)
class CrossTrackTable:
    """Mean radiance per (band, cross-track position); NaN marks undefined entries."""

    means: np.ndarray

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float)
        if means.ndim != 2:
            raise DomainError("cross-track means must be (bands, positions)")
        object.__setattr__(self, "means", means)

    @property
    def global_means(self) -> np.ndarray:
        return np.nanmean(self.means, axis=1)

    @property
    def n_bands(self) -> int:
        return self.means.shape[0]

    @property
    def n_positions(self) -> int:
        return self.means.shape[1]

    @classmethod
    def from_cubes(cls, cubes: Iterable[RadianceCube], n_positions: int | None = None):
        """Accumulate per-position band means over a set of cubes."""
        sums = counts = None
        for cube in cubes:
            cube = as_cube(cube)
            ids = cube.crosstrack_ids
            n_pos = max(int(ids.max()) + 1, n_positions or 0)
            col_sums = cube.values.sum(axis=0)  # (cols, bands)
            if sums is None:
                sums = np.zeros((cube.bands, n_pos))
                counts = np.zeros(n_pos)
            elif n_pos > sums.shape[1]:
                sums = np.pad(sums, ((0, 0), (0, n_pos - sums.shape[1])))
                counts = np.pad(counts, (0, n_pos - counts.size))
            if cube.bands != sums.shape[0]:
                raise DomainError("cubes disagree on band count")
            np.add.at(sums.T, ids, col_sums)
            np.add.at(counts, ids, cube.rows)
        if sums is None:
            raise DomainError("no cubes supplied")
        with np.errstate(invalid="ignore", divide="ignore"):
            means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
        return cls(means)

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["band", "position", "mean"])
            for b in range(self.n_bands):
                for p in range(self.n_positions):
                    if np.isfinite(self.means[b, p]):
                        writer.writerow([b, p, repr(float(self.means[b, p]))])

    @classmethod
    def load_csv(cls, path):
        rows = _read_csv_rows(path, 3)
        b = np.array([int(r[0]) for r in rows])
        p = np.array([int(r[1]) for r in rows])
        means = np.full((b.max() + 1, p.max() + 1), np.nan)
        means[b, p] = [float(r[2]) for r in rows]
        return cls(means)


def crosstrack_correct(cube: RadianceCube, table: CrossTrackTable) -> RadianceCube:
    """Scale each pixel by ``global_mean[band] / mean[band, position]``."""
    cube = as_cube(cube)
    if table.n_bands != cube.bands:
        raise DomainError(f"table has {table.n_bands} bands, cube has {cube.bands}")
    ids = cube.crosstrack_ids
    if np.any(ids < 0) or np.any(ids >= table.n_positions):
        bad = int(ids[(ids < 0) | (ids >= table.n_positions)][0])
        raise DomainError(f"no cross-track table entry for (band 0, position {bad})")
    means = table.means[:, ids]  # (bands, cols)
    missing = ~np.isfinite(means)
    if missing.any():
        b, c = np.argwhere(missing)[0]
        raise DomainError(f"no cross-track table entry for (band {b}, position {ids[c]})")
    if np.any(means == 0):
        b, c = np.argwhere(means == 0)[0]
        raise DomainError(f"zero cross-track mean at (band {b}, position {ids[c]})")
    gain = (table.global_means[:, None] / means).T  # (cols, bands)
    return cube.with_values(cube.values * gain[None, :, :])


class CrossTrackCorrector(TransformerMixin, BaseEstimator):
    """Fit a :class:`CrossTrackTable` from cubes (or take a precomputed one) and destripe."""

    def __init__(self, table: CrossTrackTable | None = None):
        self.table = table

    def fit(self, X, y=None):
        cubes = [X] if isinstance(X, RadianceCube) or np.ndim(X) == 3 else list(X)
        self.table_ = self.table if self.table is not None else CrossTrackTable.from_cubes(cubes)
        return self

    def transform(self, X):
        check_is_fitted(self, "table_")
        return crosstrack_correct(as_cube(X), self.table_)


# --------------------------------------------------------------------------
# band exclusion

def excluded_bands(n_bands: int, osf_band_indices: Iterable[int]) -> np.ndarray:
    osf = sorted(set(int(i) for i in osf_band_indices))
    if not osf:
        return np.array([], dtype=int)
    if len(osf) != N_OSF_BANDS:
        raise DomainError(f"expected {N_OSF_BANDS} order-sorting-filter bands, got {len(osf)}")
    edges = set(range(N_EDGE_BANDS)) | set(range(n_bands - N_EDGE_BANDS, n_bands))
    overlap = edges.intersection(osf)
    if overlap or osf[0] < N_EDGE_BANDS or osf[-1] > n_bands - N_EDGE_BANDS - 1:
        raise DomainError(
            f"order-sorting-filter bands {sorted(overlap) or osf} overlap the edge bands"
        )
    return np.array(sorted(edges | set(osf)))


def select_bands(cube, osf_band_indices: Iterable[int] = DEFAULT_OSF_BANDS):
    """Drop the order-sorting-filter bands and three bands at each spectral edge.

    An empty ``osf_band_indices`` disables exclusion altogether.
    """
    is_cube = isinstance(cube, RadianceCube)
    values = cube.values if is_cube else np.asarray(cube)
    drop = excluded_bands(values.shape[-1], osf_band_indices)
    keep = np.setdiff1d(np.arange(values.shape[-1]), drop)
    out = values[..., keep]
    if not is_cube:
        return out
    wl = cube.wavelengths[keep] if cube.wavelengths is not None else None
    return RadianceCube(out, cube.crosstrack_ids, wl)


class BandSelector(TransformerMixin, BaseEstimator):
    def __init__(self, osf_band_indices=DEFAULT_OSF_BANDS):
        self.osf_band_indices = osf_band_indices

    def fit(self, X, y=None):
        n = (X.bands if isinstance(X, RadianceCube) else np.shape(X)[-1])
        drop = excluded_bands(n, self.osf_band_indices)
        self.kept_bands_ = np.setdiff1d(np.arange(n), drop)
        self.n_features_in_ = n
        return self

    def transform(self, X):
        check_is_fitted(self, "kept_bands_")
        return select_bands(X, self.osf_band_indices)


def _read_csv_rows(path, ncols):
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    if rows and not _is_number(rows[0][0]):
        rows = rows[1:]
    if any(len(r) != ncols for r in rows):
        raise LoadError(f"{path}: expected {ncols} columns per row")
    return rows


def _is_number(s):
    try:
        float(s)
        return True
    except ValueError:
        return False
