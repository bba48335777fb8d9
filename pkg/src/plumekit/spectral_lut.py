"""Methane transmittance-ratio lookup table.

The table stores, per instrument band, the log of the ratio between the
band-integrated transmittance of an atmosphere with added methane and the
band-integrated transmittance of the reference atmosphere, on a grid of
(added column concentration, path-length multiplier).  Queries interpolate
bilinearly in log space.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .exceptions import DomainError, GridCoverageError, LoadError

REFERENCE_CONC_PPM_M = 150.0
TRANSMITTANCE_FLOOR = 1e-12
SRF_TRUNCATION_SIGMA = 4.0
FWHM_TO_SIGMA = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))

DEFAULT_CONC_AXIS = np.concatenate(
    [np.arange(0, 1000, 100), np.arange(1000, 10000, 1000), [100000]]
).astype(float)
DEFAULT_PLM_AXIS = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 100.0])

_LUT_MAGIC = b"PKLUT\x00\x00\x00"
_LUT_VERSION = 1


@dataclass(frozen=True)
class WavelengthGrid:
    """Uniform wavelength sampling in micrometres."""

    start_um: float
    step_um: float
    count: int

    def __post_init__(self):
        if not self.step_um > 0:
            raise DomainError(f"step_um must be positive, got {self.step_um}")
        if self.count < 2:
            raise DomainError(f"count must be >= 2, got {self.count}")

    @property
    def stop_um(self) -> float:
        return self.start_um + self.step_um * (self.count - 1)

    @property
    def wavelengths(self) -> np.ndarray:
        return self.start_um + self.step_um * np.arange(self.count)

    @classmethod
    def from_samples(cls, wavelengths, rtol: float = 1e-6) -> "WavelengthGrid":
        wl = np.asarray(wavelengths, dtype=float)
        if wl.ndim != 1 or wl.size < 2:
            raise DomainError("need at least two wavelength samples")
        steps = np.diff(wl)
        step = float(np.mean(steps))
        if not np.allclose(steps, step, rtol=rtol, atol=1e-12):
            raise DomainError("wavelength samples are not uniformly spaced")
        return cls(float(wl[0]), step, int(wl.size))


@dataclass(frozen=True, eq=False)
class TransmittancePair:
    """Reference and methane-added (+150 ppm-m) transmittance spectra."""

    grid: WavelengthGrid
    t_std: np.ndarray
    t_ch4_150: np.ndarray

    def __post_init__(self):
        t_std = np.asarray(self.t_std, dtype=float)
        t_ch4 = np.asarray(self.t_ch4_150, dtype=float)
        n = self.grid.count
        if t_std.shape != (n,) or t_ch4.shape != (n,):
            raise DomainError(f"transmittance arrays must have shape ({n},)")
        for name, t in (("t_std", t_std), ("t_ch4_150", t_ch4)):
            if np.any(t <= 0) or np.any(t > 1):
                raise DomainError(f"{name} values must lie in (0, 1]")
        if np.any(t_ch4 > t_std + 1e-9):
            raise DomainError("methane transmittance exceeds the reference transmittance")
        object.__setattr__(self, "t_std", t_std)
        object.__setattr__(self, "t_ch4_150", t_ch4)


@dataclass(frozen=True)
class BandSRF:
    """Gaussian spectral response of one band."""

    center_um: float
    fwhm_um: float

    def __post_init__(self):
        if not self.fwhm_um > 0:
            raise DomainError(f"fwhm_um must be positive, got {self.fwhm_um}")

    @property
    def sigma_um(self) -> float:
        return self.fwhm_um * FWHM_TO_SIGMA

    def weights(self, grid: WavelengthGrid, truncate: float | None = SRF_TRUNCATION_SIGMA,
                band: int | None = None):
        """Return ``(slice, weights)`` of the normalised response on ``grid``.

        With ``truncate=None`` the Gaussian is evaluated on the full grid.
        """
        sigma = self.sigma_um
        if truncate is None:
            sl = slice(0, grid.count)
        else:
            lo = self.center_um - truncate * sigma
            hi = self.center_um + truncate * sigma
            if lo < grid.start_um or hi > grid.stop_um:
                label = f"band {band}" if band is not None else "band"
                raise GridCoverageError(
                    f"{label} centred at {self.center_um:.5f} um needs support "
                    f"[{lo:.5f}, {hi:.5f}] um outside grid "
                    f"[{grid.start_um:.5f}, {grid.stop_um:.5f}] um"
                )
            i0 = int(np.ceil((lo - grid.start_um) / grid.step_um - 1e-9))
            i1 = int(np.floor((hi - grid.start_um) / grid.step_um + 1e-9)) + 1
            sl = slice(max(i0, 0), min(i1, grid.count))
        wl = grid.start_um + grid.step_um * np.arange(sl.start, sl.stop)
        w = np.exp(-0.5 * ((wl - self.center_um) / sigma) ** 2)
        total = w.sum()
        if total <= 0:
            raise GridCoverageError(f"band {band} response vanishes on the grid")
        return sl, w / total


@dataclass(frozen=True, eq=False)
class MethaneLUT:
    """Per-band log transmittance-ratio table over (concentration, path multiplier)."""

    conc_axis: np.ndarray
    plm_axis: np.ndarray
    log_ratio: np.ndarray  # (band, conc, plm)

    def __post_init__(self):
        conc = np.asarray(self.conc_axis, dtype=float)
        plm = np.asarray(self.plm_axis, dtype=float)
        table = np.asarray(self.log_ratio, dtype=float)
        _check_axis(conc, "conc_axis")
        _check_axis(plm, "plm_axis")
        if table.ndim != 3 or table.shape[1:] != (conc.size, plm.size):
            raise DomainError(
                f"log_ratio shape {table.shape} does not match axes ({conc.size}, {plm.size})"
            )
        for arr in (conc, plm, table):
            arr.setflags(write=False)
        object.__setattr__(self, "conc_axis", conc)
        object.__setattr__(self, "plm_axis", plm)
        object.__setattr__(self, "log_ratio", table)

    @property
    def n_bands(self) -> int:
        return self.log_ratio.shape[0]

    def __eq__(self, other):
        if not isinstance(other, MethaneLUT):
            return NotImplemented
        return (
            np.array_equal(self.conc_axis, other.conc_axis)
            and np.array_equal(self.plm_axis, other.plm_axis)
            and np.array_equal(self.log_ratio, other.log_ratio)
        )


def _check_axis(axis: np.ndarray, name: str):
    if axis.ndim != 1 or axis.size < 2:
        raise DomainError(f"{name} needs at least two nodes")
    if np.any(np.diff(axis) <= 0):
        raise DomainError(f"{name} must be strictly increasing")


def path_length_multiplier(solar_zenith_deg, sat_zenith_deg):
    """Two-way slant path relative to a single vertical pass."""
    sza = np.asarray(solar_zenith_deg, dtype=float)
    vza = np.asarray(sat_zenith_deg, dtype=float)
    for name, z in (("solar", sza), ("satellite", vza)):
        if np.any(~np.isfinite(z)) or np.any(z < 0) or np.any(z >= 90):
            raise DomainError(f"{name} zenith must lie in [0, 90) degrees")
    plm = 1.0 / np.cos(np.deg2rad(sza)) + 1.0 / np.cos(np.deg2rad(vza))
    return float(plm) if plm.ndim == 0 else plm


def build_lut(pair: TransmittancePair, srfs: Sequence[BandSRF],
              conc_axis=DEFAULT_CONC_AXIS, plm_axis=DEFAULT_PLM_AXIS,
              truncate: float | None = SRF_TRUNCATION_SIGMA) -> MethaneLUT:
    """Band-integrate scaled transmittances into a :class:`MethaneLUT`.

    For added concentration ``x`` and path multiplier ``p`` the methane
    transmittance is ``t_std * (t_ch4_150 / t_std) ** (x / 150)``; both it
    and the reference are raised to ``p`` before SRF weighting.
    """
    conc = np.asarray(conc_axis, dtype=float)
    plm = np.asarray(plm_axis, dtype=float)
    _check_axis(conc, "conc_axis")
    _check_axis(plm, "plm_axis")
    if conc[0] != 0:
        raise DomainError("conc_axis must start at 0")
    if plm[0] < 1:
        raise DomainError("plm_axis values must be >= 1")

    log_std = np.log(np.maximum(pair.t_std, TRANSMITTANCE_FLOOR))
    log_rel = np.log(np.maximum(pair.t_ch4_150, TRANSMITTANCE_FLOOR)) - log_std
    # (conc, plm) exponent multiplying the relative methane optical depth
    scale = conc[:, None] * plm[None, :] / REFERENCE_CONC_PPM_M

    table = np.empty((len(srfs), conc.size, plm.size))
    for b, srf in enumerate(srfs):
        sl, w = srf.weights(pair.grid, truncate=truncate, band=b)
        ls = log_std[sl]
        lr = log_rel[sl]
        den = logsumexp(plm[:, None] * ls[None, :], b=w[None, :], axis=-1)
        num = logsumexp(
            plm[None, :, None] * ls[None, None, :] + scale[:, :, None] * lr[None, None, :],
            b=w[None, None, :], axis=-1,
        )
        table[b] = num - den[None, :]
    # numerator and denominator coincide at zero added methane
    table[:, conc == 0, :] = 0.0
    np.minimum(table, 0.0, out=table)
    return MethaneLUT(conc, plm, table)


def _axis_weights(axis: np.ndarray, values: np.ndarray):
    v = np.clip(values, axis[0], axis[-1])
    i = np.clip(np.searchsorted(axis, v, side="right") - 1, 0, axis.size - 2)
    t = (v - axis[i]) / (axis[i + 1] - axis[i])
    return i, t


def query_log_ratio(lut: MethaneLUT, conc, plm) -> np.ndarray:
    """Bilinear log-ratio interpolation; result has shape ``broadcast(conc, plm) + (bands,)``.

    Queries beyond the last node of either axis are clamped to that node.
    """
    c = np.asarray(conc, dtype=float)
    p = np.asarray(plm, dtype=float)
    if np.any(~np.isfinite(c)) or np.any(c < 0):
        raise DomainError("concentration must be finite and non-negative")
    if np.any(~np.isfinite(p)) or np.any(p < lut.plm_axis[0]):
        raise DomainError(f"path-length multiplier must be >= {lut.plm_axis[0]}")
    c, p = np.broadcast_arrays(c, p)
    ic, tc = _axis_weights(lut.conc_axis, c)
    ip, tp = _axis_weights(lut.plm_axis, p)
    table = lut.log_ratio
    l00 = table[:, ic, ip]
    l10 = table[:, ic + 1, ip]
    l01 = table[:, ic, ip + 1]
    l11 = table[:, ic + 1, ip + 1]
    out = ((1 - tc) * (1 - tp)) * l00 + (tc * (1 - tp)) * l10 \
        + ((1 - tc) * tp) * l01 + (tc * tp) * l11
    return np.moveaxis(out, 0, -1)


def query_ratio(lut: MethaneLUT, conc, plm) -> np.ndarray:
    """Per-band transmittance-ratio multiplier in (0, 1]."""
    return np.exp(query_log_ratio(lut, conc, plm))


# --------------------------------------------------------------------------
# bundled synthetic spectra and instrument

# (centre um, half-span um, line spacing um, peak optical depth at 150 ppm-m)
_CH4_MANIFOLDS = (
    (1.666, 0.040, 0.0045, 0.020),
    (2.200, 0.045, 0.0050, 0.012),
    (2.320, 0.070, 0.0053, 0.045),
)
_LINE_HALF_WIDTH_UM = 0.0004
_LINE_CUTOFF_UM = 0.02
# broad water-vapour style bands in the reference atmosphere: (centre, width, depth)
_H2O_BANDS = ((0.94, 0.020, 0.6), (1.14, 0.025, 0.8), (1.38, 0.040, 4.0),
              (1.87, 0.050, 4.0), (2.60, 0.080, 3.0))


def _lorentz_manifold(wl: np.ndarray, center, half_span, spacing, peak_tau):
    tau = np.zeros_like(wl)
    lines = np.arange(center - half_span, center + half_span + 1e-12, spacing)
    for c in lines:
        envelope = np.exp(-0.5 * ((c - center) / (0.5 * half_span)) ** 2)
        near = np.abs(wl - c) <= _LINE_CUTOFF_UM
        d = wl[near] - c
        g = _LINE_HALF_WIDTH_UM
        tau[near] += peak_tau * envelope * g * g / (d * d + g * g)
    return tau


def synthetic_methane_tau(wavelengths) -> np.ndarray:
    """Optical depth of a 150 ppm-m methane column on the given wavelengths."""
    wl = np.asarray(wavelengths, dtype=float)
    tau = np.zeros_like(wl)
    for manifold in _CH4_MANIFOLDS:
        tau += _lorentz_manifold(wl, *manifold)
    return tau


def synthetic_transmittance(grid: WavelengthGrid | None = None,
                            background_ch4_factor: float = 0.0) -> TransmittancePair:
    """Small line-by-line style transmittance pair for tests and demos.

    Lorentzian methane lines sit at the 1.67, 2.2 and 2.3 um manifolds; the
    reference atmosphere adds a smooth continuum, broad water bands and
    ``background_ch4_factor`` times the 150 ppm-m methane optical depth.
    """
    if grid is None:
        grid = default_grid()
    wl = grid.wavelengths
    tau_ch4 = synthetic_methane_tau(wl)
    tau_std = 0.08 * (0.5 / wl) ** 4 + 0.05 + background_ch4_factor * tau_ch4
    for c, w, depth in _H2O_BANDS:
        tau_std = tau_std + depth * np.exp(-0.5 * ((wl - c) / w) ** 2)
    t_std = np.exp(-tau_std)
    t_ch4 = np.exp(-(tau_std + tau_ch4))
    return TransmittancePair(grid, t_std, t_ch4)


def default_grid() -> WavelengthGrid:
    """0.36-2.52 um at 0.00025 um, wide enough for EMIT-like edge bands."""
    return WavelengthGrid(0.36, 0.00025, 8641)


def emit_like_srfs(n_bands: int = 285, start_um: float = 0.381, stop_um: float = 2.493,
                   fwhm_um: float = 0.0085) -> list[BandSRF]:
    centers = np.linspace(start_um, stop_um, n_bands)
    return [BandSRF(float(c), fwhm_um) for c in centers]


# --------------------------------------------------------------------------
# file formats

def load_transmittance_file(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a two-column ``wavelength_um transmittance`` text file."""
    try:
        data = np.loadtxt(path, comments="#", ndmin=2)
    except (OSError, ValueError) as exc:
        raise LoadError(f"cannot read transmittance file {path}: {exc}") from exc
    if data.shape[1] != 2:
        raise LoadError(f"{path}: expected two columns, got {data.shape[1]}")
    return data[:, 0], data[:, 1]


def load_transmittance_pair(path_std, path_ch4) -> TransmittancePair:
    wl_std, t_std = load_transmittance_file(path_std)
    wl_ch4, t_ch4 = load_transmittance_file(path_ch4)
    if wl_std.shape != wl_ch4.shape or not np.allclose(wl_std, wl_ch4, rtol=0, atol=1e-9):
        raise LoadError("reference and methane transmittances use different wavelengths")
    return TransmittancePair(WavelengthGrid.from_samples(wl_std), t_std, t_ch4)


def save_transmittance_file(path, wavelengths, transmittance):
    np.savetxt(path, np.column_stack([wavelengths, transmittance]), fmt="%.8f %.12e",
               header="wavelength_um transmittance")


def load_srfs(path) -> list[BandSRF]:
    """Read a CSV with ``center_um, fwhm_um`` columns (header optional)."""
    srfs = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                center, fwhm = float(row[0]), float(row[1])
            except ValueError:
                if srfs:
                    raise LoadError(f"{path}: malformed row {row}")
                continue  # header
            srfs.append(BandSRF(center, fwhm))
    if not srfs:
        raise LoadError(f"{path}: no bands found")
    return srfs


def save_srfs(path, srfs: Sequence[BandSRF]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["center_um", "fwhm_um"])
        for s in srfs:
            writer.writerow([repr(s.center_um), repr(s.fwhm_um)])


def lut_to_bytes(lut: MethaneLUT) -> bytes:
    header = _LUT_MAGIC + struct.pack(
        "<IIII", _LUT_VERSION, lut.n_bands, lut.conc_axis.size, lut.plm_axis.size
    )
    return b"".join([
        header,
        lut.conc_axis.astype("<f8").tobytes(),
        lut.plm_axis.astype("<f8").tobytes(),
        np.ascontiguousarray(lut.log_ratio).astype("<f8").tobytes(),
    ])


def lut_from_bytes(blob: bytes) -> MethaneLUT:
    head = len(_LUT_MAGIC) + 16
    if len(blob) < head or blob[: len(_LUT_MAGIC)] != _LUT_MAGIC:
        raise LoadError("not a methane LUT blob (bad magic)")
    version, nb, nc, npl = struct.unpack("<IIII", blob[len(_LUT_MAGIC):head])
    if version != _LUT_VERSION:
        raise LoadError(f"unsupported LUT version {version}")
    expected = head + 8 * (nc + npl + nb * nc * npl)
    if len(blob) != expected:
        raise LoadError(f"LUT blob has {len(blob)} bytes, expected {expected}")
    off = head
    conc = np.frombuffer(blob, "<f8", nc, off).astype(float)
    off += 8 * nc
    plm = np.frombuffer(blob, "<f8", npl, off).astype(float)
    off += 8 * npl
    table = np.frombuffer(blob, "<f8", nb * nc * npl, off).astype(float).reshape(nb, nc, npl)
    return MethaneLUT(conc, plm, table)


def save_lut(lut: MethaneLUT, path):
    Path(path).write_bytes(lut_to_bytes(lut))


def load_lut(path) -> MethaneLUT:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read LUT {path}: {exc}") from exc
    return lut_from_bytes(blob)


__all__ = [
    "BandSRF", "DEFAULT_CONC_AXIS", "DEFAULT_PLM_AXIS", "MethaneLUT", "TransmittancePair",
    "WavelengthGrid", "build_lut", "default_grid", "emit_like_srfs", "load_lut",
    "load_srfs", "load_transmittance_pair", "path_length_multiplier", "query_log_ratio",
    "query_ratio", "save_lut", "save_srfs", "synthetic_transmittance",
]
