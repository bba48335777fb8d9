"""Spectral-fit plume vetting: in/out-of-plume pixel selection, enhancement fit, fit scores."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .cube import as_cube
from .exceptions import DomainError, NoBackgroundError
from .slot_match import hungarian_assign
from .spectral_lut import MethaneLUT, query_log_ratio, query_ratio

FIT_WINDOWS_UM = ((1.6, 1.8), (2.1, 2.45))
NONMETHANE_K_MAX = 1e-7
BG_RADIUS_PX = 200
BG_MAX_ENH_PPM_M = 30.0
TOP_EXCLUDE_FRAC = 0.01
N_TOP_PIXELS = 30
X_MAX_PPM_M = 20000.0
X_TOL_PPM_M = 0.1
D_COR_MAX = 0.4
D_NORM_MAX = 0.5
FIT_ENH_OVERRIDE = 100.0
D_COR_UNDEFINED = 2.0
_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True, eq=False)
class FitSample:
    in_pixels: np.ndarray  # (n, 2) row, col
    bg_pixels: np.ndarray  # (n, 2), bg_pixels[i] matched to in_pixels[i]
    in_mean: np.ndarray
    bg_mean: np.ndarray
    match_cost: float = 0.0


@dataclass(frozen=True, eq=False)
class FitResult:
    fit_enh: float
    d_cor: float
    d_norm: float
    obs_enh: float = float("nan")
    a0: float = 1.0
    a1: float = 0.0
    rho_obs: np.ndarray = field(default=None, repr=False)
    rho_fit: np.ndarray = field(default=None, repr=False)
    fit_wavelengths: np.ndarray = field(default=None, repr=False)
    n_in: int = 0
    n_bg: int = 0

    @property
    def valid(self) -> bool:
        return classify(self)


# --------------------------------------------------------------------------
# pixel selection

def select_in_pixels(mask, enh, top_exclude_frac: float = TOP_EXCLUDE_FRAC,
                     n_top: int = N_TOP_PIXELS) -> np.ndarray:
    """3x3 neighbourhoods of the strongest mask pixels after dropping the top 1%."""
    mask = np.asarray(mask, dtype=bool)
    enh = np.asarray(enh, dtype=float)
    if mask.shape != enh.shape:
        raise DomainError("mask and enhancement grids differ in shape")
    rr, cc = np.nonzero(mask)
    if rr.size == 0:
        raise DomainError("plume mask is empty")
    order = np.argsort(-enh[rr, cc], kind="stable")
    drop = int(np.floor(top_exclude_frac * rr.size))
    top = order[drop:drop + n_top]
    sel = np.zeros_like(mask)
    sel[rr[top], cc[top]] = True
    sel = ndimage.binary_dilation(sel, np.ones((3, 3), dtype=bool))
    return np.argwhere(sel)


def select_bg_pixels(mask, all_plume_masks: Sequence, enh, radius: int = BG_RADIUS_PX,
                     max_enh: float = BG_MAX_ENH_PPM_M) -> np.ndarray:
    """Clean pixels within ``radius`` of the plume mask, outside every plume mask."""
    mask = np.asarray(mask, dtype=bool)
    enh = np.asarray(enh, dtype=float)
    if not mask.any():
        raise DomainError("plume mask is empty")
    rr, cc = np.nonzero(mask)
    r0, r1 = max(rr.min() - radius, 0), min(rr.max() + radius + 1, mask.shape[0])
    c0, c1 = max(cc.min() - radius, 0), min(cc.max() + radius + 1, mask.shape[1])
    sub = mask[r0:r1, c0:c1]
    near = ndimage.distance_transform_edt(~sub) <= radius
    near &= ~sub
    for other in all_plume_masks:
        near &= ~np.asarray(other, dtype=bool)[r0:r1, c0:c1]
    near &= enh[r0:r1, c0:c1] <= max_enh
    pool = np.argwhere(near) + [r0, c0]
    if pool.shape[0] == 0:
        raise NoBackgroundError("no clean background pixels around the plume")
    return pool


def match_bg(in_pixels, pool, cube, non_methane_bands, neighbours: int = 50):
    """Hungarian pairing of in-plume pixels to background pixels on non-methane bands.

    The pool is first reduced to the union of each in-pixel's ``neighbours``
    nearest pool spectra, which keeps the assignment small on large pools.
    Returns ``(bg_pixels, total_cost)`` with ``bg_pixels[i]`` paired to
    ``in_pixels[i]``.
    """
    cube = as_cube(cube)
    in_pixels = np.asarray(in_pixels, dtype=int).reshape(-1, 2)
    pool = np.asarray(pool, dtype=int).reshape(-1, 2)
    n = in_pixels.shape[0]
    if pool.shape[0] < n:
        raise NoBackgroundError(f"background pool of {pool.shape[0]} pixels is smaller than "
                                f"the {n} in-plume pixels")
    bands = np.asarray(non_methane_bands)
    if bands.dtype == bool:
        bands = np.flatnonzero(bands)
    if bands.size == 0:
        raise DomainError("no non-methane bands for background matching")
    a = cube.values[in_pixels[:, 0], in_pixels[:, 1]][:, bands]
    b = cube.values[pool[:, 0], pool[:, 1]][:, bands]
    k = min(pool.shape[0], max(neighbours, 1))
    cand = np.arange(pool.shape[0])
    if pool.shape[0] > n * k:
        _, idx = cKDTree(b).query(a, k=k)
        cand = np.unique(idx)
        while cand.size < n:
            k = min(2 * k, pool.shape[0])
            _, idx = cKDTree(b).query(a, k=k)
            cand = np.unique(idx)
    diff = a[:, None, :] - b[cand][None, :, :]
    cost = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    rows, cols = hungarian_assign(cost)
    matched = np.empty(n, dtype=int)
    matched[rows] = cand[cols]
    return pool[matched], float(cost[rows, cols].sum())


# --------------------------------------------------------------------------
# fitting

def methane_fit_bands(wavelengths, lut: MethaneLUT, plm: float = 2.0,
                      windows=FIT_WINDOWS_UM, k_min: float = NONMETHANE_K_MAX) -> np.ndarray:
    wl = np.asarray(wavelengths, dtype=float)
    k = -query_log_ratio(lut, 100.0, plm) / 100.0
    in_window = np.zeros(wl.shape, dtype=bool)
    for lo, hi in windows:
        in_window |= (wl >= lo) & (wl <= hi)
    return in_window & (np.abs(k) >= k_min)


def non_methane_bands(lut: MethaneLUT, plm: float = 2.0, k_max: float = NONMETHANE_K_MAX):
    k = -query_log_ratio(lut, 100.0, plm) / 100.0
    return np.abs(k) < k_max


def _baseline_solve(rho, q, lam):
    A = np.column_stack([q, lam * q])
    coef, *_ = np.linalg.lstsq(A, rho, rcond=None)
    resid = rho - A @ coef
    return float(resid @ resid), coef


def golden_section(f, lo: float, hi: float, tol: float = X_TOL_PPM_M):
    """Minimise a unimodal scalar function on ``[lo, hi]``."""
    a, b = float(lo), float(hi)
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    fx = f(x)
    # endpoints can win when the optimum sits on the boundary
    best = min(((fx, x), (f(lo), lo), (f(hi), hi)))
    return best[1], best[0]


def fit_enhancement(in_mean, bg_mean, lut: MethaneLUT, plm: float, wavelengths,
                    fit_bands=None, x_max: float = X_MAX_PPM_M,
                    tol: float = X_TOL_PPM_M) -> FitResult:
    """Fit ``(a0 + a1*lambda) * ratio(x)`` to the in/background radiance ratio.

    Golden-section search over ``x`` in ``[0, x_max]`` (after a coarse scan
    picks the bracket) with closed-form least squares for ``a0, a1``.
    """
    wl = np.asarray(wavelengths, dtype=float)
    if fit_bands is None:
        fit_bands = methane_fit_bands(wl, lut, plm)
    fit_bands = np.asarray(fit_bands)
    if fit_bands.dtype == bool:
        fit_bands = np.flatnonzero(fit_bands)
    if fit_bands.size < 3:
        raise DomainError("fewer than three methane fit bands available")
    num = np.asarray(in_mean, dtype=float)[fit_bands]
    den = np.asarray(bg_mean, dtype=float)[fit_bands]
    if np.any(num <= 0) or np.any(den <= 0):
        raise DomainError("mean radiances must be positive on the fit bands")
    rho = num / den
    lam = wl[fit_bands]

    def sse(x):
        return _baseline_solve(rho, query_ratio(lut, x, plm)[fit_bands], lam)[0]

    grid = np.concatenate([[0.0], np.geomspace(1.0, x_max, 64)])
    vals = np.array([sse(x) for x in grid])
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    x, _ = golden_section(sse, lo, hi, tol)
    q = query_ratio(lut, x, plm)[fit_bands]
    _, (a0, a1) = _baseline_solve(rho, q, lam)
    rho_fit = (a0 + a1 * lam) * q
    d_cor, d_norm = fit_scores(rho, rho_fit)
    return FitResult(float(x), d_cor, d_norm, a0=float(a0), a1=float(a1), rho_obs=rho,
                     rho_fit=rho_fit, fit_wavelengths=lam)


def fit_scores(rho_obs, rho_fit):
    """``d_cor = 1 - pearson`` (2.0 when undefined), ``d_norm = rms(fit-obs) / rms(obs-1)``."""
    obs = np.asarray(rho_obs, dtype=float)
    fit = np.asarray(rho_fit, dtype=float)
    if obs.shape != fit.shape or obs.size == 0:
        raise DomainError("spectra must be non-empty and the same length")
    so, sf = obs.std(), fit.std()
    if np.array_equal(obs, fit) and so > 0:
        return 0.0, 0.0
    if so == 0 or sf == 0:
        d_cor = D_COR_UNDEFINED
    else:
        r = float(np.mean((obs - obs.mean()) * (fit - fit.mean())) / (so * sf))
        d_cor = float(np.clip(1.0 - r, 0.0, 2.0))
    num = np.sqrt(np.mean((fit - obs) ** 2))
    den = np.sqrt(np.mean((obs - 1.0) ** 2))
    if den == 0:
        d_norm = 0.0 if num == 0 else float("inf")
    else:
        d_norm = float(num / den)
    return d_cor, d_norm


def classify(result=None, *, d_cor=None, d_norm=None, fit_enh=None) -> bool:
    """Valid when both scores pass, or when the fitted enhancement alone exceeds 100 ppm-m."""
    if result is not None:
        d_cor, d_norm, fit_enh = result.d_cor, result.d_norm, result.fit_enh
    return bool((d_norm < D_NORM_MAX and d_cor < D_COR_MAX) or fit_enh > FIT_ENH_OVERRIDE)


# --------------------------------------------------------------------------
# estimator

class SpectralFitter(BaseEstimator):
    """Vet plumes against the radiance they were retrieved from.

    ``fit`` resolves the fit and non-methane band sets from the LUT and band
    centres; ``score_plume`` runs select -> match -> fit for one plume.
    """

    def __init__(self, lut: MethaneLUT | None = None, plm: float = 2.0, wavelengths=None,
                 fit_windows=FIT_WINDOWS_UM, k_threshold: float = NONMETHANE_K_MAX,
                 bg_radius: int = BG_RADIUS_PX, bg_max_enh: float = BG_MAX_ENH_PPM_M,
                 top_exclude_frac: float = TOP_EXCLUDE_FRAC, n_top: int = N_TOP_PIXELS,
                 x_max: float = X_MAX_PPM_M, tol: float = X_TOL_PPM_M):
        self.lut = lut
        self.plm = plm
        self.wavelengths = wavelengths
        self.fit_windows = fit_windows
        self.k_threshold = k_threshold
        self.bg_radius = bg_radius
        self.bg_max_enh = bg_max_enh
        self.top_exclude_frac = top_exclude_frac
        self.n_top = n_top
        self.x_max = x_max
        self.tol = tol

    def fit(self, X=None, y=None):
        if self.lut is None:
            raise DomainError("SpectralFitter needs a LUT")
        wl = self.wavelengths
        if wl is None and X is not None:
            wl = as_cube(X).wavelengths
        if wl is None:
            raise DomainError("band centre wavelengths are required")
        self.wavelengths_ = np.asarray(wl, dtype=float)
        if self.wavelengths_.size != self.lut.n_bands:
            raise DomainError("wavelength count does not match the LUT")
        self.fit_bands_ = np.flatnonzero(methane_fit_bands(
            self.wavelengths_, self.lut, self.plm, self.fit_windows, self.k_threshold))
        self.nonmethane_bands_ = np.flatnonzero(non_methane_bands(self.lut, self.plm,
                                                                  self.k_threshold))
        if self.fit_bands_.size < 3:
            raise DomainError("no methane fit bands in the configured windows")
        return self

    def sample(self, cube, mask, enh, other_masks=()) -> FitSample:
        check_is_fitted(self, "fit_bands_")
        cube = as_cube(cube)
        in_px = select_in_pixels(mask, enh, self.top_exclude_frac, self.n_top)
        pool = select_bg_pixels(mask, other_masks, enh, self.bg_radius, self.bg_max_enh)
        bg_px, cost = match_bg(in_px, pool, cube, self.nonmethane_bands_)
        in_mean = cube.values[in_px[:, 0], in_px[:, 1]].mean(axis=0)
        bg_mean = cube.values[bg_px[:, 0], bg_px[:, 1]].mean(axis=0)
        return FitSample(in_px, bg_px, in_mean, bg_mean, cost)

    def score_plume(self, cube, mask, enh, other_masks=()) -> FitResult:
        s = self.sample(cube, mask, enh, other_masks)
        res = fit_enhancement(s.in_mean, s.bg_mean, self.lut, self.plm, self.wavelengths_,
                              self.fit_bands_, self.x_max, self.tol)
        obs = float(np.mean(np.asarray(enh)[s.in_pixels[:, 0], s.in_pixels[:, 1]]))
        return FitResult(res.fit_enh, res.d_cor, res.d_norm, obs, res.a0, res.a1, res.rho_obs,
                         res.rho_fit, res.fit_wavelengths, len(s.in_pixels), len(s.bg_pixels))


def write_fit_report(path, results: Sequence[tuple]):
    """CSV of ``(plume_id, FitResult)`` rows."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["plume_id", "fit_enh", "obs_enh", "d_cor", "d_norm", "valid", "n_in", "n_bg"])
        for pid, r in results:
            w.writerow([pid, f"{r.fit_enh:.4f}", f"{r.obs_enh:.4f}", f"{r.d_cor:.6f}",
                        f"{r.d_norm:.6f}", int(r.valid), r.n_in, r.n_bg])


def write_fit_spectrum(path, result: FitResult):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["wavelength_um", "rho_obs", "rho_fit"])
        for row in zip(result.fit_wavelengths, result.rho_obs, result.rho_fit):
            w.writerow([f"{v:.6f}" for v in row])
