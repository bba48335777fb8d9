"""Synthetic radiance backgrounds: smooth mixed-surface reflectance under a clear atmosphere."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import ndimage

from .cube import RadianceCube
from .radiance_norm import planck_spectral_radiance
from .spectral_lut import BandSRF, TransmittancePair


def band_transmittance(pair: TransmittancePair, srfs: Sequence[BandSRF]) -> np.ndarray:
    """SRF-weighted background transmittance per band."""
    out = np.empty(len(srfs))
    for b, srf in enumerate(srfs):
        sl, w = srf.weights(pair.grid, band=b)
        out[b] = np.dot(w, pair.t_std[sl])
    return out


def _endmember_spectra(wl, rng, n):
    """Smooth random reflectance spectra in [0.05, 0.6]."""
    x = (wl - wl.min()) / max(np.ptp(wl), 1e-9)
    specs = []
    for _ in range(n):
        coef = rng.normal(0, 1, 4)
        curve = np.polynomial.chebyshev.chebval(2 * x - 1, coef)
        curve = (curve - curve.min()) / max(np.ptp(curve), 1e-9)
        lo = rng.uniform(0.08, 0.25)
        specs.append(lo + rng.uniform(0.05, 0.3) * curve)
    return np.array(specs)


def smooth_field(shape, rng, scale_px: float):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), scale_px, mode="wrap")
    return (f - f.mean()) / max(f.std(), 1e-12)


def synthetic_scene(shape, srfs: Sequence[BandSRF], pair: TransmittancePair, rng,
                    snr: float = 400.0, n_endmembers: int = 1, scale_px: float = 25.0,
                    albedo_var: float = 0.25, water_fraction: float = 0.0,
                    stripe_gain: float = 0.0, scale_constant: float = 4e-7):
    """Radiance cube ``(rows, cols, bands)`` in solar-normalised units plus a water mask.

    Radiance is ``sun * t_std * reflectance`` with per-sample Gaussian noise of
    relative standard deviation ``1 / snr``.  ``water_fraction`` carves a dark
    low-reflectance region; ``stripe_gain`` adds per-column detector gains.
    """
    rows, cols = shape
    wl = np.array([s.center_um for s in srfs])
    sun = planck_spectral_radiance(wl, 5778.0) * scale_constant
    atm = band_transmittance(pair, srfs)
    ends = _endmember_spectra(wl, rng, n_endmembers)
    logits = np.stack([smooth_field(shape, rng, scale_px) for _ in range(n_endmembers)])
    abund = np.exp(1.5 * logits)
    abund /= abund.sum(axis=0, keepdims=True)
    refl = np.einsum("kij,kb->ijb", abund, ends)
    albedo = 1.0 + albedo_var * smooth_field(shape, rng, scale_px / 2)
    refl *= np.clip(albedo, 0.3, None)[..., None]
    water = np.zeros(shape, dtype=bool)
    if water_fraction > 0:
        w = smooth_field(shape, rng, scale_px * 2)
        water = w > np.quantile(w, 1 - water_fraction)
        refl[water] = 0.02 * np.exp(-2.0 * (wl - wl.min()))
    signal = refl * (sun * atm / sun.max())
    values = signal * (1.0 + rng.standard_normal(signal.shape) / snr)
    if stripe_gain:
        values *= 1.0 + stripe_gain * rng.standard_normal((1, cols, 1))
    return RadianceCube(values, wavelengths=wl), water


def flat_scene(shape, srfs: Sequence[BandSRF], pair: TransmittancePair, level: float = 1.0):
    """Noise-free spatially uniform radiance with the atmospheric spectral shape."""
    atm = band_transmittance(pair, srfs)
    wl = np.array([s.center_um for s in srfs])
    return RadianceCube(np.broadcast_to(level * atm, tuple(shape) + (atm.size,)).copy(),
                        wavelengths=wl)
