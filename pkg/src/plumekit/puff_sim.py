"""2-D Lagrangian puff simulation of methane point sources at unit emission rate."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage
from scipy.special import ndtr

from .exceptions import ConfigError, DomainError

MASK_THRESHOLD_PPM_M = 0.00024
# 0.00024 ppm-m corresponds to 0.00001 mmol/m^2
PPM_M_PER_MMOL_M2 = 0.00024 / 0.00001

DURATION_BUCKETS_S = ((250.0, 550.0), (550.0, 1200.0), (1200.0, 2400.0), (2400.0, 3000.0))
TILE_SIZE_PX = 256


@dataclass(frozen=True)
class SimConfig:
    """Simulator hyperparameters.  Ranges of the sampled fields follow ``sample_config``."""

    num_plumes: int = 1
    sim_duration_s: float = 3000.0
    plume_duration_s: float = 3000.0
    grid_size_px: int = 384
    pixel_size_m: float = 60.0
    center_relative_diff_scale: float = 15.0
    puff_initial_radius_m: float = 10.0
    puff_spread_rate: float = 1.0025
    mean_wind_speed_mps: float = 3.0
    wind_direction_rad: float = 0.0
    velocity_clip_mps: float = 30.0
    diffusivity: float = 40.0
    puff_release_mean: float = 20.0
    puff_release_std: float = 4.0
    dt_s: float = 5.0
    intermittency_on_mean_s: float = 300.0
    intermittency_off_mean_s: float = 100.0
    noise_octaves: int = 2
    noise_spatial_wavelength_m: float = 8000.0
    noise_temporal_wavelength_s: float = 600.0
    noise_amplitude_per_diffusivity: float = 0.1
    kernel_truncate_sigma: float = 3.0
    puff_growth: str = "multiplicative"
    seed: int = 0

    def validate(self) -> "SimConfig":
        if not self.dt_s > 0:
            raise ConfigError(f"dt_s must be positive, got {self.dt_s}")
        if not 0 < self.plume_duration_s <= self.sim_duration_s:
            raise ConfigError("plume duration must lie in (0, sim_duration_s]")
        if self.grid_size_px < 1 or self.pixel_size_m <= 0:
            raise ConfigError("grid size and pixel size must be positive")
        if self.puff_initial_radius_m <= 0 or self.puff_spread_rate < 1:
            raise ConfigError("puff radius must be positive and spread rate >= 1")
        if self.velocity_clip_mps <= 0:
            raise ConfigError("velocity clip must be positive")
        if self.puff_growth not in ("multiplicative", "additive"):
            raise ConfigError(f"unknown puff_growth {self.puff_growth!r}")
        if min(self.intermittency_on_mean_s, self.intermittency_off_mean_s) < 0:
            raise ConfigError("intermittency means must be non-negative")
        return self

    @property
    def region_size_m(self) -> float:
        return self.grid_size_px * self.pixel_size_m


@dataclass(frozen=True)
class Puff:
    pos_m: tuple[float, float]
    radius_m: float
    mass_mol: float


@dataclass(frozen=True, eq=False)
class PlumeInstance:
    """Column enhancement (mmol/m^2) of one plume emitting 1 mol/s.

    ``origin_px`` is ``(row, col)`` of the source pixel, or ``None`` when a
    crop removed it.
    """

    conc: np.ndarray
    mask: np.ndarray
    origin_px: tuple[float, float] | None
    emit_window_s: tuple[float, float]
    released_mol: float = 0.0
    exited_mol: float = 0.0
    active_s: float = 0.0
    wind_speed_mps: float = float("nan")
    pixel_size_m: float = 60.0
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.conc.shape


# --------------------------------------------------------------------------
# unit conversion and masks

def mmol_to_ppm_m(c):
    """Column enhancement in mmol/m^2 to ppm-m."""
    return np.asarray(c, dtype=float) * PPM_M_PER_MMOL_M2 if np.ndim(c) else \
        float(c) * PPM_M_PER_MMOL_M2


def ppm_m_to_mmol(x):
    return np.asarray(x, dtype=float) / PPM_M_PER_MMOL_M2 if np.ndim(x) else \
        float(x) / PPM_M_PER_MMOL_M2


_STRUCT_3X3 = np.ones((3, 3), dtype=bool)


def extract_mask(conc_ppm_m, threshold: float = MASK_THRESHOLD_PPM_M) -> np.ndarray:
    """Threshold a ppm-m field then smooth with one 3x3 erosion and one dilation."""
    conc = np.asarray(conc_ppm_m, dtype=float)
    raw = conc >= threshold
    eroded = ndimage.binary_erosion(raw, _STRUCT_3X3, border_value=1)
    return ndimage.binary_dilation(eroded, _STRUCT_3X3)


# --------------------------------------------------------------------------
# configuration sampling

def sample_plume_duration(rng) -> float:
    lo, hi = DURATION_BUCKETS_S[rng.integers(len(DURATION_BUCKETS_S))]
    return float(rng.uniform(lo, hi))


def sample_config(rng, **overrides) -> SimConfig:
    """Draw a tile-level configuration from the simulator hyperparameter ranges."""
    cfg = SimConfig(
        num_plumes=int(rng.integers(1, 11)),
        plume_duration_s=sample_plume_duration(rng),
        center_relative_diff_scale=float(rng.uniform(10.0, 20.0)),
        puff_initial_radius_m=float(rng.uniform(3.0, 20.0)),
        puff_spread_rate=float(rng.uniform(1.002, 1.003)),
        mean_wind_speed_mps=float(rng.uniform(0.0, 10.0)),
        wind_direction_rad=float(rng.uniform(0.0, 2 * np.pi)),
        diffusivity=float(rng.uniform(30.0, 50.0)),
        seed=int(rng.integers(2**63 - 1)),
    )
    return replace(cfg, **overrides) if overrides else cfg


def sample_origins(n: int, rng, grid_size_px: int = 384, pixel_size_m: float = 60.0,
                   cluster_radius_m: float = 1000.0, cluster_prob: float = 0.5,
                   margin_px: int = 0) -> np.ndarray:
    """Source pixels drawn from a cluster/uniform mixture so tails sometimes overlap."""
    lo, hi = margin_px, grid_size_px - margin_px
    if hi <= lo:
        raise DomainError("margin leaves no room for origins")
    center = rng.uniform(lo, hi, size=2)
    r = cluster_radius_m / pixel_size_m
    out = np.empty((n, 2))
    for i in range(n):
        if rng.random() < cluster_prob:
            out[i] = center + rng.uniform(-r, r, size=2)
        else:
            out[i] = rng.uniform(lo, hi, size=2)
    return np.clip(np.floor(out), lo, hi - 1).astype(int)


# --------------------------------------------------------------------------
# wind

class SimplexWindField:
    """Mean wind plus simplex-noise turbulence sampled on a coarse space-time lattice."""

    def __init__(self, config: SimConfig, node_spacing_m: float | None = None,
                 time_step_s: float | None = None, margin_m: float = 10000.0):
        self.config = config
        amp = config.diffusivity * config.noise_amplitude_per_diffusivity
        theta = config.wind_direction_rad
        self.mean = config.mean_wind_speed_mps * np.array([np.sin(theta), np.cos(theta)])
        self.amplitude = amp
        if amp == 0:
            self._fields = None
            return
        spacing = node_spacing_m or config.noise_spatial_wavelength_m / 8.0
        tstep = time_step_s or config.noise_temporal_wavelength_s / 10.0
        self.origin_m = -margin_m
        self.spacing = spacing
        self.tstep = tstep
        ys = np.arange(-margin_m, config.region_size_m + margin_m + spacing, spacing)
        ts = np.arange(0.0, config.sim_duration_s + 2 * tstep, tstep)
        self._fields = np.stack([
            self._noise(ys, ts, component) for component in range(2)
        ])  # (2, T, Y, X)

    def _noise(self, coords, ts, component):
        from opensimplex import OpenSimplex

        cfg = self.config
        total = np.zeros((ts.size, coords.size, coords.size))
        norm = 0.0
        for octave in range(cfg.noise_octaves):
            seed = int((cfg.seed * 7919 + 104729 * component + octave) % (2**31 - 1))
            gen = OpenSimplex(seed)
            freq = 2.0 ** octave
            weight = 0.5 ** octave
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                n = gen.noise3array(coords * freq / cfg.noise_spatial_wavelength_m,
                                    coords * freq / cfg.noise_spatial_wavelength_m,
                                    ts * freq / cfg.noise_temporal_wavelength_s)
            total += weight * n  # indexed (t, y, x)
            norm += weight
        return total / norm

    def velocity(self, pos_yx: np.ndarray, t: float) -> np.ndarray:
        """Wind ``(v_y, v_x)`` in m/s at positions ``(N, 2)``."""
        out = np.broadcast_to(self.mean, pos_yx.shape).copy()
        if self._fields is None or pos_yx.shape[0] == 0:
            return out
        idx = (pos_yx - self.origin_m) / self.spacing
        coords = np.vstack([np.full(pos_yx.shape[0], t / self.tstep), idx[:, 0], idx[:, 1]])
        for c in range(2):
            out[:, c] += self.amplitude * ndimage.map_coordinates(
                self._fields[c], coords, order=1, mode="nearest")
        return out


# --------------------------------------------------------------------------
# simulation

def emission_schedule(config: SimConfig, rng, n_steps: int) -> np.ndarray:
    """Boolean per-step emission flags.

    Emission runs from ``sim_duration - plume_duration`` to the end, with an
    on/off telegraph process that is always on at the final step.
    """
    dt = config.dt_s
    t = np.arange(n_steps) * dt
    start = config.sim_duration_s - config.plume_duration_s
    window = t >= start - 1e-9
    if config.intermittency_off_mean_s <= 0:
        return window
    active = np.zeros(n_steps, dtype=bool)
    end = config.sim_duration_s
    on = True
    while end > start:
        mean = config.intermittency_on_mean_s if on else config.intermittency_off_mean_s
        length = rng.exponential(mean) if mean > 0 else np.inf
        if on and end == config.sim_duration_s:
            length = max(length, dt)  # the source is emitting when the simulation ends
        begin = max(start, end - length)
        if on:
            active |= (t >= begin - 1e-9) & (t < end - 1e-9)
        end = begin
        on = not on
    return active & window


def _axis_profile(center, sigma, edges, truncate):
    lo = center - truncate * sigma
    hi = center + truncate * sigma
    e = np.clip(edges[None, :], lo[:, None], hi[:, None])
    cdf = ndtr((e - center[:, None]) / sigma[:, None])
    return np.diff(cdf, axis=1) / (ndtr(truncate) - ndtr(-truncate))


def deposit_puffs(pos_yx, radius_m, mass_mol, grid_size_px: int, pixel_size_m: float,
                  truncate: float = 3.0, chunk: int = 4096) -> np.ndarray:
    """Integrate truncated Gaussian puffs over pixel cells; returns mmol/m^2."""
    pos = np.asarray(pos_yx, dtype=float).reshape(-1, 2)
    radius = np.asarray(radius_m, dtype=float).ravel()
    mass = np.asarray(mass_mol, dtype=float).ravel()
    edges = np.arange(grid_size_px + 1) * pixel_size_m
    grid = np.zeros((grid_size_px, grid_size_px))
    for s in range(0, mass.size, chunk):
        sl = slice(s, s + chunk)
        py = _axis_profile(pos[sl, 0], radius[sl], edges, truncate)
        px = _axis_profile(pos[sl, 1], radius[sl], edges, truncate)
        grid += py.T @ (px * mass[sl, None])
    return grid * 1000.0 / pixel_size_m**2


def simulate_plume(config: SimConfig, origin_px, rng, return_puffs: bool = False):
    """Run one source for ``sim_duration_s`` and aggregate the surviving puffs."""
    config.validate()
    g = config.grid_size_px
    origin = np.asarray(origin_px, dtype=float)
    if origin.shape != (2,) or np.any(origin < 0) or np.any(origin >= g):
        raise DomainError(f"origin {tuple(origin_px)} lies outside the {g}x{g} grid")
    dt = config.dt_s
    n_steps = int(round(config.sim_duration_s / dt))
    active = emission_schedule(config, rng, n_steps)
    wind = SimplexWindField(config)
    src = (np.floor(origin) + 0.5) * config.pixel_size_m
    growth = config.puff_spread_rate ** dt
    additive = config.puff_growth == "additive"
    clip = config.velocity_clip_mps
    extent = config.region_size_m

    cap = int(n_steps * (config.puff_release_mean + 8 * config.puff_release_std + 1)) + 16
    pos = np.empty((cap, 2))
    radius = np.empty(cap)
    mass = np.empty(cap)
    n = 0
    released = carry = exited = 0.0
    for k in range(n_steps):
        if n:
            vel = wind.velocity(pos[:n], k * dt)
            vel += rng.standard_normal((n, 2)) * config.center_relative_diff_scale
            speed = np.hypot(vel[:, 0], vel[:, 1])
            over = speed > clip
            if over.any():
                vel[over] *= (clip / speed[over])[:, None]
            pos[:n] += vel * dt
            if additive:
                radius[:n] += growth
            else:
                radius[:n] *= growth
            # drop puffs whose truncated kernel no longer touches the domain
            reach = config.kernel_truncate_sigma * radius[:n]
            inside = np.all((pos[:n] + reach[:, None] > 0) & (pos[:n] - reach[:, None] < extent),
                            axis=1)
            if not inside.all():
                exited += float(mass[:n][~inside].sum())
                keep = np.flatnonzero(inside)
                m = keep.size
                pos[:m], radius[:m], mass[:m] = pos[keep], radius[keep], mass[keep]
                n = m
        if active[k]:
            count = max(0, int(round(rng.normal(config.puff_release_mean,
                                                config.puff_release_std))))
            step_mass = 1.0 * dt + carry
            if count == 0:
                carry = step_mass
            else:
                carry = 0.0
                if n + count > cap:
                    grow = max(cap, count)
                    pos = np.concatenate([pos, np.empty((grow, 2))])
                    radius = np.concatenate([radius, np.empty(grow)])
                    mass = np.concatenate([mass, np.empty(grow)])
                    cap += grow
                pos[n:n + count] = src
                radius[n:n + count] = config.puff_initial_radius_m
                mass[n:n + count] = step_mass / count
                n += count
                released += step_mass

    conc = deposit_puffs(pos[:n], radius[:n], mass[:n], g, config.pixel_size_m,
                         config.kernel_truncate_sigma)
    start = config.sim_duration_s - config.plume_duration_s
    inst = PlumeInstance(
        conc=conc,
        mask=extract_mask(mmol_to_ppm_m(conc)),
        origin_px=(float(np.floor(origin[0])), float(np.floor(origin[1]))),
        emit_window_s=(start, config.sim_duration_s),
        released_mol=released,
        exited_mol=exited,
        active_s=float(active.sum() * dt),
        wind_speed_mps=config.mean_wind_speed_mps,
        pixel_size_m=config.pixel_size_m,
    )
    if return_puffs:
        puffs = [Puff((float(p[0]), float(p[1])), float(r), float(m))
                 for p, r, m in zip(pos[:n], radius[:n], mass[:n])]
        return inst, puffs
    return inst


def simulate_tile(config: SimConfig, rng, origins=None) -> list[PlumeInstance]:
    """Simulate ``config.num_plumes`` sources sharing one wind field.

    Each source draws its own emission duration.
    """
    if origins is None:
        origins = sample_origins(config.num_plumes, rng, config.grid_size_px,
                                 config.pixel_size_m)
    plumes = []
    for origin in origins:
        cfg = replace(config, plume_duration_s=sample_plume_duration(rng))
        plumes.append(simulate_plume(cfg, origin, rng))
    return plumes


# --------------------------------------------------------------------------
# cropping

def crop_tile(instances, mode: str = "center", rng=None, size: int = TILE_SIZE_PX,
              offset=None):
    """Crop co-registered plumes to ``size`` pixels.

    Returns ``(cropped, (row_offset, col_offset))``.  Origins that fall
    outside the crop become ``None``; the plume pixels are kept.
    """
    instances = list(instances)
    if not instances:
        return [], (0, 0)
    full = instances[0].conc.shape[0]
    span = full - size
    if span < 0:
        raise DomainError(f"cannot crop {size} px from a {full} px grid")
    if offset is None:
        if mode == "center":
            offset = (span // 2, span // 2)
        elif mode == "random":
            if rng is None:
                raise DomainError("random crop needs an rng")
            offset = (int(rng.integers(0, span + 1)), int(rng.integers(0, span + 1)))
        else:
            raise DomainError(f"unknown crop mode {mode!r}")
    r0, c0 = int(offset[0]), int(offset[1])
    out = []
    for inst in instances:
        origin = None
        if inst.origin_px is not None:
            r, c = inst.origin_px[0] - r0, inst.origin_px[1] - c0
            if 0 <= r < size and 0 <= c < size:
                origin = (r, c)
        out.append(replace(
            inst,
            conc=inst.conc[r0:r0 + size, c0:c0 + size].copy(),
            mask=inst.mask[r0:r0 + size, c0:c0 + size].copy(),
            origin_px=origin,
        ))
    return out, (r0, c0)
