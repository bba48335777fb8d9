"""Retrieval backends producing slot-shaped predictions: matched filter and external rasters."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg, ndimage
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .cube import RadianceCube, as_cube
from .exceptions import DomainError, LoadError
from .slot_match import N_SLOTS, SlotPrediction
from .spectral_lut import MethaneLUT, query_log_ratio
from .validation import check_probability

PLUME_THRESHOLD = 0.4
ORIGIN_THRESHOLD = 0.3
PLUME_THRESHOLD_TEST_OPTIMAL = 0.3
MIN_COMPONENT_PX = 36
PEAK_FILTER_PPM_M = 50.0


@dataclass(frozen=True, eq=False)
class UnitAbsorptionSpectrum:
    """Per-band absorption coefficient ``k`` (per ppm-m) at path multiplier ``plm``."""

    k: np.ndarray
    plm: float

    def transmittance(self, x):
        return np.exp(-np.multiply.outer(np.asarray(x, dtype=float), self.k))


def unit_absorption_spectrum(lut: MethaneLUT, plm: float = 2.0) -> UnitAbsorptionSpectrum:
    """Secant slope of the LUT log-ratio between 0 and 100 ppm-m."""
    if not (np.any(lut.conc_axis == 0) and np.any(lut.conc_axis == 100)):
        raise DomainError("LUT concentration axis must contain 0 and 100")
    lo, hi = lut.plm_axis[0], lut.plm_axis[-1]
    if not lo <= plm <= hi:
        warnings.warn(f"path-length multiplier {plm} outside LUT axis [{lo}, {hi}]; clamped",
                      RuntimeWarning, stacklevel=2)
        plm = float(np.clip(plm, lo, hi))
    k = -query_log_ratio(lut, 100.0, plm) / 100.0
    return UnitAbsorptionSpectrum(np.asarray(k, dtype=float), float(plm))


# --------------------------------------------------------------------------
# matched filter

def _column_groups(ids: np.ndarray, width):
    if width is None:
        return [np.arange(ids.size)]
    keys = ids // int(width)
    return [np.flatnonzero(keys == g) for g in np.unique(keys)]


class MatchedFilter(BaseEstimator):
    """Shrinkage-covariance matched filter reporting enhancement in ppm-m.

    Statistics are estimated per cross-track column group (``group_width``
    detector positions; ``None`` pools the whole cube).  With ``refine``, up
    to ``refine_iter`` further passes drop pixels whose score lies more than
    ``refine_sigma`` robust standard deviations from the median, dilated by
    ``refine_dilate_px``, so plumes and their tails do not bias the
    background mean and covariance.
    ``albedo_correction`` divides each score by the pixel brightness relative
    to the group mean, since the absorption signal scales with the pixel's
    own radiance.
    """

    def __init__(self, signature: UnitAbsorptionSpectrum | None = None, shrinkage: float = 0.05,
                 group_width: int | None = None, min_group_pixels: int = 50,
                 refine: bool = True, refine_sigma: float = 3.0, refine_dilate_px: int = 8,
                 refine_iter: int = 3, albedo_correction: bool = True):
        self.signature = signature
        self.shrinkage = shrinkage
        self.group_width = group_width
        self.min_group_pixels = min_group_pixels
        self.refine = refine
        self.refine_sigma = refine_sigma
        self.refine_dilate_px = refine_dilate_px
        self.refine_iter = refine_iter
        self.albedo_correction = albedo_correction

    def _stats(self, X, keep=None):
        B = X.shape[1]
        if keep is not None:
            X = X[keep]
        if X.shape[0] < self.min_group_pixels:
            raise DomainError(f"matched filter needs >= {self.min_group_pixels} background "
                              f"pixels per column group, got {X.shape[0]}")
        mu = X.mean(axis=0)
        cov = np.cov(X, rowvar=False).reshape(B, B)
        a = self.shrinkage
        cov = (1 - a) * cov + a * np.trace(cov) / B * np.eye(B)
        t = -mu * self.signature.k
        try:
            factor = linalg.cho_factor(cov)
        except linalg.LinAlgError as exc:
            raise DomainError("shrunk covariance is singular") from exc
        w = linalg.cho_solve(factor, t)
        denom = float(t @ w)
        if denom <= 0:
            raise DomainError("target signature has no projection on the background")
        return mu, w / denom

    def fit(self, X, y=None):
        if self.signature is None:
            raise DomainError("MatchedFilter needs a unit absorption signature")
        cube = as_cube(X)
        if cube.bands != self.signature.k.size:
            raise DomainError(f"cube has {cube.bands} bands, signature has {self.signature.k.size}")
        self.groups_ = _column_groups(cube.crosstrack_ids, self.group_width)
        self.group_ids_ = cube.crosstrack_ids.copy()
        stats = []
        for cols in self.groups_:
            Xg = cube.values[:, cols].reshape(-1, cube.bands)
            mu, filt = self._stats(Xg)
            prev = None
            for _ in range(self.refine_iter if self.refine else 0):
                score = self._score(Xg, mu, filt)
                med = np.median(score)
                mad = 1.4826 * np.median(np.abs(score - med))
                # symmetric so the null distribution stays centred
                out = (np.abs(score - med) > self.refine_sigma * max(mad, 1e-12))
                if self.refine_dilate_px:
                    # plume tails sit next to the outlying cores
                    out = ndimage.binary_dilation(out.reshape(cube.rows, cols.size),
                                                  iterations=self.refine_dilate_px).ravel()
                keep = ~out
                if keep.sum() < self.min_group_pixels or \
                        (prev is not None and np.array_equal(keep, prev)):
                    break
                mu, filt = self._stats(Xg, keep)
                prev = keep
            stats.append((mu, filt))
        self.stats_ = stats
        self.n_features_in_ = cube.bands
        return self

    def predict(self, X):
        check_is_fitted(self, "stats_")
        cube = as_cube(X)
        if not np.array_equal(cube.crosstrack_ids, self.group_ids_):
            raise DomainError("cube columns differ from the fitted column layout")
        out = np.empty((cube.rows, cube.cols))
        for cols, (mu, filt) in zip(self.groups_, self.stats_):
            out[:, cols] = self._score(cube.values[:, cols], mu, filt)
        return out

    def _score(self, X, mu, filt):
        score = (X - mu) @ filt
        if self.albedo_correction:
            # brightness of each pixel along the mean spectrum
            r = (X @ mu) / float(mu @ mu)
            score = score / np.where(r > 1e-6, r, 1e-6)
        return score

    def fit_predict(self, X, y=None):
        return self.fit(X).predict(X)


def matched_filter(cube, sig: UnitAbsorptionSpectrum, **kwargs) -> np.ndarray:
    return MatchedFilter(sig, **kwargs).fit_predict(cube)


# --------------------------------------------------------------------------
# probability maps -> instances

def threshold_instances(pred: SlotPrediction, plume_thresh: float = PLUME_THRESHOLD) -> np.ndarray:
    """Per-slot binary masks ``mask_prob >= plume_thresh``."""
    t = float(plume_thresh)
    if not 0.0 <= t <= 1.0:
        raise DomainError("plume threshold must lie in [0, 1]")
    return pred.mask_prob >= t


def origin_centroid(origin_prob, thresh: float = ORIGIN_THRESHOLD):
    """Probability-weighted centroid ``(row, col)`` of pixels with ``P > thresh``, else ``None``."""
    check_probability(thresh, "origin threshold")
    p = np.asarray(origin_prob, dtype=float)
    sel = p > thresh
    if not sel.any():
        return None
    rr, cc = np.nonzero(sel)
    w = p[sel]
    return float(np.dot(w, rr) / w.sum()), float(np.dot(w, cc) / w.sum())


# --------------------------------------------------------------------------
# backends

class MatchedFilterBackend(BaseEstimator):
    """Matched-filter enhancement split into per-plume slots.

    Detection cores are connected regions of the smoothed enhancement above
    ``detect_threshold`` with at least ``min_component_px`` pixels.  Touching
    plumes are split by a watershed on the smoothed map seeded at maxima whose
    dynamic exceeds ``max(split_dynamic, split_dynamic_rel * peak)``, so puff
    bumps along one plume's tail stay with that plume.  Each instance is grown into the connected area above
    ``grow_threshold`` (hysteresis), which becomes its mask.  Origin
    probability is ``(s / peak) ** origin_power`` inside the instance.
    """

    def __init__(self, signature: UnitAbsorptionSpectrum | None = None, shrinkage: float = 0.05,
                 group_width: int | None = None, n_slots: int = N_SLOTS,
                 smooth_sigma: float = 1.0, grow_sigma: float = 2.0,
                 detect_threshold: float = PEAK_FILTER_PPM_M, grow_threshold: float = 15.0,
                 min_component_px: int = MIN_COMPONENT_PX, split_dynamic: float = 100.0,
                 split_dynamic_rel: float = 0.3, origin_power: float = 4.0):
        self.signature = signature
        self.shrinkage = shrinkage
        self.group_width = group_width
        self.n_slots = n_slots
        self.smooth_sigma = smooth_sigma
        self.grow_sigma = grow_sigma
        self.detect_threshold = detect_threshold
        self.grow_threshold = grow_threshold
        self.min_component_px = min_component_px
        self.split_dynamic = split_dynamic
        self.split_dynamic_rel = split_dynamic_rel
        self.origin_power = origin_power

    def fit(self, X=None, y=None):
        if self.signature is None:
            raise DomainError("backend needs a unit absorption signature")
        self.filter_ = MatchedFilter(self.signature, self.shrinkage, self.group_width)
        return self

    def retrieve(self, X) -> np.ndarray:
        check_is_fitted(self, "filter_")
        return self.filter_.fit_predict(as_cube(X))

    def predict(self, X) -> SlotPrediction:
        return self.slots_from_enhancement(self.retrieve(X))

    def instance_labels(self, enh) -> np.ndarray:
        from skimage.morphology import h_maxima
        from skimage.segmentation import watershed

        s = ndimage.gaussian_filter(enh, self.smooth_sigma)
        core = s > self.detect_threshold
        lab, n = ndimage.label(core, structure=np.ones((3, 3)))
        if n == 0:
            return np.zeros(enh.shape, dtype=int)
        sizes = ndimage.sum_labels(core, lab, index=np.arange(1, n + 1))
        core = np.isin(lab, 1 + np.flatnonzero(sizes >= self.min_component_px))
        if not core.any():
            return np.zeros(enh.shape, dtype=int)
        g = ndimage.gaussian_filter(enh, self.grow_sigma)
        grown = g > self.grow_threshold
        lab_g, _ = ndimage.label(grown | core, structure=np.ones((3, 3)))
        region = np.isin(lab_g, np.unique(lab_g[core]))
        region = ndimage.binary_fill_holes(region)
        # one seed per maximum whose dynamic (height above the saddle towards any
        # higher maximum) clears max(split_dynamic, split_dynamic_rel * peak)
        markers = np.zeros(enh.shape, dtype=int)
        lab_r, nr = ndimage.label(region, structure=np.ones((3, 3)))
        for comp in range(1, nr + 1):
            inside = lab_r == comp
            vals = np.where(inside & core, s, 0.0)
            peak = vals.max()
            if peak <= 0:
                continue
            h = max(self.split_dynamic, self.split_dynamic_rel * peak)
            seeds = h_maxima(vals, h).astype(bool) & core
            if not seeds.any():
                seeds = vals == peak
            sl, ns = ndimage.label(seeds, structure=np.ones((3, 3)))
            markers[sl > 0] = sl[sl > 0] + markers.max()
        labels = watershed(-s, markers, mask=region, connectivity=2)
        return _relabel_by_peak(labels, s)

    def slots_from_enhancement(self, enh) -> SlotPrediction:
        enh = np.asarray(enh, dtype=float)
        labels = self.instance_labels(enh)
        P = self.n_slots
        out = SlotPrediction.empty(enh.shape, P)
        s = ndimage.gaussian_filter(enh, self.smooth_sigma)
        span = max(self.detect_threshold - self.grow_threshold, 1e-9)
        for slot, lab in enumerate(range(1, min(labels.max(), P) + 1)):
            inst = labels == lab
            if not inst.any():
                continue
            out.enh[slot][inst] = np.clip(enh[inst], 0, None)
            out.mask_prob[slot][inst] = 0.5 + 0.5 * np.clip(
                (s[inst] - self.grow_threshold) / span, 0, 1)
            peak = s[inst].max()
            if peak > 0:
                out.origin_prob[slot][inst] = np.clip(s[inst] / peak, 0, 1) ** self.origin_power
        return out


def _relabel_by_peak(labels, s):
    """Relabel instances 1..n in order of decreasing peak."""
    ids = np.unique(labels[labels > 0])
    if ids.size == 0:
        return labels
    peaks = ndimage.maximum(s, labels, index=ids)
    order = ids[np.argsort(-np.asarray(peaks), kind="stable")]
    lut = np.zeros(labels.max() + 1, dtype=int)
    lut[order] = np.arange(1, order.size + 1)
    return lut[labels]


# --------------------------------------------------------------------------
# external predictions

HEADS = ("enh", "mask_prob", "origin_prob")
MAX_NAN_FRACTION = 0.001


@dataclass(frozen=True, eq=False)
class ExternalPrediction:
    prediction: SlotPrediction
    clipped: int
    nan_count: int
    tile_id: str = ""


def save_external(pred: SlotPrediction, directory, tile_id: str = "tile"):
    """Write one raster per slot per head plus a JSON manifest."""
    from .io import write_raster

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = []
    for head in HEADS:
        arr = getattr(pred, head)
        for slot in range(pred.n_slots):
            name = f"{tile_id}_{head}_{slot}.rst"
            write_raster(d / name, arr[slot][None].astype(np.float32))
            files.append({"head": head, "slot": slot, "file": name})
    manifest = {"tile_id": tile_id, "shape": list(pred.shape), "slots": pred.n_slots,
                "files": files}
    (d / f"{tile_id}.json").write_text(json.dumps(manifest, indent=1))
    return d / f"{tile_id}.json"


def load_external(manifest_path, expected_shape=None) -> ExternalPrediction:
    """Load and validate slot rasters listed in a manifest."""
    from .io import read_raster

    path = Path(manifest_path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise LoadError(f"cannot read manifest {path}: {exc}") from exc
    shape = tuple(manifest["shape"])
    if expected_shape is not None and tuple(expected_shape) != shape:
        raise LoadError(f"manifest shape {shape} does not match tile {tuple(expected_shape)}")
    P = int(manifest["slots"])
    listed = {(f["head"], int(f["slot"])): f["file"] for f in manifest["files"]}
    heads = {}
    for head in HEADS:
        arr = np.empty((P,) + shape)
        for slot in range(P):
            if (head, slot) not in listed:
                raise LoadError(f"manifest lists no {head} raster for slot {slot}")
            fp = path.parent / listed[(head, slot)]
            if not fp.exists():
                raise LoadError(f"missing {head} raster for slot {slot}: {fp}")
            data = read_raster(fp).data
            if data.shape[1:] != shape:
                raise LoadError(f"slot {slot} {head} raster has shape {data.shape[1:]}, "
                                f"expected {shape}")
            arr[slot] = data[0]
        heads[head] = arr
    total = sum(a.size for a in heads.values())
    nans = sum(int(np.isnan(a).sum()) for a in heads.values())
    if nans > MAX_NAN_FRACTION * total:
        raise LoadError(f"{nans} NaN values exceed {MAX_NAN_FRACTION:.1%} of the prediction")
    clipped = 0
    for head in ("mask_prob", "origin_prob"):
        a = heads[head]
        bad = (a < 0) | (a > 1)
        clipped += int(bad.sum())
        heads[head] = np.clip(np.nan_to_num(a, nan=0.0), 0.0, 1.0)
    heads["enh"] = np.nan_to_num(heads["enh"], nan=0.0)
    return ExternalPrediction(SlotPrediction(**heads), clipped, nans, manifest.get("tile_id", ""))


class ExternalBackend(BaseEstimator):
    """Serve precomputed predictions keyed by tile id."""

    def __init__(self, directory=None):
        self.directory = directory

    def fit(self, X=None, y=None):
        return self

    def predict_tile(self, tile_id: str, shape=None) -> SlotPrediction:
        return load_external(Path(self.directory) / f"{tile_id}.json", shape).prediction
