"""Granule-scale inference: strided tiling, Hann blending, candidate consolidation, filters."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage
from scipy.signal.windows import hann
from sklearn.base import BaseEstimator

from .cube import as_cube
from .exceptions import DomainError, NoBackgroundError
from .io import pixel_to_geo
from .retrieval import (MIN_COMPONENT_PX, ORIGIN_THRESHOLD, PEAK_FILTER_PPM_M, PLUME_THRESHOLD,
                        origin_centroid)
from .slot_match import ORIGIN_DISC_RADIUS_PX, SlotPrediction

TILE_SIZE_PX = 256
STRIDE_PX = 64
HANN_FLOOR = 1e-6
MERGE_DISTANCE_M = 1500.0
MERGE_MIN_CORR = 0.97
CORR_PATCH_PX = 64
RIDGE_EPS = 1e-6
EDGE_MARGIN_PX = 32
PIXEL_SIZE_M = 60.0
_EIGHT = np.ones((3, 3), dtype=bool)


# --------------------------------------------------------------------------
# tiling and blending

@dataclass(frozen=True)
class TilePlan:
    shape: tuple
    tile_size: int
    stride: int
    origins: tuple  # ((r0, c0), ...) row-major

    def __len__(self):
        return len(self.origins)

    def coverage(self) -> np.ndarray:
        cov = np.zeros(self.shape, dtype=int)
        t = self.tile_size
        for r0, c0 in self.origins:
            cov[r0:r0 + t, c0:c0 + t] += 1
        return cov

    def windows_covering(self, row, col) -> int:
        t = self.tile_size
        return sum(r0 <= row < r0 + t and c0 <= col < c0 + t for r0, c0 in self.origins)


def _axis_starts(n, tile, stride):
    starts = list(range(0, n - tile + 1, stride))
    if starts[-1] != n - tile:
        starts.append(n - tile)
    return starts


def plan_tiles(rows: int, cols: int, tile_size: int = TILE_SIZE_PX,
               stride: int = STRIDE_PX) -> TilePlan:
    """Window origins at multiples of ``stride``, the last window clamped flush to each edge."""
    if rows < tile_size or cols < tile_size:
        raise DomainError(f"granule {rows}x{cols} is smaller than one {tile_size}px tile")
    if stride <= 0 or stride > tile_size:
        raise DomainError("stride must lie in (0, tile_size]")
    origins = tuple((r, c) for r in _axis_starts(rows, tile_size, stride)
                    for c in _axis_starts(cols, tile_size, stride))
    return TilePlan((rows, cols), tile_size, stride, origins)


def hann_weights(tile_size: int = TILE_SIZE_PX, floor: float = HANN_FLOOR) -> np.ndarray:
    w = hann(tile_size, sym=True)
    return np.maximum(np.outer(w, w), floor)


@dataclass(frozen=True, eq=False)
class EnhancementMosaic:
    values: np.ndarray
    weights: np.ndarray


def hann_blend(windows, shape, tile_size: int = TILE_SIZE_PX) -> EnhancementMosaic:
    """Hann-weighted mean of ``(origin, tile)`` windows; accumulation order is the input order."""
    num = np.zeros(shape)
    den = np.zeros(shape)
    w = hann_weights(tile_size)
    for (r0, c0), tile in windows:
        tile = np.asarray(tile, dtype=float)
        if tile.shape != (tile_size, tile_size):
            raise DomainError(f"tile shape {tile.shape} is not {tile_size}x{tile_size}")
        if r0 < 0 or c0 < 0 or r0 + tile_size > shape[0] or c0 + tile_size > shape[1]:
            raise DomainError(f"window at {(r0, c0)} falls outside the granule {tuple(shape)}")
        num[r0:r0 + tile_size, c0:c0 + tile_size] += w * tile
        den[r0:r0 + tile_size, c0:c0 + tile_size] += w
    values = np.divide(num, den, out=np.zeros(shape), where=den > 0)
    return EnhancementMosaic(values, den)


# --------------------------------------------------------------------------
# candidates

def filter_components(mask, min_px: int = MIN_COMPONENT_PX) -> np.ndarray:
    """Drop 8-connected components smaller than ``min_px``."""
    mask = np.asarray(mask, dtype=bool)
    lab, n = ndimage.label(mask, structure=_EIGHT)
    if n == 0:
        return mask.copy()
    sizes = np.bincount(lab.ravel())
    keep = sizes >= min_px
    keep[0] = False
    return keep[lab]


@dataclass(frozen=True, eq=False)
class PlumeCandidate:
    origin_px: tuple  # granule (row, col)
    offset: tuple  # window (r0, c0)
    window_id: int
    enh: np.ndarray  # window-sized, zero outside the instance
    mask_prob: np.ndarray
    origin_prob: np.ndarray
    mask: np.ndarray

    @property
    def size(self):
        return self.enh.shape[0]

    def covers(self, row, col) -> bool:
        r0, c0 = self.offset
        return r0 <= row < r0 + self.size and c0 <= col < c0 + self.size


def extract_candidates(pred: SlotPrediction, offset, window_id: int, granule_shape,
                       plume_threshold: float = PLUME_THRESHOLD,
                       origin_threshold: float = ORIGIN_THRESHOLD,
                       min_component_px: int = MIN_COMPONENT_PX,
                       edge_margin: int = EDGE_MARGIN_PX):
    """One candidate per non-empty slot.

    Candidates whose origin sits within ``edge_margin`` pixels of a window
    edge that is interior to the granule are dropped: a neighbouring window
    sees the same plume without truncation.
    """
    r0, c0 = offset
    size = pred.shape[0]
    out = []
    for s in range(pred.n_slots):
        mask = filter_components(pred.mask_prob[s] >= plume_threshold, min_component_px)
        if not mask.any():
            continue
        o = origin_centroid(np.where(mask, pred.origin_prob[s], 0.0), origin_threshold)
        if o is None:
            o = np.unravel_index(np.argmax(np.where(mask, pred.enh[s], -np.inf)), mask.shape)
            o = (float(o[0]), float(o[1]))
        lr, lc = o
        if edge_margin:
            if (r0 > 0 and lr < edge_margin) or (c0 > 0 and lc < edge_margin):
                continue
            if (r0 + size < granule_shape[0] and lr > size - 1 - edge_margin) or \
               (c0 + size < granule_shape[1] and lc > size - 1 - edge_margin):
                continue
        out.append(PlumeCandidate((lr + r0, lc + c0), (r0, c0), window_id,
                                  np.where(mask, pred.enh[s], 0.0),
                                  np.where(mask, pred.mask_prob[s], 0.0),
                                  np.where(mask, pred.origin_prob[s], 0.0), mask))
    return out


def _granule_patch(cand: PlumeCandidate, r0, c0, size):
    """Candidate enhancement on a granule-aligned patch plus its validity mask."""
    vals = np.zeros((size, size))
    valid = np.zeros((size, size), dtype=bool)
    wr, wc = cand.offset
    n = cand.size
    ar0, ar1 = max(r0, wr), min(r0 + size, wr + n)
    ac0, ac1 = max(c0, wc), min(c0 + size, wc + n)
    if ar0 < ar1 and ac0 < ac1:
        vals[ar0 - r0:ar1 - r0, ac0 - c0:ac1 - c0] = cand.enh[ar0 - wr:ar1 - wr, ac0 - wc:ac1 - wc]
        valid[ar0 - r0:ar1 - r0, ac0 - c0:ac1 - c0] = True
    return vals, valid


def patch_correlation(a: PlumeCandidate, b: PlumeCandidate, patch: int = CORR_PATCH_PX) -> float:
    """Pearson r of both candidates on a patch centred between their origins."""
    mr = 0.5 * (a.origin_px[0] + b.origin_px[0])
    mc = 0.5 * (a.origin_px[1] + b.origin_px[1])
    r0 = int(np.floor(mr)) - patch // 2
    c0 = int(np.floor(mc)) - patch // 2
    va, ma = _granule_patch(a, r0, c0, patch)
    vb, mb = _granule_patch(b, r0, c0, patch)
    both = ma & mb
    if both.sum() < 2:
        return float("nan")
    x, y = va[both], vb[both]
    sx, sy = x.std(), y.std()
    if sx == 0 or sy == 0:
        return 1.0 if np.array_equal(x, y) else float("nan")
    return float(np.mean((x - x.mean()) * (y - y.mean())) / (sx * sy))


def consolidate(candidates, pixel_size_m: float = PIXEL_SIZE_M,
                max_dist_m: float = MERGE_DISTANCE_M, min_corr: float = MERGE_MIN_CORR,
                patch: int = CORR_PATCH_PX):
    """Union-find clusters: edge iff origin distance <= max_dist_m and patch r > min_corr.

    Returns a list of sorted index lists ordered by their smallest member.
    """
    n = len(candidates)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            a, b = candidates[i], candidates[j]
            d = np.hypot(a.origin_px[0] - b.origin_px[0], a.origin_px[1] - b.origin_px[1])
            if d * pixel_size_m > max_dist_m:
                continue
            r = patch_correlation(a, b, patch)
            if np.isfinite(r) and r > min_corr:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


def aggregate(members, weights=None, eps: float = RIDGE_EPS):
    """Regularised weighted mean of member heads over their joint bounding box.

    Returns ``(offset, enh, mask_prob, origin_prob)`` where
    ``x = sum(w_i x_i) / (sum(w_i valid_i) + eps)``.
    """
    if weights is None:
        weights = np.ones(len(members))
    r0 = min(m.offset[0] for m in members)
    c0 = min(m.offset[1] for m in members)
    r1 = max(m.offset[0] + m.size for m in members)
    c1 = max(m.offset[1] + m.size for m in members)
    shape = (r1 - r0, c1 - c0)
    heads = [np.zeros(shape) for _ in range(3)]
    den = np.zeros(shape)
    for m, w in zip(members, weights):
        sl = (slice(m.offset[0] - r0, m.offset[0] - r0 + m.size),
              slice(m.offset[1] - c0, m.offset[1] - c0 + m.size))
        for acc, arr in zip(heads, (m.enh, m.mask_prob, m.origin_prob)):
            acc[sl] += w * arr
        den[sl] += w
    return (r0, c0), *(h / (den + eps) for h in heads)


# --------------------------------------------------------------------------
# records and filters

@dataclass(frozen=True, eq=False)
class PlumeRecord:
    plume_id: str
    origin_px: tuple
    mask: np.ndarray  # granule-shaped
    peak_enh: float
    mean_enh: float
    area_px: int
    detection_fraction: float
    polygon_px: list
    polygon_geo: list | None = None
    origin_geo: tuple | None = None
    fit: object = None
    n_candidates: int = 1
    rejection_reason: str | None = None

    def properties(self) -> dict:
        f = self.fit
        return {
            "plume_id": self.plume_id,
            "origin_row": self.origin_px[0], "origin_col": self.origin_px[1],
            "origin_geo": None if self.origin_geo is None else list(self.origin_geo),
            "peak_enh_ppm_m": self.peak_enh, "mean_enh_ppm_m": self.mean_enh,
            "area_px": self.area_px, "detection_fraction": self.detection_fraction,
            "n_candidates": self.n_candidates,
            "d_cor": None if f is None else _finite(f.d_cor),
            "d_norm": None if f is None else _finite(f.d_norm),
            "fit_enh": None if f is None else _finite(f.fit_enh),
            "obs_enh": None if f is None else _finite(f.obs_enh),
            "fit_valid": None if f is None else bool(f.valid),
            "rejection_reason": self.rejection_reason,
        }

    def feature(self) -> dict:
        ring = self.polygon_geo if self.polygon_geo is not None else self.polygon_px
        return {"type": "Feature", "geometry": {"type": "Polygon", "coordinates": [ring]},
                "properties": self.properties()}


def _finite(v):
    v = float(v)
    return v if np.isfinite(v) else None


def mask_polygon(mask) -> list:
    """Outer ring ``[[x, y], ...]`` (x = column, y = row) of the largest mask contour."""
    from skimage.measure import find_contours

    padded = np.pad(np.asarray(mask, dtype=float), 1)
    contours = find_contours(padded, 0.5)
    if not contours:
        return []
    ring = max(contours, key=len) - 1.0
    pts = [[float(c), float(r)] for r, c in ring]
    if pts[0] != pts[-1]:
        pts.append(pts[0])
    return pts


def final_filters(records, water_mask=None, min_peak: float = PEAK_FILTER_PPM_M):
    """Keep records with peak >= min_peak whose origin is not on water.

    Returns ``(kept, rejected, water_filter_applied)``; rejected records carry
    a ``rejection_reason`` of ``"enhancement"`` or ``"water"``.
    """
    kept, rejected = [], []
    for rec in records:
        if rec.peak_enh < min_peak:
            rejected.append(replace(rec, rejection_reason="enhancement"))
            continue
        if water_mask is not None:
            r = int(np.clip(round(rec.origin_px[0]), 0, water_mask.shape[0] - 1))
            c = int(np.clip(round(rec.origin_px[1]), 0, water_mask.shape[1] - 1))
            if water_mask[r, c]:
                rejected.append(replace(rec, rejection_reason="water"))
                continue
        kept.append(rec)
    return kept, rejected, water_mask is not None


def snr(plume_pixels, background_pixels) -> float:
    """``(mean_plume - mean_bg) / std_bg``."""
    p = np.asarray(plume_pixels, dtype=float).ravel()
    b = np.asarray(background_pixels, dtype=float).ravel()
    if p.size == 0 or b.size < 2:
        raise DomainError("snr needs plume pixels and at least two background pixels")
    s = b.std()
    if s == 0:
        raise DomainError("background enhancement has zero variance")
    return float((p.mean() - b.mean()) / s)


# --------------------------------------------------------------------------
# pipeline

@dataclass(frozen=True, eq=False)
class GranuleResult:
    records: list
    rejected: list
    mosaic: EnhancementMosaic
    plan: TilePlan
    water_filter_applied: bool
    n_candidates: int
    notes: list = field(default_factory=list)

    def features(self, include_rejected: bool = False):
        recs = self.records + (self.rejected if include_rejected else [])
        return [r.feature() for r in recs]


class GranulePipeline(BaseEstimator):
    """Strided tile inference over a granule followed by consolidation and filtering.

    ``backend`` is any fitted estimator whose ``predict(cube)`` returns a
    :class:`SlotPrediction` for a tile-sized cube.  ``fitter`` is an optional
    fitted :class:`~plumekit.spectral_fit.SpectralFitter` used to attach
    fit scores to each kept record.
    """

    def __init__(self, backend=None, fitter=None, tile_size: int = TILE_SIZE_PX,
                 stride: int = STRIDE_PX, plume_threshold: float = PLUME_THRESHOLD,
                 origin_threshold: float = ORIGIN_THRESHOLD,
                 min_component_px: int = MIN_COMPONENT_PX, min_peak: float = PEAK_FILTER_PPM_M,
                 edge_margin: int = EDGE_MARGIN_PX, pixel_size_m: float = PIXEL_SIZE_M,
                 max_dist_m: float = MERGE_DISTANCE_M, min_corr: float = MERGE_MIN_CORR,
                 patch_size: int = CORR_PATCH_PX, n_jobs: int = 1):
        self.backend = backend
        self.fitter = fitter
        self.tile_size = tile_size
        self.stride = stride
        self.plume_threshold = plume_threshold
        self.origin_threshold = origin_threshold
        self.min_component_px = min_component_px
        self.min_peak = min_peak
        self.edge_margin = edge_margin
        self.pixel_size_m = pixel_size_m
        self.max_dist_m = max_dist_m
        self.min_corr = min_corr
        self.patch_size = patch_size
        self.n_jobs = n_jobs

    def fit(self, X=None, y=None):
        if self.backend is None:
            raise DomainError("GranulePipeline needs a backend")
        return self

    def predict_windows(self, cube, plan: TilePlan):
        t = self.tile_size

        def run(origin):
            r0, c0 = origin
            return self.backend.predict(cube.window(r0, c0, t, t))

        if self.n_jobs and self.n_jobs > 1:
            with ThreadPoolExecutor(self.n_jobs) as ex:
                return list(ex.map(run, plan.origins))
        return [run(o) for o in plan.origins]

    def run(self, X, water_mask=None, geotransform=None) -> GranuleResult:
        cube = as_cube(X)
        shape = (cube.rows, cube.cols)
        plan = plan_tiles(*shape, self.tile_size, self.stride)
        preds = self.predict_windows(cube, plan)
        mosaic = hann_blend([(o, p.enh.sum(axis=0)) for o, p in zip(plan.origins, preds)],
                            shape, self.tile_size)
        cands = []
        for wid, (o, p) in enumerate(zip(plan.origins, preds)):
            cands += extract_candidates(p, o, wid, shape, self.plume_threshold,
                                        self.origin_threshold, self.min_component_px,
                                        self.edge_margin)
        clusters = consolidate(cands, self.pixel_size_m, self.max_dist_m, self.min_corr,
                               self.patch_size)
        records = []
        for k, members in enumerate(clusters):
            rec = self._record(k, [cands[i] for i in members], mosaic, plan, geotransform)
            if rec is not None:
                records.append(rec)
        kept, rejected, water_applied = final_filters(records, water_mask, self.min_peak)
        notes = [] if water_applied else ["water filter skipped: no water mask supplied"]
        if self.fitter is not None and kept:
            kept, fit_notes = self._attach_fits(cube, kept, mosaic)
            notes += fit_notes
        return GranuleResult(kept, rejected, mosaic, plan, water_applied, len(cands), notes)

    def _record(self, k, members, mosaic, plan, gt):
        shape = mosaic.values.shape
        (r0, c0), enh, mprob, oprob = aggregate(members)
        h, w = enh.shape
        local = filter_components(mprob >= self.plume_threshold, self.min_component_px)
        mask = np.zeros(shape, dtype=bool)
        mask[r0:r0 + h, c0:c0 + w] = local
        mask &= mosaic.values > 0
        mask = filter_components(mask, self.min_component_px)
        if not mask.any():
            return None
        o = origin_centroid(oprob, self.origin_threshold)
        if o is None:
            o = np.mean([m.origin_px for m in members], axis=0)
            origin = (float(o[0]), float(o[1]))
        else:
            origin = (o[0] + r0, o[1] + c0)
        vals = np.clip(enh[mask[r0:r0 + h, c0:c0 + w]], 0, None)
        windows = len({m.window_id for m in members})
        cover = max(plan.windows_covering(int(round(origin[0])), int(round(origin[1]))), 1)
        ring = mask_polygon(mask)
        ring_geo = origin_geo = None
        if gt is not None:
            ring_geo = [list(pixel_to_geo(gt, y, x)) for x, y in ring]
            origin_geo = pixel_to_geo(gt, *origin)
        return PlumeRecord(f"plume_{k:03d}", origin, mask, float(vals.max()), float(vals.mean()),
                           int(mask.sum()), min(windows / cover, 1.0), ring, ring_geo,
                           origin_geo, n_candidates=len(members))

    def _attach_fits(self, cube, records, mosaic):
        out, notes = [], []
        masks = [r.mask for r in records]
        for i, rec in enumerate(records):
            others = masks[:i] + masks[i + 1:]
            try:
                fit = self.fitter.score_plume(cube, rec.mask, mosaic.values, others)
            except (NoBackgroundError, DomainError) as exc:
                notes.append(f"{rec.plume_id}: spectral fit skipped ({exc})")
                fit = None
            out.append(replace(rec, fit=fit))
        return out, notes
