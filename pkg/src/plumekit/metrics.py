"""Stratified detection, quantification and localisation metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import DomainError
from .retrieval import ORIGIN_THRESHOLD, PLUME_THRESHOLD, origin_centroid, threshold_instances
from .slot_match import GroundTruthSet, SlotPrediction, hungarian_assign

ERBWS_EDGES = (50, 100, 200, 400, 800, 1600, 3200)
ENH_EDGES = (0, 5, 25, 50, 125, 250, 500, 1000, 2500, 25000)
IOU_THRESHOLD = 0.25
ORIGIN_MATCH_M = 600.0
PIXEL_SIZE_M = 60.0
UNDERFLOW = "underflow"
OVERFLOW = "overflow"
UNASSIGNED = "unassigned"


@dataclass(frozen=True)
class BucketSpec:
    erbws_edges: tuple = ERBWS_EDGES
    enh_edges: tuple = ENH_EDGES

    def __post_init__(self):
        for name in ("erbws_edges", "enh_edges"):
            e = np.asarray(getattr(self, name), dtype=float)
            if e.ndim != 1 or e.size < 2 or np.any(np.diff(e) <= 0):
                raise DomainError(f"{name} must be strictly increasing with >= 2 edges")


def bucket_labels(edges) -> list:
    inner = [f"[{_fmt(a)}, {_fmt(b)})" for a, b in zip(edges[:-1], edges[1:])]
    return [UNDERFLOW] + inner + [OVERFLOW]


def _fmt(v):
    return f"{v:g}"


def assign_bucket(value, edges) -> str:
    """Half-open ``[e_i, e_{i+1})`` label; below the first edge or at/above the last edge overflow."""
    labels = bucket_labels(edges)
    i = int(np.searchsorted(np.asarray(edges, dtype=float), float(value), side="right"))
    return labels[i]


def bucket_index(values, edges) -> np.ndarray:
    """Vectorised bucket index into :func:`bucket_labels` order."""
    return np.searchsorted(np.asarray(edges, dtype=float), np.asarray(values, dtype=float),
                           side="right")


# --------------------------------------------------------------------------
# matching

def iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


@dataclass(frozen=True)
class MatchResult:
    tp: list  # (pred index, gt index, score)
    fp: list  # pred indices
    fn: list  # gt indices
    assigned: dict = field(default_factory=dict)  # pred -> gt for every Hungarian pair


def match_instances(pred_masks: Sequence, gt_masks: Sequence,
                    iou_threshold: float = IOU_THRESHOLD) -> MatchResult:
    """Hungarian match on negative IoU; pairs with IoU strictly above the threshold are TP."""
    n_p, n_g = len(pred_masks), len(gt_masks)
    if n_p == 0 or n_g == 0:
        return MatchResult([], list(range(n_p)), list(range(n_g)))
    ious = np.array([[iou(p, g) for g in gt_masks] for p in pred_masks])
    rows, cols = hungarian_assign(-ious)
    tp, assigned = [], {}
    for i, j in zip(rows, cols):
        assigned[int(i)] = int(j)
        if ious[i, j] > iou_threshold:
            tp.append((int(i), int(j), float(ious[i, j])))
    hit_p = {t[0] for t in tp}
    hit_g = {t[1] for t in tp}
    return MatchResult(tp, [i for i in range(n_p) if i not in hit_p],
                       [j for j in range(n_g) if j not in hit_g], assigned)


def match_origins(pred_origins: Sequence, gt_origins: Sequence,
                  max_dist_m: float = ORIGIN_MATCH_M) -> MatchResult:
    """Hungarian match on Euclidean distance (metres); TP iff distance <= max_dist_m."""
    n_p, n_g = len(pred_origins), len(gt_origins)
    if n_p == 0 or n_g == 0:
        return MatchResult([], list(range(n_p)), list(range(n_g)))
    p = np.asarray(pred_origins, dtype=float).reshape(n_p, 2)
    g = np.asarray(gt_origins, dtype=float).reshape(n_g, 2)
    d = np.hypot(p[:, None, 0] - g[None, :, 0], p[:, None, 1] - g[None, :, 1])
    rows, cols = hungarian_assign(d)
    tp, assigned = [], {}
    for i, j in zip(rows, cols):
        assigned[int(i)] = int(j)
        if d[i, j] <= max_dist_m:
            tp.append((int(i), int(j), float(d[i, j])))
    hit_p = {t[0] for t in tp}
    hit_g = {t[1] for t in tp}
    return MatchResult(tp, [i for i in range(n_p) if i not in hit_p],
                       [j for j in range(n_g) if j not in hit_g], assigned)


def mean_distance(result: MatchResult) -> float:
    return float(np.mean([t[2] for t in result.tp])) if result.tp else float("nan")


def prf(tp: int, fp: int, fn: int):
    """Precision, recall, F1; an empty denominator gives 1.0 for precision/recall when
    nothing was expected or predicted, and F1 0 when both are 0."""
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


# --------------------------------------------------------------------------
# quantification

def smape(pred, truth) -> float:
    """Mean of ``2|p - t| / (|p| + |t|)``; terms with ``p = t = 0`` contribute 0."""
    p = np.asarray(pred, dtype=float).ravel()
    t = np.asarray(truth, dtype=float).ravel()
    if p.size == 0 or p.shape != t.shape:
        raise DomainError("smape needs paired non-empty inputs")
    den = np.abs(p) + np.abs(t)
    terms = np.divide(2 * np.abs(p - t), den, out=np.zeros_like(den), where=den > 0)
    return float(terms.mean())


def normalized_rmse(pred, truth, bucket_mean: float) -> float:
    if not bucket_mean > 0:
        raise DomainError("bucket mean must be positive")
    p = np.asarray(pred, dtype=float).ravel()
    t = np.asarray(truth, dtype=float).ravel()
    if p.size == 0 or p.shape != t.shape:
        raise DomainError("normalized_rmse needs paired non-empty inputs")
    return float(np.sqrt(np.mean((p - t) ** 2)) / bucket_mean)


def integrated_smape_pair(pred_enh, gt_enh, pred_mask, gt_mask) -> float:
    union = np.asarray(pred_mask, bool) | np.asarray(gt_mask, bool)
    return smape([np.sum(np.asarray(pred_enh)[union])], [np.sum(np.asarray(gt_enh)[union])])


def integrated_enh_smape(pairs: Sequence, erbws_edges=ERBWS_EDGES) -> dict:
    """Mean integrated-enhancement SMAPE per gt ERBWS bucket.

    ``pairs`` holds ``(pred_enh, gt_enh, pred_mask, gt_mask, erbws)`` tuples.
    """
    per = {}
    for pe, ge, pm, gm, erbws in pairs:
        per.setdefault(assign_bucket(erbws, erbws_edges), []).append(
            integrated_smape_pair(pe, ge, pm, gm))
    return {k: float(np.mean(v)) for k, v in per.items()}


# --------------------------------------------------------------------------
# sweeps and polygon capture

def instance_masks(pred: SlotPrediction, plume_threshold: float = PLUME_THRESHOLD):
    """Non-empty per-slot masks and their slot indices."""
    masks = threshold_instances(pred, plume_threshold)
    slots = [s for s in range(pred.n_slots) if masks[s].any()]
    return [masks[s] for s in slots], slots


def pr_sweep(preds: Sequence[SlotPrediction], gt_masks: Sequence, thresholds) -> list:
    """``(threshold, precision, recall)`` per threshold, pooled over tiles."""
    th = np.asarray(thresholds, dtype=float)
    if np.any((th <= 0) | (th >= 1)) or np.any(np.diff(th) <= 0):
        raise DomainError("thresholds must be ascending inside (0, 1)")
    out = []
    for t in th:
        tp = fp = fn = 0
        for pred, gts in zip(preds, gt_masks):
            masks, _ = instance_masks(pred, t)
            m = match_instances(masks, list(gts))
            tp, fp, fn = tp + len(m.tp), fp + len(m.fp), fn + len(m.fn)
        p, r, _ = prf(tp, fp, fn)
        out.append((float(t), p, r))
    return out


def capture_rate(set_a: Sequence, set_b: Sequence, buffer_deg: float = 0.01) -> float:
    """Fraction of ``set_b`` polygons intersecting any ``set_a`` polygon buffered by ``buffer_deg``."""
    from shapely import STRtree
    from shapely.geometry import shape as to_geom

    a = [g if hasattr(g, "buffer") else to_geom(g) for g in set_a]
    b = [g if hasattr(g, "buffer") else to_geom(g) for g in set_b]
    if not b:
        return float("nan")
    if not a:
        return 0.0
    tree = STRtree([g.buffer(buffer_deg) for g in a])
    hits = sum(len(tree.query(g, predicate="intersects")) > 0 for g in b)
    return hits / len(b)


# --------------------------------------------------------------------------
# tile-set evaluation

@dataclass(frozen=True, eq=False)
class EvalTile:
    pred: SlotPrediction
    gt: GroundTruthSet
    erbws: tuple  # per gt plume, (kg/hr)/(m/s)


@dataclass
class EvalReport:
    detection: dict  # bucket -> dict(tp, fp, fn, precision, recall, f1)
    pixel: dict  # enh bucket -> dict(smape, nrmse, smape_slotsum, n_pairs)
    integrated_smape: dict  # ERBWS bucket -> value
    origin: dict  # bucket -> dict(tp, fp, fn, mean_distance_m)
    pr_curve: list
    mean_origin_distance_m: float = float("nan")

    def rows(self):
        for b, d in self.detection.items():
            for k, v in d.items():
                yield ("detection", b, k, v)
        for b, d in self.origin.items():
            for k, v in d.items():
                yield ("origin", b, k, v)
        for b, d in self.pixel.items():
            for k, v in d.items():
                yield ("pixel", b, k, v)
        for b, v in self.integrated_smape.items():
            yield ("integrated", b, "smape", v)
        for t, p, r in self.pr_curve:
            yield ("pr", f"{t:g}", "precision", p)
            yield ("pr", f"{t:g}", "recall", r)
        yield ("origin", "all", "mean_distance_m_overall", self.mean_origin_distance_m)

    def write_csv(self, path):
        """One row per bucket per metric."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["group", "bucket", "metric", "value"])
            for row in self.rows():
                w.writerow(list(row[:3]) + [_num(row[3])])

    def write_long_csv(self, path):
        """Plot-ready long format (same content, bucket lower edge split out)."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["group", "bucket", "bucket_low", "metric", "value"])
            for g, b, k, v in self.rows():
                w.writerow([g, b, _low(b), k, _num(v)])

    def summary(self) -> str:
        lines = ["detection (by gt ERBWS bucket)"]
        for b, d in self.detection.items():
            lines.append(f"  {b:>16}  tp {d['tp']:4d}  fp {d['fp']:4d}  fn {d['fn']:4d}  "
                         f"P {d['precision']:.3f}  R {d['recall']:.3f}  F1 {d['f1']:.3f}")
        lines.append(f"mean origin distance: {self.mean_origin_distance_m:.1f} m")
        lines.append("integrated enhancement SMAPE")
        for b, v in self.integrated_smape.items():
            lines.append(f"  {b:>16}  {v:.3f}")
        lines.append("pixel metrics (by gt enhancement bucket)")
        for b, d in self.pixel.items():
            lines.append(f"  {b:>16}  smape {d['smape']:.3f}  nrmse {d['nrmse']:.3f}")
        return "\n".join(lines) + "\n"

    def write_text(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.summary())


def _num(v):
    return "" if v is None or (isinstance(v, float) and not np.isfinite(v)) else v


def _low(label):
    if label.startswith("["):
        return label[1:].split(",")[0]
    return ""


def evaluate(tiles: Sequence[EvalTile], buckets: BucketSpec = BucketSpec(),
             plume_threshold: float = PLUME_THRESHOLD, origin_threshold: float = ORIGIN_THRESHOLD,
             pixel_size_m: float = PIXEL_SIZE_M, pr_thresholds=None) -> EvalReport:
    """Detection, localisation and quantification metrics over a tile set.

    TP/FN are bucketed by the gt ERBWS.  A false positive is bucketed with the
    gt plume it was Hungarian-paired to (IoU at or below the threshold), else
    ``"unassigned"``; unassigned false positives count only in ``"all"``.
    """
    e_edges = buckets.erbws_edges
    labels = bucket_labels(e_edges)
    det = {b: [0, 0, 0] for b in labels + [UNASSIGNED, "all"]}
    org = {b: [0, 0, 0, []] for b in labels + [UNASSIGNED, "all"]}
    pix = {}
    integ = []
    for tile in tiles:
        gt_masks = [tile.gt.mask[j] > 0 for j in range(tile.gt.count)]
        gt_b = [assign_bucket(v, e_edges) for v in tile.erbws]
        masks, slots = instance_masks(tile.pred, plume_threshold)
        m = match_instances(masks, gt_masks)
        for i, j, _ in m.tp:
            det[gt_b[j]][0] += 1
        for i in m.fp:
            det[gt_b[m.assigned[i]] if i in m.assigned else UNASSIGNED][1] += 1
        for j in m.fn:
            det[gt_b[j]][2] += 1
        det["all"][0] += len(m.tp)
        det["all"][1] += len(m.fp)
        det["all"][2] += len(m.fn)
        # origins
        p_orig, p_idx = [], []
        for s in slots:
            o = origin_centroid(tile.pred.origin_prob[s], origin_threshold)
            if o is not None:
                p_orig.append(o)
                p_idx.append(s)
        g_orig = [(o[0], o[1]) for o in tile.gt.origins_px[:tile.gt.count] if o is not None]
        g_idx = [j for j, o in enumerate(tile.gt.origins_px[:tile.gt.count]) if o is not None]
        mo = match_origins(np.asarray(p_orig).reshape(-1, 2) * pixel_size_m,
                           np.asarray(g_orig).reshape(-1, 2) * pixel_size_m)
        for i, j, d in mo.tp:
            b = gt_b[g_idx[j]]
            for key in (b, "all"):
                org[key][0] += 1
                org[key][3].append(d)
        for i in mo.fp:
            b = gt_b[g_idx[mo.assigned[i]]] if i in mo.assigned else UNASSIGNED
            org[b][1] += 1
            org["all"][1] += 1
        for j in mo.fn:
            org[gt_b[g_idx[j]]][2] += 1
            org["all"][2] += 1
        # quantification on TP pairs
        for i, j, _ in m.tp:
            s = slots[i]
            pe, ge, gm = tile.pred.enh[s], tile.gt.enh[j], gt_masks[j]
            integ.append((pe, ge, masks[i], gm, tile.erbws[j]))
            _pixel_pair(pix, pe[gm], ge[gm], buckets.enh_edges, "pair")
        if tile.gt.count:
            union = np.any(np.asarray(gt_masks), axis=0)
            _pixel_pair(pix, tile.pred.enh.sum(axis=0)[union], tile.gt.enh.sum(axis=0)[union],
                        buckets.enh_edges, "slotsum")
    detection = {}
    for b, (tp, fp, fn) in det.items():
        if tp + fp + fn == 0:
            continue
        p, r, f = prf(tp, fp, fn)
        detection[b] = {"tp": tp, "fp": fp, "fn": fn, "precision": p, "recall": r, "f1": f}
    origin = {b: {"tp": v[0], "fp": v[1], "fn": v[2],
                  "mean_distance_m": float(np.mean(v[3])) if v[3] else float("nan")}
              for b, v in org.items() if sum(v[:3])}
    pixel = {}
    for b in bucket_labels(buckets.enh_edges):
        if b not in pix:
            continue
        d = pix[b]
        pixel[b] = {"smape": _mean(d.get("pair_smape")), "nrmse": _mean(d.get("pair_nrmse")),
                    "smape_slotsum": _mean(d.get("slotsum_smape")),
                    "nrmse_slotsum": _mean(d.get("slotsum_nrmse")),
                    "n_pairs": len(d.get("pair_smape", []))}
    pr = []
    if pr_thresholds is not None:
        pr = pr_sweep([t.pred for t in tiles],
                      [[t.gt.mask[j] > 0 for j in range(t.gt.count)] for t in tiles],
                      pr_thresholds)
    return EvalReport(detection, pixel, integrated_enh_smape(integ, e_edges), origin, pr,
                      origin.get("all", {}).get("mean_distance_m", float("nan")))


def _mean(v):
    return float(np.mean(v)) if v else float("nan")


def _pixel_pair(store, pred_vals, gt_vals, edges, tag):
    idx = bucket_index(gt_vals, edges)
    labels = bucket_labels(edges)
    for k in np.unique(idx):
        sel = idx == k
        d = store.setdefault(labels[k], {})
        d.setdefault(f"{tag}_smape", []).append(smape(pred_vals[sel], gt_vals[sel]))
        mean_gt = float(np.mean(gt_vals[sel]))
        if mean_gt > 0:
            d.setdefault(f"{tag}_nrmse", []).append(
                normalized_rmse(pred_vals[sel], gt_vals[sel], mean_gt))
