"""Hungarian slot matching and the slot / total / final training losses."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .exceptions import DomainError

N_SLOTS = 10
ORIGIN_DISC_RADIUS_PX = 15
BCE_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_slot: float = 1.0
    lambda_total: float = 1.0
    lambda_enh: float = 2.6
    lambda_mask: float = 1.0
    lambda_origin: float = 24.0
    lambda_e_total: float = 6.0
    lambda_m_total: float = 1.0
    lambda_o_total: float = 19.0
    enh_plume_upweight: float = 30.0
    huber_delta: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise DomainError(f"{f.name} must be non-negative")
        if self.huber_delta <= 0:
            raise DomainError("huber_delta must be positive")


@dataclass(frozen=True, eq=False)
class SlotPrediction:
    """Per-slot enhancement (ppm-m), plume probability and origin probability, each ``(P, H, W)``."""

    enh: np.ndarray
    mask_prob: np.ndarray
    origin_prob: np.ndarray

    def __post_init__(self):
        arrs = [np.asarray(a, dtype=float) for a in (self.enh, self.mask_prob, self.origin_prob)]
        if arrs[0].ndim != 3 or any(a.shape != arrs[0].shape for a in arrs):
            raise DomainError("slot heads must share a (P, H, W) shape")
        for name, a in zip(("mask_prob", "origin_prob"), arrs[1:]):
            if np.any(a < 0) or np.any(a > 1) or np.any(np.isnan(a)):
                raise DomainError(f"{name} must lie in [0, 1]")
        for f, a in zip(("enh", "mask_prob", "origin_prob"), arrs):
            object.__setattr__(self, f, a)

    @property
    def n_slots(self) -> int:
        return self.enh.shape[0]

    @property
    def shape(self):
        return self.enh.shape[1:]

    @classmethod
    def empty(cls, shape, n_slots: int = N_SLOTS):
        z = np.zeros((n_slots,) + tuple(shape))
        return cls(z, z.copy(), z.copy())

    def permuted(self, order) -> "SlotPrediction":
        order = np.asarray(order)
        return SlotPrediction(self.enh[order], self.mask_prob[order], self.origin_prob[order])


def origin_disc(shape, origin_px, radius: float = ORIGIN_DISC_RADIUS_PX) -> np.ndarray:
    """Binary disc centred on the origin pixel; empty when the origin is absent."""
    if origin_px is None:
        return np.zeros(shape, dtype=bool)
    rr, cc = np.ogrid[:shape[0], :shape[1]]
    return (rr - origin_px[0]) ** 2 + (cc - origin_px[1]) ** 2 <= radius**2


@dataclass(frozen=True, eq=False)
class GroundTruthSet:
    """Per-plume enhancement (ppm-m), mask and origin disc, each ``(N, H, W)``."""

    enh: np.ndarray
    mask: np.ndarray
    origin: np.ndarray
    origins_px: tuple = ()

    def __post_init__(self):
        enh = np.asarray(self.enh, dtype=float)
        mask = np.asarray(self.mask, dtype=float)
        origin = np.asarray(self.origin, dtype=float)
        if enh.ndim != 3 or mask.shape != enh.shape or origin.shape != enh.shape:
            raise DomainError("ground-truth arrays must share a (N, H, W) shape")
        object.__setattr__(self, "enh", enh)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "origin", origin)

    @property
    def count(self) -> int:
        return self.enh.shape[0]

    @property
    def shape(self):
        return self.enh.shape[1:]

    @classmethod
    def from_plumes(cls, enh_grids: Sequence, masks: Sequence, origins: Sequence,
                    radius: float = ORIGIN_DISC_RADIUS_PX, shape=None):
        enh = np.asarray(enh_grids, dtype=float)
        if enh.ndim == 2:
            enh = enh[None]
        if enh.size == 0:
            if shape is None:
                raise DomainError("an empty ground-truth set needs an explicit shape")
            enh = np.zeros((0,) + tuple(shape))
        shape = enh.shape[1:]
        discs = np.array([origin_disc(shape, o, radius) for o in origins]).reshape(enh.shape)
        return cls(enh, np.asarray(masks, dtype=float).reshape(enh.shape), discs, tuple(origins))

    def padded(self, n_slots: int) -> "GroundTruthSet":
        """Append all-zero targets so unmatched slots learn empty outputs."""
        if self.count > n_slots:
            raise DomainError(f"{self.count} ground-truth plumes exceed {n_slots} slots")
        pad = ((0, n_slots - self.count), (0, 0), (0, 0))
        return GroundTruthSet(np.pad(self.enh, pad), np.pad(self.mask, pad),
                              np.pad(self.origin, pad),
                              tuple(self.origins_px) + (None,) * (n_slots - self.count))


# --------------------------------------------------------------------------
# elementary losses

def huber(residual, delta: float = 1.0):
    if delta <= 0:
        raise DomainError("huber delta must be positive")
    a = np.abs(np.asarray(residual, dtype=float))
    out = np.where(a <= delta, 0.5 * a**2, delta * (a - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


def bce(p, y, eps: float = BCE_EPS):
    """Binary cross-entropy with each logarithm floored at ``ln(eps)``.

    For ``p`` in ``[eps, 1 - eps]`` this equals BCE on ``clip(p, eps, 1 - eps)``;
    an exact 0/1 prediction of a 0/1 target costs exactly zero.
    """
    p = np.asarray(p, dtype=float)
    y = np.asarray(y, dtype=float)
    log_p = np.log(np.clip(p, eps, 1.0))
    log_q = np.log(np.clip(1.0 - p, eps, 1.0))
    out = -(y * log_p + (1.0 - y) * log_q)
    return float(out) if out.ndim == 0 else out


def hungarian_assign(cost):
    """Minimum-cost injective matching; returns ``(row_ind, col_ind)``."""
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise DomainError("cost matrix must be 2-D")
    if np.any(np.isnan(cost)):
        raise DomainError("cost matrix contains NaN")
    return linear_sum_assignment(cost)


def _sqrt_enh(e):
    return np.sqrt(np.clip(e, 0.0, None))


def _weighted_mean(values, weights):
    return float(np.sum(values * weights) / np.sum(weights))


def pair_cost(pred: SlotPrediction, i: int, gt: GroundTruthSet, j: int,
              w: LossWeights = LossWeights()) -> float:
    """Weighted enhancement + mask + origin loss of slot ``i`` against target ``j``."""
    weights = np.where(gt.mask[j] > 0, w.enh_plume_upweight, 1.0)
    e = _weighted_mean(huber(_sqrt_enh(pred.enh[i]) - _sqrt_enh(gt.enh[j]), w.huber_delta),
                       weights)
    m = float(np.mean(bce(pred.mask_prob[i], gt.mask[j])))
    o = float(np.mean(bce(pred.origin_prob[i], gt.origin[j])))
    return w.lambda_enh * e + w.lambda_mask * m + w.lambda_origin * o


def cost_matrix(pred: SlotPrediction, gt: GroundTruthSet, w: LossWeights = LossWeights()):
    """``(P, P)`` pairwise costs against the zero-padded ground truth."""
    if pred.shape != gt.shape:
        raise DomainError(f"prediction grid {pred.shape} does not match ground truth {gt.shape}")
    full = gt.padded(pred.n_slots)
    P = pred.n_slots
    return np.array([[pair_cost(pred, i, full, j, w) for j in range(P)] for i in range(P)])


def slot_loss(pred: SlotPrediction, gt: GroundTruthSet, w: LossWeights = LossWeights()):
    """Hungarian-minimal summed pair loss and the matching ``sigma[i] = j``."""
    cost = cost_matrix(pred, gt, w)
    rows, cols = hungarian_assign(cost)
    sigma = np.empty(pred.n_slots, dtype=int)
    sigma[rows] = cols
    return float(cost[rows, cols].sum()), sigma


def total_loss(pred: SlotPrediction, gt: GroundTruthSet, w: LossWeights = LossWeights()) -> float:
    if pred.shape != gt.shape:
        raise DomainError(f"prediction grid {pred.shape} does not match ground truth {gt.shape}")
    sum_pred = pred.enh.sum(axis=0)
    sum_gt = gt.enh.sum(axis=0) if gt.count else np.zeros(gt.shape)
    max_m_gt = gt.mask.max(axis=0) if gt.count else np.zeros(gt.shape)
    max_o_gt = gt.origin.max(axis=0) if gt.count else np.zeros(gt.shape)
    weights = np.where(max_m_gt > 0, w.enh_plume_upweight, 1.0)
    e = _weighted_mean(huber(_sqrt_enh(sum_pred) - _sqrt_enh(sum_gt), w.huber_delta), weights)
    m = float(np.mean(bce(pred.mask_prob.max(axis=0), max_m_gt)))
    o = float(np.mean(bce(pred.origin_prob.max(axis=0), max_o_gt)))
    return w.lambda_e_total * e + w.lambda_m_total * m + w.lambda_o_total * o


def final_loss(pred: SlotPrediction, gt: GroundTruthSet, w: LossWeights = LossWeights()) -> float:
    s = slot_loss(pred, gt, w)[0] if w.lambda_slot else 0.0
    t = total_loss(pred, gt, w) if w.lambda_total else 0.0
    return w.lambda_slot * s + w.lambda_total * t
