"""Saliency evaluation (MAE, precision/recall, F-measure) and the
communication-overhead ledger.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

BETA_SQ = 0.3  # precision-weighted F, the standard saliency setting
TAU_GT = 0.5

THRESHOLD_POLICIES = ("adaptive", "max-f")


@dataclass
class SaliencyScore:
    mae: float
    precision: float
    recall: float
    f_measure: float
    threshold: float
    policy: str


@dataclass
class OverheadLedger:
    original_bytes: int
    map_payload_bytes: int
    caption_payload_bytes: int
    total_bytes: int
    ratio_permille: float


def _check_same_shape(pred: np.ndarray, gt: np.ndarray):
    if pred.shape != gt.shape:
        raise ValueError(f"map shapes differ: {pred.shape} vs {gt.shape}")


def mae(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean absolute per-pixel difference."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_same_shape(pred, gt)
    return float(np.abs(pred - gt).mean())


def precision_recall(pred: np.ndarray, gt: np.ndarray, tau_pred: float, tau_gt: float = TAU_GT):
    """Binarise both maps and count; empty pred -> precision 0, empty gt -> recall 0."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_same_shape(pred, gt)
    p = pred > tau_pred
    g = gt > tau_gt
    tp = float(np.logical_and(p, g).sum())
    n_pred = float(p.sum())
    n_gt = float(g.sum())
    precision = tp / n_pred if n_pred > 0 else 0.0
    recall = tp / n_gt if n_gt > 0 else 0.0
    return precision, recall


def f_measure(precision: float, recall: float, beta_sq: float = BETA_SQ) -> float:
    """(1+b2)*P*R / (b2*P + R); 0 when the denominator vanishes."""
    denom = beta_sq * precision + recall
    if denom <= 0.0:
        return 0.0
    return (1.0 + beta_sq) * precision * recall / denom


def _max_f_sweep(pred: np.ndarray, gt: np.ndarray, beta_sq: float = BETA_SQ):
    """Best (P, R, F, tau) over the 255 thresholds k/255, k = 0..254."""
    best = (0.0, 0.0, -1.0, 0.0)
    for k in range(255):
        tau = k / 255.0
        p, r = precision_recall(pred, gt, tau)
        f = f_measure(p, r, beta_sq)
        if f > best[2]:
            best = (p, r, f, tau)
    return best


def score_map(pred: np.ndarray, gt: np.ndarray, policy: str = "adaptive") -> SaliencyScore:
    """MAE plus F at the policy threshold (adaptive 2*mean, or max over k/255)."""
    if policy not in THRESHOLD_POLICIES:
        raise ValueError(f"unknown threshold policy {policy!r}")
    m = mae(pred, gt)
    if policy == "adaptive":
        tau = min(1.0, 2.0 * float(np.mean(pred)))
        p, r = precision_recall(pred, gt, tau)
        f = f_measure(p, r)
    else:
        p, r, f, tau = _max_f_sweep(pred, gt)
    return SaliencyScore(m, p, r, f, tau, policy)


def ledger(
    grid_cells: int,
    n_idx: int,
    caption_bytes: int,
    original_bytes: int,
) -> OverheadLedger:
    """Byte accounting for one transmitted image.

    grid_cells = 0 makes a caption-only ledger. The per-mille ratio is
    exact rational arithmetic rounded to 4 decimal places.
    """
    if original_bytes <= 0:
        raise ValueError("original_bytes must be positive")
    if grid_cells > 0:
        bits = grid_cells * max(1, int(np.ceil(np.log2(n_idx))))
        map_bytes = (bits + 7) // 8
    else:
        map_bytes = 0
    total = map_bytes + caption_bytes
    ratio = Fraction(1000 * total, original_bytes)
    ratio_4dp = float(round(ratio * 10000) / Fraction(10000))
    return OverheadLedger(original_bytes, map_bytes, caption_bytes, total, ratio_4dp)
