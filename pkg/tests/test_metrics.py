"""Metric oracles: hand-counted MAE/precision/recall cases, the
F-measure formula, brute-force threshold sweeps, ledger arithmetic.
"""
import numpy as np
import pytest

from ulbsc import metrics


def test_mae_examples():
    a = np.array([[1.0, 0.0], [0.5, 0.5]])
    g = np.array([[1.0, 1.0], [0.0, 0.0]])
    assert metrics.mae(a, g) == 0.5
    assert metrics.mae(g, g) == 0.0
    assert metrics.mae(np.ones((3, 3)), np.zeros((3, 3))) == 1.0


def test_mae_symmetry_and_range():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.uniform(0, 1, size=(6, 5))
        b = rng.uniform(0, 1, size=(6, 5))
        assert metrics.mae(a, b) == metrics.mae(b, a)
        assert 0.0 <= metrics.mae(a, b) <= 1.0
    with pytest.raises(ValueError):
        metrics.mae(np.zeros((2, 2)), np.zeros((3, 3)))


def test_precision_recall_counting_oracle():
    gt = np.zeros((4, 4))
    gt[:2, :2] = 1.0  # 4 true pixels
    pred = np.zeros((4, 4))
    pred[:2, :] = 1.0  # covers gt plus an equal-size extra region
    p, r = metrics.precision_recall(pred, gt, tau_pred=0.5)
    assert (p, r) == (0.5, 1.0)

    p, r = metrics.precision_recall(gt, gt, tau_pred=0.5)
    assert (p, r) == (1.0, 1.0)

    p, r = metrics.precision_recall(np.zeros((4, 4)), gt, tau_pred=0.5)
    assert (p, r) == (0.0, 0.0)  # empty prediction rule


def test_f_measure_formula():
    assert metrics.f_measure(1.0, 1.0) == 1.0
    assert metrics.f_measure(0.5, 0.5) == 0.5  # fixed point at P == R
    assert np.isclose(metrics.f_measure(1.0, 0.3), 1.3 * 0.3 / 0.6)  # = 0.65
    assert metrics.f_measure(0.0, 0.0) == 0.0


def test_f_measure_monotone():
    rng = np.random.default_rng(1)
    for _ in range(100):
        p, r, d = rng.uniform(0, 1, size=3)
        assert metrics.f_measure(min(p + d, 1.0), r) >= metrics.f_measure(p, r) - 1e-12
        assert metrics.f_measure(p, min(r + d, 1.0)) >= metrics.f_measure(p, r) - 1e-12


def _brute_force_max_f(pred, gt):
    """Independent oracle: naive counting at all 255 thresholds."""
    best = -1.0
    for k in range(255):
        tau = k / 255.0
        tp = fp = fn = 0
        for r in range(pred.shape[0]):
            for c in range(pred.shape[1]):
                pb = pred[r, c] > tau
                gb = gt[r, c] > 0.5
                tp += pb and gb
                fp += pb and not gb
                fn += (not pb) and gb
        p = tp / (tp + fp) if tp + fp else 0.0
        rr = tp / (tp + fn) if tp + fn else 0.0
        denom = 0.3 * p + rr
        f = 1.3 * p * rr / denom if denom > 0 else 0.0
        best = max(best, f)
    return best


def test_score_map_policies():
    rng = np.random.default_rng(2)
    gt = (rng.uniform(0, 1, size=(4, 4)) > 0.5).astype(float)
    assert metrics.score_map(gt, gt, "adaptive").mae == 0.0
    assert metrics.score_map(gt, gt, "adaptive").f_measure == 1.0
    assert metrics.score_map(gt, gt, "max-f").f_measure == 1.0
    with pytest.raises(ValueError):
        metrics.score_map(gt, gt, "bogus")


def test_max_f_matches_brute_force_on_hand_maps():
    rng = np.random.default_rng(3)
    for i in range(10):
        pred = np.round(rng.uniform(0, 1, size=(4, 4)) * 255) / 255
        gt = (rng.uniform(0, 1, size=(4, 4)) > 0.4).astype(float)
        got = metrics.score_map(pred, gt, "max-f").f_measure
        assert got == _brute_force_max_f(pred, gt), f"case {i}"


def test_max_f_dominates_adaptive():
    rng = np.random.default_rng(4)
    for _ in range(20):
        pred = rng.uniform(0, 1, size=(8, 8))
        gt = (rng.uniform(0, 1, size=(8, 8)) > 0.5).astype(float)
        assert metrics.score_map(pred, gt, "max-f").f_measure >= \
            metrics.score_map(pred, gt, "adaptive").f_measure - 1e-12


def test_ledger_byte_arithmetic():
    led = metrics.ledger(grid_cells=1, n_idx=256, caption_bytes=30, original_bytes=64 * 64 * 3)
    assert led.map_payload_bytes == 1
    assert led.total_bytes == 31
    assert led.caption_payload_bytes == 30
    caption = "a small circle in the top left"
    assert len(caption.encode("utf-8")) == 30


def test_ledger_reproduces_published_ratio():
    # 24.548 KB original, 0.014 KB payload -> 0.57 per mille
    led = metrics.ledger(grid_cells=0, n_idx=256, caption_bytes=14, original_bytes=24548)
    assert led.ratio_permille == 0.5703
    assert round(led.ratio_permille, 2) == 0.57


def test_ledger_ratio_four_decimals_exact():
    led = metrics.ledger(grid_cells=1, n_idx=256, caption_bytes=30, original_bytes=64 * 64 * 3)
    # 31 / 12288 * 1000 = 2.5227864583... -> 2.5228
    assert led.ratio_permille == 2.5228
    assert led.total_bytes == led.map_payload_bytes + led.caption_payload_bytes


def test_ledger_caption_only():
    led = metrics.ledger(grid_cells=0, n_idx=256, caption_bytes=20, original_bytes=1000)
    assert led.map_payload_bytes == 0 and led.total_bytes == 20
    with pytest.raises(ValueError):
        metrics.ledger(1, 256, 10, 0)
