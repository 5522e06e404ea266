"""Forecast-accuracy metrics: MSE, RMSE (= sqrt(MSE)) and MAE."""

from __future__ import annotations

import numpy as np

from .errors import LengthMismatch


def _paired(predictions, targets) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise LengthMismatch(f"predictions {p.shape} vs targets {t.shape}")
    if p.size == 0:
        raise LengthMismatch("need at least one prediction/target pair")
    return p, t


def mse(predictions, targets) -> float:
    p, t = _paired(predictions, targets)
    return float(np.mean((p - t) ** 2))


def rmse(predictions, targets) -> float:
    return float(np.sqrt(mse(predictions, targets)))


def mae(predictions, targets) -> float:
    p, t = _paired(predictions, targets)
    return float(np.mean(np.abs(p - t)))


def evaluate(predictions, targets) -> dict:
    """All three metrics in one pass-friendly dict."""
    return {
        "mse": mse(predictions, targets),
        "rmse": rmse(predictions, targets),
        "mae": mae(predictions, targets),
    }
