"""Forecast error metrics: RMSE, MAE, and floored MAPE."""

from __future__ import annotations

import numpy as np

from .errors import DataError

MAPE_FLOOR = 1e-3


def _flat_pair(y, y_hat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.shape != y_hat.shape:
        raise DataError(f"metric inputs differ in length: {y.shape} vs {y_hat.shape}")
    if y.size == 0:
        raise DataError("metrics undefined on empty input")
    return y, y_hat


def rmse(y, y_hat) -> float:
    y, y_hat = _flat_pair(y, y_hat)
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


def mae(y, y_hat) -> float:
    y, y_hat = _flat_pair(y, y_hat)
    return float(np.mean(np.abs(y - y_hat)))


def mape(y, y_hat, floor: float = MAPE_FLOOR) -> float:
    """Percentage error over entries with |y| >= floor; smaller ones are excluded.

    The floor keeps near-zero ground truth from blowing up the average; its
    value is part of the reporting contract, so change it knowingly.
    """
    y, y_hat = _flat_pair(y, y_hat)
    keep = np.abs(y) >= floor
    if not keep.any():
        raise DataError("all entries below the MAPE floor")
    return float(100.0 * np.mean(np.abs(y[keep] - y_hat[keep]) / np.abs(y[keep])))
