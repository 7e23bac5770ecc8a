"""Accuracy metrics over held-out QoS entries."""
from __future__ import annotations

import numpy as np


def _as_arrays(truth, prediction):
    if prediction is None:
        pairs = np.asarray(truth, dtype=np.float64)
        if pairs.size == 0:
            raise ValueError("metrics need at least one (truth, prediction) pair")
        pairs = pairs.reshape(-1, 2)
        truth, prediction = pairs[:, 0], pairs[:, 1]
    truth = np.asarray(truth, dtype=np.float64)
    prediction = np.asarray(prediction, dtype=np.float64)
    if truth.shape != prediction.shape:
        raise ValueError("truth and prediction lengths differ")
    if truth.size == 0:
        raise ValueError("metrics need at least one (truth, prediction) pair")
    return truth, prediction


def mae(truth, prediction=None) -> float:
    """Mean absolute error.

    Accepts either a sequence of (truth, prediction) pairs or two arrays.
    """
    t, p = _as_arrays(truth, prediction)
    return float(np.mean(np.abs(t - p)))


def rmse(truth, prediction=None) -> float:
    t, p = _as_arrays(truth, prediction)
    return float(np.sqrt(np.mean((t - p) ** 2)))
