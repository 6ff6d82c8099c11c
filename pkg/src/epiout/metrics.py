"""Uncertainty-weighted error metrics, timing helpers and result tables."""
from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, fields

import numpy as np


class UndefinedMetricError(ValueError):
    """Weighted MSE has no confident test point to average over."""


def weighted_mse(predictions, targets, etas) -> float:
    """Squared errors weighted by confidence ``1 - eta``, normalised by total confidence."""
    pred = np.asarray(predictions, dtype=np.float64).reshape(-1)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    eta = np.asarray(etas, dtype=np.float64).reshape(-1)
    if not (len(pred) == len(y) == len(eta)):
        raise ValueError("predictions, targets and etas must have equal length")
    if np.any((eta < 0) | (eta > 1)):
        raise ValueError("etas must lie in [0, 1]")
    w = 1.0 - eta
    total = w.sum()
    if not total > 0:
        raise UndefinedMetricError("weighted MSE undefined: eta == 1 at every point")
    return float(np.sum((y - pred) ** 2 * w) / total)


def mse(predictions, targets) -> float:
    pred = np.asarray(predictions, dtype=np.float64).reshape(-1)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    return float(np.mean((y - pred) ** 2))


def total_discount(etas) -> float:
    eta = np.asarray(etas, dtype=np.float64)
    if np.any((eta < 0) | (eta > 1)):
        raise ValueError("etas must lie in [0, 1]")
    return float(eta.sum())


def timed(thunk):
    """Run ``thunk()`` once; return ``(result, wall seconds)`` on the monotonic clock."""
    t0 = time.perf_counter()
    out = thunk()
    return out, time.perf_counter() - t0


def best_of(thunk, repeats: int = 3):
    """``(result of the last run, fastest wall time)`` over ``repeats`` runs."""
    best = np.inf
    out = None
    for _ in range(repeats):
        out, dt = timed(thunk)
        best = min(best, dt)
    return out, best


@dataclass
class EvalRecord:
    model: str
    dataset: str
    seed: int
    rho: float
    mse: float
    total_discount_test: float
    total_discount_train: float
    train_seconds: float = float("nan")
    predict_seconds: float = float("nan")


SUMMARY_FIELDS = [f.name for f in fields(EvalRecord) if not f.name.endswith("_seconds")]
TIMING_FIELDS = ["model", "dataset", "seed", "train_seconds", "predict_seconds"]


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_records(records, path, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for rec in records:
            row = asdict(rec)
            w.writerow([_fmt(row[c]) for c in columns])


def write_predictions(path, x, prediction, eta, seed=None) -> None:
    """Per-point results: inputs, prediction and the eta used for weighting."""
    x = np.asarray(x, dtype=np.float64)
    x = x[:, None] if x.ndim == 1 else x
    pred = np.asarray(prediction, dtype=np.float64).reshape(len(x), -1)
    eta = np.asarray(eta, dtype=np.float64).reshape(-1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        head = [f"x{i + 1}" for i in range(x.shape[1])] + ["prediction", "eta"]
        w.writerow((["seed"] if seed is not None else []) + head)
        for xi, p, e in zip(x, pred[:, 0], eta):
            row = [repr(float(v)) for v in xi] + [repr(float(p)), repr(float(e))]
            w.writerow(([seed] if seed is not None else []) + row)
