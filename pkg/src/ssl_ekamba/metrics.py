"""RMSE, Recall@k and MAP@k over sequences of risk maps.

Inputs are ``(T, N)`` arrays (maps flattened to regions). Ranking uses the
predicted value descending, ties broken by lower region index; a region is
relevant when its ground-truth risk is positive.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np


def _as_seq(X, X_hat):
    X = np.asarray(X, dtype=np.float64)
    X_hat = np.asarray(X_hat, dtype=np.float64)
    if X.shape != X_hat.shape:
        raise ValueError(f"shape mismatch {X.shape} vs {X_hat.shape}")
    if X.size == 0:
        raise ValueError("empty input")
    if X.ndim == 1:
        X, X_hat = X[None], X_hat[None]
    return X.reshape(X.shape[0], -1), X_hat.reshape(X_hat.shape[0], -1)


def rmse(X, X_hat) -> float:
    X, X_hat = _as_seq(X, X_hat)
    return float(np.sqrt(np.mean(np.mean((X - X_hat) ** 2, axis=1))))


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores; ties to the lower index."""
    # lexsort: last key is primary
    order = np.lexsort((np.arange(scores.size), -scores))
    return order[:k]


def _check_k(k: int, N: int) -> None:
    if not 1 <= k <= N:
        raise ValueError(f"k={k} must lie in [1, {N}]")


def recall_at_k(X, X_hat, k: int) -> float:
    X, X_hat = _as_seq(X, X_hat)
    _check_k(k, X.shape[1])
    per_slot = [int((X[t, top_k(X_hat[t], k)] > 0).sum()) / k for t in range(X.shape[0])]
    return math.fsum(per_slot) / X.shape[0]


def map_at_k(X, X_hat, k: int) -> float:
    X, X_hat = _as_seq(X, X_hat)
    _check_k(k, X.shape[1])
    per_slot = []
    for t in range(X.shape[0]):
        rel = (X[t, top_k(X_hat[t], k)] > 0).astype(np.float64)
        precision = np.cumsum(rel) / np.arange(1, k + 1)
        # fsum: correctly rounded, so the result does not depend on summation order
        per_slot.append(math.fsum((precision * rel).tolist()) / k)
    return math.fsum(per_slot) / X.shape[0]


def evaluate(X, X_hat, k: int) -> dict[str, float]:
    return {
        "rmse": rmse(X, X_hat),
        f"recall@{k}": recall_at_k(X, X_hat, k),
        f"map@{k}": map_at_k(X, X_hat, k),
    }


def write_report(path: Path, report: dict) -> None:
    """Flat ``name value`` lines; floats with 17 significant digits."""
    lines = []
    for name, value in report.items():
        if isinstance(value, float):
            value = f"{value:.17g}"
        lines.append(f"{name} {value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_report(path: Path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            name, value = line.split(" ", 1)
            try:
                out[name] = int(value)
            except ValueError:
                try:
                    out[name] = float(value)
                except ValueError:
                    out[name] = value
    return out
