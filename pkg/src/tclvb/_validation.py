"""Input checks shared by the estimators and fitting routines."""

from __future__ import annotations

import numpy as np
from sklearn.utils import check_array


def check_deviations(U, n_steps: int | None = None) -> np.ndarray:
    """Deviation signals as a finite float array of shape (n_signals, n_steps)."""
    U = check_array(U, dtype=np.float64, ensure_2d=True, ensure_min_samples=1, ensure_min_features=1)
    if n_steps is not None and U.shape[1] != n_steps:
        raise ValueError(f"expected signals with {n_steps} steps, got {U.shape[1]}")
    return U


def check_violation_times(F, n_signals: int, horizon: float) -> np.ndarray:
    F = check_array(np.asarray(F, dtype=float).reshape(-1, 1), dtype=np.float64).ravel()
    if len(F) != n_signals:
        raise ValueError(f"{len(F)} violation times for {n_signals} signals")
    if np.any(F <= 0) or np.any(F > horizon + 1e-9):
        raise ValueError("violation times must lie in (0, horizon]")
    return F


def check_same_grid(*series) -> None:
    shapes = {np.shape(s) for s in series}
    if len(shapes) > 1:
        raise ValueError(f"series are on different grids: {sorted(shapes)}")
