"""Normalized regulation signals and ensemble-level regulation targets."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .devices import _n_steps


@dataclass(frozen=True)
class NormalizedSignal:
    samples: np.ndarray
    dt: float
    source: str = ""

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=float)
        if x.ndim != 1 or not np.all(np.isfinite(x)):
            raise ValueError("normalized signal must be a finite 1-D series")
        if np.any(np.abs(x) > 1 + 1e-9):
            raise ValueError("normalized signal values must lie in [-1, 1]")
        object.__setattr__(self, "samples", np.clip(x, -1.0, 1.0))

    @property
    def horizon(self) -> float:
        return len(self.samples) * self.dt


@dataclass(frozen=True)
class RegulationSignal:
    samples: np.ndarray  # kW
    dt: float
    gamma: float
    id: str = ""

    @property
    def horizon(self) -> float:
        return len(self.samples) * self.dt


def _read_series(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["time_s", "value"]:
        raise ValueError(f"{path}: expected header 'time_s,value'")
    data = np.array([[float(a), float(b)] for a, b in rows[1:]], dtype=float).reshape(-1, 2)
    return data[:, 0], data[:, 1]


def load_normalized(path, dt: float | None = None) -> NormalizedSignal:
    """Read a ``time_s,value`` CSV and resample it to ``dt`` by zero-order hold."""
    t, v = _read_series(path)
    if len(t) == 0:
        raise ValueError(f"{path}: empty signal")
    if len(t) > 1:
        steps = np.diff(t)
        if steps[0] <= 0 or not np.allclose(steps, steps[0], rtol=0, atol=1e-9):
            raise ValueError(f"{path}: non-uniform sample spacing")
        src_dt = float(steps[0])
    else:
        src_dt = float(dt) if dt else 1.0
    if np.any(np.abs(v) > 1 + 1e-9):
        raise ValueError(f"{path}: values outside [-1, 1]")
    if dt is None or dt == src_dt:
        return NormalizedSignal(v, src_dt, str(path))
    horizon = len(v) * src_dt
    n = _n_steps(horizon, dt)
    idx = np.minimum((np.arange(n) * dt / src_dt + 1e-9).astype(int), len(v) - 1)
    return NormalizedSignal(v[idx], dt, str(path))


def save_series(path, values, dt) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_s", "value"])
        for k, x in enumerate(values):
            w.writerow([repr(k * dt), repr(float(x))])


def synth_normalized(
    seed: int,
    horizon: float,
    dt: float,
    reversion: float | None = None,
    smoothing: float = 60.0,
) -> NormalizedSignal:
    """Random walk, low-pass filtered, centred, clipped and rescaled to max |p| = 1.

    ``smoothing`` (and the optional mean ``reversion``) are time constants in
    seconds, so the statistical shape does not depend on ``dt``.  Removing the
    sample mean keeps each signal roughly energy neutral over the window, as
    regulation signals are designed to be.
    """
    n = _n_steps(horizon, dt)
    rng = np.random.default_rng(seed)
    rho = 1.0 if reversion is None else np.exp(-dt / reversion)
    walk = lfilter([1.0], [1.0, -rho], rng.standard_normal(n))
    alpha = np.exp(-dt / smoothing)
    smooth = lfilter([1.0 - alpha], [1.0, -alpha], walk)
    smooth = smooth - smooth.mean()
    lim = 3.0 * smooth.std()
    if lim > 0:
        smooth = np.clip(smooth, -lim, lim)
    peak = np.max(np.abs(smooth))
    return NormalizedSignal(smooth / peak if peak > 0 else smooth, dt, f"synth:{seed}")


def build_regulation(baseline: np.ndarray, signal: NormalizedSignal, gamma: float, id: str = "") -> RegulationSignal:
    baseline = np.asarray(baseline, dtype=float)
    if baseline.shape != signal.samples.shape:
        raise ValueError("baseline and normalized signal are on different grids")
    offset = gamma * baseline.mean() * signal.samples
    return RegulationSignal(baseline + offset, signal.dt, gamma, id or signal.source)


def within_envelope(deviation: np.ndarray, p_minus: np.ndarray, p_plus: np.ndarray) -> bool:
    return bool(np.all(deviation >= p_minus) and np.all(deviation <= p_plus))


def filter_by_envelope(signals, envelope, baseline) -> list:
    """Keep the signals whose deviation from ``baseline`` stays within ``envelope``."""
    baseline = np.asarray(baseline, dtype=float)
    kept = []
    for sig in signals:
        if sig.samples.shape != baseline.shape or envelope.p_plus.shape != baseline.shape:
            raise ValueError("signal, envelope and baseline must share one grid")
        if within_envelope(sig.samples - baseline, envelope.p_minus, envelope.p_plus):
            kept.append(sig)
    return kept
