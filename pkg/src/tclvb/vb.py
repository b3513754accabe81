"""First-order virtual battery (VB): dx/dt = -a x - u with capacity and power limits.

``u`` is the deviation of ensemble power from its baseline (kW); a positive
deviation drains the battery.  ``a`` is in 1/h, ``x`` in kWh, time in seconds.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

_SERIES_THRESHOLD = 1e-8


def _coeffs(a: float, h: float) -> tuple[float, float]:
    """Return (rho, g) with x' = rho x - g u over ``h`` hours of constant ``u``."""
    ah = a * h
    if ah < _SERIES_THRESHOLD:
        return 1.0 - ah + ah * ah / 2, h * (1.0 - ah / 2)
    return math.exp(-ah), -math.expm1(-ah) / a


def vb_step(x: float, a: float, u: float, dt: float) -> float:
    if dt < 0:
        raise ValueError("dt must be non-negative")
    rho, g = _coeffs(a, dt / 3600.0)
    return rho * x - g * u


def simulate_vb(x0, a: float, u, dt: float) -> np.ndarray:
    """State at every step boundary; output has one more sample than ``u`` on the last axis."""
    u = np.asarray(u, dtype=float)
    rho, g = _coeffs(a, dt / 3600.0)
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), u.shape[:-1])
    zi = (rho * x0)[..., None]
    tail, _ = lfilter([-g], [1.0, -rho], u, axis=-1, zi=zi)
    return np.concatenate((x0[..., None], tail), axis=-1)


@dataclass
class VbParams:
    a: float
    c_lower: float
    c_upper: float
    x0: float
    p_minus: np.ndarray | None = None
    p_plus: np.ndarray | None = None

    def __post_init__(self):
        if self.a < 0:
            raise ValueError("dissipation a must be non-negative")
        if not self.c_lower <= self.x0 <= self.c_upper:
            raise ValueError("initial soc must lie within [c_lower, c_upper]")


def power_violation_time(u, p_minus, p_plus, dt: float, horizon: float) -> np.ndarray:
    """Start time of the first step whose input leaves [p_minus, p_plus]."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    out = np.full(u.shape[0], float(horizon))
    if p_minus is None and p_plus is None:
        return out
    bad = np.zeros(u.shape, dtype=bool)
    if p_plus is not None:
        bad |= u > np.asarray(p_plus)[: u.shape[1]]
    if p_minus is not None:
        bad |= u < np.asarray(p_minus)[: u.shape[1]]
    hit = bad.any(axis=1)
    out[hit] = bad[hit].argmax(axis=1) * dt
    return out


def _crossing_offset(x_prev, u, bound, a, h):
    """Hours into a step at which the exact trajectory reaches ``bound``."""
    x_prev, u, bound = np.broadcast_arrays(x_prev, u, bound)
    with np.errstate(divide="ignore", invalid="ignore"):
        if a * h < 1e-6:
            tau = (x_prev - bound) / u
        else:
            tau = np.log((x_prev + u / a) / (bound + u / a)) / a
    tau = np.where(np.isfinite(tau), tau, 0.0)
    return np.clip(tau, 0.0, h)


def capacity_violation_times(X, U, a, c_lower, c_upper, dt: float) -> np.ndarray:
    """First time each trajectory leaves [c_lower, c_upper]; ``inf`` if never.

    ``X`` holds states at step boundaries (n, K+1); ``c_lower``/``c_upper`` may be
    arrays of m candidate bounds, giving an (n, m) result.
    """
    X = np.atleast_2d(X)
    U = np.atleast_2d(U)
    lo = np.atleast_1d(np.asarray(c_lower, dtype=float))
    hi = np.atleast_1d(np.asarray(c_upper, dtype=float))
    lo, hi = np.broadcast_arrays(lo, hi)
    n, m = X.shape[0], lo.size
    h = dt / 3600.0
    out = np.full((n, m), np.inf)
    chunk = max(1, int(2e7 // max(1, X.size)))
    for s in range(0, m, chunk):
        l, u_ = lo[s : s + chunk], hi[s : s + chunk]
        outside = (X[:, :, None] < l[None, None, :]) | (X[:, :, None] > u_[None, None, :])
        hit = outside.any(axis=1)
        k = outside.argmax(axis=1)  # (n, c)
        ii, cc = np.nonzero(hit)
        kk = k[ii, cc]
        res = np.zeros(len(ii))
        inner = kk > 0
        i2, c2, k2 = ii[inner], cc[inner], kk[inner]
        x_end = X[i2, k2]
        bound = np.where(x_end < l[c2], l[c2], u_[c2])
        tau = _crossing_offset(X[i2, k2 - 1], U[i2, k2 - 1], bound, a, h)
        res[inner] = (k2 - 1) * dt + tau * 3600.0
        block = out[:, s : s + chunk]
        block[ii, cc] = res
    return out


def violation_times(params: VbParams, U, dt: float, horizon: float | None = None) -> np.ndarray:
    U = np.atleast_2d(np.asarray(U, dtype=float))
    horizon = U.shape[1] * dt if horizon is None else horizon
    X = simulate_vb(params.x0, params.a, U, dt)
    cap = capacity_violation_times(X, U, params.a, params.c_lower, params.c_upper, dt)[:, 0]
    pw = power_violation_time(U, params.p_minus, params.p_plus, dt, horizon)
    return np.minimum(np.minimum(cap, pw), horizon)


def vb_violation_time(params: VbParams, u, dt: float, horizon: float | None = None) -> float:
    return float(violation_times(params, np.asarray(u, dtype=float)[None, :], dt, horizon)[0])


# -- analytic state of charge from device temperatures ------------------------


def initial_soc_ac(temps, acs) -> float:
    """Band-referenced AC energy: sum of (T - (T_set - dT/2)) / (eta / C)."""
    temps = np.asarray(temps, dtype=float)
    low = np.array([p.setpoint - p.deadband / 2 for p in acs])
    scale = np.array([p.thermal_capacitance / p.cop for p in acs])
    return float(np.sum((temps - low) * scale))


def initial_soc_ewh(temps, ewhs) -> float:
    """EWH headroom below the upper band edge: sum of (T_set + dT/2 - T) * C_w."""
    temps = np.asarray(temps, dtype=float)
    high = np.array([p.setpoint + p.deadband / 2 for p in ewhs])
    cap = np.array([p.thermal_capacitance for p in ewhs])
    return float(np.sum((high - temps) * cap))


def ensemble_soc(ensemble, temps) -> np.ndarray:
    """Combined AC + EWH state of charge for temperatures shaped (..., N)."""
    temps = np.asarray(temps, dtype=float)
    ewh = ensemble.is_ewh
    per_device = np.where(
        ewh,
        (ensemble.high - temps) * ensemble.C,
        (temps - ensemble.low) * ensemble.C / ensemble.eta,
    )
    return per_device.sum(axis=-1)


def initial_soc(ensemble, temps=None) -> float:
    temps = ensemble.initial_temps if temps is None else temps
    return initial_soc_ac(temps[: ensemble.n_ac], ensemble.acs) + initial_soc_ewh(
        temps[ensemble.n_ac :], ensemble.ewhs
    )


def soc_capacity(ensemble) -> float:
    """Analytic SOC with every device at the far band edge (full battery)."""
    return float(np.sum(np.where(ensemble.is_ewh, ensemble.C, ensemble.C / ensemble.eta) * ensemble.deadband))


@dataclass
class SocTrace:
    x: np.ndarray
    dt: float
    source: str

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_s", "soc_kwh", "source"])
            for k, v in enumerate(self.x):
                w.writerow([repr(k * self.dt), repr(float(v)), self.source])


def analytic_soc_trace(temps, ensemble, dt: float) -> SocTrace:
    return SocTrace(ensemble_soc(ensemble, temps), dt, "analytic")


def vb_soc_trace(params: VbParams, u, dt: float) -> SocTrace:
    return SocTrace(simulate_vb(params.x0, params.a, np.asarray(u, dtype=float), dt), dt, "vb-model")
