"""Time-varying power limits of an ensemble by doubling + bisection on power offsets."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .devices import Ensemble, WaterDrawProfile, _n_steps
from .dispatch import DispatchConfig, classify_devices, solve_dispatch


def binary_search_limit(
    trackable: Callable[[float], bool],
    eps: float = 0.1,
    beta0: float = 1.0,
    direction: int = 1,
    max_doublings: int = 64,
) -> float:
    """Largest offset (in ``direction``) the ``trackable`` predicate accepts, to within ``eps``.

    The returned value has been accepted by ``trackable``; the offset ``eps``
    further out has not (for a predicate monotone in the offset magnitude).
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if not trackable(0.0):
        raise ValueError("baseline itself is not trackable")
    alpha, beta = 0.0, float(beta0)
    for _ in range(max_doublings):
        if not trackable(direction * beta):
            break
        alpha, beta = beta, 2.0 * beta
    else:
        raise RuntimeError("offset search did not terminate; tracker accepts every probe")
    while beta - alpha > eps:
        mid = (alpha + beta) / 2.0
        if trackable(direction * mid):
            alpha = mid
        else:
            beta = mid
    return direction * alpha


class OffsetProber:
    """Answers "does the ensemble track baseline + offset through step m?".

    Sustained semantics hold the offset on every step before ``m``; instant
    semantics apply it only on step ``m - 1`` after tracking the plain baseline.
    Probe trajectories are memoized per offset and resumed when a later time
    is queried.
    """

    def __init__(
        self,
        ensemble: Ensemble,
        baseline,
        cfg: DispatchConfig,
        dt: float,
        draw: WaterDrawProfile | None = None,
        semantics: str = "sustained",
    ):
        if semantics not in ("sustained", "instant"):
            raise ValueError("semantics must be 'sustained' or 'instant'")
        self.ensemble = ensemble
        self.baseline = np.asarray(getattr(baseline, "power", baseline), dtype=float)
        self.cfg = cfg
        self.dt = dt
        self.draw = draw
        self.semantics = semantics
        self._runs: dict[float, list] = {}
        self.n_dispatch = 0

    def _draw(self, k):
        return self.draw.at(k) if self.draw is not None else 0.0

    def _advance(self, offset: float, m: int) -> bool:
        # run = [temps, steps_done, failed_step or None]
        run = self._runs.setdefault(offset, [self.ensemble.initial_temps.copy(), 0, None])
        if run[2] is not None:
            return run[2] >= m
        T, k = run[0], run[1]
        while k < m:
            cls = classify_devices(self.ensemble, T, self.dt, self._draw(k))
            sol = solve_dispatch(
                self.ensemble, T, self.baseline[k] + offset, self.cfg, self.dt, self._draw(k), classification=cls
            )
            self.n_dispatch += 1
            if not sol.feasible:
                run[2] = k
                run[0], run[1] = T, k
                return False
            T = cls.base + sol.status * cls.gain
            k += 1
        run[0], run[1] = T, k
        return True

    def trackable(self, offset: float, m: int) -> bool:
        if self.semantics == "sustained" or offset == 0.0:
            return self._advance(float(offset), m)
        T = self._baseline_state(m - 1)
        if T is None:
            return False
        k = m - 1
        sol = solve_dispatch(self.ensemble, T, self.baseline[k] + offset, self.cfg, self.dt, self._draw(k))
        self.n_dispatch += 1
        return sol.feasible

    def _baseline_state(self, m):
        """Temperatures after tracking the plain baseline for ``m`` steps, or None if it fails first."""
        states = self.__dict__.setdefault("_baseline_states", [self.ensemble.initial_temps.copy()])
        while len(states) <= m:
            k = len(states) - 1
            T = states[-1]
            cls = classify_devices(self.ensemble, T, self.dt, self._draw(k))
            sol = solve_dispatch(self.ensemble, T, self.baseline[k], self.cfg, self.dt, self._draw(k), classification=cls)
            self.n_dispatch += 1
            if not sol.feasible:
                return None
            states.append(cls.base + sol.status * cls.gain)
        return states[m]


def _steps_through(t: float, dt: float) -> int:
    m = round(t / dt)
    if m < 1 or abs(m * dt - t) > 1e-9 * max(1.0, t):
        raise ValueError(f"t={t} is not a positive multiple of dt={dt}")
    return int(m)


def upper_limit_at(prober: OffsetProber, t: float, eps: float = 0.1, beta0: float = 1.0) -> float:
    m = _steps_through(t, prober.dt)
    return binary_search_limit(lambda d: prober.trackable(d, m), eps, beta0, +1)


def lower_limit_at(prober: OffsetProber, t: float, eps: float = 0.1, beta0: float = 1.0) -> float:
    m = _steps_through(t, prober.dt)
    return binary_search_limit(lambda d: prober.trackable(d, m), eps, beta0, -1)


@dataclass
class PowerEnvelope:
    grid_times: np.ndarray  # probe times (s)
    plus_at_grid: np.ndarray
    minus_at_grid: np.ndarray
    p_plus: np.ndarray  # per step, kW
    p_minus: np.ndarray
    dt: float
    eps: float

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.p_plus)) * self.dt

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_s", "p_minus_kw", "p_plus_kw"])
            for k in range(len(self.p_plus)):
                w.writerow([repr(k * self.dt), repr(float(self.p_minus[k])), repr(float(self.p_plus[k]))])

    @classmethod
    def from_csv(cls, path, eps: float = float("nan")) -> PowerEnvelope:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        dt = float(data[1, 0] - data[0, 0]) if len(data) > 1 else 1.0
        return cls(data[:, 0] + dt, data[:, 2], data[:, 1], data[:, 2], data[:, 1], dt, eps)

    @classmethod
    def constant(cls, p_minus: float, p_plus: float, n_steps: int, dt: float) -> PowerEnvelope:
        return cls(
            np.array([n_steps * dt]), np.array([p_plus]), np.array([p_minus]),
            np.full(n_steps, float(p_plus)), np.full(n_steps, float(p_minus)), dt, 0.0,
        )


def hold_to_steps(grid_times, values, n_steps: int, dt: float) -> np.ndarray:
    """Give step k the value probed at the first grid time covering the step's end."""
    ends = (np.arange(n_steps) + 1) * dt
    idx = np.searchsorted(np.asarray(grid_times), ends - 1e-9 * dt, side="left")
    return np.asarray(values, dtype=float)[np.minimum(idx, len(values) - 1)]


def compute_envelope(
    ensemble: Ensemble,
    baseline,
    cfg: DispatchConfig,
    dt: float,
    stride: float = 300.0,
    eps: float = 0.1,
    draw: WaterDrawProfile | None = None,
    semantics: str = "sustained",
    beta0: float = 1.0,
) -> PowerEnvelope:
    power = np.asarray(getattr(baseline, "power", baseline), dtype=float)
    n_steps = len(power)
    horizon = n_steps * dt
    n_grid = _n_steps(horizon, stride)
    _n_steps(stride, dt)
    grid = np.arange(1, n_grid + 1) * stride
    prober = OffsetProber(ensemble, power, cfg, dt, draw, semantics)
    plus = np.array([upper_limit_at(prober, t, eps, beta0) for t in grid])
    minus = np.array([lower_limit_at(prober, t, eps, beta0) for t in grid])
    if semantics == "sustained":
        # An offset certified through t is certified through every earlier time.
        plus = np.maximum.accumulate(plus[::-1])[::-1]
        minus = np.minimum.accumulate(minus[::-1])[::-1]
    return PowerEnvelope(
        grid, plus, minus,
        hold_to_steps(grid, plus, n_steps, dt), hold_to_steps(grid, minus, n_steps, dt),
        dt, eps,
    )
