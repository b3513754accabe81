"""Identify VB dissipation and capacity from ensemble violation times.

The fit minimizes ``sqrt(sum(log(max(F - B, 1 s))**2))`` over (a, C) with
symmetric capacity bounds [-C, C], subject to ``B <= F`` for every training
signal: the VB may never outlast the real ensemble.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_deviations, check_violation_times
from .vb import _coeffs, capacity_violation_times, power_violation_time, simulate_vb

UNATTAINABLE = "ensemble violation times unattainable by first-order VB"


@dataclass
class FitProblem:
    F: np.ndarray  # ensemble violation times (s)
    U: np.ndarray  # deviations, (n_signals, n_steps) kW
    x0: float
    dt: float
    p_minus: np.ndarray | None = None
    p_plus: np.ndarray | None = None
    symmetric: bool = True
    signal_index: np.ndarray | None = None  # position of each signal in the candidate list

    def __post_init__(self):
        self.U = check_deviations(self.U)
        self.F = check_violation_times(self.F, self.U.shape[0], self.horizon)
        if not self.symmetric:
            raise NotImplementedError("only C2 = -C1 = C is supported")
        if self.signal_index is None:
            self.signal_index = np.arange(len(self.F))

    @property
    def horizon(self) -> float:
        return self.U.shape[1] * self.dt

    def subset(self, mask) -> FitProblem:
        mask = np.asarray(mask)
        return FitProblem(self.F[mask], self.U[mask], self.x0, self.dt, self.p_minus, self.p_plus,
                          self.symmetric, self.signal_index[mask])

    def with_x0(self, x0: float) -> FitProblem:
        return FitProblem(self.F, self.U, x0, self.dt, self.p_minus, self.p_plus, self.symmetric, self.signal_index)


@dataclass
class FitResult:
    a: float  # 1/h
    c: float  # kWh
    x0: float
    objective: float
    B: np.ndarray = field(repr=False)
    saturated: bool
    n_signals: int
    ic_mode: str = ""

    def record(self) -> dict:
        return {
            "a_per_h": self.a,
            "c_kwh": self.c,
            "x0_kwh": self.x0,
            "objective": self.objective,
            "n_signals": self.n_signals,
            "ic_mode": self.ic_mode,
            "saturated": self.saturated,
        }

    def to_json(self) -> str:
        return json.dumps(self.record(), sort_keys=True)


def _times_for(problem: FitProblem, a: float, cs, pw=None):
    """Violation times (n, m) for symmetric capacities ``cs`` at dissipation ``a``."""
    cs = np.atleast_1d(np.asarray(cs, dtype=float))
    X = simulate_vb(problem.x0, a, problem.U, problem.dt)
    cap = capacity_violation_times(X, problem.U, a, -cs, cs, problem.dt)
    if pw is None:
        pw = power_violation_time(problem.U, problem.p_minus, problem.p_plus, problem.dt, problem.horizon)
    return np.minimum(np.minimum(cap, pw[:, None]), problem.horizon)


def fit_objective(a: float, c: float, problem: FitProblem, floor: float = 1.0):
    """Return ``(cost, B, feasible)`` for one parameter pair."""
    if a < 0 or not c > 0:
        raise ValueError("need a >= 0 and C > 0")
    B = _times_for(problem, a, [c])[:, 0]
    cost = float(np.sqrt(np.sum(np.log(np.maximum(problem.F - B, floor)) ** 2)))
    return cost, B, bool(np.all(B <= problem.F))


def largest_feasible_c(problem: FitProblem, a: float, pw=None) -> float:
    """Supremum of the capacities C for which ``B <= F`` holds at dissipation ``a``.

    A signal the ensemble failed at ``F_i`` (for a reason other than a power
    limit) forces the VB trajectory to leave [-C, C] by then, so C must stay
    below the peak of |x| over [0, F_i].  Within a step the exact trajectory is
    monotone, so the peak sits at a step boundary or at ``F_i`` itself.
    Returns ``inf`` when no signal constrains C.
    """
    if pw is None:
        pw = power_violation_time(problem.U, problem.p_minus, problem.p_plus, problem.dt, problem.horizon)
    binding = np.nonzero((problem.F < problem.horizon) & (pw > problem.F))[0]
    if len(binding) == 0:
        return np.inf
    U = problem.U[binding]
    F = problem.F[binding]
    X = simulate_vb(problem.x0, a, U, problem.dt)
    K = U.shape[1]
    k = np.minimum(np.floor(F / problem.dt + 1e-9).astype(int), K)
    steps = np.arange(K + 1)
    peak = np.max(np.where(steps[None, :] <= k[:, None], np.abs(X), 0.0), axis=1)
    rest = F - k * problem.dt
    for j in np.nonzero((rest > 0) & (k < K))[0]:
        rho, g = _coeffs(a, rest[j] / 3600.0)
        peak[j] = max(peak[j], abs(rho * X[j, k[j]] - g * U[j, k[j]]))
    return float(peak.min())


class VirtualBatteryRegressor(BaseEstimator):
    """Fit a symmetric-capacity VB to ensemble violation times.

    ``fit(X, y)`` takes deviation signals ``X`` (n_signals, n_steps, in kW) and
    ensemble violation times ``y`` (seconds).  ``predict(X)`` returns the
    fitted VB's violation times.  The search is a coarse log-spaced grid over
    feasible points followed by rounds of local refinement on shrinking
    log-brackets, with C profiled out for each candidate a; ties break on (cost, a, C).
    """

    def __init__(
        self,
        dt=10.0,
        x0=0.0,
        p_minus=None,
        p_plus=None,
        a_bounds=(1e-3, 10.0),
        c_bounds=(0.1, 1e4),
        n_a=41,
        n_c=101,
        n_rounds=3,
        n_line=41,
        log_floor=1.0,
    ):
        self.dt = dt
        self.x0 = x0
        self.p_minus = p_minus
        self.p_plus = p_plus
        self.a_bounds = a_bounds
        self.c_bounds = c_bounds
        self.n_a = n_a
        self.n_c = n_c
        self.n_rounds = n_rounds
        self.n_line = n_line
        self.log_floor = log_floor

    def _problem(self, X, y):
        return FitProblem(y, X, self.x0, self.dt, self.p_minus, self.p_plus)

    def _candidates(self, problem, a, cs, pw):
        """``cs`` plus the largest feasible capacity at ``a`` when it lies in bounds."""
        cmax = largest_feasible_c(problem, a, pw) * (1 - 1e-9)
        if self.c_bounds[0] <= cmax <= self.c_bounds[1]:
            cs = np.append(cs, cmax)
        return np.asarray(cs, dtype=float)

    def _score_grid(self, problem, a, cs, pw):
        B = _times_for(problem, a, cs, pw)
        feasible = np.all(B <= problem.F[:, None], axis=0)
        cost = np.sqrt(np.sum(np.log(np.maximum(problem.F[:, None] - B, self.log_floor)) ** 2, axis=0))
        return np.where(feasible, cost, np.inf)

    def fit(self, X, y):
        problem = self._problem(X, y)
        pw = power_violation_time(problem.U, problem.p_minus, problem.p_plus, problem.dt, problem.horizon)
        la = np.log10(self.a_bounds)
        lc = np.log10(self.c_bounds)
        a_grid = np.logspace(*la, self.n_a)
        c_grid = np.logspace(*lc, self.n_c)

        best = (np.inf, np.inf, np.inf)  # (cost, a, C)
        for a in a_grid:
            cs = self._candidates(problem, a, c_grid, pw)
            costs = self._score_grid(problem, a, cs, pw)
            j = int(np.argmin(costs))
            if (costs[j], a, cs[j]) < best:
                best = (float(costs[j]), float(a), float(cs[j]))
        if not np.isfinite(best[0]):
            raise ValueError(UNATTAINABLE)

        cost, a, c = best
        half_a = 2 * (la[1] - la[0]) / (self.n_a - 1)
        half_c = 2 * (lc[1] - lc[0]) / (self.n_c - 1)
        offsets = np.linspace(-1.0, 1.0, self.n_line)
        for _ in range(self.n_rounds):
            # the feasible valley runs diagonally (larger a delays violations,
            # smaller C hastens them), so C is profiled out for every candidate a
            cand_a = np.clip(10 ** (np.log10(a) + half_a * offsets), *self.a_bounds)
            cand_c = np.clip(10 ** (np.log10(c) + half_c * offsets), *self.c_bounds)
            ba, bc = a, c
            for ca in cand_a:
                cs = self._candidates(problem, ca, cand_c, pw)
                costs = self._score_grid(problem, ca, cs, pw)
                j = int(np.argmin(costs))
                if (costs[j], ca, cs[j]) < (cost, ba, bc):
                    cost, ba, bc = float(costs[j]), float(ca), float(cs[j])
            a, c = ba, bc
            half_a /= 4.0
            half_c /= 4.0

        rtol = 1e-9
        self.saturated_ = bool(
            a <= self.a_bounds[0] * (1 + rtol) or a >= self.a_bounds[1] * (1 - rtol)
            or c <= self.c_bounds[0] * (1 + rtol) or c >= self.c_bounds[1] * (1 - rtol)
        )
        self.a_ = a
        self.c_ = c
        self.objective_ = cost
        self.n_features_in_ = problem.U.shape[1]
        self.train_times_ = _times_for(problem, a, [c], pw)[:, 0]
        return self

    def predict(self, X):
        check_is_fitted(self, "a_")
        X = check_deviations(X, n_steps=self.n_features_in_)
        problem = FitProblem(np.full(len(X), len(X[0]) * self.dt), X, self.x0, self.dt, self.p_minus, self.p_plus)
        return _times_for(problem, self.a_, [self.c_])[:, 0]

    def score(self, X, y):
        """Negative log-gap cost; ``-inf`` where the VB outlasts the ensemble."""
        B = self.predict(X)
        y = np.asarray(y, dtype=float)
        if np.any(B > y):
            return -np.inf
        return -float(np.sqrt(np.sum(np.log(np.maximum(y - B, self.log_floor)) ** 2)))


def fit_vb(problem: FitProblem, ic_mode: str = "", **kwargs) -> FitResult:
    est = VirtualBatteryRegressor(dt=problem.dt, x0=problem.x0, p_minus=problem.p_minus,
                                  p_plus=problem.p_plus, **kwargs).fit(problem.U, problem.F)
    return FitResult(est.a_, est.c_, problem.x0, est.objective_, est.train_times_, est.saturated_,
                     len(problem.F), ic_mode)


def parameter_evolution(problem: FitProblem, sizes, **kwargs) -> list[tuple[int, FitResult]]:
    """Fit on nested prefixes: size ``k`` keeps the signals whose candidate index is below ``k``."""
    sizes = list(sizes)
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("subset sizes must be increasing")
    out = []
    for k in sizes:
        mask = problem.signal_index < k
        if not mask.any():
            continue
        out.append((k, fit_vb(problem.subset(mask), **kwargs)))
    return out


def compare_ic_modes(problem: FitProblem, x0_analytic: float, **kwargs) -> tuple[FitResult, FitResult]:
    zero = fit_vb(problem.with_x0(0.0), ic_mode="zero", **kwargs)
    analytic = fit_vb(problem.with_x0(x0_analytic), ic_mode="analytic", **kwargs)
    return zero, analytic
