"""Per-step ON/OFF dispatch so an ensemble tracks a power target.

Each step solves a relaxed version of

    min_s  W1 ||T_ac(t+1) - T_set||^2 + rho * sum s_i (1 - s_i) + W2 ||T_ewh(t+1) - T_set||^2
    s.t.   every next-step temperature inside its deadband
           |target - s^T P| <= eps,   0 <= s <= 1

by projected gradient, then rounds to {0, 1} and repairs the rounded vector
with greedy flips and swaps.  Because a device's next temperature is affine
in its own status, the temperature constraints reduce to fixing devices ON or
OFF (``classify_devices``); only the power constraint couples devices.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .devices import Ensemble, WaterDrawProfile, _n_steps

FEASIBLE, INFEASIBLE = "feasible", "infeasible"
_BAND_ATOL = 1e-9


@dataclass
class DispatchConfig:
    epsilon: float = 1.0  # kW
    w_ac: float = 0.1
    w_ewh: float = 0.1
    penalty: float = 1.0
    max_iter: int = 200
    round_threshold: float = 0.5
    max_repair_moves: int = 200

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.w_ac < 0 or self.w_ewh < 0 or self.penalty < 0:
            raise ValueError("weights must be non-negative")


@dataclass
class Classification:
    must_on: np.ndarray
    must_off: np.ndarray
    free: np.ndarray
    conflict: np.ndarray
    base: np.ndarray  # next-step temperature with s = 0
    gain: np.ndarray  # change in next-step temperature when s = 1


@dataclass
class DispatchSolution:
    relaxed: np.ndarray
    status: np.ndarray
    achieved: float
    objective: float
    flag: str

    @property
    def feasible(self) -> bool:
        return self.flag == FEASIBLE


def classify_devices(
    ensemble: Ensemble, temps: np.ndarray, dt: float, draw: float = 0.0
) -> Classification:
    base, gain = ensemble.affine_step(np.asarray(temps, dtype=float), dt, draw)
    lo, hi = ensemble.low - _BAND_ATOL, ensemble.high + _BAND_ATOL
    on = base + gain
    ok_off = (base >= lo) & (base <= hi)
    ok_on = (on >= lo) & (on <= hi)
    return Classification(
        must_on=ok_on & ~ok_off,
        must_off=ok_off & ~ok_on,
        free=ok_on & ok_off,
        conflict=~ok_on & ~ok_off,
        base=base,
        gain=gain,
    )


def _weights(ensemble: Ensemble, cfg: DispatchConfig) -> np.ndarray:
    return np.where(ensemble.is_ewh, cfg.w_ewh, cfg.w_ac)


def dispatch_objective(ensemble, cls: Classification, s, cfg: DispatchConfig) -> float:
    dev = cls.base + s * cls.gain - ensemble.setpoint
    return float(_weights(ensemble, cfg) @ dev**2 + cfg.penalty * np.sum(s * (1.0 - s)))


def _slab_multiplier(c, d, P, goal):
    """Solve ``sum(P * clip(c - lam d, 0, 1)) = goal`` for ``lam`` (``d > 0``).

    The left side is continuous, piecewise linear and non-increasing in
    ``lam``; its kinks sit where a coordinate leaves 1 or reaches 0, so one
    sorted sweep over those kinks locates the root exactly.
    """
    leave_one = (c - 1.0) / d
    reach_zero = c / d
    kinks = np.concatenate((leave_one, reach_zero))
    dslope = np.concatenate((-P * d, P * d))
    order = np.argsort(kinks, kind="stable")
    lam = kinks[order]
    slope = np.cumsum(dslope[order])  # slope just right of each kink
    vals = P.sum() + np.concatenate(([0.0], np.cumsum(slope[:-1] * np.diff(lam))))
    j = int(np.searchsorted(-vals, -goal, side="left"))  # first kink with vals <= goal
    if j == 0:
        return lam[0]
    if j >= len(lam):
        return lam[-1]
    span = vals[j - 1] - vals[j]
    frac = 0.0 if span <= 0 else (vals[j - 1] - goal) / span
    return lam[j - 1] + frac * (lam[j] - lam[j - 1])


def _project(y, P, lo, hi):
    """Euclidean projection of ``y`` onto {0 <= s <= 1, lo <= P.s <= hi}."""
    s = np.clip(y, 0.0, 1.0)
    v = P @ s
    if lo <= v <= hi:
        return s
    lam = _slab_multiplier(y, P, P, hi if v > hi else lo)
    return np.clip(y - lam * P, 0.0, 1.0)


def _convex_optimum(lin, quad, P, lo, hi):
    """Exact minimizer of sum(quad s^2 + lin s) over the box and slab (quad > 0).

    KKT: s_i = clip(-(lin_i + lam P_i) / (2 quad_i), 0, 1) with one multiplier
    ``lam`` for the power slab, zero when the unconstrained box optimum already
    lies inside it.
    """
    c = -lin / (2.0 * quad)
    d = P / (2.0 * quad)
    s = np.clip(c, 0.0, 1.0)
    v = P @ s
    if lo <= v <= hi:
        return s
    lam = _slab_multiplier(c, d, P, hi if v > hi else lo)
    return np.clip(c - lam * d, 0.0, 1.0)


def _projected_gradient(s, lin, quad, penalty, P, lo, hi, max_iter):
    """Projected gradient with step 1/L, so the objective never increases."""
    curv = 2.0 * (quad - penalty)
    step = 1.0 / max(np.max(np.abs(curv)), 1e-12)
    for _ in range(max_iter):
        grad = 2.0 * quad * s + lin + penalty * (1.0 - 2.0 * s)
        nxt = _project(s - step * grad, P, lo, hi)
        if np.max(np.abs(nxt - s)) < 1e-10:
            return nxt
        s = nxt
    return s


def _relaxed_solve(lin, quad, P, r, eps, penalty, max_iter):
    """Minimize sum(quad s^2 + lin s) + penalty s (1 - s) over box and slab.

    The convex relaxation (no penalty) is solved first, exactly when every
    curvature is positive and otherwise by projected gradient from a
    fractional greedy fill (cheapest-first by the objective's slope at
    s = 1/2) that meets the residual target ``r``.  The penalized descent then
    starts from the convex optimum; since that point already minimizes the
    unpenalized part, the penalty term at the result is no larger than there.
    """
    lo, hi = r - eps, r + eps
    if np.all(quad > 0):
        s = _convex_optimum(lin, quad, P, lo, hi)
    else:
        slope = lin + quad
        order = np.lexsort((np.arange(len(P)), slope))
        goal = min(max(r, 0.0), P.sum())
        before = np.concatenate(([0.0], np.cumsum(P[order])[:-1]))
        s = np.empty(len(P))
        s[order] = np.clip((goal - before) / P[order], 0.0, 1.0)
        s = _projected_gradient(s, lin, quad, 0.0, P, lo, hi, max_iter)
    if penalty > 0:
        s = _projected_gradient(s, lin, quad, penalty, P, lo, hi, max_iter)
    return s


def _slack(cls: Classification, ensemble: Ensemble, status: np.ndarray) -> np.ndarray:
    """Room left to the band edge a device would approach if its status were flipped."""
    flipped = cls.base + (1 - status) * cls.gain
    toward_high = (cls.gain > 0) == (status == 0)
    return np.where(toward_high, ensemble.high - flipped, flipped - ensemble.low)


def _steepest_swaps(status, on, off, P, gap, eps, max_moves):
    """Best ON/OFF exchange per move until |gap| <= eps or no exchange helps."""
    on, off = list(on), list(off)
    for _ in range(max_moves):
        if abs(gap) <= eps or not on or not off:
            break
        diff = np.abs(gap + P[on][:, None] - P[off][None, :])
        j = int(np.argmin(diff))
        if diff.flat[j] >= abs(gap):
            break
        a, b = np.unravel_index(j, diff.shape)
        i, k = on[a], off[b]
        gap += P[i] - P[k]
        status[i], status[k] = 0, 1
        on[a], off[b] = k, i
    return gap


def _cardinality_fill(status, free_idx, P, r, eps, pref, max_moves):
    """Try each ON-count whose achievable range covers ``r``, nearest count first.

    Powers of similar size make the residual a subset-sum problem that single
    moves cannot cross (adding one device overshoots, removing one undershoots).
    For a fixed count the reachable sums form a nearly continuous range, so we
    start from the ``n`` most preferred devices and exchange toward ``r``.
    """
    m = len(free_idx)
    Pf = np.sort(P[free_idx])
    lo = np.concatenate(([0.0], np.cumsum(Pf)))
    hi = np.concatenate(([0.0], np.cumsum(Pf[::-1])))
    current = int(status[free_idx].sum())
    counts = [n for n in range(m + 1) if lo[n] - eps <= r <= hi[n] + eps]
    ranked = free_idx[np.lexsort((free_idx, -pref[free_idx]))]
    for n in sorted(counts, key=lambda n: (abs(n - current), n)):
        trial = status.copy()
        trial[free_idx] = 0
        trial[ranked[:n]] = 1
        gap = _steepest_swaps(trial, ranked[:n], ranked[n:], P, r - float(P[ranked[:n]].sum()), eps, max_moves)
        if abs(gap) <= eps:
            status[:] = trial
            return True
    return False


def _repair(status, free_idx, P, gap, eps, slack, max_moves):
    """Flip/swap free devices until |gap| <= eps.  ``gap`` is target minus achieved.

    First a single greedy pass in descending slack order; then steepest-descent
    over single flips and ON/OFF swaps while |gap| keeps improving.
    """
    order = free_idx[np.lexsort((free_idx, -slack[free_idx]))]
    for i in order:
        if abs(gap) <= eps:
            return gap
        delta = P[i] if status[i] == 0 else -P[i]
        if abs(gap - delta) < abs(gap):
            status[i] ^= 1
            gap -= delta
    for _ in range(max_moves):
        if abs(gap) <= eps:
            break
        on = free_idx[status[free_idx] == 1]
        off = free_idx[status[free_idx] == 0]
        best, move = abs(gap), None
        cand = np.concatenate((gap + P[on], gap - P[off]))
        if len(cand):
            j = int(np.argmin(np.abs(cand)))
            if abs(cand[j]) < best:
                best, move = abs(cand[j]), ("flip", np.concatenate((on, off))[j])
        if len(on) and len(off):
            swaps = np.abs(gap + P[on][:, None] - P[off][None, :])
            j = int(np.argmin(swaps))
            if swaps.flat[j] < best:
                a, b = np.unravel_index(j, swaps.shape)
                best, move = swaps.flat[j], ("swap", on[a], off[b])
        if move is None:
            break
        if move[0] == "flip":
            i = move[1]
            gap += P[i] if status[i] == 1 else -P[i]
            status[i] ^= 1
        else:
            _, i, k = move
            gap += P[i] - P[k]
            status[i], status[k] = 0, 1
    return gap


def solve_dispatch(
    ensemble: Ensemble,
    temps: np.ndarray,
    target: float,
    cfg: DispatchConfig,
    dt: float,
    draw: float = 0.0,
    classification: Classification | None = None,
) -> DispatchSolution:
    if not np.isfinite(target):
        raise ValueError("target must be finite")
    cls = classification or classify_devices(ensemble, temps, dt, draw)
    P = ensemble.power
    n = ensemble.n
    relaxed = cls.must_on.astype(float)
    status = cls.must_on.astype(np.int8)

    def fail():
        return DispatchSolution(relaxed, status, float(status @ P), np.inf, INFEASIBLE)

    if cls.conflict.any():
        return fail()
    eps = cfg.epsilon
    r = target - P[cls.must_on].sum()
    free_idx = np.flatnonzero(cls.free)
    Pf = P[free_idx]
    if r + eps < 0 or r - eps > Pf.sum():
        return fail()

    if len(free_idx):
        w = _weights(ensemble, cfg)[free_idx]
        g = cls.gain[free_idx]
        dev0 = cls.base[free_idx] - ensemble.setpoint[free_idx]
        relaxed[free_idx] = _relaxed_solve(
            2.0 * w * g * dev0, w * g * g, Pf, r, eps, cfg.penalty, cfg.max_iter
        )
        status[free_idx] = relaxed[free_idx] >= cfg.round_threshold

    gap = target - float(status @ P)
    if abs(gap) > eps and len(free_idx):
        gap = _repair(status, free_idx, P, gap, eps, _slack(cls, ensemble, status), cfg.max_repair_moves)
        if abs(gap) > eps:
            _cardinality_fill(status, free_idx, P, r, eps, relaxed, cfg.max_repair_moves)

    achieved = float(status @ P)
    nxt = cls.base + status * cls.gain
    in_band = np.all(nxt >= ensemble.low - _BAND_ATOL) and np.all(nxt <= ensemble.high + _BAND_ATOL)
    if abs(target - achieved) > eps + 1e-9 or not in_band:
        return DispatchSolution(relaxed, status, achieved, np.inf, INFEASIBLE)
    return DispatchSolution(
        relaxed, status, achieved, dispatch_objective(ensemble, cls, status.astype(float), cfg), FEASIBLE
    )


def enumerate_oracle(
    ensemble: Ensemble,
    temps: np.ndarray,
    target: float,
    cfg: DispatchConfig,
    dt: float,
    draw: float = 0.0,
    max_devices: int = 20,
):
    """Exhaustive binary search of the dispatch problem.

    Returns ``(status, objective)`` for the feasible binary vector of least
    objective (lowest enumeration index on ties), or ``None`` if none exists.
    """
    if ensemble.n > max_devices:
        raise ValueError(f"enumeration refused for {ensemble.n} > {max_devices} devices")
    cls = classify_devices(ensemble, temps, dt, draw)
    if cls.conflict.any():
        return None
    free_idx = np.flatnonzero(cls.free)
    m = len(free_idx)
    combos = (np.arange(2**m)[:, None] >> np.arange(m)[None, :]) & 1
    S = np.tile(cls.must_on.astype(np.int8), (2**m, 1))
    S[:, free_idx] = combos
    achieved = S @ ensemble.power
    ok = np.abs(target - achieved) <= cfg.epsilon
    if not ok.any():
        return None
    dev = cls.base[None, :] + S * cls.gain[None, :] - ensemble.setpoint[None, :]
    obj = (dev**2) @ _weights(ensemble, cfg)
    obj[~ok] = np.inf
    best = int(np.argmin(obj))
    return S[best].astype(np.int8), float(obj[best])


@dataclass
class TrackResult:
    violation_time: float
    horizon: float
    dt: float
    target: np.ndarray
    achieved: np.ndarray
    rel_err: np.ndarray  # percent
    temps: np.ndarray | None = None  # (steps + 1, N)
    status: np.ndarray | None = None
    relaxed_mass: np.ndarray | None = field(default=None, repr=False)

    @property
    def tracked(self) -> bool:
        return self.violation_time >= self.horizon

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_s", "target_kw", "achieved_kw", "rel_err_pct"])
            for k in range(len(self.achieved)):
                w.writerow([repr(k * self.dt), repr(float(self.target[k])),
                            repr(float(self.achieved[k])), repr(float(self.rel_err[k]))])


def track_signal(
    ensemble: Ensemble,
    target,
    cfg: DispatchConfig,
    dt: float,
    horizon: float | None = None,
    draw: WaterDrawProfile | None = None,
    record: bool = True,
    temps0: np.ndarray | None = None,
) -> TrackResult:
    """Dispatch the ensemble step by step against ``target`` (kW per step).

    The violation time is ``(k + 1) * dt`` for the first step ``k`` at which the
    dispatch problem is infeasible, or the horizon if every step succeeds.
    """
    target = np.asarray(getattr(target, "samples", target), dtype=float)
    n_steps = len(target) if horizon is None else _n_steps(horizon, dt)
    if len(target) < n_steps:
        raise ValueError("target shorter than the horizon")
    T = (ensemble.initial_temps if temps0 is None else np.asarray(temps0, dtype=float)).copy()
    achieved = np.empty(n_steps)
    temps = np.empty((n_steps + 1, ensemble.n)) if record else None
    status = np.empty((n_steps, ensemble.n), dtype=np.int8) if record else None
    mass = np.empty(n_steps) if record else None
    if record:
        temps[0] = T
    done, f = n_steps, n_steps * dt
    for k in range(n_steps):
        d = draw.at(k) if draw is not None else 0.0
        cls = classify_devices(ensemble, T, dt, d)
        sol = solve_dispatch(ensemble, T, target[k], cfg, dt, d, classification=cls)
        if not sol.feasible:
            done, f = k, (k + 1) * dt
            break
        achieved[k] = sol.achieved
        T = cls.base + sol.status * cls.gain
        if record:
            temps[k + 1] = T
            status[k] = sol.status
            mass[k] = np.minimum(sol.relaxed, 1.0 - sol.relaxed).sum()
    tgt = target[:done]
    ach = achieved[:done]
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(tgt != 0, 100.0 * np.abs(ach - tgt) / np.abs(tgt), np.where(ach == tgt, 0.0, np.inf))
    return TrackResult(
        violation_time=float(f),
        horizon=n_steps * dt,
        dt=dt,
        target=tgt,
        achieved=ach,
        rel_err=rel,
        temps=temps[: done + 1] if record else None,
        status=status[:done] if record else None,
        relaxed_mass=mass[:done] if record else None,
    )
