"""First-order thermal models of air conditioners (AC) and electric water heaters (EWH).

Both device types use the equivalent-thermal-parameter (ETP) model

    dT/dt = (T_a - T) / (R C)  +/-  s * eta * P / C

integrated exactly over a step (the sign is negative for cooling ACs, positive
for heating EWHs).  EWHs additionally lose heat to cold inlet water replacing
drawn hot water; that term is applied with a forward-Euler mixing update.

Units: R in degC/kW, C in kWh/degC (so R*C is in hours), powers in kW,
temperatures in degC, time steps in seconds, water draw in L/min.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from functools import cached_property
from pathlib import Path

import numpy as np

AC, EWH = 0, 1


@dataclass(frozen=True)
class AcParams:
    thermal_resistance: float
    thermal_capacitance: float
    cop: float
    rated_power: float
    setpoint: float
    deadband: float
    ambient: float

    def __post_init__(self):
        for name in ("thermal_resistance", "thermal_capacitance", "cop", "rated_power", "deadband"):
            if not getattr(self, name) > 0:
                raise ValueError(f"AcParams.{name} must be positive, got {getattr(self, name)}")
        if not self.ambient > self.setpoint:
            raise ValueError("AcParams requires ambient > setpoint (cooling regime)")

    @property
    def band(self) -> tuple[float, float]:
        return self.setpoint - self.deadband / 2, self.setpoint + self.deadband / 2


@dataclass(frozen=True)
class EwhParams:
    thermal_resistance: float
    thermal_capacitance: float
    efficiency: float
    rated_power: float
    setpoint: float
    deadband: float
    inlet_temp: float
    ambient: float
    tank_volume: float

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"EwhParams.{f.name} must be positive, got {getattr(self, f.name)}")
        if not self.inlet_temp < self.setpoint - self.deadband / 2:
            raise ValueError("EwhParams requires inlet_temp below the lower band edge")

    @property
    def band(self) -> tuple[float, float]:
        return self.setpoint - self.deadband / 2, self.setpoint + self.deadband / 2


def _check_finite(*values):
    for v in values:
        if not np.all(np.isfinite(v)):
            raise ValueError("invalid state")


def ac_step(T: float, p: AcParams, s: int, dt: float) -> float:
    """Advance one AC by ``dt`` seconds with status ``s`` held constant."""
    _check_finite(T, dt)
    if dt < 0:
        raise ValueError("dt must be non-negative")
    decay = math.exp(-dt / 3600.0 / (p.thermal_resistance * p.thermal_capacitance))
    cooling = p.cop * p.thermal_resistance * p.rated_power
    return p.ambient + (T - p.ambient) * decay - s * cooling * (1.0 - decay)


def ewh_step(T: float, p: EwhParams, draw: float, s: int, dt: float) -> float:
    """Advance one EWH by ``dt`` seconds.

    Standby loss and heating are integrated exactly; the inlet-water mixing for
    ``draw`` litres per minute uses the temperature at the start of the step.
    """
    _check_finite(T, draw, dt)
    if dt < 0:
        raise ValueError("dt must be non-negative")
    if draw < 0:
        raise ValueError("draw must be non-negative")
    decay = math.exp(-dt / 3600.0 / (p.thermal_resistance * p.thermal_capacitance))
    heating = p.efficiency * p.thermal_resistance * p.rated_power
    thermal = p.ambient + (T - p.ambient) * decay + s * heating * (1.0 - decay)
    frac = min(draw * dt / 60.0 / p.tank_volume, 1.0)
    return thermal - frac * (T - p.inlet_temp)


@dataclass(frozen=True)
class WaterDrawProfile:
    """Hot-water draw rate in L/min, one sample per simulation step."""

    lpm: np.ndarray
    dt: float

    def __post_init__(self):
        lpm = np.asarray(self.lpm, dtype=float)
        if lpm.ndim != 1 or np.any(lpm < 0) or not np.all(np.isfinite(lpm)):
            raise ValueError("draw rates must be a finite non-negative 1-D series")
        object.__setattr__(self, "lpm", lpm)

    def at(self, k: int) -> float:
        return float(self.lpm[k]) if k < len(self.lpm) else 0.0

    @classmethod
    def none(cls, horizon: float, dt: float) -> WaterDrawProfile:
        return cls(np.zeros(_n_steps(horizon, dt)), dt)

    @classmethod
    def medium(cls, horizon: float, dt: float, daily_volume: float = 160.0) -> WaterDrawProfile:
        """Constant flow at the daily average of ``daily_volume`` litres (~0.11 L/min).

        A fully mixed tank cannot absorb shower-sized bursts without leaving
        its band, so the window's share of the daily volume is spread evenly.
        """
        n = _n_steps(horizon, dt)
        return cls(np.full(n, daily_volume / 1440.0), dt)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_s", "lpm"])
            for k, v in enumerate(self.lpm):
                w.writerow([repr(k * self.dt), repr(float(v))])

    @classmethod
    def from_csv(cls, path) -> WaterDrawProfile:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        t, lpm = data[:, 0], data[:, 1]
        steps = np.diff(t)
        if len(steps) and not np.allclose(steps, steps[0]):
            raise ValueError("water-draw profile must be uniformly sampled")
        return cls(lpm, float(steps[0]) if len(steps) else 1.0)


def _n_steps(horizon: float, dt: float) -> int:
    n = round(horizon / dt)
    if dt <= 0 or abs(n * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ValueError(f"horizon {horizon} is not a multiple of dt {dt}")
    return int(n)


@dataclass(eq=False)
class Ensemble:
    """A fixed collection of ACs followed by EWHs, with initial conditions.

    Vectorized parameter arrays are exposed as cached properties; index ``i``
    refers to ``acs[i]`` for ``i < n_ac`` and to ``ewhs[i - n_ac]`` otherwise.
    """

    acs: tuple[AcParams, ...] = ()
    ewhs: tuple[EwhParams, ...] = ()
    initial_temps: np.ndarray | None = None
    initial_status: np.ndarray | None = None

    def __post_init__(self):
        self.acs = tuple(self.acs)
        self.ewhs = tuple(self.ewhs)
        if self.initial_temps is None:
            self.initial_temps = np.array([p.setpoint for p in self.devices], dtype=float)
        self.initial_temps = np.asarray(self.initial_temps, dtype=float)
        if self.initial_status is None:
            self.initial_status = np.zeros(self.n, dtype=np.int8)
        self.initial_status = np.asarray(self.initial_status, dtype=np.int8)
        if self.initial_temps.shape != (self.n,) or self.initial_status.shape != (self.n,):
            raise ValueError("initial state length does not match the ensemble")

    @property
    def devices(self) -> tuple:
        return self.acs + self.ewhs

    @property
    def n_ac(self) -> int:
        return len(self.acs)

    @property
    def n_ewh(self) -> int:
        return len(self.ewhs)

    @property
    def n(self) -> int:
        return self.n_ac + self.n_ewh

    @cached_property
    def is_ewh(self) -> np.ndarray:
        return np.r_[np.zeros(self.n_ac, bool), np.ones(self.n_ewh, bool)]

    def _vec(self, ac_attr, ewh_attr, ewh_default=None):
        ac = [getattr(p, ac_attr) for p in self.acs]
        ewh = [getattr(p, ewh_attr) if ewh_attr else ewh_default for p in self.ewhs]
        return np.array(ac + ewh, dtype=float)

    @cached_property
    def R(self):
        return self._vec("thermal_resistance", "thermal_resistance")

    @cached_property
    def C(self):
        return self._vec("thermal_capacitance", "thermal_capacitance")

    @cached_property
    def eta(self):
        return self._vec("cop", "efficiency")

    @cached_property
    def power(self):
        return self._vec("rated_power", "rated_power")

    @cached_property
    def setpoint(self):
        return self._vec("setpoint", "setpoint")

    @cached_property
    def deadband(self):
        return self._vec("deadband", "deadband")

    @cached_property
    def ambient(self):
        return self._vec("ambient", "ambient")

    @cached_property
    def inlet(self):
        return self._vec("setpoint", "inlet_temp")

    @cached_property
    def volume(self):
        return np.r_[np.full(self.n_ac, np.inf), [p.tank_volume for p in self.ewhs]]

    @cached_property
    def low(self):
        return self.setpoint - self.deadband / 2

    @cached_property
    def high(self):
        return self.setpoint + self.deadband / 2

    @cached_property
    def _signed_gain(self):
        return np.where(self.is_ewh, 1.0, -1.0) * self.eta * self.R * self.power

    def _step_coeffs(self, dt: float):
        cache = self.__dict__.setdefault("_coeff_cache", {})
        if dt not in cache:
            decay = np.exp(-dt / 3600.0 / (self.R * self.C))
            cache[dt] = (decay, self._signed_gain * (1.0 - decay), self.ambient * (1.0 - decay))
        return cache[dt]

    def affine_step(self, temps: np.ndarray, dt: float, draw: float = 0.0):
        """Next-step temperatures as ``base + s * gain`` (exact in ``s``)."""
        decay, gain, drift = self._step_coeffs(dt)
        base = temps * decay + drift
        if self.n_ewh and draw > 0:
            frac = np.minimum(draw * dt / 60.0 / self.volume, 1.0)
            base = base - np.where(self.is_ewh, frac * (temps - self.inlet), 0.0)
        return base, gain

    def step(self, temps: np.ndarray, s: np.ndarray, dt: float, draw: float = 0.0) -> np.ndarray:
        _check_finite(temps, draw)
        base, gain = self.affine_step(temps, dt, draw)
        return base + s * gain

    def with_initial(self, temps=None, status=None) -> Ensemble:
        return Ensemble(
            self.acs,
            self.ewhs,
            self.initial_temps if temps is None else temps,
            self.initial_status if status is None else status,
        )

    def subset(self, kind: int) -> Ensemble:
        mask = self.is_ewh if kind == EWH else ~self.is_ewh
        return Ensemble(
            self.acs if kind == AC else (),
            self.ewhs if kind == EWH else (),
            self.initial_temps[mask],
            self.initial_status[mask],
        )

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "acs": [asdict(p) for p in self.acs],
            "ewhs": [asdict(p) for p in self.ewhs],
            "initial_temps": self.initial_temps.tolist(),
            "initial_status": self.initial_status.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Ensemble:
        return cls(
            tuple(AcParams(**p) for p in d.get("acs", [])),
            tuple(EwhParams(**p) for p in d.get("ewhs", [])),
            np.array(d["initial_temps"], dtype=float) if "initial_temps" in d else None,
            np.array(d["initial_status"], dtype=np.int8) if "initial_status" in d else None,
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> Ensemble:
        return cls.from_dict(json.loads(Path(path).read_text()))


def thermostat_step(temps: np.ndarray, status: np.ndarray, ensemble: Ensemble) -> np.ndarray:
    """Deadband hysteresis: switch at the band edges, otherwise hold ``status``."""
    temps = np.asarray(temps, dtype=float)
    s = np.asarray(status, dtype=np.int8).copy()
    ewh = ensemble.is_ewh
    above = temps >= ensemble.high
    below = temps <= ensemble.low
    s[~ewh & above] = 1
    s[~ewh & below] = 0
    s[ewh & below] = 1
    s[ewh & above] = 0
    return s


@dataclass
class Baseline:
    """Thermostat-only trajectory: ``power[k]`` is drawn over step ``k``."""

    power: np.ndarray  # (K,) kW
    temps: np.ndarray  # (K + 1, N) degC
    status: np.ndarray  # (K, N)
    dt: float

    @property
    def horizon(self) -> float:
        return len(self.power) * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.power)) * self.dt


def compute_baseline(
    ensemble: Ensemble,
    horizon: float,
    dt: float,
    draw: WaterDrawProfile | None = None,
) -> Baseline:
    n_steps = _n_steps(horizon, dt)
    temps = np.empty((n_steps + 1, ensemble.n))
    status = np.empty((n_steps, ensemble.n), dtype=np.int8)
    power = np.empty(n_steps)
    T = ensemble.initial_temps.copy()
    s = ensemble.initial_status.copy()
    temps[0] = T
    for k in range(n_steps):
        s = thermostat_step(T, s, ensemble)
        status[k] = s
        power[k] = s @ ensemble.power
        T = ensemble.step(T, s, dt, draw.at(k) if draw is not None else 0.0)
        temps[k + 1] = T
    return Baseline(power, temps, status, dt)


# -- heterogeneous sampling -------------------------------------------------

AC_DEFAULT_RANGES = {
    "thermal_resistance": (1.5, 2.5),
    "thermal_capacitance": (1.5, 2.5),
    "cop": (2.0, 3.0),
    "rated_power": (4.0, 7.2),
    "setpoint": (21.0, 24.0),
    "deadband": (0.5, 1.0),
    "ambient": (32.0, 32.0),
}

EWH_DEFAULT_RANGES = {
    "thermal_resistance": (200.0, 400.0),
    "thermal_capacitance": (0.2, 0.6),
    "efficiency": (0.95, 1.0),
    "rated_power": (4.0, 5.0),
    "setpoint": (48.0, 52.0),
    "deadband": (3.0, 5.0),
    "inlet_temp": (10.0, 15.0),
    "ambient": (18.0, 22.0),
    "tank_volume": (150.0, 250.0),
}


@dataclass
class EnsembleSpec:
    n_ac: int = 100
    n_ewh: int = 0
    ac_ranges: dict = field(default_factory=lambda: dict(AC_DEFAULT_RANGES))
    ewh_ranges: dict = field(default_factory=lambda: dict(EWH_DEFAULT_RANGES))
    seed: int = 0
    heterogeneous: bool = True
    # "cycle": phase-uniform on each device's thermostat limit cycle;
    # "uniform": uniform in the deadband with all devices OFF.
    initial_state: str = "cycle"
    # steady hot-water draw (L/min) assumed when placing EWHs on their cycle
    draw_lpm: float = 0.0

    def __post_init__(self):
        if self.n_ac < 0 or self.n_ewh < 0:
            raise ValueError("device counts must be non-negative")
        self.ac_ranges = {**AC_DEFAULT_RANGES, **self.ac_ranges}
        self.ewh_ranges = {**EWH_DEFAULT_RANGES, **self.ewh_ranges}
        for rng in (self.ac_ranges, self.ewh_ranges):
            for k, (lo, hi) in rng.items():
                if lo > hi:
                    raise ValueError(f"range for {k} has low > high")
        if self.initial_state not in ("cycle", "uniform"):
            raise ValueError("initial_state must be 'cycle' or 'uniform'")
        if self.draw_lpm < 0:
            raise ValueError("draw_lpm must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ac_ranges"] = {k: list(v) for k, v in self.ac_ranges.items()}
        d["ewh_ranges"] = {k: list(v) for k, v in self.ewh_ranges.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> EnsembleSpec:
        d = dict(d)
        for key in ("ac_ranges", "ewh_ranges"):
            if key in d:
                d[key] = {k: tuple(v) for k, v in d[key].items()}
        return cls(**d)


def _draw(rng, ranges, cls, n):
    names = [f.name for f in fields(cls)]
    cols = {k: rng.uniform(*ranges[k], size=n) for k in names}
    return tuple(cls(**{k: float(cols[k][i]) for k in names}) for i in range(n))


def _cycle_phase_state(p, kind, u, draw_lpm=0.0):
    """Temperature and status at phase ``u`` in [0, 1) of the hysteresis cycle.

    A steady draw mixes inlet water in at rate ``k = 60 q / V`` per hour, which
    keeps the dynamics first order with a shorter time constant and an
    equilibrium pulled toward the inlet temperature.
    """
    lo, hi = p.band
    tau = p.thermal_resistance * p.thermal_capacitance
    sign = -1.0 if kind == AC else 1.0
    eta = p.cop if kind == AC else p.efficiency
    t_off_eq = p.ambient
    t_on_eq = p.ambient + sign * eta * p.thermal_resistance * p.rated_power
    if kind == EWH and draw_lpm > 0:
        k = 60.0 * draw_lpm / p.tank_volume
        shrink = 1.0 / (1.0 + k * tau)
        t_off_eq = (t_off_eq + k * tau * p.inlet_temp) * shrink
        t_on_eq = (t_on_eq + k * tau * p.inlet_temp) * shrink
        tau *= shrink
    # ACs drift up while OFF and are pulled down while ON; EWHs the reverse.
    start_off, end_off = (lo, hi) if kind == AC else (hi, lo)
    if (t_on_eq - start_off) * (t_on_eq - end_off) <= 0 or (t_off_eq - start_off) * (t_off_eq - end_off) <= 0:
        # no limit cycle: the device cannot reach one of its band edges
        return lo + u * (hi - lo), 0
    d_off = tau * math.log((t_off_eq - start_off) / (t_off_eq - end_off))
    d_on = tau * math.log((t_on_eq - end_off) / (t_on_eq - start_off))
    t = u * (d_off + d_on)
    if t < d_off:
        return t_off_eq + (start_off - t_off_eq) * math.exp(-t / tau), 0
    return t_on_eq + (end_off - t_on_eq) * math.exp(-(t - d_off) / tau), 1


def sample_ensemble(spec: EnsembleSpec) -> Ensemble:
    if spec.heterogeneous:
        for n, ranges, label in ((spec.n_ac, spec.ac_ranges, "AC"), (spec.n_ewh, spec.ewh_ranges, "EWH")):
            if n > 1 and all(lo == hi for lo, hi in ranges.values()):
                raise ValueError(f"heterogeneous {label} ensemble requested but every range is degenerate")
    rng = np.random.default_rng(spec.seed)
    acs = _draw(rng, spec.ac_ranges, AcParams, spec.n_ac)
    ewhs = _draw(rng, spec.ewh_ranges, EwhParams, spec.n_ewh)
    phases = rng.uniform(0.0, 1.0, size=len(acs) + len(ewhs))
    temps = np.empty(len(phases))
    status = np.zeros(len(phases), dtype=np.int8)
    for i, p in enumerate(acs + ewhs):
        kind = AC if i < len(acs) else EWH
        if spec.initial_state == "cycle":
            temps[i], status[i] = _cycle_phase_state(p, kind, phases[i], spec.draw_lpm)
        else:
            lo, hi = p.band
            temps[i] = lo + phases[i] * (hi - lo)
    return Ensemble(acs, ewhs, temps, status)
