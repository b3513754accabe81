"""Scenario configuration and the end-to-end characterization pipeline.

Stages run in order (baseline, envelope, signals, track, fit, validate,
report).  Each stage persists its artifacts under
``<output_dir>/<stage>-<key>/`` where ``key`` hashes only the configuration
fields the stage depends on, so changing, say, the initial-condition mode
reuses the expensive envelope and tracking results.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .devices import Baseline, Ensemble, EnsembleSpec, WaterDrawProfile, compute_baseline, sample_ensemble
from .dispatch import DispatchConfig, TrackResult, track_signal
from .envelope import PowerEnvelope, compute_envelope
from .fitting import FitProblem, FitResult, fit_vb, parameter_evolution
from .signals import NormalizedSignal, build_regulation, load_normalized, synth_normalized, within_envelope
from .vb import VbParams, ensemble_soc, initial_soc, simulate_vb, soc_capacity, violation_times

log = logging.getLogger(__name__)

STAGES = ("baseline", "envelope", "signals", "track", "fit", "validate", "report")
EXIT_CODES = {"config": 2, **{s: 10 + i for i, s in enumerate(STAGES)}}
IC_MODES = ("zero", "analytic")


class PipelineError(RuntimeError):
    """A stage failed; ``stage`` names it and ``exit_code`` is its CLI status."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.exit_code = EXIT_CODES[stage]


@dataclass
class ScenarioConfig:
    ensemble: EnsembleSpec = field(default_factory=EnsembleSpec)
    horizon: float = 7200.0
    dt: float = 10.0
    gamma: float = 0.5
    n_signals: int = 200
    signal_seed: int = 0
    signal_files: list = field(default_factory=list)
    water_draw: str = "none"  # "none", "medium" or a time_s,lpm CSV path
    # tracking tolerance in kW; None means epsilon_fraction of the mean baseline power
    epsilon: float | None = None
    epsilon_fraction: float = 0.005
    dispatch: dict = field(default_factory=dict)
    envelope_stride: float = 300.0
    envelope_eps: float = 0.1
    filter_semantics: str = "instant"
    ic_modes: list = field(default_factory=lambda: list(IC_MODES))
    # "midpoint": VB state = band-referenced SOC minus half the band capacity
    soc_reference: str = "midpoint"
    evolution_sizes: list = field(default_factory=lambda: [50, 100, 150, 200])
    error_compare_signals: int = 10
    output_dir: str = "runs"

    def __post_init__(self):
        if isinstance(self.ensemble, dict):
            self.ensemble = EnsembleSpec.from_dict(self.ensemble)
        if not self.dt > 0 or not self.horizon > 0:
            raise ValueError("dt and horizon must be positive")
        n = self.horizon / self.dt
        if abs(n - round(n)) > 1e-9:
            raise ValueError("horizon must be a multiple of dt")
        if self.n_signals < 0 or self.gamma < 0:
            raise ValueError("n_signals and gamma must be non-negative")
        if self.filter_semantics not in ("instant", "sustained"):
            raise ValueError("filter_semantics must be 'instant' or 'sustained'")
        if self.soc_reference not in ("midpoint", "band"):
            raise ValueError("soc_reference must be 'midpoint' or 'band'")
        bad = set(self.ic_modes) - set(IC_MODES)
        if bad:
            raise ValueError(f"unknown ic modes {sorted(bad)}")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.epsilon_fraction > 0:
            raise ValueError("epsilon_fraction must be positive")
        DispatchConfig(**{"epsilon": 1.0, **self.dispatch})

    # -- serialization ------------------------------------------------------
    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["ensemble"] = self.ensemble.to_dict()
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> ScenarioConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> ScenarioConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def key(self, *names: str) -> str:
        d = self.to_dict()
        blob = json.dumps({n: d[n] for n in sorted(names)}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def config_hash(self) -> str:
        return self.key(*(f.name for f in fields(self) if f.name != "output_dir"))


# Configuration fields each stage's artifacts depend on (cumulative).
_BASELINE_KEYS = ("ensemble", "horizon", "dt", "water_draw")
_ENVELOPE_KEYS = _BASELINE_KEYS + ("epsilon", "epsilon_fraction", "dispatch", "envelope_stride", "envelope_eps")
_SIGNAL_KEYS = _ENVELOPE_KEYS + ("gamma", "n_signals", "signal_seed", "signal_files", "filter_semantics")
_TRACK_KEYS = _SIGNAL_KEYS + ("error_compare_signals",)
_FIT_KEYS = _TRACK_KEYS + ("ic_modes", "soc_reference", "evolution_sizes")
STAGE_KEYS = {
    "baseline": _BASELINE_KEYS,
    "envelope": _ENVELOPE_KEYS,
    "signals": _SIGNAL_KEYS,
    "track": _TRACK_KEYS,
    "fit": _FIT_KEYS,
    "validate": _FIT_KEYS,
    "report": _FIT_KEYS,
}


@dataclass
class RunReport:
    config_hash: str
    artifacts: dict  # artifact class -> list of paths
    fits: dict  # ic mode -> FitResult record
    summary: dict

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> RunReport:
        return cls(**d)


def validate_soc(trace_vb, trace_analytic) -> float:
    """Root-mean-square gap (kWh) between two SOC traces on one grid."""
    x = np.asarray(getattr(trace_vb, "x", trace_vb), dtype=float)
    y = np.asarray(getattr(trace_analytic, "x", trace_analytic), dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"SOC traces are on different grids: {x.shape} vs {y.shape}")
    return float(np.sqrt(np.mean((x - y) ** 2)))


# -- helpers ------------------------------------------------------------------


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _read_csv(path) -> tuple[list, list]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _atomic_json(path, obj) -> None:
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


class Pipeline:
    """Stage runner with per-stage artifact caching."""

    def __init__(self, config: ScenarioConfig):
        self.config = config
        self.root = Path(config.output_dir)
        self._memo: dict = {}

    def stage_dir(self, stage: str) -> Path:
        return self.root / f"{stage}-{self.config.key(*STAGE_KEYS[stage])}"

    def _done(self, stage: str) -> bool:
        return (self.stage_dir(stage) / "DONE").exists()

    def _finish(self, stage: str, paths: list) -> list:
        d = self.stage_dir(stage)
        _atomic_json(d / "DONE", {"config_hash": self.config.config_hash(), "artifacts": sorted(map(str, paths))})
        return paths

    def _start(self, stage: str) -> Path:
        d = self.stage_dir(stage)
        d.mkdir(parents=True, exist_ok=True)
        return d

    def _run(self, stage, fn):
        try:
            return fn()
        except PipelineError:
            raise
        except Exception as exc:  # noqa: BLE001 - any stage failure maps to its exit code
            raise PipelineError(stage, f"{type(exc).__name__}: {exc}") from exc

    # -- stage: baseline -----------------------------------------------------
    def draw_profile(self) -> WaterDrawProfile | None:
        c = self.config
        if c.water_draw == "none":
            return None
        if c.water_draw == "medium":
            return WaterDrawProfile.medium(c.horizon, c.dt)
        return WaterDrawProfile.from_csv(c.water_draw)

    def baseline(self) -> tuple[Ensemble, Baseline]:
        if "baseline" in self._memo:
            return self._memo["baseline"]
        c = self.config
        d = self.stage_dir("baseline")

        def build():
            ens = sample_ensemble(c.ensemble)
            base = compute_baseline(ens, c.horizon, c.dt, self.draw_profile())
            out = self._start("baseline")
            ens.save(out / "ensemble.json")
            _write_csv(out / "baseline.csv", ["time_s", "power_kw"], zip(base.times, base.power))
            np.savez_compressed(out / "baseline_state.npz", temps=base.temps, status=base.status)
            self._finish("baseline", [out / "ensemble.json", out / "baseline.csv"])

        if not self._done("baseline"):
            self._run("baseline", build)
        ens = Ensemble.load(d / "ensemble.json")
        _, rows = _read_csv(d / "baseline.csv")
        state = np.load(d / "baseline_state.npz")
        base = Baseline(np.array([float(r[1]) for r in rows]), state["temps"], state["status"], c.dt)
        self._memo["baseline"] = (ens, base)
        return ens, base

    def dispatch_config(self) -> DispatchConfig:
        _, base = self.baseline()
        eps = self.config.epsilon if self.config.epsilon is not None else self.config.epsilon_fraction * float(base.power.mean())
        return DispatchConfig(**{**self.config.dispatch, "epsilon": eps})

    # -- stage: envelope -----------------------------------------------------
    def envelopes(self) -> dict:
        if "envelope" in self._memo:
            return self._memo["envelope"]
        c = self.config
        d = self.stage_dir("envelope")

        def build():
            ens, base = self.baseline()
            cfg = self.dispatch_config()
            out = self._start("envelope")
            paths = []
            for sem in ("sustained", "instant"):
                env = compute_envelope(ens, base, cfg, c.dt, c.envelope_stride, c.envelope_eps,
                                       self.draw_profile(), sem)
                env.to_csv(out / f"envelope_{sem}.csv")
                _write_csv(out / f"envelope_{sem}_grid.csv", ["time_s", "p_minus_kw", "p_plus_kw"],
                           zip(env.grid_times, env.minus_at_grid, env.plus_at_grid))
                paths += [out / f"envelope_{sem}.csv", out / f"envelope_{sem}_grid.csv"]
            self._finish("envelope", paths)

        if not self._done("envelope"):
            self._run("envelope", build)
        envs = {}
        for sem in ("sustained", "instant"):
            env = PowerEnvelope.from_csv(d / f"envelope_{sem}.csv", c.envelope_eps)
            _, rows = _read_csv(d / f"envelope_{sem}_grid.csv")
            grid = np.array([[float(x) for x in r] for r in rows]).reshape(-1, 3)
            env.grid_times, env.minus_at_grid, env.plus_at_grid = grid[:, 0], grid[:, 1], grid[:, 2]
            envs[sem] = env
        self._memo["envelope"] = envs
        return envs

    # -- stage: signals ------------------------------------------------------
    def normalized_signals(self) -> list[NormalizedSignal]:
        c = self.config
        if c.signal_files:
            return [load_normalized(p, c.dt) for p in c.signal_files[: c.n_signals]]
        return [synth_normalized(c.signal_seed + i, c.horizon, c.dt) for i in range(c.n_signals)]

    def signals(self) -> dict:
        """Candidate deviations and the indices accepted by the envelope filter."""
        if "signals" in self._memo:
            return self._memo["signals"]
        c = self.config
        d = self.stage_dir("signals")

        def build():
            _, base = self.baseline()
            env = self.envelopes()[c.filter_semantics]
            out = self._start("signals")
            norm = self.normalized_signals()
            for s in norm:
                if len(s.samples) != len(base.power):
                    raise ValueError(f"signal {s.source} does not cover the horizon on the scenario grid")
            devs = np.array([build_regulation(base.power, s, c.gamma).samples - base.power for s in norm])
            devs = devs.reshape(len(norm), len(base.power))
            accepted = [i for i, u in enumerate(devs) if within_envelope(u, env.p_minus, env.p_plus)]
            np.save(out / "deviations.npy", devs)
            _atomic_json(out / "accepted.json", {
                "semantics": c.filter_semantics,
                "candidates": [s.source for s in norm],
                "accepted": accepted,
            })
            self._finish("signals", [out / "accepted.json", out / "deviations.npy"])

        if not self._done("signals"):
            self._run("signals", build)
        meta = json.loads((d / "accepted.json").read_text())
        res = {"deviations": np.load(d / "deviations.npy"), **meta}
        self._memo["signals"] = res
        return res

    # -- stage: track --------------------------------------------------------
    def track_one(self, index: int, penalty: float | None = None, record: bool = True) -> TrackResult:
        """Track one accepted candidate; refuses signals the envelope rejected."""
        sig = self.signals()
        if index not in sig["accepted"]:
            raise PipelineError("track", f"signal {index} is not on the acceptance list")
        ens, base = self.baseline()
        cfg = self.dispatch_config()
        if penalty is not None:
            cfg = DispatchConfig(**{**asdict(cfg), "penalty": penalty})
        target = base.power + sig["deviations"][index]
        return track_signal(ens, target, cfg, self.config.dt, draw=self.draw_profile(), record=record)

    def tracking(self) -> dict:
        if "track" in self._memo:
            return self._memo["track"]
        c = self.config
        d = self.stage_dir("track")

        def build():
            sig = self.signals()
            out = self._start("track")
            rows, errs = [], []
            for i in sig["accepted"]:
                res = self.track_one(i, record=False)
                rows.append((i, res.violation_time, float(np.max(res.rel_err)) if len(res.rel_err) else 0.0))
                errs.append(res.rel_err)
            _write_csv(out / "violation_times.csv", ["signal", "f_s", "max_rel_err_pct"], rows)
            all_err = np.concatenate(errs) if errs else np.zeros(0)
            compare = sig["accepted"][: c.error_compare_signals]
            no_pen = [self.track_one(i, penalty=0.0, record=False).rel_err for i in compare]
            no_pen = np.concatenate(no_pen) if no_pen else np.zeros(0)
            with_pen = np.concatenate(errs[: len(compare)]) if compare else np.zeros(0)
            edges = np.linspace(0.0, max(2.0, float(np.max(all_err, initial=0.0))), 41)
            _write_csv(out / "error_histogram.csv", ["bin_lo_pct", "bin_hi_pct", "all_signals", "with_penalty",
                                                     "no_penalty"],
                       zip(edges[:-1], edges[1:], np.histogram(all_err, edges)[0],
                           np.histogram(with_pen, edges)[0], np.histogram(no_pen, edges)[0]))
            self._finish("track", [out / "violation_times.csv", out / "error_histogram.csv"])

        if not self._done("track"):
            self._run("track", build)
        _, rows = _read_csv(d / "violation_times.csv")
        res = {
            "signal": np.array([int(r[0]) for r in rows], dtype=int),
            "F": np.array([float(r[1]) for r in rows]),
            "max_rel_err": np.array([float(r[2]) for r in rows]),
        }
        self._memo["track"] = res
        return res

    # -- stage: fit ----------------------------------------------------------
    def soc_offset(self) -> float:
        """Band-referenced SOC minus this offset is the VB state."""
        if self.config.soc_reference == "band":
            return 0.0
        ens, _ = self.baseline()
        return soc_capacity(ens) / 2.0

    def x0_for(self, mode: str) -> float:
        if mode == "zero":
            return 0.0
        ens, _ = self.baseline()
        return initial_soc(ens) - self.soc_offset()

    def problem(self) -> FitProblem:
        tr = self.tracking()
        sig = self.signals()
        if len(tr["F"]) == 0:
            raise PipelineError("fit", "no accepted signals to fit")
        env = self.envelopes()[self.config.filter_semantics]
        return FitProblem(tr["F"], sig["deviations"][tr["signal"]], 0.0, self.config.dt,
                          env.p_minus, env.p_plus, signal_index=tr["signal"])

    def fits(self) -> dict:
        if "fit" in self._memo:
            return self._memo["fit"]
        c = self.config
        d = self.stage_dir("fit")

        def build():
            out = self._start("fit")
            p = self.problem()
            paths = []
            for mode in c.ic_modes:
                res = fit_vb(p.with_x0(self.x0_for(mode)), ic_mode=mode)
                rec = {**res.record(), "soc_offset_kwh": self.soc_offset()}
                _atomic_json(out / f"fit_{mode}.json", rec)
                np.save(out / f"fit_{mode}_B.npy", res.B)
                rows = [(k, r.a, r.c, r.objective, r.saturated)
                        for k, r in parameter_evolution(p.with_x0(self.x0_for(mode)), c.evolution_sizes)]
                _write_csv(out / f"evolution_{mode}.csv", ["n_candidates", "a_per_h", "c_kwh", "objective",
                                                           "saturated"], rows)
                paths += [out / f"fit_{mode}.json", out / f"evolution_{mode}.csv"]
            self._finish("fit", paths)

        if not self._done("fit"):
            self._run("fit", build)
        res = {}
        for mode in c.ic_modes:
            rec = json.loads((d / f"fit_{mode}.json").read_text())
            res[mode] = FitResult(rec["a_per_h"], rec["c_kwh"], rec["x0_kwh"], rec["objective"],
                                  np.load(d / f"fit_{mode}_B.npy"), rec["saturated"], rec["n_signals"], mode)
        self._memo["fit"] = res
        return res

    def evolution(self, mode: str) -> list[dict]:
        self.fits()
        hdr, rows = _read_csv(self.stage_dir("fit") / f"evolution_{mode}.csv")
        return [dict(zip(hdr, r)) for r in rows]

    # -- stage: validate -----------------------------------------------------
    def validation_mode(self) -> str:
        return "analytic" if "analytic" in self.config.ic_modes else self.config.ic_modes[0]

    def validation(self) -> dict:
        if "validate" in self._memo:
            return self._memo["validate"]
        c = self.config
        d = self.stage_dir("validate")

        def build():
            out = self._start("validate")
            ens, _ = self.baseline()
            mode = self.validation_mode()
            fit = self.fits()[mode]
            tr = self.tracking()
            sig = self.signals()
            idx = int(tr["signal"][0])
            res = self.track_one(idx)
            u = sig["deviations"][idx]
            k = len(res.achieved)
            analytic = ensemble_soc(ens, res.temps[: k + 1]) - self.soc_offset()
            params = VbParams(fit.a, -fit.c, fit.c, min(max(fit.x0, -fit.c), fit.c))
            model = simulate_vb(params.x0, params.a, u[:k], c.dt)
            rms = validate_soc(model, analytic)
            _write_csv(out / "soc_traces.csv", ["time_s", "soc_vb_kwh", "soc_analytic_kwh"],
                       zip(np.arange(k + 1) * c.dt, model, analytic))
            res.to_csv(out / "tracking_example.csv")
            p = self.problem()
            B = violation_times(VbParams(fit.a, -fit.c, fit.c, params.x0, p.p_minus, p.p_plus), p.U, c.dt)
            _write_csv(out / "violation_scatter.csv", ["signal", "f_s", "b_s"], zip(tr["signal"], tr["F"], B))
            _atomic_json(out / "validation.json", {
                "ic_mode": mode,
                "signal": idx,
                "soc_rms_kwh": rms,
                "soc_rms_over_c": rms / fit.c,
                "conservative": bool(np.all(B <= tr["F"])),
            })
            self._finish("validate", [out / "soc_traces.csv", out / "tracking_example.csv",
                                      out / "violation_scatter.csv", out / "validation.json"])

        if not self._done("validate"):
            self._run("validate", build)
        res = json.loads((d / "validation.json").read_text())
        self._memo["validate"] = res
        return res

    # -- stage: report -------------------------------------------------------
    def report(self) -> RunReport:
        c = self.config
        ens, base = self.baseline()
        self.envelopes()
        artifacts = {
            "baseline": [str(self.stage_dir("baseline") / "baseline.csv")],
            "envelope": [str(self.stage_dir("envelope") / f"envelope_{s}.csv") for s in ("sustained", "instant")],
        }
        summary = {
            "n_devices": ens.n,
            "mean_baseline_kw": float(base.power.mean()),
            "epsilon_kw": self.dispatch_config().epsilon,
            "x0_band_kwh": initial_soc(ens),
            "soc_capacity_kwh": soc_capacity(ens),
            "soc_offset_kwh": self.soc_offset(),
        }
        fits = {}
        if c.n_signals > 0:
            sig = self.signals()
            artifacts["signals"] = [str(self.stage_dir("signals") / "accepted.json")]
            summary["n_candidates"] = len(sig["candidates"])
            summary["n_accepted"] = len(sig["accepted"])
        if c.n_signals > 0 and sig["accepted"]:
            tr = self.tracking()
            t = self.stage_dir("track")
            artifacts["violation_times"] = [str(t / "violation_times.csv"), str(t / "error_histogram.csv")]
            tracked = tr["F"] >= c.horizon
            summary["n_failed"] = int(np.sum(~tracked))
            summary["max_rel_err_pct_tracked"] = float(np.max(tr["max_rel_err"][tracked], initial=0.0))
            fits = {m: r.record() for m, r in self.fits().items()}
            f = self.stage_dir("fit")
            artifacts["fit"] = [str(f / f"fit_{m}.json") for m in c.ic_modes]
            artifacts["evolution"] = [str(f / f"evolution_{m}.csv") for m in c.ic_modes]
            val = self.validation()
            v = self.stage_dir("validate")
            artifacts["validation"] = [str(v / n) for n in ("soc_traces.csv", "violation_scatter.csv",
                                                             "tracking_example.csv", "validation.json")]
            summary["soc_rms_kwh"] = val["soc_rms_kwh"]
            summary["soc_rms_over_c"] = val["soc_rms_over_c"]
        rep = RunReport(c.config_hash(), artifacts, fits, summary)
        out = self.root / f"report-{c.config_hash()}"
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(rep.to_json() + "\n")
        c.save(out / "config.json")
        return rep


def run_pipeline(config: ScenarioConfig) -> RunReport:
    return Pipeline(config).report()
