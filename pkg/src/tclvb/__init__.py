"""Virtual-battery characterization of thermostatically controlled load ensembles."""

from .devices import (
    AcParams,
    Baseline,
    Ensemble,
    EnsembleSpec,
    EwhParams,
    WaterDrawProfile,
    ac_step,
    compute_baseline,
    ewh_step,
    sample_ensemble,
    thermostat_step,
)
from .dispatch import DispatchConfig, classify_devices, enumerate_oracle, solve_dispatch, track_signal
from .envelope import PowerEnvelope, compute_envelope, lower_limit_at, upper_limit_at
from .fitting import FitProblem, FitResult, VirtualBatteryRegressor, fit_objective, fit_vb
from .pipeline import RunReport, ScenarioConfig, run_pipeline, validate_soc
from .signals import build_regulation, filter_by_envelope, load_normalized, synth_normalized
from .vb import VbParams, initial_soc_ac, initial_soc_ewh, vb_step, vb_violation_time, violation_times

__version__ = "0.1.0"
