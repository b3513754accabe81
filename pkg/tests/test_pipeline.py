import json

import numpy as np
import pytest

from tclvb import cli
from tclvb.devices import EnsembleSpec
from tclvb.pipeline import EXIT_CODES, Pipeline, PipelineError, ScenarioConfig, run_pipeline, validate_soc


def small_config(tmp_path, **kw):
    base = dict(
        ensemble=EnsembleSpec(n_ac=30, seed=3),
        horizon=1800.0,
        dt=10.0,
        gamma=0.8,
        n_signals=6,
        envelope_stride=600.0,
        evolution_sizes=[3, 6],
        error_compare_signals=2,
        output_dir=str(tmp_path / "runs"),
    )
    base.update(kw)
    return ScenarioConfig(**base)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    cfg = small_config(tmp_path_factory.mktemp("pipe"))
    p = Pipeline(cfg)
    return cfg, p, p.report()


class TestValidateSoc:
    def test_identical_traces(self):
        assert validate_soc(np.arange(5.0), np.arange(5.0)) == 0.0

    def test_constant_offset(self):
        assert validate_soc(np.zeros(7) + 1.0, np.zeros(7)) == pytest.approx(1.0)

    def test_grid_mismatch(self):
        with pytest.raises(ValueError):
            validate_soc(np.zeros(3), np.zeros(4))


class TestConfig:
    def test_json_round_trip(self, tmp_path):
        cfg = small_config(tmp_path)
        cfg.save(tmp_path / "c.json")
        back = ScenarioConfig.load(tmp_path / "c.json")
        assert back.to_dict() == cfg.to_dict()
        assert back.config_hash() == cfg.config_hash()

    def test_hash_ignores_output_dir(self, tmp_path):
        a = small_config(tmp_path)
        b = small_config(tmp_path, output_dir="elsewhere")
        assert a.config_hash() == b.config_hash()
        assert a.config_hash() != small_config(tmp_path, gamma=0.2).config_hash()

    def test_stage_keys_isolate_upstream_stages(self, tmp_path):
        a, b = Pipeline(small_config(tmp_path)), Pipeline(small_config(tmp_path, ic_modes=["zero"]))
        assert a.stage_dir("envelope") == b.stage_dir("envelope")
        assert a.stage_dir("fit") != b.stage_dir("fit")

    @pytest.mark.parametrize(
        "bad",
        [
            dict(horizon=1805.0),
            dict(gamma=-0.1),
            dict(filter_semantics="pulse"),
            dict(ic_modes=["guess"]),
            dict(soc_reference="top"),
            dict(dispatch={"epsilon": -1.0}),
        ],
    )
    def test_invalid(self, tmp_path, bad):
        with pytest.raises(ValueError):
            small_config(tmp_path, **bad)

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            ScenarioConfig.from_dict({"gama": 0.1})


class TestRun:
    def test_all_artifact_classes_exist(self, small_run):
        _, _, rep = small_run
        assert set(rep.artifacts) == {"baseline", "envelope", "signals", "violation_times", "fit", "evolution",
                                      "validation"}
        for paths in rep.artifacts.values():
            for path in paths:
                with open(path):
                    pass

    def test_summary_and_fits(self, small_run):
        cfg, _, rep = small_run
        assert rep.summary["n_candidates"] == cfg.n_signals
        assert set(rep.fits) == {"zero", "analytic"}
        assert rep.fits["zero"]["x0_kwh"] == 0.0

    def test_rerun_is_a_cache_hit(self, small_run, monkeypatch):
        cfg, _, rep = small_run
        import tclvb.pipeline as pl

        def boom(*a, **k):
            raise AssertionError("recomputed a cached stage")

        for name in ("compute_baseline", "compute_envelope", "track_signal", "fit_vb"):
            monkeypatch.setattr(pl, name, boom)
        again = run_pipeline(ScenarioConfig.from_dict(cfg.to_dict()))
        assert again.to_json() == rep.to_json()

    def test_report_is_byte_identical_across_fresh_runs(self, small_run, tmp_path):
        cfg, _, rep = small_run
        fresh = run_pipeline(ScenarioConfig.from_dict({**cfg.to_dict(), "output_dir": str(tmp_path)}))
        assert fresh.fits == rep.fits and fresh.summary == rep.summary
        a = (tmp_path / f"track-{cfg.key(*__import__('tclvb.pipeline').pipeline.STAGE_KEYS['track'])}"
             / "violation_times.csv")
        b = Pipeline(cfg).stage_dir("track") / "violation_times.csv"
        assert a.read_bytes() == b.read_bytes()

    def test_fits_are_conservative(self, small_run):
        _, p, _ = small_run
        tr = p.tracking()
        for res in p.fits().values():
            assert np.all(res.B <= tr["F"])

    def test_track_refuses_rejected_signals(self, tmp_path):
        cfg = small_config(tmp_path, gamma=3.0)  # far outside any envelope
        p = Pipeline(cfg)
        assert p.signals()["accepted"] == []
        with pytest.raises(PipelineError) as exc:
            p.track_one(0)
        assert exc.value.stage == "track" and exc.value.exit_code == EXIT_CODES["track"]

    def test_no_signals_gives_baseline_and_envelope_only(self, tmp_path):
        rep = run_pipeline(small_config(tmp_path, n_signals=0))
        assert set(rep.artifacts) == {"baseline", "envelope"}
        assert rep.fits == {}

    def test_stage_failure_maps_to_exit_code(self, tmp_path):
        cfg = small_config(tmp_path, signal_files=[str(tmp_path / "missing.csv")])
        with pytest.raises(PipelineError) as exc:
            Pipeline(cfg).signals()
        assert exc.value.stage == "signals" and exc.value.exit_code == EXIT_CODES["signals"]


class TestCli:
    def test_init_then_baseline(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        assert cli.main(["init", str(path)]) == 0
        cfg = ScenarioConfig.load(path)
        small_config(tmp_path).save(path)
        capsys.readouterr()
        assert cli.main(["baseline", "-c", str(path)]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["n_devices"] == 30
        assert cfg.n_signals == 200

    def test_invalid_config_exit_code(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"horizon": 7205.0}))
        assert cli.main(["baseline", "-c", str(path)]) == EXIT_CODES["config"]

    def test_track_rejected_signal_exit_code(self, small_run, tmp_path, capsys):
        cfg, p, _ = small_run
        rejected = sorted(set(range(cfg.n_signals)) - set(p.signals()["accepted"]))
        path = tmp_path / "c.json"
        cfg.save(path)
        target = rejected[0] if rejected else cfg.n_signals + 5
        assert cli.main(["track", "-c", str(path), "--signal", str(target)]) == EXIT_CODES["track"]
        assert "acceptance list" in capsys.readouterr().err

    def test_track_single_accepted_signal(self, small_run, tmp_path, capsys):
        cfg, p, _ = small_run
        path = tmp_path / "c.json"
        cfg.save(path)
        idx = p.signals()["accepted"][0]
        assert cli.main(["track", "-c", str(path), "--signal", str(idx)]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["signal"] == idx and out["csv"].endswith(f"signal_{idx}.csv")
