import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tclvb.envelope import PowerEnvelope
from tclvb.signals import (
    NormalizedSignal,
    build_regulation,
    filter_by_envelope,
    load_normalized,
    save_series,
    synth_normalized,
)


def test_constant_zero_file(tmp_path):
    save_series(tmp_path / "z.csv", np.zeros(50), 1.0)
    sig = load_normalized(tmp_path / "z.csv")
    assert np.all(sig.samples == 0.0) and sig.dt == 1.0


def test_zero_order_hold_upsampling(tmp_path):
    save_series(tmp_path / "s.csv", [0.1, -0.2, 0.3], 2.0)
    sig = load_normalized(tmp_path / "s.csv", dt=1.0)
    assert sig.samples.tolist() == [0.1, 0.1, -0.2, -0.2, 0.3, 0.3]


def test_downsampling_keeps_step_start_values(tmp_path):
    save_series(tmp_path / "s.csv", np.arange(20) / 20, 1.0)
    sig = load_normalized(tmp_path / "s.csv", dt=10.0)
    assert sig.samples.tolist() == [0.0, 0.5]


def test_full_length_file_sets_horizon(tmp_path):
    save_series(tmp_path / "s.csv", np.sin(np.arange(7200) / 300.0), 1.0)
    assert load_normalized(tmp_path / "s.csv").horizon == 7200.0


def test_rejects_bad_files(tmp_path):
    (tmp_path / "gap.csv").write_text("time_s,value\n0,0.1\n1,0.2\n3,0.3\n")
    with pytest.raises(ValueError, match="non-uniform"):
        load_normalized(tmp_path / "gap.csv")
    (tmp_path / "big.csv").write_text("time_s,value\n0,0.1\n1,1.5\n")
    with pytest.raises(ValueError, match="outside"):
        load_normalized(tmp_path / "big.csv")
    (tmp_path / "hdr.csv").write_text("t,v\n0,0.1\n")
    with pytest.raises(ValueError, match="header"):
        load_normalized(tmp_path / "hdr.csv")


def test_normalized_signal_bounds():
    NormalizedSignal(np.array([1.0 + 1e-10, -1.0]), 1.0)
    with pytest.raises(ValueError):
        NormalizedSignal(np.array([1.01]), 1.0)


class TestSynth:
    def test_deterministic(self):
        a, b = synth_normalized(7, 7200, 10), synth_normalized(7, 7200, 10)
        np.testing.assert_array_equal(a.samples, b.samples)
        assert not np.array_equal(a.samples, synth_normalized(8, 7200, 10).samples)

    def test_peak_is_exactly_one(self):
        for seed in range(20):
            assert np.max(np.abs(synth_normalized(seed, 7200, 10).samples)) == 1.0

    def test_means_of_200_seeds_are_moderate(self):
        means = [synth_normalized(seed, 7200, 10).samples.mean() for seed in range(200)]
        assert max(abs(m) for m in means) <= 0.5

    def test_horizon_must_be_multiple_of_dt(self):
        with pytest.raises(ValueError):
            synth_normalized(0, 7205, 10)


class TestBuildRegulation:
    base = np.linspace(80.0, 120.0, 11)  # mean 100 kW

    def test_gamma_zero_is_baseline(self):
        sig = NormalizedSignal(np.full(11, 0.7), 10.0)
        np.testing.assert_array_equal(build_regulation(self.base, sig, 0.0).samples, self.base)

    def test_hand_arithmetic(self):
        up = build_regulation(self.base, NormalizedSignal(np.ones(11), 10.0), 0.1)
        down = build_regulation(self.base, NormalizedSignal(-np.ones(11), 10.0), 0.1)
        np.testing.assert_allclose(up.samples, self.base + 10.0, atol=1e-12)
        np.testing.assert_allclose(down.samples, self.base - 10.0, atol=1e-12)

    def test_grid_mismatch(self):
        with pytest.raises(ValueError):
            build_regulation(self.base, NormalizedSignal(np.zeros(10), 10.0), 0.1)

    @settings(max_examples=40)
    @given(seed=st.integers(0, 10_000), alpha=st.floats(0, 1), gamma=st.floats(0, 1))
    def test_affine_in_signal(self, seed, alpha, gamma):
        rng = np.random.default_rng(seed)
        p1, p2 = rng.uniform(-1, 1, 11), rng.uniform(-1, 1, 11)
        mix = build_regulation(self.base, NormalizedSignal(alpha * p1 + (1 - alpha) * p2, 10.0), gamma).samples
        parts = alpha * build_regulation(self.base, NormalizedSignal(p1, 10.0), gamma).samples + (
            1 - alpha
        ) * build_regulation(self.base, NormalizedSignal(p2, 10.0), gamma).samples
        np.testing.assert_allclose(mix, parts, atol=1e-9)


class TestFilter:
    base = np.full(10, 50.0)
    env = PowerEnvelope.constant(-5.0, 5.0, 10, 10.0)

    def test_gamma_zero_accepted(self):
        reg = build_regulation(self.base, NormalizedSignal(np.ones(10), 10.0), 0.0)
        assert filter_by_envelope([reg], self.env, self.base) == [reg]

    def test_strict_rejection(self):
        samples = self.base.copy()
        samples[3] += 5.0 + 1e-6
        reg = build_regulation(samples, NormalizedSignal(np.zeros(10), 10.0), 0.0)
        assert filter_by_envelope([reg], self.env, self.base) == []

    def test_count_matches_manual_recount_and_is_idempotent(self):
        base = 50.0 + 10 * np.sin(np.arange(720) / 100.0)
        t = np.arange(720)
        env = PowerEnvelope(np.array([7200.0]), np.array([0.0]), np.array([0.0]),
                            12.0 - t / 120.0, -(14.0 - t / 100.0), 10.0, 0.1)
        regs = [build_regulation(base, synth_normalized(s, 7200, 10), 0.2) for s in range(200)]
        kept = filter_by_envelope(regs, env, base)
        recount = 0
        for r in regs:
            dev = r.samples - base
            recount += all(env.p_minus[k] <= dev[k] <= env.p_plus[k] for k in range(720))
        assert len(kept) == recount
        assert 0 < len(kept) < 200
        assert filter_by_envelope(kept, env, base) == kept
        assert all(any(k is r for r in regs) for k in kept)
