from pathlib import Path

import pytest
from hypothesis import given, strategies as st

import psyn
from psyn.errors import InputError
from psyn.speedup import (SpeedupInputs, SpeedupObservation, fit_model, fit_report_csv,
                          invert_ratio, predict_speedup, read_observations, speedup)

TABLES = Path(psyn.__file__).parent / "tables"


def table(name):
    return read_observations((TABLES / f"{name}.csv").read_text())


class TestPredict:
    def test_ideal(self):
        assert predict_speedup(SpeedupInputs(10.0, 0.0, 4)) == 4.0

    def test_four_workers(self):
        assert predict_speedup(SpeedupInputs(1.0, 0.1231, 4)) == pytest.approx(2.68, abs=0.01)

    def test_eight_workers(self):
        assert speedup(8, 0.1231) == pytest.approx(4.03, abs=0.01)

    def test_invalid(self):
        with pytest.raises(InputError):
            SpeedupInputs(0.0, 1.0, 4)
        with pytest.raises(InputError):
            SpeedupInputs(1.0, -0.1, 4)
        with pytest.raises(InputError):
            SpeedupInputs(1.0, 0.1, 4, utilization=0.5)

    @given(st.integers(1, 64), st.floats(0, 10), st.floats(1, 8))
    def test_bounded_by_n_over_u(self, n, r, u):
        assert speedup(n, r, u) <= n / u * (1 + 1e-15)

    @given(st.integers(1, 63), st.floats(0, 10), st.floats(1e-6, 1))
    def test_monotone(self, n, r, dr):
        assert speedup(n + 1, r) >= speedup(n, r)
        assert speedup(n, r + dr) < speedup(n, r)


class TestInvert:
    def test_worker_grid_bmuf(self):
        assert invert_ratio(2.68, 4) == pytest.approx(0.1231, abs=5e-5)

    def test_worker_grid_easgd_eight(self):
        assert invert_ratio(5.00, 8) == pytest.approx(0.075, abs=1e-15)

    def test_boundary(self):
        assert invert_ratio(4.0, 4) == 0.0
        assert invert_ratio(speedup(31, 0.0, 3.9375), 31, 3.9375) == 0.0

    def test_superlinear_rejected(self):
        with pytest.raises(InputError, match="infeasible"):
            invert_ratio(4.5, 4)
        with pytest.raises(InputError):
            invert_ratio(0.0, 4)

    @given(st.integers(1, 64), st.floats(0, 10), st.floats(1, 8))
    def test_inverse(self, n, r, u):
        assert invert_ratio(speedup(n, r, u), n, u) == pytest.approx(r, rel=1e-9, abs=1e-12)


class TestFit:
    def test_recovers_shared(self):
        u, r = 1.7, 0.08
        obs = [SpeedupObservation(n, 5, 256, speedup(n, r, u)) for n in (2, 4, 8, 16)]
        fit = fit_model(obs)
        assert fit.utilization == pytest.approx(u, abs=1e-6)
        assert fit.ratios[()] == pytest.approx(r, abs=1e-6)
        assert fit.sse < 1e-10

    def test_recovers_per_period(self):
        u = 1.25
        truth = {(5, 1024): 0.15, (20, 1024): 0.05, (80, 1024): 0.02}
        obs = [SpeedupObservation(n, tau, mb, speedup(n, r, u))
               for (tau, mb), r in truth.items() for n in (2, 4, 8)]
        fit = fit_model(obs, "per-period-ratio")
        assert fit.utilization == pytest.approx(u, abs=1e-6)
        for key, r in truth.items():
            assert fit.ratios[key] == pytest.approx(r, abs=1e-6)
        assert max(abs(x) for x in fit.residuals) < 1e-8

    def test_underdetermined(self):
        obs = [SpeedupObservation(4, 5, 256, 2.0)]
        with pytest.raises(InputError):
            fit_model(obs)  # free utilization needs two worker counts
        with pytest.raises(InputError):
            fit_model(obs + [SpeedupObservation(4, 20, 256, 2.5)], "per-period-ratio")

    def test_sync_period_ratio_falls_with_period(self):
        for name in ("sync-period-bmuf", "sync-period-asgd"):
            fit = fit_model(table(name), "per-period-ratio", utilization=1.0)
            ratios = [fit.ratios[k] for k in sorted(fit.ratios)]
            assert ratios == sorted(ratios, reverse=True)
            assert fit.sse < 1e-12

    def test_minibatch_ratio_falls_with_minibatch_at_small_period(self):
        fit = fit_model(table("minibatch-grid"), "per-period-ratio", utilization=1.0)
        small = [fit.ratios[(5, mb)] for mb in (256, 1024, 4096)]
        assert small == sorted(small, reverse=True)

    def test_worker_grid_two_worker_counts(self):
        fit = fit_model(table("workers-bmuf"))
        assert fit.utilization >= 1.0
        assert fit.sse < 1e-12

    def test_report(self):
        obs = table("sync-period-bmuf")
        text = fit_report_csv(obs, fit_model(obs, "per-period-ratio", utilization=1.0))
        lines = text.splitlines()
        assert lines[0].startswith("n_workers,sync_period,minibatch,speedup,predicted")
        assert len(lines) == 1 + len(obs)

    def test_observation_flags(self):
        assert SpeedupObservation(4, 5, 256, 4.2).superlinear
        with pytest.raises(InputError):
            SpeedupObservation(0, 5, 256, 1.0)

    def test_bad_csv(self):
        with pytest.raises(InputError):
            read_observations("n,s\n1,2\n")
