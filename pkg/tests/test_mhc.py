import json

import numpy as np
import pytest

from ddhinf import mhc
from ddhinf.mhc import delta_closed_form, delta_update, init, mhc_step, record_disturbance, run_moving_horizon, sigma_update
from ddhinf.plant import decaying_disturbance
from ddhinf.synth import InfeasibleError, build_program

from conftest import make_spec


def random_spd(rng, n):
    G = rng.standard_normal((n, n))
    return G @ G.T + 0.1 * np.eye(n)


@pytest.fixture(scope="module")
def mh_run(plant):
    _, spec = make_spec(0)
    w = decaying_disturbance(3, 200, 1e-2, seed=1)
    return run_moving_horizon(plant, spec, w, 200)


class TestDelta:
    def test_constant_P(self, rng):
        P = random_spd(rng, 3)
        D = 0.0
        for _ in range(10):
            D = delta_update(D, rng.standard_normal(3), P, P)
        assert D == 0.0

    def test_recursion_matches_sum(self, rng):
        for _ in range(100):
            Ps = [random_spd(rng, 3) for _ in range(11)]
            xs = [rng.standard_normal(3) for _ in range(11)]
            D = 0.0  # Delta_1
            for t in range(2, 11):
                D = delta_update(D, xs[t - 1], Ps[t - 1], Ps[t - 2])
                ref = delta_closed_form(xs, Ps, t)
                assert D == pytest.approx(ref, rel=1e-12, abs=1e-12 * (1 + abs(ref)))

    def test_delta_one_is_zero(self):
        assert delta_closed_form([np.ones(2)], [np.eye(2)], 1) == 0.0


class TestSigma:
    def test_arithmetic(self):
        assert sigma_update(1e-2, 1e-6) == (pytest.approx(9.999e-3), False)
        assert sigma_update(1e-2, 0.0) == (1e-2, False)

    def test_clamp(self):
        s, flag = sigma_update(1e-6, 1e-2)
        assert s == mhc.SIGMA_FLOOR and flag

    def test_negative_energy(self):
        with pytest.raises(ValueError):
            sigma_update(1.0, -1.0)

    def test_record_sets_flag(self):
        _, spec = make_spec(0)
        st = init(spec)
        st = record_disturbance(st, 1.0)
        assert st.sigma_exhausted and st.sigma == mhc.SIGMA_FLOOR


class TestInit:
    def test_matches_static(self, bench):
        st = init(bench["spec"])
        dec, st1 = mhc_step(st, bench["spec"].x0)
        assert dec.eta == pytest.approx(bench["ctrl"].eta, rel=1e-6)
        assert st.t == 0 and st1.t == 1

    def test_sigma_zero_rejected(self, bench):
        with pytest.raises(ValueError):
            init(bench["spec"], sigma0=0.0)

    def test_infeasible_at_start(self, bench):
        with pytest.raises(InfeasibleError):
            init(bench["spec"], r0=1.0)

    def test_deterministic(self, bench):
        a, b = init(bench["spec"]), init(bench["spec"])
        assert a.sigma == b.sigma and a.r == b.r and a.t == b.t


class TestStep:
    def test_no_ledger_at_start(self, bench):
        prog, _ = build_program(bench["spec"])
        assert "dissipation_ledger" not in [l.name for l in prog.lmis]

    def test_state_is_not_mutated(self, bench):
        st = init(bench["spec"])
        mhc_step(st, bench["spec"].x0)
        assert st.t == 0 and not st.history

    def test_r_search(self, bench):
        st = init(bench["spec"])
        _, st = mhc_step(st, bench["spec"].x0)
        dec, _ = mhc_step(st, 0.1 * bench["spec"].x0, sigma=0.1)
        assert dec.source == "fresh-solve" and dec.r_search
        assert dec.r != 10.0

    def test_fallback_previous(self, bench):
        st = init(bench["spec"])
        d0, st = mhc_step(st, bench["spec"].x0)
        dec, st2 = mhc_step(st, 10 * bench["spec"].x0)
        assert dec.source == "fallback-previous"
        assert np.array_equal(dec.K, d0.K)
        assert st2.guarantee_suspended
        assert st2.history[-1]["fallback"] and not st2.history[-1]["feasible"]


class TestRun:
    def test_feasible_every_step(self, mh_run):
        h = mh_run.state.history
        assert len(h) == 200
        assert all(x["source"] == "fresh-solve" for x in h)
        assert not mh_run.state.guarantee_suspended

    def test_eta_non_decreasing(self, mh_run):
        assert np.all(np.diff(mh_run.etas) >= -1e-9)
        assert mh_run.gammas[-1] < mh_run.gammas[0]

    def test_previous_solution_stays_feasible(self, mh_run):
        res = [h["prev_residual"] for h in mh_run.state.history[1:]]
        assert min(res) >= -1e-7

    def test_delta_nonnegative(self, mh_run):
        assert min(h["Delta"] for h in mh_run.state.history) >= -1e-9

    def test_ledger_posterior(self, mh_run):
        xs = mh_run.log.x
        for t in range(1, 200):
            d, prev = mh_run.decisions[t], mh_run.decisions[t - 1]
            lhs = xs[t] @ d.P @ xs[t] - xs[t] @ prev.P @ xs[t]
            assert lhs <= mh_run.state.history[t]["Delta"] + 1e-6 * (1 + xs[t] @ prev.P @ xs[t])

    def test_sigma_tracks_remaining_energy(self, mh_run):
        e = np.sum(mh_run.log.w**2, axis=1)
        remaining = np.sum(e) - np.concatenate([[0.0], np.cumsum(e)[:-1]])
        sig = np.array([h["sigma"] for h in mh_run.state.history])
        assert np.allclose(sig, np.maximum(remaining, mhc.SIGMA_FLOOR), rtol=1e-9, atol=1e-15)

    def test_solve_budget(self, mh_run):
        assert np.mean([h["solve_time"] for h in mh_run.state.history]) < 0.25

    def test_jsonl(self, mh_run, tmp_path):
        mh_run.write_jsonl(tmp_path / "d.jsonl")
        lines = (tmp_path / "d.jsonl").read_text().splitlines()
        assert len(lines) == 200
        rec = json.loads(lines[3])
        for key in ("t", "eta", "gamma", "Delta", "sigma", "r", "feasible", "fallback", "solve_time", "margins"):
            assert key in rec
        assert rec["t"] == 3
