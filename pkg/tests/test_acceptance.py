"""Acceptance suite: one PASS/FAIL line per criterion, printed in the terminal
summary (and when run as a script)."""

import time
from dataclasses import replace

import numpy as np
import pytest

from ddhinf import experiment as ex
from ddhinf.audit import convergence_report, dissipation_report, invariance_report
from ddhinf.datagen import consistency_form, excite, membership, noise_model_pointwise, slater_point
from ddhinf.matlin import Ellipsoid, ellipsoid_support, schur_reduce
from ddhinf.mhc import delta_closed_form, delta_update, run_moving_horizon
from ddhinf.plant import decaying_disturbance, example44, hinf_norm, linear_feedback, simulate
from ddhinf.synth import certify, synthesize

from conftest import ACCEPTANCE, X0, make_spec, peak_disturbance

SEEDS = range(10)
T = 200


def record(k, ok, detail):
    ACCEPTANCE[k] = (bool(ok), detail)
    assert ok, detail


@pytest.fixture(scope="module")
def plant():
    return example44()


@pytest.fixture(scope="module")
def comparison():
    t0 = time.perf_counter()
    rep = ex.reproduce_example()
    return rep, time.perf_counter() - t0


@pytest.fixture(scope="module")
def static_runs(plant):
    """Static optimum per seed plus its run under a budget-respecting disturbance."""
    runs = []
    for s in SEEDS:
        _, spec = make_spec(s)
        ctrl, _ = synthesize(spec)
        w = decaying_disturbance(3, T, spec.sigma0, seed=100 + s)
        runs.append((spec, ctrl, simulate(plant, linear_feedback(ctrl.K), X0, w, T)))
    return runs


@pytest.fixture(scope="module")
def mh_runs(plant):
    runs = []
    for s in SEEDS:
        _, spec = make_spec(s)
        w = decaying_disturbance(3, T, spec.sigma0, seed=100 + s)
        runs.append(run_moving_horizon(plant, spec, w, T))
    return runs


def test_criterion_01_benchmark_comparison(comparison):
    rep, wall = comparison
    c = rep.claims
    need = [
        "baseline_violates_u_limit",
        "static_satisfies_constraints",
        "moving_horizon_satisfies_constraints",
        "moving_horizon_feasible_every_step",
        "moving_horizon_gamma_nonincreasing",
        "moving_horizon_final_gamma_below_static",
    ]
    ok = all(c.get(k) for k in need) and wall < 60
    mh = rep.runs["moving_horizon"]
    detail = (
        f"baseline max u {rep.runs['baseline'].log.y2[:, 1].max():.3f}; "
        f"gamma static {rep.runs['static'].gammas[0]:.4f} -> moving-horizon final {mh.gammas[-1]:.4f}; "
        f"fallbacks {mh.extra['fallbacks']}; {wall:.1f}s"
    )
    record(1, ok, detail)


def test_criterion_02_static_certificate(plant, static_runs):
    worst_margin, worst_gap, bad = np.inf, np.inf, []
    for spec, ctrl, _ in static_runs:
        cert = certify(ctrl, plant, spec, n_samples=50, tol=1e-7)
        gap = ctrl.gamma - cert.hinf
        margins = [v for k, v in cert.checks.items() if not k.endswith("_equivalence")]
        worst_margin = min(worst_margin, min(margins))
        worst_gap = min(worst_gap, gap)
        if not cert.ok or gap < 1e-4:
            bad.append(cert.failed)
    record(2, not bad, f"{len(static_runs)} seeds; worst check margin {worst_margin:.2e}; min gamma - hinf {worst_gap:.3f}")


def test_criterion_03_invariance(static_runs):
    worst = 0.0
    ok = True
    for spec, ctrl, log in static_runs:
        assert np.sum(log.w**2) <= spec.sigma0 * (1 + 1e-12)
        inv = invariance_report(log, ctrl.P, spec.r0)
        worst = max(worst, inv.max_level / spec.r0)
        ok &= inv.max_level <= spec.r0 * (1 + 1e-6)
    record(3, ok, f"{len(static_runs)} seeds; max x'Px / r0 = {worst:.6f}")


def test_criterion_04_recursive_feasibility(mh_runs):
    res = min(min(h["prev_residual"] for h in r.state.history[1:]) for r in mh_runs)
    deta = min(float(np.min(np.diff(r.etas))) for r in mh_runs)
    fresh = all(h["source"] == "fresh-solve" and not h["r_search"] for r in mh_runs for h in r.state.history)
    record(4, res >= -1e-7 and deta >= -1e-9 and fresh,
           f"{len(mh_runs)} seeds; worst previous-tuple residual {res:.2e}; min eta increment {deta:.2e}")


def test_criterion_05_dissipation(plant, mh_runs):
    worst_rel, ok = np.inf, True
    adversarial_on_runs = np.inf
    for r in mh_runs:
        g0 = r.decisions[0].gamma
        d = dissipation_report(r.log, g0, r.P0)
        ok &= d.ok
        worst_rel = min(worst_rel, d.worst / (1 + X0 @ r.P0 @ X0))
        adversarial_on_runs = min(adversarial_on_runs, dissipation_report(r.log, g0 / 10, r.P0).worst)
    # the offset x0'P0x0 dominates those runs, so falsifiability is shown on a
    # zero-initial-state moving-horizon run driven at the peak-gain frequency
    _, spec = make_spec(0)
    spec = replace(spec, x0=np.zeros(3))
    c0, _ = synthesize(spec)
    w = peak_disturbance(plant.A + plant.B @ c0.K, plant.C1, T, spec.sigma0)
    adv = run_moving_horizon(plant, spec, w, T)
    g0 = adv.decisions[0].gamma
    honest = dissipation_report(adv.log, g0, adv.P0)
    fooled = dissipation_report(adv.log, g0 / 10, adv.P0)
    ok &= honest.ok and not fooled.ok
    record(5, ok, f"min slack/(1+V0) {worst_rel:.3f} on {len(mh_runs)} runs; gamma/10 slack there {adversarial_on_runs:.3f} "
                  f"(not falsifying); zero-state peak-frequency run: gamma ok={honest.ok}, gamma/10 ok={fooled.ok}")


def test_criterion_06_delta(mh_runs):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        Ps = []
        for _ in range(11):
            G = rng.standard_normal((3, 3))
            Ps.append(G @ G.T + 0.1 * np.eye(3))
        xs = rng.standard_normal((11, 3))
        D = 0.0
        for t in range(2, 11):
            D = delta_update(D, xs[t - 1], Ps[t - 1], Ps[t - 2])
            ref = delta_closed_form(xs, Ps, t)
            worst = max(worst, abs(D - ref) / max(1.0, abs(ref)))
    dmin = min(h["Delta"] for r in mh_runs for h in r.state.history)
    record(6, worst <= 1e-12 and dmin >= -1e-9, f"max relative recursion error {worst:.1e}; min Delta {dmin:.2e}")


def test_criterion_07_consistency(plant):
    worst, slater_min = np.inf, np.inf
    for s in range(50):
        d = excite(plant, J=100, eps=1e-2, seed=s)
        form = consistency_form(d.without_truth(), noise_model_pointwise(1e-2, 100, 3))
        worst = min(worst, membership(form, plant.A, plant.B))
        slater_min = min(slater_min, slater_point(d, form).margin)
    record(7, worst >= -1e-9 and slater_min > 0, f"50 seeds; min true-plant margin {worst:.3e}; min Slater margin {slater_min:.3e}")


def test_criterion_08_kernels():
    rng = np.random.default_rng(1)
    worst_mc, schur_ok = 0.0, True
    for _ in range(100):
        G = rng.standard_normal((3, 3))
        Q = G @ G.T + 0.1 * np.eye(3)
        z = rng.standard_normal(3)
        r = rng.uniform(0.5, 20)
        y = rng.uniform(0.1, 5)
        exact = ellipsoid_support(Ellipsoid(np.linalg.inv(Q), r), z)
        L = np.linalg.cholesky(Q * r)
        g = rng.standard_normal((3, 20000))
        mc = np.max(z @ (L @ (g / np.linalg.norm(g, axis=0))))
        worst_mc = max(worst_mc, abs(mc - exact) / exact)
        row = (Q @ z).reshape(-1, 1)
        lmi = np.block([[Q, row], [row.T, np.array([[y**2 / r]])]])
        schur_ok &= (float(schur_reduce(lmi, 3)[0, 0]) >= 0) == (exact <= y)
    h1 = hinf_norm([[0.0]], [[1.0]])
    h2 = hinf_norm([[0.5]], [[1.0]])
    ok = worst_mc <= 1e-3 and schur_ok and abs(h1 - 1) <= 1e-6 and abs(h2 - 2) <= 1e-6
    record(8, ok, f"support MC rel err {worst_mc:.1e}; Schur sign agreement {schur_ok}; hinf {h1:.9f}, {h2:.9f}")


def test_criterion_09_solve_time(mh_runs):
    mean = float(np.mean([h["solve_time"] for r in mh_runs for h in r.state.history]))
    record(9, mean <= 0.25, f"mean per-step solve {1e3 * mean:.1f} ms over {len(mh_runs)} x {T} steps")


def test_criterion_10_convergence(comparison, static_runs, mh_runs):
    rep, _ = comparison
    logs = [rep.runs["static"].log, rep.runs["moving_horizon"].log]
    logs += [log for *_, log in static_runs] + [r.log for r in mh_runs]
    finals = [convergence_report(log, 1e-3, 10)[1] for log in logs]
    record(10, max(finals) < 1e-3, f"{len(logs)} constrained runs; max tail |x| {max(finals):.1e}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
