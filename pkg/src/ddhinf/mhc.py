"""Moving-horizon constrained H-infinity control.

Each step re-solves the synthesis program at the measured state with the
current energy forecast ``sigma_t`` and, from ``t = 1`` on, the dissipation
ledger constraint ``x' Q^-1 x - x' P_{t-1} x <= Delta_t``.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import sdp
from .matlin import psd_margin
from .synth import (
    CertificationError,
    Controller,
    InfeasibleError,
    SynthesisSpec,
    build_program,
    controller_from_point,
)

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-15
R_GRID_POINTS = 17


def delta_update(Delta_prev: float, x_prev, P_prev, P_prev2) -> float:
    """``Delta_t = Delta_{t-1} - (x' P_{t-1} x - x' P_{t-2} x)`` at ``x = x(t-1)``."""
    x = np.asarray(x_prev, dtype=float).reshape(-1)
    return float(Delta_prev - (x @ np.asarray(P_prev) @ x - x @ np.asarray(P_prev2) @ x))


def delta_closed_form(xs, Ps, t: int) -> float:
    """``-sum_{i=1}^{t-1} (x_i' P_i x_i - x_i' P_{i-1} x_i)``."""
    total = 0.0
    for i in range(1, t):
        x = np.asarray(xs[i], dtype=float)
        total += x @ Ps[i] @ x - x @ Ps[i - 1] @ x
    return float(-total)


def sigma_update(sigma_t: float, w_energy: float) -> tuple[float, bool]:
    """Remaining-energy forecast after a disturbance of energy ``w_energy``.

    Returns the new forecast and whether it was clamped at the floor.
    """
    if w_energy < 0:
        raise ValueError("disturbance energy must be non-negative")
    s = sigma_t - w_energy
    if s < SIGMA_FLOOR:
        return SIGMA_FLOOR, True
    return s, False


@dataclass
class StepDecision:
    K: np.ndarray
    eta: float
    gamma: float
    source: str  # "fresh-solve" | "fallback-previous"
    P: np.ndarray | None = None
    margins: dict = field(default_factory=dict)
    r: float = float("nan")
    r_search: bool = False
    prev_residual: float | None = None
    solve_time: float = 0.0


@dataclass
class LoopState:
    spec: SynthesisSpec
    t: int = 0
    sigma: float = 0.0
    r: float = 10.0
    Delta: float = 0.0
    P_prev: np.ndarray | None = None
    P_prev2: np.ndarray | None = None
    x_prev: np.ndarray | None = None
    prev: Controller | None = None
    guarantee_suspended: bool = False
    sigma_exhausted: bool = False
    settings: sdp.SolverSettings = field(default_factory=sdp.SolverSettings)
    history: list = field(default_factory=list)

    @property
    def gamma_bar(self) -> float:
        """Largest gamma over fresh solves so far."""
        g = [h["gamma"] for h in self.history if h["source"] == "fresh-solve"]
        return max(g) if g else float("nan")


def init(
    spec: SynthesisSpec,
    x0=None,
    sigma0: float | None = None,
    r0: float | None = None,
    settings: sdp.SolverSettings | None = None,
) -> LoopState:
    """Fresh loop state at ``t = 0``; the t = 0 program must be feasible."""
    sigma0 = spec.sigma0 if sigma0 is None else float(sigma0)
    if not sigma0 > 0:
        raise ValueError("sigma0 must be positive")
    x0 = spec.x0 if x0 is None else np.asarray(x0, dtype=float).reshape(-1)
    r0 = spec.r0 if r0 is None else float(r0)
    spec = replace(spec, x0=x0, sigma0=sigma0, r0=r0, constrained=True)
    state = LoopState(spec=spec, sigma=sigma0, r=r0, settings=settings or sdp.SolverSettings())
    # the loop may only start from a feasible t = 0 program
    prog, _ = build_program(spec)
    rep = sdp.solve(prog, state.settings)
    if not rep.optimal:
        raise InfeasibleError(f"program infeasible at t = 0 (status {rep.status})", rep)
    return state


def _solve_at(state: LoopState, x, r: float):
    Pp = state.P_prev if state.t >= 1 else None
    prog, _ = build_program(state.spec, x=x, sigma=state.sigma, r=r, P_prev=Pp,
                            Delta=state.Delta, check_slater=False)
    return prog, sdp.solve(prog, state.settings)


def mhc_step(state: LoopState, x_t, sigma: float | None = None) -> tuple[StepDecision, LoopState]:
    """Solve the step-``t`` program at measured state ``x_t``.

    ``sigma`` overrides the stored energy forecast for this step.  Returns the
    decision and the successor state (``t`` advanced, P/Delta chain updated).
    """
    x = np.asarray(x_t, dtype=float).reshape(-1)
    st = replace(state, history=list(state.history))
    if sigma is not None:
        st.sigma = float(sigma)
    if st.t == 1:
        st.Delta = 0.0
    elif st.t >= 2:
        st.Delta = delta_update(st.Delta, st.x_prev, st.P_prev, st.P_prev2)

    prog, rep = _solve_at(st, x, st.r)
    prev_residual = None
    if st.prev is not None:
        # recursive-feasibility audit: yesterday's tuple against today's program
        prev_residual = sdp.check_residuals(prog, st.prev.solution_point())

    r_used, searched = st.r, False
    if not rep.optimal and st.t == 0:
        raise InfeasibleError(f"program infeasible at t = 0 (status {rep.status})", rep)
    if not rep.optimal:
        log.info("t=%d: infeasible at r=%.4g, searching r", st.t, st.r)
        best = None
        for r in np.logspace(np.log10(st.r / 100), np.log10(st.r * 100), R_GRID_POINTS):
            _, rr = _solve_at(st, x, float(r))
            if rr.optimal and (best is None or rr.objective > best[1].objective):
                best = (float(r), rr)
        if best is not None:
            r_used, rep = best
            searched = True

    ctrl = None
    if rep.optimal:
        try:
            ctrl = controller_from_point(rep.values, rep.margins, st.spec.digest())
        except CertificationError as exc:
            log.warning("t=%d: rejecting solver point: %s", st.t, exc)
    if ctrl is not None:
        source = "fresh-solve"
        P_new = ctrl.P
        cond = np.linalg.cond(ctrl.Q)
        if cond > 1e12:
            warnings.warn(f"t={st.t}: Q is ill-conditioned (cond {cond:.2e})", RuntimeWarning)
            if psd_margin(P_new) <= 0:
                raise CertificationError("P_t lost positive definiteness")
    else:
        if st.prev is None:
            raise InfeasibleError(f"t={st.t}: infeasible and no previous gain to reuse", rep)
        ctrl = st.prev
        source = "fallback-previous"
        P_new = st.P_prev
        st.guarantee_suspended = True
        log.warning("t=%d: reusing previous gain", st.t)

    decision = StepDecision(
        K=ctrl.K, eta=ctrl.eta, gamma=ctrl.gamma, source=source, P=P_new,
        margins=dict(rep.margins) if source == "fresh-solve" else {},
        r=r_used, r_search=searched, prev_residual=prev_residual,
        solve_time=rep.solve_time,
    )
    st.history.append(
        {
            "t": st.t, "eta": ctrl.eta, "gamma": ctrl.gamma, "Delta": st.Delta,
            "sigma": st.sigma, "r": r_used, "feasible": source == "fresh-solve",
            "fallback": source != "fresh-solve", "r_search": searched,
            "solve_time": rep.solve_time, "margins": decision.margins,
            "prev_residual": prev_residual, "source": source,
        }
    )
    st.P_prev2, st.P_prev = st.P_prev, P_new
    st.x_prev = x
    st.prev = ctrl
    st.r = r_used
    st.t += 1
    return decision, st


def record_disturbance(state: LoopState, w_energy: float) -> LoopState:
    """Advance the energy forecast by the realized disturbance energy."""
    s, clamped = sigma_update(state.sigma, w_energy)
    return replace(state, sigma=s, sigma_exhausted=state.sigma_exhausted or clamped)


@dataclass
class MovingHorizonRun:
    log: object  # plant.TrajectoryLog
    state: LoopState
    decisions: list[StepDecision]
    P0: np.ndarray

    @property
    def gammas(self) -> np.ndarray:
        return np.array([d.gamma for d in self.decisions])

    @property
    def etas(self) -> np.ndarray:
        return np.array([d.eta for d in self.decisions])

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for h in self.state.history:
                fh.write(json.dumps(h, default=float) + "\n")


def run_moving_horizon(
    plant,
    spec: SynthesisSpec,
    w_seq,
    T: int,
    headroom: float = 1.0,
    settings: sdp.SolverSettings | None = None,
) -> MovingHorizonRun:
    """Closed-loop simulation with the moving-horizon controller.

    The forecast starts at ``headroom * sum ||w||^2`` and is decreased by
    ``headroom * ||w(t)||^2`` after each step, i.e. ``sigma_t`` is ``headroom``
    times the exact remaining energy.  ``headroom = 1`` is the tight regime.
    """
    from .plant import simulate

    w_seq = np.asarray(w_seq, dtype=float).reshape(-1, plant.n)
    energies = np.sum(w_seq[:T] ** 2, axis=1)
    sigma0 = headroom * float(np.sum(energies))
    state = init(spec, sigma0=max(sigma0, SIGMA_FLOOR), settings=settings)
    decisions: list[StepDecision] = []
    holder = {"state": state}

    def controller(t, x):
        dec, st = mhc_step(holder["state"], x)
        decisions.append(dec)
        holder["state"] = record_disturbance(st, headroom * energies[t])
        return dec.K @ x

    traj = simulate(plant, controller, spec.x0, w_seq, T, meta={"controller": "moving-horizon",
                                                                "sigma0": sigma0})
    return MovingHorizonRun(traj, holder["state"], decisions, decisions[0].P)
