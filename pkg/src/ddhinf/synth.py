"""Constrained data-driven H-infinity state-feedback synthesis.

The program maximizes ``eta = gamma^-2`` over ``(eta, Q, Y, alpha, beta)``
subject to the robustified bounded-real LMI (multiplier ``alpha`` on the data
form ``N``), ``[[Q, *], [C1 Q + D1 Y, I]] > 0``, the invariant-ellipsoid
energy LMI and one support-function LMI per constrained output row.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import sdp
from .datagen import ConsistencyForm, SlaterPointError, membership
from .matlin import (
    Ellipsoid,
    SingularityError,
    ellipsoid_support,
    psd_margin,
    psd_tol,
    schur_reduce,
    spd_inv,
    spd_solve,
    sym,
)
from .plant import PlantModel, hinf_norm, spectral_radius

# strict inequalities are enforced with these margins
DELTA_STRICT = 1e-8
SCALAR_FLOOR = 1e-12


class CertificationError(RuntimeError):
    """A synthesized controller failed a posterior check."""


class InfeasibleError(RuntimeError):
    """The synthesis program has no (verified) solution."""

    def __init__(self, msg, report: sdp.SolverReport | None = None):
        super().__init__(msg)
        self.report = report


@dataclass(frozen=True)
class SynthesisSpec:
    form: ConsistencyForm
    C1: np.ndarray
    D1: np.ndarray
    C2: np.ndarray
    D2: np.ndarray
    y2max: np.ndarray
    x0: np.ndarray
    sigma0: float = 1e-2
    r0: float = 10.0
    constrained: bool = True

    def __post_init__(self):
        for name in ("C1", "D1", "C2", "D2"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        object.__setattr__(self, "y2max", np.asarray(self.y2max, dtype=float).reshape(-1))
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).reshape(-1))
        n, m = self.form.n, self.form.m
        if self.C1.shape[1] != n or self.D1.shape != (self.C1.shape[0], m):
            raise ValueError("C1/D1 dimensions inconsistent with the data")
        if self.C2.shape[1] != n or self.D2.shape != (self.C2.shape[0], m):
            raise ValueError("C2/D2 dimensions inconsistent with the data")
        if self.y2max.shape != (self.C2.shape[0],) or np.any(self.y2max < 0):
            raise ValueError("y2max must be a non-negative vector, one entry per C2 row")
        if self.x0.shape != (n,):
            raise ValueError("x0 has wrong dimension")
        if not self.sigma0 > 0:
            raise ValueError("sigma0 must be positive")
        if not self.r0 > 0:
            raise ValueError("r0 must be positive")

    @classmethod
    def for_plant(cls, form: ConsistencyForm, plant: PlantModel, x0, **kw) -> "SynthesisSpec":
        """Copy output matrices and limits from a plant description (not A, B)."""
        return cls(form, plant.C1, plant.D1, plant.C2, plant.D2, plant.y2max, x0, **kw)

    @property
    def n(self) -> int:
        return self.form.n

    @property
    def m(self) -> int:
        return self.form.m

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.form.N, self.C1, self.D1, self.C2, self.D2, self.y2max, self.x0):
            h.update(np.ascontiguousarray(a, dtype=float).tobytes())
        h.update(repr((self.sigma0, self.r0, self.constrained)).encode())
        return h.hexdigest()[:16]


@dataclass
class HinfVars:
    eta: sdp.VarRef
    Q: sdp.VarRef
    Y: sdp.VarRef
    alpha: sdp.VarRef
    beta: sdp.VarRef


def form_center(form: ConsistencyForm) -> tuple[np.ndarray, np.ndarray]:
    """Maximizer of the consistency form over ``(A, B)`` (the least-squares model
    for the pointwise noise model)."""
    N22, N12 = form.N22, form.N12
    try:
        Z = np.linalg.solve(N22, -N12.T)
    except np.linalg.LinAlgError as exc:
        raise SlaterPointError("N22 is singular; data are not informative") from exc
    return Z[: form.n].T, Z[form.n :].T


def form_scale(form: ConsistencyForm) -> float:
    return float(np.max(np.abs(form.N))) or 1.0


def _hinf_core(prog: sdp.Program, spec: SynthesisSpec) -> HinfVars:
    n, m = spec.n, spec.m
    p1 = spec.C1.shape[0]
    eta = prog.add_scalar("eta")
    Q = prog.add_sym("Q", n)
    Y = prog.add_rect("Y", m, n)
    alpha = prog.add_scalar("alpha")
    beta = prog.add_scalar("beta")
    prog.set_objective(eta, maximize=True)

    I_n = np.eye(n)
    CQ = spec.C1 @ Q + spec.D1 @ Y
    lhs = sdp.block(
        [
            [Q - (eta + beta) * I_n, None, None, None, None],
            [None, None, None, Q, None],
            [None, None, None, Y, None],
            [None, Q, Y.T, Q, CQ.T],
            [None, None, None, CQ, np.eye(p1)],
        ]
    )
    d = 2 * n + m
    Nbig = np.zeros((d + n + p1, d + n + p1))
    # alpha absorbs the scale, so normalizing N leaves the feasible set unchanged
    Nbig[:d, :d] = spec.form.N / form_scale(spec.form)
    prog.add_lmi(lhs - alpha * Nbig, "robust_bounded_real")
    prog.add_lmi(
        sdp.block([[Q, CQ.T], [CQ, np.eye(p1)]]) - DELTA_STRICT * np.eye(n + p1),
        "performance_output",
    )
    prog.add_lmi(eta - SCALAR_FLOOR, "eta_positive")
    prog.add_lmi(beta - SCALAR_FLOOR, "beta_positive")
    prog.add_lmi(alpha.expr(), "alpha_nonnegative")
    return HinfVars(eta, Q, Y, alpha, beta)


def _add_state_constraints(prog, v: HinfVars, spec: SynthesisSpec, x, sigma, r) -> None:
    n = spec.n
    x = np.asarray(x, dtype=float).reshape(n, 1)
    # congruence with diag(1, I, sqrt(sigma)) of [[r, x', 1], [x, Q, 0], [1, 0, eta/sigma]]
    s = np.sqrt(sigma)
    prog.add_lmi(
        sdp.block(
            [
                [np.array([[r]]), x.T, np.array([[s]])],
                [x, v.Q, np.zeros((n, 1))],
                [np.array([[s]]), np.zeros((1, n)), v.eta.expr()],
            ]
        ),
        "energy_ellipsoid",
    )
    C2QD2Y = spec.C2 @ v.Q + spec.D2 @ v.Y
    for k in range(spec.C2.shape[0]):
        row = C2QD2Y.T @ np.eye(spec.C2.shape[0])[:, [k]]
        prog.add_lmi(
            sdp.block([[np.array([[spec.y2max[k] ** 2 / r]]), row.T], [row, v.Q]]),
            f"output_limit_{k + 1}",
        )


def build_program(
    spec: SynthesisSpec,
    x=None,
    sigma: float | None = None,
    r: float | None = None,
    P_prev=None,
    Delta: float | None = None,
    check_slater: bool = True,
) -> tuple[sdp.Program, HinfVars]:
    """Assemble the synthesis program at state ``x`` (defaults to ``spec.x0``).

    With ``P_prev``/``Delta`` the dissipation-ledger LMI
    ``[[x' P_prev x + Delta, x'], [x, Q]] >= 0`` is appended.
    """
    if check_slater:
        A, B = form_center(spec.form)
        tau = 1e-9 * (1.0 + float(np.max(np.abs(spec.form.N))))
        if membership(spec.form, A, B) <= tau:
            raise SlaterPointError("no strictly consistent model; cannot apply the S-lemma")
    x = spec.x0 if x is None else np.asarray(x, dtype=float).reshape(-1)
    sigma = spec.sigma0 if sigma is None else float(sigma)
    r = spec.r0 if r is None else float(r)
    if not sigma >= 0:
        raise ValueError("sigma must be non-negative")
    prog = sdp.build_program()
    v = _hinf_core(prog, spec)
    if spec.constrained:
        _add_state_constraints(prog, v, spec, x, sigma, r)
    if P_prev is not None:
        xc = x.reshape(-1, 1)
        c = float(x @ np.asarray(P_prev) @ x) + float(Delta or 0.0)
        prog.add_lmi(sdp.block([[np.array([[c]]), xc.T], [xc, v.Q]]), "dissipation_ledger")
    return prog, v


def build_static(spec: SynthesisSpec) -> sdp.Program:
    return build_program(spec)[0]


def build_baseline(spec: SynthesisSpec) -> sdp.Program:
    """Unconstrained data-driven H-infinity program (no ellipsoid / output LMIs)."""
    return build_static(replace(spec, constrained=False))


@dataclass
class Controller:
    K: np.ndarray
    P: np.ndarray
    gamma: float
    eta: float
    Q: np.ndarray
    Y: np.ndarray
    alpha: float
    beta: float
    margins: dict = field(default_factory=dict)
    spec_hash: str = ""

    def __call__(self, t, x):
        return self.K @ x

    def to_dict(self) -> dict:
        return {
            "K": self.K.tolist(), "Q": self.Q.tolist(), "Y": self.Y.tolist(),
            "P": self.P.tolist(), "eta": self.eta, "gamma": self.gamma,
            "alpha": self.alpha, "beta": self.beta, "margins": self.margins,
            "spec_hash": self.spec_hash,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def from_dict(cls, d) -> "Controller":
        arr = lambda k: np.atleast_2d(np.asarray(d[k], dtype=float))  # noqa: E731
        return cls(arr("K"), arr("P"), d["gamma"], d["eta"], arr("Q"), arr("Y"),
                   d["alpha"], d["beta"], dict(d.get("margins", {})), d.get("spec_hash", ""))

    @classmethod
    def from_json(cls, path) -> "Controller":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def solution_point(self) -> dict:
        return {"eta": self.eta, "Q": self.Q, "Y": self.Y, "alpha": self.alpha, "beta": self.beta}


def controller_from_point(point: dict, margins: dict | None = None, spec_hash: str = "") -> Controller:
    Q = sym(point["Q"])
    if psd_margin(Q) <= psd_tol(Q) * 1e-3:
        raise CertificationError("Q is not positive definite at the returned point")
    Y = np.atleast_2d(point["Y"])
    try:
        K = spd_solve(Q, Y.T).T
        P = spd_inv(Q)
    except SingularityError as exc:
        raise CertificationError(str(exc)) from exc
    eta = float(point["eta"])
    if not eta > 0:
        raise CertificationError("eta must be positive")
    return Controller(K, P, eta**-0.5, eta, Q, Y, float(point["alpha"]), float(point["beta"]),
                      dict(margins or {}), spec_hash)


def extract_controller(spec: SynthesisSpec, report: sdp.SolverReport) -> Controller:
    if not report.optimal:
        raise CertificationError(f"solver status is {report.status!r}")
    return controller_from_point(report.values, report.margins, spec.digest())


def synthesize(spec: SynthesisSpec, settings: sdp.SolverSettings | None = None) -> tuple[Controller, sdp.SolverReport]:
    prog = build_static(spec)
    report = sdp.solve(prog, settings)
    if not report.optimal:
        raise InfeasibleError(f"synthesis program status: {report.status}", report)
    return extract_controller(spec, report), report


def search_r0(
    spec: SynthesisSpec,
    grid=None,
    settings: sdp.SolverSettings | None = None,
) -> tuple[float, Controller | None]:
    """Log-grid search over the ellipsoid level, keeping the one with largest eta."""
    grid = np.logspace(-2, 4, 25) if grid is None else np.asarray(grid, dtype=float)
    best_r, best = float("nan"), None
    for r in grid:
        try:
            ctrl, _ = synthesize(replace(spec, r0=float(r)), settings)
        except (InfeasibleError, CertificationError):
            continue
        if best is None or ctrl.eta > best.eta:
            best_r, best = float(r), ctrl
    return best_r, best


# ---------------------------------------------------------------- certification

def bounded_real_margins(P, K, gamma: float, A, B, C1, D1) -> tuple[float, float]:
    """Margins of ``gamma^2 I - P > 0`` and the Riccati-type inequality for the
    closed loop ``A + B K`` with performance output ``C1 + D1 K``."""
    P = sym(P)
    n = P.shape[0]
    Ac = A + B @ K
    Cc = C1 + D1 @ K
    G = gamma**2 * np.eye(n) - P
    m_gap = psd_margin(G)
    if m_gap <= 0:
        return m_gap, -np.inf
    F = P - Ac.T @ P @ Ac - Cc.T @ Cc - Ac.T @ P @ np.linalg.solve(G, P @ Ac)
    return m_gap, psd_margin(F)


def hinf_quadratic_form(Q, Y, eta, C1, D1) -> np.ndarray:
    """Block matrix ``M`` whose quadratic form in ``[I; A'; B']`` must be > 0."""
    Q = sym(Q)
    Y = np.atleast_2d(Y)
    n, m = Q.shape[0], Y.shape[0]
    CQ = C1 @ Q + D1 @ Y
    R = sym(Q - CQ.T @ CQ)
    QY = np.hstack([Q, Y.T])
    M = np.zeros((2 * n + m, 2 * n + m))
    M[:n, :n] = Q - eta * np.eye(n)
    M[n:, n:] = -QY.T @ spd_solve(R, QY)
    return sym(M)


def sample_model_set(
    form: ConsistencyForm,
    count: int = 50,
    seed: int = 0,
    target_accept: float = 0.5,
    max_rounds: int = 60,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Draw members of the consistency set by Gaussian perturbation of its
    center with rejection; the perturbation scale adapts toward
    ``target_accept`` acceptance."""
    rng = np.random.default_rng(seed)
    A0, B0 = form_center(form)
    n, m = form.n, form.m
    tau = psd_tol(form.N)
    # initial scale from the curvature of the form
    scale = np.sqrt(max(psd_margin(form.quadratic(A0, B0)), 1e-16) / max(np.max(np.abs(form.N22)), 1e-16))
    out: list[tuple[np.ndarray, np.ndarray]] = []
    for _ in range(max_rounds):
        batch = 40
        acc = 0
        for _ in range(batch):
            dA = scale * rng.standard_normal((n, n))
            dB = scale * rng.standard_normal((n, m))
            A, B = A0 + dA, B0 + dB
            if membership(form, A, B) >= -tau:
                acc += 1
                out.append((A, B))
        rate = acc / batch
        scale *= np.clip((rate + 0.05) / (target_accept + 0.05), 0.5, 2.0)
        if len(out) >= count:
            break
    return out[:count]


@dataclass
class CertificateReport:
    checks: dict[str, float]
    tol: float
    hinf: float | None = None
    spectral_radius: float | None = None
    n_samples: int = 0

    @property
    def failed(self) -> list[str]:
        return [k for k, v in self.checks.items() if not v >= -self.tol]

    @property
    def ok(self) -> bool:
        return not self.failed

    def raise_for_failure(self) -> None:
        if not self.ok:
            raise CertificationError("violated: " + ", ".join(self.failed))


def certify(
    ctrl: Controller,
    plant: PlantModel,
    spec: SynthesisSpec,
    n_samples: int = 50,
    seed: int = 0,
    tol: float = 1e-7,
    r: float | None = None,
) -> CertificateReport:
    """Posterior check of a synthesized controller against the true plant.

    Test-harness only: it reads ``plant.A``/``plant.B``.
    """
    Q, Y, eta = sym(ctrl.Q), np.atleast_2d(ctrl.Y), ctrl.eta
    C1, D1 = spec.C1, spec.D1
    A, B = plant.A, plant.B
    checks: dict[str, float] = {}
    CQ = C1 @ Q + D1 @ Y
    R = sym(Q - CQ.T @ CQ)
    checks["R_positive"] = psd_margin(R)
    AQBY = A @ Q + B @ Y
    if checks["R_positive"] > 0:
        checks["riccati_true_plant"] = psd_margin(Q - eta * np.eye(spec.n) - AQBY @ spd_solve(R, AQBY.T))
    else:
        checks["riccati_true_plant"] = -np.inf
    P = spd_inv(Q)
    gap, ric = bounded_real_margins(P, ctrl.K, ctrl.gamma, A, B, C1, D1)
    checks["bounded_real_gap"] = gap
    checks["bounded_real_P"] = ric
    if checks["R_positive"] > 0:
        M = hinf_quadratic_form(Q, Y, eta, C1, D1)
        Z = lambda A_, B_: np.vstack([np.eye(spec.n), A_.T, B_.T])  # noqa: E731
        checks["model_form_true_plant"] = psd_margin(Z(A, B).T @ M @ Z(A, B))
        samples = sample_model_set(spec.form, n_samples, seed)
        worst = np.inf
        for As, Bs in samples:
            worst = min(worst, psd_margin(Z(As, Bs).T @ M @ Z(As, Bs)))
        checks["model_form_samples"] = worst
    else:
        samples = []
    if spec.constrained:
        r = spec.r0 if r is None else r
        E = Ellipsoid(P, r)
        C2QD2Y = spec.C2 @ Q + spec.D2 @ Y
        for k in range(spec.C2.shape[0]):
            row = C2QD2Y[k].reshape(-1, 1)
            lmi = sym(np.block([[Q, row], [row.T, np.array([[spec.y2max[k] ** 2 / r]])]]))
            reduced = float(schur_reduce(lmi, spec.n)[0, 0])
            zeta = (spec.C2[k] + spec.D2[k] @ ctrl.K).reshape(-1)
            support = ellipsoid_support(E, zeta)
            checks[f"output_limit_{k + 1}"] = spec.y2max[k] - support
            # the Schur-reduced scalar and the support bound must agree in sign
            agree = (reduced >= -tol) == (support <= spec.y2max[k] + tol)
            checks[f"output_limit_{k + 1}_equivalence"] = 0.0 if agree else -np.inf
    rho = spectral_radius(A + B @ ctrl.K)
    hn = hinf_norm(A + B @ ctrl.K, C1 + D1 @ ctrl.K) if rho < 1 else np.inf
    return CertificateReport(checks, tol, hn, rho, len(samples))
