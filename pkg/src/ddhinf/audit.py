"""Posterior checks on a closed-loop trajectory.

Every audit reads only the trajectory log plus the certificate it is asked to
verify (``P0``, ``gamma_bar``, ``P``/``r``); nothing here calls back into
synthesis.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .plant import TrajectoryLog

TAU_REL = 1e-6
TAU_ABS = 1e-9


@dataclass
class DissipationResult:
    slack: np.ndarray
    threshold: float

    @property
    def worst(self) -> float:
        return float(np.min(self.slack)) if self.slack.size else 0.0

    @property
    def ok(self) -> bool:
        return self.worst >= -self.threshold


def dissipation_report(log: TrajectoryLog, gamma_bar: float, P0, tau_rel: float = TAU_REL) -> DissipationResult:
    """Running slack ``gamma_bar^2 sum|w|^2 + x0'P0x0 - sum|y1|^2``."""
    x0 = log.x[0]
    v0 = float(x0 @ np.asarray(P0) @ x0)
    w_energy = np.cumsum(np.sum(log.w**2, axis=1))
    y_energy = np.cumsum(np.sum(log.y1**2, axis=1))
    slack = gamma_bar**2 * w_energy + v0 - y_energy
    return DissipationResult(slack, tau_rel * (1.0 + v0))


@dataclass
class InvarianceResult:
    max_level: float
    r: float
    precondition_ok: bool
    reason: str = ""

    @property
    def ok(self) -> bool:
        return self.precondition_ok and self.max_level <= self.r * (1.0 + TAU_REL)


def invariance_report(
    log: TrajectoryLog,
    P,
    r: float,
    sigma0: float | None = None,
    gamma: float | None = None,
) -> InvarianceResult:
    """Largest ``x(t)' P x(t)`` along a fixed-gain run, compared with ``r``.

    When ``sigma0``/``gamma`` are given, the energy budget and
    ``r >= x0'Px0 + gamma^2 sigma0`` are verified first; a failure there is
    reported as a precondition failure, not an invariance violation.
    """
    P = np.asarray(P, dtype=float)
    xs = log.x
    levels = np.einsum("ti,ij,tj->t", xs, P, xs)
    reason = ""
    if sigma0 is not None:
        energy = float(np.sum(log.w**2))
        if energy > sigma0 * (1.0 + TAU_REL):
            reason = f"disturbance energy {energy:.4g} exceeds budget {sigma0:.4g}"
        elif gamma is not None and r < levels[0] + gamma**2 * sigma0 - TAU_REL * r:
            reason = "r is below x0'Px0 + gamma^2 sigma0"
    elif r < levels[0] * (1.0 - TAU_REL):
        reason = "r is below x0'Px0"
    return InvarianceResult(float(np.max(levels)), float(r), not reason, reason)


@dataclass
class ConstraintResult:
    excess: np.ndarray

    @property
    def ok(self) -> bool:
        return bool(np.all(self.excess <= TAU_ABS))


def constraint_report(log: TrajectoryLog, y2max) -> ConstraintResult:
    """Per-row ``max_t y2v(t) - y2v_max``."""
    y2max = np.asarray(y2max, dtype=float).reshape(-1)
    return ConstraintResult(np.max(log.y2, axis=0) - y2max)


def convergence_report(log: TrajectoryLog, tol: float = 1e-3, tail: int = 10) -> tuple[bool, float]:
    xs = log.x
    if len(xs) < tail:
        raise ValueError("log shorter than the tail window")
    final = float(np.max(np.linalg.norm(xs[-tail:], axis=1)))
    return final < tol, final


@dataclass
class AuditReport:
    dissipation_ok: bool | None = None
    dissipation_worst_slack: float | None = None
    invariance_ok: bool | None = None
    invariance_max_ratio: float | None = None
    invariance_note: str = ""
    constraints_ok: bool | None = None
    constraint_excess: list[float] = field(default_factory=list)
    converged: bool | None = None
    final_norm: float | None = None
    gamma_bar: float | None = None

    @property
    def ok(self) -> bool:
        flags = [self.dissipation_ok, self.invariance_ok, self.constraints_ok, self.converged]
        return all(f for f in flags if f is not None)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ok"] = self.ok
        return d

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, path) -> "AuditReport":
        with open(path) as fh:
            d = json.load(fh)
        d.pop("ok", None)
        return cls(**d)

    def rows(self) -> list[tuple[str, str, str]]:
        fmt = lambda b: "-" if b is None else ("PASS" if b else "FAIL")  # noqa: E731
        return [
            ("dissipation", fmt(self.dissipation_ok), f"worst slack {self.dissipation_worst_slack}"),
            ("invariance", fmt(self.invariance_ok), f"max V/r {self.invariance_max_ratio} {self.invariance_note}".strip()),
            ("constraints", fmt(self.constraints_ok), f"excess {self.constraint_excess}"),
            ("convergence", fmt(self.converged), f"final |x| {self.final_norm}"),
        ]


def run_audits(
    log: TrajectoryLog,
    y2max=None,
    gamma_bar: float | None = None,
    P0=None,
    P=None,
    r: float | None = None,
    sigma0: float | None = None,
    gamma: float | None = None,
    conv_tol: float = 1e-3,
    tail: int = 10,
) -> AuditReport:
    """Run whichever audits the supplied certificates allow."""
    rep = AuditReport(gamma_bar=gamma_bar)
    if gamma_bar is not None and P0 is not None:
        d = dissipation_report(log, gamma_bar, P0)
        rep.dissipation_ok, rep.dissipation_worst_slack = d.ok, d.worst
    if P is not None and r is not None:
        inv = invariance_report(log, P, r, sigma0, gamma)
        rep.invariance_ok = inv.ok
        rep.invariance_max_ratio = inv.max_level / inv.r
        rep.invariance_note = inv.reason
    if y2max is not None:
        c = constraint_report(log, y2max)
        rep.constraints_ok, rep.constraint_excess = c.ok, c.excess.tolist()
    if len(log) >= tail:
        rep.converged, rep.final_norm = convergence_report(log, conv_tol, tail)
    return rep
