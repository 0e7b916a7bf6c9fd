"""Ground-truth discrete-time LTI plant, closed-loop simulation and analysis
oracles.  Synthesis code never imports the true plant; it is used for data
generation and for posterior certification only."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.optimize

from .matlin import as_finite


@dataclass(frozen=True)
class PlantModel:
    """``x+ = A x + B u + w``, ``y1 = C1 x + D1 u``, ``y2 = C2 x + D2 u``."""

    A: np.ndarray
    B: np.ndarray
    C1: np.ndarray
    D1: np.ndarray
    C2: np.ndarray
    D2: np.ndarray
    y2max: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "C1", "D1", "C2", "D2"):
            M = np.atleast_2d(as_finite(getattr(self, name), name))
            M.flags.writeable = False
            object.__setattr__(self, name, M)
        y2max = as_finite(self.y2max, "y2max").reshape(-1)
        y2max.flags.writeable = False
        object.__setattr__(self, "y2max", y2max)
        n, m = self.n, self.m
        if self.A.shape != (n, n):
            raise ValueError("A must be square")
        if self.B.shape[0] != n:
            raise ValueError("B must have n rows")
        if self.C1.shape[1] != n or self.D1.shape != (self.C1.shape[0], m):
            raise ValueError("C1/D1 dimensions inconsistent")
        if self.C2.shape[1] != n or self.D2.shape != (self.C2.shape[0], m):
            raise ValueError("C2/D2 dimensions inconsistent")
        if self.y2max.shape != (self.C2.shape[0],):
            raise ValueError("y2max must have one entry per row of C2")
        if np.any(self.y2max < 0):
            raise ValueError("y2max entries must be non-negative")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p1(self) -> int:
        return self.C1.shape[0]

    @property
    def p2(self) -> int:
        return self.C2.shape[0]


def example44() -> PlantModel:
    """The three-state, single-input benchmark plant with two output limits
    (``x2 <= 1`` and ``u <= 0.5``)."""
    return PlantModel(
        A=[[0.8147, 0.9134, 0.2785], [0.9058, 0.6324, 0.5469], [0.1270, 0.0975, 0.9575]],
        B=[[-0.6787], [-0.7577], [-0.7431]],
        C1=[[1.0, 0.0, 0.0]],
        D1=[[0.0]],
        C2=[[0.0, 1.0, 0.0], [0.0, 0.0, 0.0]],
        D2=[[0.0], [1.0]],
        y2max=[1.0, 0.5],
    )


def _vec(v, size: int, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.shape != (size,):
        raise ValueError(f"{name} must have length {size}, got {v.shape}")
    return v


def step(plant: PlantModel, x, u, w):
    """One plant step; returns ``(x_next, y1, y2)``."""
    x = _vec(x, plant.n, "x")
    u = _vec(u, plant.m, "u")
    w = _vec(w, plant.n, "w")
    x_next = plant.A @ x + plant.B @ u + w
    y1 = plant.C1 @ x + plant.D1 @ u
    y2 = plant.C2 @ x + plant.D2 @ u
    return x_next, y1, y2


@dataclass
class TrajectoryLog:
    """Closed-loop record; row ``t`` holds x(t), u(t), w(t), y1(t), y2(t)."""

    x: np.ndarray
    u: np.ndarray
    w: np.ndarray
    y1: np.ndarray
    y2: np.ndarray
    x_final: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def t(self) -> np.ndarray:
        return np.arange(len(self))

    def states(self) -> np.ndarray:
        """x(0..T), including the terminal state when known."""
        if self.x_final is None:
            return self.x
        return np.vstack([self.x, self.x_final])

    def replay_error(self, plant: PlantModel) -> float:
        """Max relative residual of the state recursion over consecutive rows."""
        xs = self.states()
        pred = xs[:-1] @ plant.A.T + self.u[: len(xs) - 1] @ plant.B.T + self.w[: len(xs) - 1]
        err = np.abs(xs[1:] - pred)
        scale = 1.0 + np.abs(xs[1:])
        return float(np.max(err / scale)) if err.size else 0.0

    def header(self) -> list[str]:
        n, m = self.x.shape[1], self.u.shape[1]
        p1, p2 = self.y1.shape[1], self.y2.shape[1]
        return (
            ["t"]
            + [f"x{i + 1}" for i in range(n)]
            + [f"u{i + 1}" for i in range(m)]
            + [f"w{i + 1}" for i in range(n)]
            + [f"y1_{i + 1}" for i in range(p1)]
            + [f"y2_{i + 1}" for i in range(p2)]
        )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(self.header())
            for t in range(len(self)):
                row = np.concatenate([self.x[t], self.u[t], self.w[t], self.y1[t], self.y2[t]])
                wr.writerow([t] + [f"{v:.17g}" for v in row])

    @classmethod
    def from_csv(cls, path) -> "TrajectoryLog":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], dtype=float).reshape(-1, len(rows[0]))

        def cols(prefix):
            idx = [i for i, h in enumerate(header) if h.startswith(prefix) and h[len(prefix):].isdigit()]
            return body[:, idx]

        return cls(x=cols("x"), u=cols("u"), w=cols("w"), y1=cols("y1_"), y2=cols("y2_"))


class SimulationError(RuntimeError):
    def __init__(self, t: int, cause: Exception):
        super().__init__(f"controller failed at step {t}: {cause}")
        self.t = t


def simulate(
    plant: PlantModel,
    controller: Callable[[int, np.ndarray], np.ndarray],
    x0,
    w_seq,
    T: int,
    meta: dict | None = None,
) -> TrajectoryLog:
    """Run ``T`` closed-loop steps; ``controller(t, x)`` returns u(t)."""
    if T < 1:
        raise ValueError("horizon T must be >= 1")
    w_seq = np.asarray(w_seq, dtype=float).reshape(-1, plant.n)
    if w_seq.shape[0] < T:
        raise ValueError(f"need {T} disturbance samples, got {w_seq.shape[0]}")
    n, m = plant.n, plant.m
    xs = np.zeros((T, n))
    us = np.zeros((T, m))
    y1s = np.zeros((T, plant.p1))
    y2s = np.zeros((T, plant.p2))
    x = _vec(x0, n, "x0").copy()
    for t in range(T):
        try:
            u = _vec(controller(t, x.copy()), m, "u")
        except Exception as exc:
            raise SimulationError(t, exc) from exc
        xs[t], us[t] = x, u
        x, y1s[t], y2s[t] = step(plant, x, u, w_seq[t])
    return TrajectoryLog(xs, us, w_seq[:T].copy(), y1s, y2s, x_final=x, meta=dict(meta or {}))


def linear_feedback(K) -> Callable[[int, np.ndarray], np.ndarray]:
    K = np.atleast_2d(np.asarray(K, dtype=float))
    return lambda t, x: K @ x


def spectral_radius(A) -> float:
    A = np.atleast_2d(as_finite(A, "A"))
    if A.shape[0] != A.shape[1]:
        raise ValueError("spectral radius needs a square matrix")
    return float(np.max(np.abs(scipy.linalg.eigvals(A))))


def _sigma_max(Ac, Cc, omega: float) -> float:
    n = Ac.shape[0]
    G = Cc @ np.linalg.solve(np.exp(1j * omega) * np.eye(n) - Ac, np.eye(n))
    return float(np.linalg.svd(G, compute_uv=False)[0])


def hinf_norm(Ac, Cc, tol: float = 1e-10, grid: int = 4096) -> float:
    """H-infinity norm of ``Cc (zI - Ac)^{-1}`` by frequency sweep.

    A uniform grid over ``[0, pi]`` is followed by bounded scalar refinement
    around the best few grid points.
    """
    Ac = np.atleast_2d(as_finite(Ac, "Ac"))
    Cc = np.atleast_2d(as_finite(Cc, "Cc"))
    if spectral_radius(Ac) >= 1.0:
        raise ValueError("closed loop is not Schur stable; H-infinity norm is unbounded")
    grid = max(int(grid), 2048)
    w = np.linspace(0.0, np.pi, grid)
    vals = np.array([_sigma_max(Ac, Cc, wi) for wi in w])
    best = float(vals.max())
    h = w[1] - w[0]
    for k in np.argsort(vals)[-5:]:
        lo, hi = max(0.0, w[k] - h), min(np.pi, w[k] + h)
        res = scipy.optimize.minimize_scalar(
            lambda om: -_sigma_max(Ac, Cc, om),
            bounds=(lo, hi),
            method="bounded",
            options={"xatol": tol},
        )
        best = max(best, -float(res.fun))
    return best


@dataclass
class HautusReport:
    stabilizable: bool
    detectable: bool
    unstabilizable_modes: list[complex]
    undetectable_modes: list[complex]


def _rank(M, tol: float = 1e-9) -> int:
    s = np.linalg.svd(M, compute_uv=False)
    return int(np.sum(s > tol * max(1.0, s[0] if s.size else 0.0)))


def hautus_check(plant: PlantModel) -> HautusReport:
    """PBH rank tests at every eigenvalue on or outside the unit circle."""
    n = plant.n
    bad_b, bad_c = [], []
    for lam in scipy.linalg.eigvals(plant.A):
        if abs(lam) < 1.0:
            continue
        if _rank(np.hstack([lam * np.eye(n) - plant.A, plant.B])) < n:
            bad_b.append(complex(lam))
        if _rank(np.vstack([lam * np.eye(n) - plant.A, plant.C1])) < n:
            bad_c.append(complex(lam))
    return HautusReport(not bad_b, not bad_c, bad_b, bad_c)


def decaying_disturbance(n: int, T: int, energy: float, rho: float = 0.85, seed: int = 0) -> np.ndarray:
    """``w(t) = c rho^t d_t`` with random unit directions ``d_t`` and ``c`` set so
    that the total energy over ``T`` steps equals ``energy``."""
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((T, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    amp = rho ** np.arange(T)
    c = np.sqrt(energy / np.sum(amp**2)) if energy > 0 else 0.0
    return c * amp[:, None] * d
