"""Offline data collection, the quadratic disturbance model and the
data-consistency form ``N`` describing every ``(A, B)`` that explains the data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .matlin import SymMatrix, as_finite, psd_margin, sym
from .plant import PlantModel


class InformativityError(ValueError):
    """The regressor matrix ``[X; U]`` does not have full row rank."""


class SlaterPointError(ValueError):
    """No strictly feasible model was found for the consistency form."""


@dataclass(frozen=True)
class DataSet:
    """Columns are data points: ``Xplus[:, j] = A X[:, j] + B U[:, j] + w_j``.

    ``Wtrue`` is only populated by the simulator and is for test use.
    """

    Xplus: np.ndarray
    X: np.ndarray
    U: np.ndarray
    Wtrue: np.ndarray | None = field(default=None, repr=False, compare=False)
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("Xplus", "X", "U"):
            object.__setattr__(self, name, np.atleast_2d(as_finite(getattr(self, name), name)))
        J = self.X.shape[1]
        if self.Xplus.shape != self.X.shape or self.U.shape[1] != J:
            raise ValueError("Xplus, X and U must share the number of columns")
        if self.Wtrue is not None and np.shape(self.Wtrue) != self.X.shape:
            raise ValueError("Wtrue must match X in shape")

    @property
    def J(self) -> int:
        return self.X.shape[1]

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def m(self) -> int:
        return self.U.shape[0]

    def without_truth(self) -> "DataSet":
        return DataSet(self.Xplus, self.X, self.U, None, dict(self.meta))

    def save(self, directory, include_truth: bool = False) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        fmt = "%.17g"
        np.savetxt(d / "xplus.csv", self.Xplus, delimiter=",", fmt=fmt)
        np.savetxt(d / "x.csv", self.X, delimiter=",", fmt=fmt)
        np.savetxt(d / "u.csv", self.U, delimiter=",", fmt=fmt)
        if include_truth and self.Wtrue is not None:
            np.savetxt(d / "w_true.csv", self.Wtrue, delimiter=",", fmt=fmt)
        sidecar = {"J": self.J, "n": self.n, "m": self.m, **self.meta}
        (d / "dataset.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "DataSet":
        d = Path(directory)
        meta = json.loads((d / "dataset.json").read_text())
        n, m, J = meta["n"], meta["m"], meta["J"]

        def read(name, rows):
            return np.loadtxt(d / name, delimiter=",", ndmin=2).reshape(rows, J)

        W = read("w_true.csv", n) if (d / "w_true.csv").exists() else None
        extra = {k: v for k, v in meta.items() if k not in ("n", "m", "J")}
        return cls(read("xplus.csv", n), read("x.csv", n), read("u.csv", m), W, extra)


def sample_ball(rng: np.random.Generator, count: int, dim: int, radius: float) -> np.ndarray:
    """``count`` points uniform in the Euclidean ball, returned as columns."""
    g = rng.standard_normal((dim, count))
    g /= np.linalg.norm(g, axis=0, keepdims=True)
    rad = radius * rng.uniform(size=count) ** (1.0 / dim)
    return g * rad


def excite(
    plant: PlantModel,
    J: int = 100,
    input_bound: float = 5.0,
    eps: float = 1e-2,
    seed: int = 0,
    state_bound: float = 5.0,
    episode_length: int = 1,
) -> DataSet:
    """Collect ``J`` transitions from the plant under random excitation.

    Data come from short episodes that restart at a state drawn uniformly from
    ``[-state_bound, state_bound]^n``; inside an episode inputs are i.i.d.
    uniform in ``[-input_bound, input_bound]^m`` and each disturbance is drawn
    uniformly from the ball ``||w|| <= eps``.
    """
    n, m = plant.n, plant.m
    if J < n + m:
        raise ValueError(f"need J >= n + m = {n + m} data points")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    if episode_length < 1:
        raise ValueError("episode_length must be >= 1")
    rng = np.random.default_rng(seed)
    X = np.zeros((n, J))
    U = rng.uniform(-input_bound, input_bound, size=(m, J))
    W = sample_ball(rng, J, n, eps) if eps > 0 else np.zeros((n, J))
    starts = rng.uniform(-state_bound, state_bound, size=(n, J))
    Xplus = np.zeros((n, J))
    for j in range(J):
        X[:, j] = starts[:, j] if j % episode_length == 0 else Xplus[:, j - 1]
        Xplus[:, j] = plant.A @ X[:, j] + plant.B @ U[:, j] + W[:, j]
    meta = {"eps": eps, "seed": seed, "input_bound": input_bound,
            "state_bound": state_bound, "episode_length": episode_length}
    return DataSet(Xplus, X, U, W, meta)


@dataclass(frozen=True)
class NoiseModel:
    """Quadratic bound ``[I; W^T]^T [[Phi11, Phi12], [Phi12^T, Phi22]] [I; W^T] >= 0``."""

    Phi11: SymMatrix
    Phi12: np.ndarray
    Phi22: SymMatrix

    def __post_init__(self):
        object.__setattr__(self, "Phi11", SymMatrix(self.Phi11))
        object.__setattr__(self, "Phi22", SymMatrix(self.Phi22))
        object.__setattr__(self, "Phi12", np.atleast_2d(as_finite(self.Phi12, "Phi12")))
        if self.Phi12.shape != (self.Phi11.dim, self.Phi22.dim):
            raise ValueError("Phi12 must be n x J")
        if psd_margin(-self.Phi22) <= 0:
            raise ValueError("Phi22 must be negative definite")

    def evaluate(self, W) -> np.ndarray:
        """The bound's left-hand side for a candidate disturbance matrix ``W``."""
        W = np.atleast_2d(np.asarray(W, dtype=float))
        return sym(self.Phi11 + self.Phi12 @ W.T + W @ self.Phi12.T + W @ self.Phi22 @ W.T)


def noise_model_pointwise(eps: float, J: int, n: int) -> NoiseModel:
    """Energy bound implied by ``||w_j|| <= eps`` for every data point."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    return NoiseModel(J * eps**2 * np.eye(n), np.zeros((n, J)), -np.eye(J))


@dataclass(frozen=True)
class ConsistencyForm:
    """Symmetric ``(2n+m)`` form ``N``; ``(A, B)`` is consistent with the data iff
    ``[I; A^T; B^T]^T N [I; A^T; B^T] >= 0``."""

    N: SymMatrix
    n: int
    m: int

    @property
    def Theta(self) -> np.ndarray:
        return np.asarray(self.N[: self.n, : self.n])

    @property
    def N12(self) -> np.ndarray:
        return np.asarray(self.N[: self.n, self.n :])

    @property
    def N22(self) -> np.ndarray:
        return np.asarray(self.N[self.n :, self.n :])

    def blocks(self) -> dict[str, np.ndarray]:
        n, m = self.n, self.m
        N = np.asarray(self.N)
        return {
            "Theta": N[:n, :n],
            "XA": N[n : 2 * n, :n],
            "UA": N[2 * n :, :n],
            "XX": N[n : 2 * n, n : 2 * n],
            "UX": N[2 * n :, n : 2 * n],
            "UU": N[2 * n :, 2 * n :],
        }

    @classmethod
    def from_blocks(cls, b: dict[str, np.ndarray]) -> "ConsistencyForm":
        n, m = b["Theta"].shape[0], b["UU"].shape[0]
        N = np.block(
            [
                [b["Theta"], b["XA"].T, b["UA"].T],
                [b["XA"], b["XX"], b["UX"].T],
                [b["UA"], b["UX"], b["UU"]],
            ]
        )
        return cls(SymMatrix(N), n, m)

    def quadratic(self, A, B) -> np.ndarray:
        Z = np.vstack([np.eye(self.n), np.asarray(A, dtype=float).T, np.asarray(B, dtype=float).T])
        return sym(Z.T @ self.N @ Z)


def consistency_form(data: DataSet, noise: NoiseModel) -> ConsistencyForm:
    n, m, J = data.n, data.m, data.J
    if noise.Phi11.dim != n or noise.Phi22.dim != J:
        raise ValueError("noise model dimensions do not match the data set")
    Xp, X, U = data.Xplus, data.X, data.U
    P11, P12, P22 = np.asarray(noise.Phi11), noise.Phi12, np.asarray(noise.Phi22)
    Theta = P11 + Xp @ P12.T + P12 @ Xp.T + Xp @ P22 @ Xp.T
    blocks = {
        "Theta": Theta,
        "XA": -X @ P12.T - X @ P22 @ Xp.T,
        "UA": -U @ P12.T - U @ P22 @ Xp.T,
        "XX": X @ P22 @ X.T,
        "UX": U @ P22 @ X.T,
        "UU": U @ P22 @ U.T,
    }
    return ConsistencyForm.from_blocks(blocks)


def membership(form: ConsistencyForm, A, B) -> float:
    """Eigenvalue margin of the consistency form at ``(A, B)``; ``>= -tau`` means
    the model explains the data."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape != (form.n, form.n) or B.shape != (form.n, form.m):
        raise ValueError("model dimensions do not match the form")
    return psd_margin(form.quadratic(A, B))


def least_squares_model(data: DataSet) -> tuple[np.ndarray, np.ndarray]:
    D = np.vstack([data.X, data.U])
    s = np.linalg.svd(D, compute_uv=False)
    if D.shape[1] < D.shape[0] or s[-1] <= 1e-10 * s[0]:
        raise InformativityError(
            "[X; U] is rank deficient; collect more (or more exciting) data"
        )
    G = D @ D.T
    AB = np.linalg.solve(G, D @ data.Xplus.T).T
    return AB[:, : data.n], AB[:, data.n :]


@dataclass(frozen=True)
class SlaterPoint:
    A: np.ndarray
    B: np.ndarray
    margin: float


def slater_point(data: DataSet, form: ConsistencyForm) -> SlaterPoint:
    """Least-squares model, returned when it makes the form strictly positive."""
    A, B = least_squares_model(data)
    margin = membership(form, A, B)
    tau = 1e-9 * (1.0 + float(np.max(np.abs(form.N))))
    if margin <= tau:
        raise SlaterPointError(
            f"least-squares model is not strictly consistent (margin {margin:.3e})"
        )
    return SlaterPoint(A, B, margin)


def s_lemma_hypotheses(form: ConsistencyForm, tol: float = 1e-9) -> dict:
    """Numerical check of ``N22 <= 0`` and ``ker(N22) subset ker(N12)``."""
    N22 = form.N22
    U_, s, Vt = np.linalg.svd(N22)
    scale = max(1.0, s[0] if s.size else 0.0)
    kernel = Vt[s <= tol * scale].T
    leak = float(np.max(np.abs(form.N12 @ kernel))) if kernel.size else 0.0
    return {
        "N22_margin": psd_margin(-N22),
        "N22_nsd": psd_margin(-N22) >= -tol * scale,
        "kernel_dim": int(kernel.shape[1]) if kernel.size else 0,
        "kernel_leak": leak,
        "kernel_ok": leak <= tol * (1.0 + float(np.max(np.abs(form.N12)))),
    }
