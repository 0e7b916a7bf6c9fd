"""Dense symmetric-matrix helpers: definiteness margins, Schur complements,
block assembly and ellipsoid geometry."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg


class SingularityError(ValueError):
    """A block that must be positive definite is not."""


def as_finite(M, name="matrix") -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} has non-finite entries")
    return M


def sym(M) -> np.ndarray:
    """Return (M + M^T)/2 as a float64 array."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    return 0.5 * (M + M.T)


class SymMatrix(np.ndarray):
    """Symmetric float64 matrix; symmetrized once on construction.

    Instances are read-only views so they can be shared freely.
    """

    def __new__(cls, M):
        arr = sym(as_finite(M)).view(cls)
        arr.flags.writeable = False
        return arr

    @property
    def dim(self) -> int:
        return self.shape[0]


def psd_tol(M) -> float:
    """Default PSD tolerance, relative to the largest entry of ``M``."""
    M = np.asarray(M, dtype=float)
    return 1e-7 * (1.0 + (np.max(np.abs(M)) if M.size else 0.0))


def psd_margin(M) -> float:
    """Smallest eigenvalue of the symmetric part of ``M``.

    ``M`` counts as PSD within tolerance ``tau`` iff the result is ``>= -tau``.
    """
    M = sym(as_finite(M))
    if M.size == 0:
        return np.inf
    return float(scipy.linalg.eigvalsh(M)[0])


def is_psd(M, tol: float | None = None) -> bool:
    tol = psd_tol(M) if tol is None else tol
    return psd_margin(M) >= -tol


def _spd_factor(A: np.ndarray, what: str):
    tol = psd_tol(A)
    if psd_margin(A) <= tol:
        raise SingularityError(f"{what} is not positive definite")
    try:
        return scipy.linalg.cho_factor(A, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularityError(f"{what} is not positive definite") from exc


def spd_solve(A, B) -> np.ndarray:
    """Solve ``A X = B`` for symmetric positive definite ``A`` via Cholesky."""
    A = sym(as_finite(A))
    c = _spd_factor(A, "matrix")
    return scipy.linalg.cho_solve(c, np.asarray(B, dtype=float))


def spd_inv(A) -> np.ndarray:
    """Inverse of an SPD matrix, computed by Cholesky and symmetrized."""
    A = sym(as_finite(A))
    return sym(spd_solve(A, np.eye(A.shape[0])))


def schur_reduce(M, k: int) -> np.ndarray:
    """Schur complement ``C - B^T A^{-1} B`` of the leading ``k x k`` block.

    Raises
    ------
    SingularityError
        If the leading block is not positive definite.
    """
    M = sym(as_finite(M))
    if not 0 < k < M.shape[0]:
        raise ValueError(f"block size {k} out of range for dim {M.shape[0]}")
    A, B, C = M[:k, :k], M[:k, k:], M[k:, k:]
    c = _spd_factor(A, "leading block")
    return sym(C - B.T @ scipy.linalg.cho_solve(c, B))


def bmat(blocks) -> np.ndarray:
    """Assemble a dense block matrix; ``None`` entries become zero blocks."""
    rows = len(blocks)
    cols = len(blocks[0])
    heights = [None] * rows
    widths = [None] * cols
    for i, row in enumerate(blocks):
        if len(row) != cols:
            raise ValueError("ragged block layout")
        for j, b in enumerate(row):
            if b is None:
                continue
            b = np.atleast_2d(np.asarray(b, dtype=float))
            if heights[i] is not None and heights[i] != b.shape[0]:
                raise ValueError(f"block ({i},{j}) height mismatch")
            if widths[j] is not None and widths[j] != b.shape[1]:
                raise ValueError(f"block ({i},{j}) width mismatch")
            heights[i], widths[j] = b.shape
    if None in heights or None in widths:
        raise ValueError("every block row and column needs one sized block")
    return np.block(
        [
            [
                np.zeros((heights[i], widths[j]))
                if b is None
                else np.atleast_2d(np.asarray(b, dtype=float))
                for j, b in enumerate(row)
            ]
            for i, row in enumerate(blocks)
        ]
    )


@dataclass(frozen=True)
class Ellipsoid:
    """The sublevel set ``{x : x^T P x <= r}``."""

    P: SymMatrix
    r: float

    def __post_init__(self):
        object.__setattr__(self, "P", SymMatrix(self.P))
        if not self.r > 0:
            raise ValueError("ellipsoid level r must be positive")
        if psd_margin(self.P) <= 0:
            raise SingularityError("ellipsoid shape matrix is not positive definite")

    @property
    def dim(self) -> int:
        return self.P.dim

    def contains(self, x, rtol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return float(x @ self.P @ x) <= self.r * (1.0 + rtol)


def ellipsoid_support(E: Ellipsoid, zeta) -> float:
    """Support function ``sqrt(r * zeta^T P^{-1} zeta)`` of ``E``."""
    zeta = as_finite(zeta, "zeta").reshape(-1)
    if zeta.shape[0] != E.dim:
        raise ValueError("direction has wrong dimension")
    v = spd_solve(E.P, zeta)
    return float(np.sqrt(max(E.r * float(zeta @ v), 0.0)))
