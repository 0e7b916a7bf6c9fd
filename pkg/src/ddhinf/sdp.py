"""Small semidefinite-program modeling layer.

Programs hold scalar, symmetric and rectangular matrix variables, affine LMI
constraints ``F(x) >= 0`` and a linear objective.  :func:`solve` hands the
program to cvxopt's conic solver; :func:`check_residuals` re-evaluates every
constraint from raw program data and never looks at solver internals.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .matlin import SymMatrix, psd_margin, sym


class UsageError(RuntimeError):
    """Program misuse (duplicate objective, missing assignment, ...)."""


@dataclass(frozen=True, eq=False)
class VarRef:
    """Handle for a block of decision variables inside a :class:`Program`."""

    id: int
    name: str
    kind: str  # "scalar" | "symmetric" | "matrix"
    shape: tuple[int, int]
    offset: int

    @property
    def size(self) -> int:
        r, c = self.shape
        return r * (r + 1) // 2 if self.kind == "symmetric" else r * c

    def basis(self) -> np.ndarray:
        """Coefficient tensor of shape ``(size, rows, cols)``."""
        r, c = self.shape
        out = np.zeros((self.size, r, c))
        if self.kind == "symmetric":
            k = 0
            for i in range(r):
                for j in range(i, r):
                    out[k, i, j] = 1.0
                    out[k, j, i] = 1.0
                    k += 1
        else:
            for k in range(r * c):
                out[k, k // c, k % c] = 1.0
        return out

    def expr(self) -> "Affine":
        return Affine(np.zeros(self.shape), {self: self.basis()})

    def unpack(self, flat) -> float | np.ndarray:
        v = np.asarray(flat, dtype=float)[self.offset : self.offset + self.size]
        if self.kind == "scalar":
            return float(v[0])
        return np.tensordot(v, self.basis(), axes=1)

    def pack(self, value) -> np.ndarray:
        value = np.asarray(value, dtype=float)
        r, c = self.shape
        if value.size != r * c:
            raise UsageError(f"value for {self.name!r} has wrong size")
        value = value.reshape(r, c)
        if self.kind == "symmetric":
            value = sym(value)
            return value[np.triu_indices(r)]
        return value.reshape(-1)

    def __repr__(self) -> str:
        return f"VarRef({self.name!r}, {self.kind}, {self.shape})"

    # arithmetic forwards to the affine expression
    def __add__(self, o):
        return self.expr() + o

    def __radd__(self, o):
        return o + self.expr()

    def __sub__(self, o):
        return self.expr() - o

    def __rsub__(self, o):
        return o - self.expr()

    def __neg__(self):
        return -self.expr()

    def __mul__(self, o):
        return self.expr() * o

    def __rmul__(self, o):
        return self.expr() * o

    def __matmul__(self, o):
        return self.expr() @ o

    def __rmatmul__(self, o):
        return o @ self.expr()

    @property
    def T(self) -> "Affine":
        return self.expr().T

    __array_ufunc__ = None


class Affine:
    """Matrix-valued affine function ``const + sum_k x_k * coef_k``."""

    __array_ufunc__ = None

    def __init__(self, const, terms: Mapping[VarRef, np.ndarray] | None = None):
        self.const = np.atleast_2d(np.asarray(const, dtype=float))
        self.terms = dict(terms or {})
        for v, c in self.terms.items():
            if c.shape[1:] != self.const.shape:
                raise ValueError(f"term {v.name!r} has shape {c.shape[1:]}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.const.shape

    @staticmethod
    def lift(x) -> "Affine":
        if isinstance(x, Affine):
            return x
        if isinstance(x, VarRef):
            return x.expr()
        return Affine(x)

    def _combine(self, other, sign: float) -> "Affine":
        other = Affine.lift(other)
        if other.shape != self.shape:
            if other.shape == (1, 1) and not other.terms:
                other = Affine(np.full(self.shape, other.const[0, 0]))
            else:
                raise ValueError(f"shape mismatch {self.shape} vs {other.shape}")
        terms = dict(self.terms)
        for v, c in other.terms.items():
            terms[v] = terms[v] + sign * c if v in terms else sign * c
        return Affine(self.const + sign * other.const, terms)

    def __add__(self, o):
        return self._combine(o, 1.0)

    def __radd__(self, o):
        return Affine.lift(o)._combine(self, 1.0)

    def __sub__(self, o):
        return self._combine(o, -1.0)

    def __rsub__(self, o):
        return Affine.lift(o)._combine(self, -1.0)

    def __neg__(self):
        return Affine(-self.const, {v: -c for v, c in self.terms.items()})

    def __mul__(self, o):
        """Scale by a float, or (for a 1x1 expression) expand against a matrix."""
        if np.ndim(o) == 0:
            o = float(o)
            return Affine(o * self.const, {v: o * c for v, c in self.terms.items()})
        if self.shape != (1, 1):
            raise ValueError("only 1x1 expressions may multiply a matrix")
        M = np.atleast_2d(np.asarray(o, dtype=float))
        return Affine(
            self.const[0, 0] * M,
            {v: c[:, 0, 0][:, None, None] * M[None] for v, c in self.terms.items()},
        )

    __rmul__ = __mul__

    def __matmul__(self, o):
        M = np.atleast_2d(np.asarray(o, dtype=float))
        return Affine(self.const @ M, {v: c @ M for v, c in self.terms.items()})

    def __rmatmul__(self, o):
        M = np.atleast_2d(np.asarray(o, dtype=float))
        return Affine(
            M @ self.const,
            {v: np.einsum("ab,kbc->kac", M, c) for v, c in self.terms.items()},
        )

    @property
    def T(self) -> "Affine":
        return Affine(self.const.T, {v: c.transpose(0, 2, 1) for v, c in self.terms.items()})

    def value(self, point: Mapping[str, object]) -> np.ndarray:
        out = self.const.copy()
        for v, c in self.terms.items():
            if v.name not in point:
                raise UsageError(f"no value assigned to variable {v.name!r}")
            x = v.pack(point[v.name])
            out += np.tensordot(x, c, axes=1)
        return out


def block(rows) -> Affine:
    """Block-assemble ``Affine``/array/``None`` entries (``None`` = zero block)."""
    nr, nc = len(rows), len(rows[0])
    hs: list[int | None] = [None] * nr
    ws: list[int | None] = [None] * nc
    for i, row in enumerate(rows):
        if len(row) != nc:
            raise ValueError("ragged block layout")
        for j, b in enumerate(row):
            if b is None:
                continue
            h, w = Affine.lift(b).shape
            if (hs[i] not in (None, h)) or (ws[j] not in (None, w)):
                raise ValueError(f"block ({i},{j}) does not fit its row/column")
            hs[i], ws[j] = h, w
    if None in hs or None in ws:
        raise ValueError("every block row and column needs one sized block")
    R, C = sum(hs), sum(ws)
    r0 = np.concatenate([[0], np.cumsum(hs)])
    c0 = np.concatenate([[0], np.cumsum(ws)])
    const = np.zeros((R, C))
    terms: dict[VarRef, np.ndarray] = {}
    for i, row in enumerate(rows):
        for j, b in enumerate(row):
            if b is None:
                continue
            b = Affine.lift(b)
            const[r0[i] : r0[i + 1], c0[j] : c0[j + 1]] = b.const
            for v, c in b.terms.items():
                if v not in terms:
                    terms[v] = np.zeros((v.size, R, C))
                terms[v][:, r0[i] : r0[i + 1], c0[j] : c0[j + 1]] += c
    return Affine(const, terms)


@dataclass(eq=False)
class AffineLmi:
    """Constraint ``constant + sum(term) >= 0`` (PSD) on a square expression."""

    constant: SymMatrix
    terms: list[tuple[VarRef, np.ndarray]]
    name: str = ""

    @classmethod
    def from_expr(cls, expr, name: str = "") -> "AffineLmi":
        expr = Affine.lift(expr)
        r, c = expr.shape
        if r != c:
            raise ValueError(f"LMI {name!r} must be square, got {expr.shape}")
        terms = [(v, 0.5 * (t + t.transpose(0, 2, 1))) for v, t in expr.terms.items()]
        return cls(SymMatrix(expr.const), terms, name)

    @property
    def dim(self) -> int:
        return self.constant.dim

    def value(self, point: Mapping[str, object]) -> np.ndarray:
        out = np.array(self.constant)
        for v, c in self.terms:
            if v.name not in point:
                raise UsageError(f"no value assigned to variable {v.name!r}")
            out += np.tensordot(v.pack(point[v.name]), c, axes=1)
        return sym(out)

    def tolerance(self, tol_feas: float) -> float:
        return tol_feas * (1.0 + float(np.max(np.abs(self.constant))))


@dataclass
class SolverSettings:
    tol_feas: float = 1e-8
    tol_gap: float = 1e-8
    max_iter: int = 200


@dataclass
class SolverReport:
    status: str  # "optimal" | "infeasible" | "unbounded" | "numerical-failure"
    objective: float
    values: dict[str, float | np.ndarray]
    solve_time: float
    worst_residual: float
    margins: dict[str, float] = field(default_factory=dict)
    iterations: int = 0
    info: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


class Program:
    """A linear objective over affine LMI constraints."""

    def __init__(self):
        self.variables: list[VarRef] = []
        self.lmis: list[AffineLmi] = []
        self.objective: Affine | None = None
        self.maximize = True

    @property
    def n_vars(self) -> int:
        return sum(v.size for v in self.variables)

    def _add(self, name: str, kind: str, shape) -> VarRef:
        if any(v.name == name for v in self.variables):
            raise UsageError(f"duplicate variable name {name!r}")
        v = VarRef(len(self.variables), name, kind, tuple(shape), self.n_vars)
        self.variables.append(v)
        return v

    def add_scalar(self, name: str) -> VarRef:
        return self._add(name, "scalar", (1, 1))

    def add_sym(self, name: str, dim: int) -> VarRef:
        return self._add(name, "symmetric", (dim, dim))

    def add_rect(self, name: str, rows: int, cols: int) -> VarRef:
        return self._add(name, "matrix", (rows, cols))

    def set_objective(self, expr, maximize: bool = True) -> None:
        if self.objective is not None:
            raise UsageError("objective already set")
        expr = Affine.lift(expr)
        if expr.shape != (1, 1):
            raise ValueError("objective must be scalar")
        self.objective = expr
        self.maximize = maximize

    def add_lmi(self, lmi, name: str = "") -> AffineLmi:
        if not isinstance(lmi, AffineLmi):
            lmi = AffineLmi.from_expr(lmi, name or f"lmi{len(self.lmis)}")
        if any(other.name == lmi.name for other in self.lmis):
            raise UsageError(f"duplicate constraint name {lmi.name!r}")
        for v, c in lmi.terms:
            if v not in self.variables:
                raise UsageError(f"variable {v.name!r} does not belong to this program")
            if c.shape != (v.size, lmi.dim, lmi.dim):
                raise ValueError(f"term {v.name!r} has wrong coefficient shape")
        self.lmis.append(lmi)
        return lmi

    def objective_value(self, point) -> float:
        if self.objective is None:
            raise UsageError("program has no objective")
        return float(self.objective.value(point)[0, 0])

    def margins(self, point) -> dict[str, float]:
        return {lmi.name: psd_margin(lmi.value(point)) for lmi in self.lmis}

    def to_dict(self) -> dict:
        obj = np.zeros(self.n_vars)
        if self.objective is not None:
            for v, c in self.objective.terms.items():
                obj[v.offset : v.offset + v.size] = c[:, 0, 0]
        return {
            "variables": [
                {"id": v.id, "name": v.name, "kind": v.kind, "shape": list(v.shape),
                 "offset": v.offset, "size": v.size}
                for v in self.variables
            ],
            "objective": {
                "sense": "maximize" if self.maximize else "minimize",
                "coefficients": obj.tolist(),
                "constant": 0.0 if self.objective is None else float(self.objective.const[0, 0]),
            },
            "constraints": [
                {
                    "name": lmi.name,
                    "dim": lmi.dim,
                    "constant": np.asarray(lmi.constant).tolist(),
                    "terms": {v.name: c.tolist() for v, c in lmi.terms},
                }
                for lmi in self.lmis
            ],
        }

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)


def build_program() -> Program:
    return Program()


def check_residuals(program: Program, point) -> float:
    """Most negative eigenvalue over all constraints at ``point`` (0 if all PSD)."""
    worst = 0.0
    for lmi in program.lmis:
        worst = min(worst, psd_margin(lmi.value(point)))
    return worst


def _point_from_flat(program: Program, x) -> dict:
    return {v.name: v.unpack(x) for v in program.variables}


def _cvxopt_data(program: Program):
    from cvxopt import matrix

    nv = program.n_vars
    lin_G, lin_h, Gs, hs = [], [], [], []
    for lmi in program.lmis:
        d = lmi.dim
        F = np.zeros((d * d, nv))
        for v, c in lmi.terms:
            # column-major vec; symmetric so order is immaterial
            F[:, v.offset : v.offset + v.size] += c.reshape(v.size, d * d).T
        if d == 1:
            lin_G.append(-F[0])
            lin_h.append(float(lmi.constant[0, 0]))
        else:
            Gs.append(matrix(-F))
            hs.append(matrix(np.array(lmi.constant)))
    c = np.zeros(nv)
    for v, t in program.objective.terms.items():
        c[v.offset : v.offset + v.size] += t[:, 0, 0]
    if program.maximize:
        c = -c
    Gl = matrix(np.array(lin_G).reshape(len(lin_G), nv)) if lin_G else None
    hl = matrix(np.array(lin_h).reshape(-1, 1)) if lin_h else None
    return matrix(c), Gl, hl, Gs, hs


def solve(program: Program, settings: SolverSettings | None = None) -> SolverReport:
    """Solve ``program`` with cvxopt and verify the result independently.

    ``optimal`` is only reported when every constraint at the returned point has
    eigenvalue margin ``>= -tol_feas * (1 + max|constant|)``; otherwise the
    status is downgraded to ``numerical-failure`` with the partial point kept.
    """
    from cvxopt import solvers

    settings = settings or SolverSettings()
    if program.objective is None:
        raise UsageError("program has no objective")
    nv = program.n_vars
    t0 = time.perf_counter()

    if not program.lmis:
        has_cost = any(np.any(t != 0) for t in program.objective.terms.values())
        zero = _point_from_flat(program, np.zeros(nv))
        return SolverReport(
            "unbounded" if has_cost else "optimal",
            (np.inf if program.maximize else -np.inf) if has_cost else program.objective_value(zero),
            zero if not has_cost else {},
            time.perf_counter() - t0,
            0.0,
        )

    c, Gl, hl, Gs, hs = _cvxopt_data(program)
    if Gl is None:
        from cvxopt import matrix

        Gl, hl = matrix(0.0, (0, nv)), matrix(0.0, (0, 1))
    base = {
        "show_progress": False,
        "abstol": settings.tol_gap,
        "reltol": settings.tol_gap,
        "feastol": settings.tol_feas,
        "maxiters": settings.max_iter,
    }
    # cvxopt occasionally breaks down on degenerate KKT systems; retry with
    # iterative refinement, then with a 10x looser interior tolerance.  The
    # returned point is still verified at the caller's tolerance below.
    ladder = [
        {},
        {"refinement": 2},
        {"refinement": 1, "feastol": 10 * settings.tol_feas,
         "abstol": 10 * settings.tol_gap, "reltol": 10 * settings.tol_gap},
    ]
    sol, errors = None, []
    for extra in ladder:
        try:
            sol = solvers.sdp(c, Gl=Gl, hl=hl, Gs=Gs or None, hs=hs or None, options={**base, **extra})
        except (ValueError, ArithmeticError) as exc:
            errors.append(str(exc))
            continue
        if sol["status"] in ("optimal", "primal infeasible", "dual infeasible"):
            break
    elapsed = time.perf_counter() - t0
    if sol is None:
        return SolverReport("numerical-failure", np.nan, {}, elapsed, -np.inf,
                            info={"error": "; ".join(errors)})

    info = {
        "solver": "cvxopt",
        "solver_status": sol["status"],
        "gap": sol.get("gap"),
        "relative_gap": sol.get("relative gap"),
        "primal_infeasibility": sol.get("primal infeasibility"),
        "attempts": len(errors) + 1,
    }
    iters = int(sol.get("iterations", 0) or 0)
    if sol["status"] == "primal infeasible":
        info["certificate"] = "dual ray"
        return SolverReport("infeasible", np.nan, {}, elapsed, -np.inf,
                            iterations=iters, info=info)
    if sol["status"] == "dual infeasible":
        info["certificate"] = "primal ray"
        return SolverReport("unbounded", np.inf if program.maximize else -np.inf, {},
                            elapsed, 0.0, iterations=iters, info=info)
    if sol["x"] is None:
        return SolverReport("numerical-failure", np.nan, {}, elapsed, -np.inf,
                            iterations=iters, info=info)

    point = _point_from_flat(program, np.array(sol["x"]).reshape(-1))
    margins = program.margins(point)
    worst = min(0.0, min(margins.values()))
    ok = all(m >= -lmi.tolerance(settings.tol_feas) for lmi, m in zip(program.lmis, margins.values()))
    status = "optimal"
    if sol["status"] != "optimal" or not ok:
        # accept "unknown" terminations that nevertheless meet the contract
        gap = info["relative_gap"]
        near = gap is not None and abs(gap) <= max(1e3 * settings.tol_gap, 1e-6)
        if not (ok and near and sol["status"] == "unknown"):
            status = "numerical-failure"
    return SolverReport(status, program.objective_value(point), point, elapsed, worst,
                        margins, iters, info)
