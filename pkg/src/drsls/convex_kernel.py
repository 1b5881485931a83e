"""A small linear-programming modeling layer.

Expressions are arrays of scalar affine functions of the program variables.
Each :class:`Expr` stores one sparse coefficient row per element (row-major
over ``shape``) plus a constant vector, so products with constant matrices are
sparse matrix products rather than Python loops.

Constraints are kept in canonical form: ``expr == 0`` and ``expr <= 0``.
Norm epigraphs (absolute value, vector 1-norm, induced matrix 1-norm) and
max-of-affine bounds are provided as helpers that add auxiliary variables.

    prog = Program()
    x = prog.add_variable(2)
    t = add_l1_epigraph(prog, x.expr - [1.0, -2.0])
    prog.minimize(t.expr)
    sol = solve(prog)
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from numbers import Real

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .errors import ValidationError

FEAS_TOL = 1e-7


class Status(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    NUMERICAL_FAILURE = "numerical-failure"


def _shape(shape):
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(s) for s in shape)


def _pad(coef, ncols):
    if coef.shape[1] == ncols:
        return coef
    coef = coef.tocoo()
    return sp.csr_matrix((coef.data, (coef.row, coef.col)), shape=(coef.shape[0], ncols))


class Expr:
    """Array of scalar affine expressions ``coef @ x + const``."""

    __array_priority__ = 100

    def __init__(self, coef, const, shape):
        self.shape = _shape(shape)
        self.coef = sp.csr_matrix(coef, copy=True)
        self.coef.sum_duplicates()
        self.coef.eliminate_zeros()
        self.const = np.asarray(const, dtype=float).ravel()
        if self.coef.shape[0] != self.size or self.const.size != self.size:
            raise ValidationError(f"inconsistent expression of shape {self.shape}")

    @property
    def size(self):
        return math.prod(self.shape)

    @property
    def ndim(self):
        return len(self.shape)

    @classmethod
    def constant(cls, value):
        value = np.asarray(value, dtype=float)
        return cls(sp.csr_matrix((value.size, 0)), value.ravel(), value.shape)

    def _binary(self, other, sign):
        other = as_expr(other)
        if other.shape != self.shape:
            if other.size == 1:
                other = Expr(sp.vstack([other.coef] * self.size), np.full(self.size, other.const[0]),
                             self.shape)
            elif self.size == 1:
                return Expr(sp.vstack([self.coef] * other.size), np.full(other.size, self.const[0]),
                            other.shape)._binary(other, sign)
            else:
                raise ValidationError(f"shape mismatch {self.shape} vs {other.shape}")
        ncols = max(self.coef.shape[1], other.coef.shape[1])
        coef = _pad(self.coef, ncols) + sign * _pad(other.coef, ncols)
        return Expr(coef, self.const + sign * other.const, self.shape)

    def __add__(self, other):
        return self._binary(other, 1.0)

    def __radd__(self, other):
        return self._binary(other, 1.0)

    def __sub__(self, other):
        return self._binary(other, -1.0)

    def __rsub__(self, other):
        return (-self)._binary(other, 1.0)

    def __neg__(self):
        return Expr(-self.coef, -self.const, self.shape)

    def __mul__(self, other):
        if isinstance(other, Real):
            return Expr(self.coef * float(other), self.const * float(other), self.shape)
        other = np.asarray(other, dtype=float)
        shape = np.broadcast_shapes(self.shape, other.shape)
        base = self if shape == self.shape else self.broadcast_to(shape)
        w = np.broadcast_to(other, shape).ravel()
        return Expr(sp.diags(w) @ base.coef, w * base.const, shape)

    def broadcast_to(self, shape):
        idx = np.broadcast_to(np.arange(self.size).reshape(self.shape), shape).ravel()
        return Expr(self.coef[idx], self.const[idx], tuple(shape))

    __rmul__ = __mul__

    def _linear(self, L, shape):
        L = sp.csr_matrix(L)
        return Expr(L @ self.coef, L @ self.const, shape)

    def __rmatmul__(self, M):
        """Constant matrix times expression (vector or matrix)."""
        M = M if sp.issparse(M) else np.atleast_2d(np.asarray(M, dtype=float))
        if self.ndim == 1:
            if M.shape[1] != self.shape[0]:
                raise ValidationError(f"matmul mismatch {M.shape} @ {self.shape}")
            return self._linear(M, (M.shape[0],))
        r, c = self.shape
        if M.shape[1] != r:
            raise ValidationError(f"matmul mismatch {M.shape} @ {self.shape}")
        return self._linear(sp.kron(sp.csr_matrix(M), sp.identity(c)), (M.shape[0], c))

    def __matmul__(self, M):
        """Expression (matrix) times constant vector or matrix."""
        if isinstance(M, Expr):
            raise ValidationError("product of two expressions is not affine")
        M = np.asarray(M, dtype=float)
        if self.ndim != 2:
            raise ValidationError("left operand of @ must be a matrix expression")
        r, c = self.shape
        if M.shape[0] != c:
            raise ValidationError(f"matmul mismatch {self.shape} @ {M.shape}")
        if M.ndim == 1:
            return self._linear(sp.kron(sp.identity(r), sp.csr_matrix(M[None, :])), (r,))
        k = M.shape[1]
        return self._linear(sp.kron(sp.identity(r), sp.csr_matrix(M.T)), (r, k))

    def __getitem__(self, idx):
        pick = np.arange(self.size).reshape(self.shape)[idx]
        return Expr(self.coef[pick.ravel()], self.const[pick.ravel()], pick.shape)

    def ravel(self):
        return Expr(self.coef, self.const, (self.size,))

    def reshape(self, *shape):
        shape = _shape(shape[0] if len(shape) == 1 else shape)
        if math.prod(shape) != self.size:
            raise ValidationError(f"cannot reshape {self.shape} to {shape}")
        return Expr(self.coef, self.const, shape)

    @property
    def T(self):
        if self.ndim != 2:
            return self
        r, c = self.shape
        perm = np.arange(self.size).reshape(r, c).T.ravel()
        return Expr(self.coef[perm], self.const[perm], (c, r))

    def sum(self, axis=None):
        if axis is None:
            return self._linear(np.ones((1, self.size)), ())
        if self.ndim != 2:
            raise ValidationError("axis sums need a matrix expression")
        r, c = self.shape
        if axis == 0:
            return self._linear(sp.kron(np.ones((1, r)), sp.identity(c)), (c,))
        return self._linear(sp.kron(sp.identity(r), np.ones((1, c))), (r,))

    def is_constant(self):
        """Per-element mask of elements with no variable terms."""
        return np.diff(self.coef.indptr) == 0

    def value(self, x):
        x = np.asarray(x, dtype=float)
        coef = self.coef
        if coef.shape[1] < x.size:
            coef = _pad(coef, x.size)
        return (coef @ x + self.const).reshape(self.shape)

    def __repr__(self):
        return f"Expr(shape={self.shape}, nnz={self.coef.nnz})"


def as_expr(value):
    if isinstance(value, Expr):
        return value
    if isinstance(value, Var):
        return value.expr
    return Expr.constant(value)


def vstack(parts):
    """Stack vector expressions end to end, or matrix expressions by rows."""
    parts = [as_expr(p) for p in parts]
    ncols = max(p.coef.shape[1] for p in parts)
    coef = sp.vstack([_pad(p.coef, ncols) for p in parts], format="csr")
    const = np.concatenate([p.const for p in parts])
    if all(p.ndim <= 1 for p in parts):
        return Expr(coef, const, (const.size,))
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise ValidationError("vstack needs equal column counts")
    return Expr(coef, const, (sum(p.shape[0] for p in parts), cols.pop()))


@dataclass(eq=False)
class Var:
    """Handle to a block of program variables.

    ``mask`` marks which elements are decision variables; the remaining
    entries are structural zeros and never become LP columns.
    """

    id: int
    shape: tuple
    cols: np.ndarray
    mask: np.ndarray
    name: str = ""

    @property
    def expr(self):
        size = self.mask.size
        rows = np.flatnonzero(self.mask.ravel())
        coef = sp.csr_matrix((np.ones(rows.size), (rows, self.cols)),
                             shape=(size, int(self.cols.max()) + 1 if self.cols.size else 0))
        return Expr(coef, np.zeros(size), self.shape)


@dataclass
class _Block:
    coef: sp.csr_matrix
    const: np.ndarray
    name: str


@dataclass(eq=False)
class Program:
    variables: list = field(default_factory=list)
    equalities: list = field(default_factory=list)
    inequalities: list = field(default_factory=list)
    objective: Expr = None
    nvars: int = 0
    lb: list = field(default_factory=list)
    ub: list = field(default_factory=list)
    var_names: list = field(default_factory=list)

    def add_variable(self, shape=(), mask=None, lb=None, ub=None, name=""):
        shape = _shape(shape)
        mask = np.ones(shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        if mask.shape != shape:
            raise ValidationError(f"mask shape {mask.shape} != {shape}", field=name or "mask")
        k = int(mask.sum())
        cols = np.arange(self.nvars, self.nvars + k)
        var = Var(len(self.variables), shape, cols, mask, name or f"v{len(self.variables)}")
        self.variables.append(var)
        self.nvars += k
        self.lb.append(np.full(k, -np.inf if lb is None else float(lb)))
        self.ub.append(np.full(k, np.inf if ub is None else float(ub)))
        flat = np.argwhere(mask) if shape else np.zeros((1, 0), dtype=int)
        for idx in flat:
            suffix = "".join(f"_{i}" for i in idx)
            self.var_names.append(f"{var.name}{suffix}")
        return var

    def add_eq(self, expr, name=""):
        expr = as_expr(expr)
        self.equalities.append(_Block(expr.coef, expr.const, name))

    def add_le(self, expr, name=""):
        expr = as_expr(expr)
        self.inequalities.append(_Block(expr.coef, expr.const, name))

    def minimize(self, expr):
        expr = as_expr(expr)
        if expr.size != 1:
            raise ValidationError("objective must be scalar", field="objective")
        self.objective = expr.reshape(())

    def bounds(self):
        lb = np.concatenate(self.lb) if self.lb else np.zeros(0)
        ub = np.concatenate(self.ub) if self.ub else np.zeros(0)
        return lb, ub

    def assemble(self):
        """Return ``(c, c0, A_ub, b_ub, A_eq, b_eq, lb, ub)`` over all columns."""
        n = self.nvars

        def stack(blocks):
            if not blocks:
                return sp.csr_matrix((0, n)), np.zeros(0)
            A = sp.vstack([_pad(b.coef, n) for b in blocks], format="csr")
            return A, -np.concatenate([b.const for b in blocks])

        A_ub, b_ub = stack(self.inequalities)
        A_eq, b_eq = stack(self.equalities)
        obj = self.objective if self.objective is not None else Expr.constant(0.0)
        c = np.asarray(_pad(obj.coef, n).todense()).ravel()
        lb, ub = self.bounds()
        return c, float(obj.const[0]), A_ub, b_ub, A_eq, b_eq, lb, ub


# ---------------------------------------------------------------- epigraphs

def abs_bounds(prog, expr, name="abs"):
    """Elementwise upper bounds ``t >= |expr|`` as an expression.

    Elements without variables are bounded by their constant ``|c|`` and get
    no auxiliary variable.
    """
    expr = as_expr(expr)
    const_mask = expr.is_constant().reshape(expr.shape)
    if const_mask.all():
        return Expr.constant(np.abs(expr.const).reshape(expr.shape))
    t = prog.add_variable(expr.shape, mask=~const_mask, lb=0.0, name=name)
    live = np.flatnonzero(~const_mask.ravel())
    sub = Expr(expr.coef[live], expr.const[live], (live.size,))
    tv = Expr(t.expr.coef[live], np.zeros(live.size), (live.size,))
    prog.add_le(sub - tv, name=f"{name}+")
    prog.add_le(-sub - tv, name=f"{name}-")
    fixed = np.where(const_mask.ravel(), np.abs(expr.const), 0.0).reshape(expr.shape)
    return t.expr + fixed


def add_abs_epigraph(prog, expr, name="abs"):
    expr = as_expr(expr)
    if expr.size != 1:
        raise ValidationError(f"expected a scalar expression, got shape {expr.shape}", field=name)
    t = prog.add_variable((), name=name)
    prog.add_le(expr.reshape(()) - t.expr, name=f"{name}+")
    prog.add_le(-expr.reshape(()) - t.expr, name=f"{name}-")
    return t


def add_l1_epigraph(prog, exprs, name="l1"):
    exprs = as_expr(exprs)
    t = prog.add_variable((), name=name)
    if exprs.size == 0:
        prog.add_le(-t.expr, name=name)
        return t
    total = abs_bounds(prog, exprs.ravel(), name=f"{name}_abs").sum()
    prog.add_le(total - t.expr, name=name)
    return t


def add_induced1_epigraph(prog, M, name="ind1"):
    """``t >= max_j sum_i |M_ij|``."""
    M = as_expr(M)
    if M.ndim != 2:
        raise ValidationError(f"expected a matrix expression, got shape {M.shape}", field=name)
    t = prog.add_variable((), name=name)
    colsums = abs_bounds(prog, M, name=f"{name}_abs").sum(axis=0)
    prog.add_le(colsums - t.expr, name=name)
    return t


def add_max_affine_leq(prog, exprs, bound, name="maxaff"):
    """``max_i exprs_i <= bound`` as one inequality per piece."""
    if isinstance(exprs, (list, tuple)):
        exprs = vstack([as_expr(e).ravel() for e in exprs]) if exprs else Expr.constant(np.zeros(0))
    exprs = as_expr(exprs).ravel()
    prog.add_le(exprs - as_expr(bound), name=name)


# ------------------------------------------------------------------- solve

@dataclass(eq=False)
class Solution:
    status: Status
    x: np.ndarray
    objective: float
    max_violation: float = float("nan")
    message: str = ""

    @property
    def optimal(self):
        return self.status == Status.OPTIMAL

    def value(self, item):
        if isinstance(item, Var):
            out = np.zeros(item.shape)
            out[item.mask] = self.x[item.cols]
            return out
        return as_expr(item).value(self.x)


def primal_violation(prog, x):
    """Largest constraint or bound violation of ``x``, recomputed from scratch."""
    _, _, A_ub, b_ub, A_eq, b_eq, lb, ub = prog.assemble()
    worst = 0.0
    if A_ub.shape[0]:
        worst = max(worst, float(np.max(A_ub @ x - b_ub)))
    if A_eq.shape[0]:
        worst = max(worst, float(np.max(np.abs(A_eq @ x - b_eq))))
    if x.size:
        worst = max(worst, float(np.max(lb - x)), float(np.max(x - ub)))
    return max(worst, 0.0)


def _highs(method):
    def run(c, A_ub, b_ub, A_eq, b_eq, lb, ub):
        bounds = np.column_stack([np.where(np.isinf(lb), None, lb), np.where(np.isinf(ub), None, ub)])
        res = linprog(
            c,
            A_ub=A_ub if A_ub.shape[0] else None,
            b_ub=b_ub if A_ub.shape[0] else None,
            A_eq=A_eq if A_eq.shape[0] else None,
            b_eq=b_eq if A_eq.shape[0] else None,
            bounds=bounds if c.size else None,
            method=method,
            options={"primal_feasibility_tolerance": 1e-10,
                     "dual_feasibility_tolerance": 1e-10},
        )
        status = {0: Status.OPTIMAL, 2: Status.INFEASIBLE, 3: Status.UNBOUNDED}.get(
            res.status, Status.NUMERICAL_FAILURE)
        x = np.asarray(res.x, dtype=float) if res.x is not None else np.full(c.size, np.nan)
        return status, x, res.message
    return run


BACKENDS = {
    "highs": _highs("highs"),
    "highs-ds": _highs("highs-ds"),
    "highs-ipm": _highs("highs-ipm"),
}


def solve(prog, backend="highs", feas_tol=FEAS_TOL):
    """Solve ``prog``; optimal status is only reported after an independent
    feasibility recheck of the returned point."""
    c, c0, A_ub, b_ub, A_eq, b_eq, lb, ub = prog.assemble()
    run = BACKENDS[backend] if isinstance(backend, str) else backend
    if c.size == 0:
        # Nothing to optimize; feasibility is decided by the constant rows.
        x = np.zeros(0)
        ok = (b_ub.size == 0 or np.all(b_ub >= -feas_tol)) and (
            b_eq.size == 0 or np.all(np.abs(b_eq) <= feas_tol))
        status = Status.OPTIMAL if ok else Status.INFEASIBLE
        return Solution(status, x, c0 if ok else float("nan"), 0.0 if ok else float("inf"))
    # Rows without variables are decided here; backends never see them.
    empty_ub = np.diff(A_ub.indptr) == 0
    empty_eq = np.diff(A_eq.indptr) == 0
    if np.any(b_ub[empty_ub] < -feas_tol) or np.any(np.abs(b_eq[empty_eq]) > feas_tol):
        return Solution(Status.INFEASIBLE, np.full(c.size, np.nan), float("nan"),
                        message="constant constraint row is violated")
    A_ub, b_ub = A_ub[~empty_ub], b_ub[~empty_ub]
    A_eq, b_eq = A_eq[~empty_eq], b_eq[~empty_eq]
    try:
        status, x, message = run(c, A_ub, b_ub, A_eq, b_eq, lb, ub)
    except (ValueError, np.linalg.LinAlgError) as exc:  # backend breakdown
        return Solution(Status.NUMERICAL_FAILURE, np.full(c.size, np.nan), float("nan"),
                        message=str(exc))
    if status != Status.OPTIMAL:
        return Solution(status, x, float("nan"), message=message)
    violation = primal_violation(prog, x)
    if not np.isfinite(violation) or violation > feas_tol:
        return Solution(Status.NUMERICAL_FAILURE, x, float(c @ x + c0), violation,
                        message=f"returned point violates constraints by {violation:.3e}")
    return Solution(status, x, float(c @ x + c0), violation, message)


# -------------------------------------------------------------- MPS export

def _fmt(v):
    return repr(float(v))


def write_mps(prog, path):
    """Write ``prog`` in free-format MPS (17 significant digits)."""
    c, c0, A_ub, b_ub, A_eq, b_eq, lb, ub = prog.assemble()
    names = prog.var_names
    rows = [f"L{i}" for i in range(A_ub.shape[0])] + [f"E{i}" for i in range(A_eq.shape[0])]
    A = sp.vstack([A_ub, A_eq], format="csc")
    rhs = np.concatenate([b_ub, b_eq])
    lines = ["NAME drsls", "ROWS", " N obj"]
    lines += [f" L {r}" for r in rows[:A_ub.shape[0]]]
    lines += [f" E {r}" for r in rows[A_ub.shape[0]:]]
    lines.append("COLUMNS")
    for j, name in enumerate(names):
        if c[j] != 0.0:
            lines.append(f" {name} obj {_fmt(c[j])}")
        start, stop = A.indptr[j], A.indptr[j + 1]
        for k in range(start, stop):
            lines.append(f" {name} {rows[A.indices[k]]} {_fmt(A.data[k])}")
    lines.append("RHS")
    if c0 != 0.0:
        lines.append(f" rhs obj {_fmt(-c0)}")
    for r, v in zip(rows, rhs):
        if v != 0.0:
            lines.append(f" rhs {r} {_fmt(v)}")
    lines.append("BOUNDS")
    for name, lo, hi in zip(names, lb, ub):
        if np.isinf(lo) and np.isinf(hi):
            lines.append(f" FR bnd {name}")
            continue
        if np.isinf(lo):
            lines.append(f" MI bnd {name}")
        elif lo != 0.0:
            lines.append(f" LO bnd {name} {_fmt(lo)}")
        if not np.isinf(hi):
            lines.append(f" UP bnd {name} {_fmt(hi)}")
    lines.append("ENDATA")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mps(path):
    """Read a free-format MPS file written by :func:`write_mps`."""
    section = None
    row_kind = {}
    order = []
    entries = {}
    col_index = {}
    obj_row = None
    rhs = {}
    bounds = {}
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("*"):
                continue
            if not raw[0].isspace():
                section = line.split()[0]
                continue
            tok = line.split()
            if section == "ROWS":
                kind, name = tok
                if kind == "N" and obj_row is None:
                    obj_row = name
                else:
                    row_kind[name] = kind
                    order.append(name)
            elif section == "COLUMNS":
                col = tok[0]
                j = col_index.setdefault(col, len(col_index))
                for r, v in zip(tok[1::2], tok[2::2]):
                    entries[(r, j)] = float(v)
            elif section == "RHS":
                for r, v in zip(tok[1::2], tok[2::2]):
                    rhs[r] = float(v)
            elif section == "BOUNDS":
                kind, col = tok[0], tok[2]
                j = col_index.setdefault(col, len(col_index))
                lo, hi = bounds.get(j, (0.0, np.inf))
                if kind == "FR":
                    lo, hi = -np.inf, np.inf
                elif kind == "MI":
                    lo = -np.inf
                elif kind == "LO":
                    lo = float(tok[3])
                elif kind == "UP":
                    hi = float(tok[3])
                elif kind == "FX":
                    lo = hi = float(tok[3])
                bounds[j] = (lo, hi)
    prog = Program()
    n = len(col_index)
    names = sorted(col_index, key=col_index.get)
    for name in names:
        j = col_index[name]
        lo, hi = bounds.get(j, (0.0, np.inf))
        prog.add_variable((), lb=None if np.isinf(lo) else lo, ub=None if np.isinf(hi) else hi,
                          name=name)
    prog.var_names = names

    by_row = {}
    for (r, j), v in entries.items():
        by_row.setdefault(r, []).append((j, v))

    def fast_row(rname, const):
        items = by_row.get(rname, [])
        cols = [j for j, _ in items]
        vals = [v for _, v in items]
        coef = sp.csr_matrix((vals, ([0] * len(cols), cols)), shape=(1, n))
        return Expr(coef, [const], ())

    for rname in order:
        expr = fast_row(rname, -rhs.get(rname, 0.0))
        kind = row_kind[rname]
        if kind == "E":
            prog.add_eq(expr, rname)
        elif kind == "L":
            prog.add_le(expr, rname)
        elif kind == "G":
            prog.add_le(-expr, rname)
    if obj_row is not None:
        prog.minimize(fast_row(obj_row, -rhs.get(obj_row, 0.0)))
    return prog
