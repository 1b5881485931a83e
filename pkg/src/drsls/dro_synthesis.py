"""Nominal and distributionally robust SLS synthesis as linear programs.

With the gain caps ``(rho, sigma)`` fixed, the robust problem is an LP:

    min   l_h * eps + mean_i s_i
    s.t.  Phi_y - G_hat Phi_u = I,   phi_y - G_hat phi_u = 0   (structured)
          eta_i = Phi (y0_hat + Theta_hat e_i) + phi
          h(eta_i) <= s_i
          l_g,k * eps + mean_i q_ki <= 0,  g_k(eta_i) <= q_ki    for every stage k
          eps >= c_Phi * ||Phi|| + c_phi * ||phi_u||
          ||Phi_y|| <= sigma,  gamma1 * ||Phi_u|| <= rho

where ``eps`` upper-bounds the Wasserstein shift between the predicted and
the true closed-loop response distributions. ``(rho, sigma)`` are chosen by
grid search.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import convex_kernel as ck
from .blocks import induced1, lower_mask
from .errors import InternalConsistencyError, SolverError, ValidationError
from .sls_core import (
    SlsParam,
    extract_policy,
    response_from_param,
    true_param_under_mismatch,
    validate_structure,
    validate_subspace,
)

SUBSPACE_TOL = 1e-6
CAP_TOL = 1e-7

DEFAULT_RHO_GRID = tuple(round(0.05 * k, 2) for k in range(1, 11))
DEFAULT_SIGMA_GRID = (1.0, 2.0, 5.0, 10.0, 20.0)
# Interior point with crossover: far faster than dual simplex on these LPs
# and it still returns a vertex.
DEFAULT_BACKEND = "highs-ipm"


@dataclass(frozen=True)
class UncertaintyBudget:
    gamma1: float = 0.0
    gamma2: float = 0.0
    gamma3: float = 0.0
    kappa: float = 0.0

    def __post_init__(self):
        for name in ("gamma1", "gamma2", "gamma3", "kappa"):
            value = float(getattr(self, name))
            if not np.isfinite(value) or value < 0:
                raise ValidationError(f"must be a finite nonnegative number, got {value}",
                                      field=name)
            object.__setattr__(self, name, value)

    @property
    def gammas(self):
        return (self.gamma1, self.gamma2, self.gamma3)


@dataclass(frozen=True)
class GainCaps:
    rho: float
    sigma: float

    def __post_init__(self):
        rho, sigma = float(self.rho), float(self.sigma)
        if not 0.0 <= rho < 1.0:
            raise ValidationError(f"must lie in [0, 1), got {rho}", field="rho")
        if not sigma > 0.0:
            raise ValidationError(f"must be positive, got {sigma}", field="sigma")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "sigma", sigma)


@dataclass(frozen=True, eq=False)
class CostSpec:
    """``h(eta) = ||diag(w) eta||_1`` over ``eta = col(y, u)``."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).ravel()
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValidationError("weights must be finite and nonnegative", field="weights")
        object.__setattr__(self, "weights", w)

    @classmethod
    def output_input(cls, T, q, m, y_weight=1.0, u_weight=0.1):
        nb = T + 1
        return cls(np.concatenate([np.full(nb * q, y_weight), np.full(nb * m, u_weight)]))

    def __call__(self, eta):
        return float(np.abs(self.weights * np.asarray(eta)).sum())


@dataclass(frozen=True, eq=False)
class ConstraintSpec:
    """Stage constraints ``g_k(eta) = max_i (a_i . eta + b_i) <= 0``.

    ``stages[k]`` is a pair ``(A_k, b_k)`` holding one piece per row.
    """

    stages: tuple

    def __post_init__(self):
        stages = []
        for k, (A, b) in enumerate(self.stages):
            A = np.atleast_2d(np.asarray(A, dtype=float))
            b = np.asarray(b, dtype=float).ravel()
            if A.shape[0] == 0 or A.shape[0] != b.size:
                raise ValidationError("each stage needs a nonempty, consistent piece set",
                                      field=f"stages[{k}]")
            stages.append((A, b))
        object.__setattr__(self, "stages", tuple(stages))

    @classmethod
    def output_input_bounds(cls, T, q, m, y_min=-0.01, u_max=1.0):
        """``y_k >= y_min`` and ``|u_k| <= u_max`` as one max-affine stage per step."""
        nb = T + 1
        dim = nb * (q + m)
        stages = []
        for k in range(nb):
            rows, offs = [], []
            for j in range(q):
                a = np.zeros(dim)
                a[k * q + j] = -1.0
                rows.append(a)
                offs.append(y_min)
            for j in range(m):
                for sign in (1.0, -1.0):
                    a = np.zeros(dim)
                    a[nb * q + k * m + j] = sign
                    rows.append(a)
                    offs.append(-u_max)
            stages.append((np.array(rows), np.array(offs)))
        return cls(tuple(stages))

    def values(self, eta):
        """``g_k(eta)`` for every stage."""
        eta = np.asarray(eta, dtype=float)
        return np.array([float(np.max(A @ eta + b)) for A, b in self.stages])

    def stacked(self):
        A = np.vstack([A for A, _ in self.stages])
        b = np.concatenate([b for _, b in self.stages])
        owner = np.concatenate([np.full(A.shape[0], k) for k, (A, _) in enumerate(self.stages)])
        return A, b, owner


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Innovation stacks ``e_i`` as rows of ``E`` (equal weights ``1/N``)."""

    E: np.ndarray

    def __post_init__(self):
        E = np.atleast_2d(np.asarray(self.E, dtype=float))
        if E.shape[0] < 1:
            raise ValidationError("need at least one sample", field="samples")
        object.__setattr__(self, "E", E)

    @property
    def N(self):
        return self.E.shape[0]

    def mean(self):
        return self.E.mean(axis=0)


@dataclass(eq=False)
class SynthesisResult:
    mode: str
    status: str
    objective: float
    param: SlsParam = None
    policy: object = None
    epsilon_bar: float = 0.0
    caps: GainCaps = None
    eta_hat: np.ndarray = None
    s: np.ndarray = None
    q: np.ndarray = None
    subspace_residual: float = float("nan")
    max_violation: float = float("nan")
    table: list = field(default_factory=list)

    @property
    def optimal(self):
        return self.status == ck.Status.OPTIMAL.value

    def to_dict(self):
        doc = {
            "mode": self.mode,
            "status": self.status,
            "objective": self.objective,
            "epsilon_bar": self.epsilon_bar,
            "rho": None if self.caps is None else self.caps.rho,
            "sigma": None if self.caps is None else self.caps.sigma,
            "subspace_residual": self.subspace_residual,
            "max_violation": self.max_violation,
            "grid": self.table,
        }
        if self.param is not None:
            doc["param"] = self.param.to_dict()
            doc["policy"] = self.policy.to_dict()
        return doc


# -------------------------------------------------------------- Lipschitz

def lipschitz_of_cost(spec):
    return float(np.max(spec.weights)) if spec.weights.size else 0.0


def stage_lipschitz(spec):
    return np.array([float(np.abs(A).max()) for A, _ in spec.stages])


def lipschitz_of_constraint(spec):
    return float(stage_lipschitz(spec).max())


# ------------------------------------------------------------ radius bound

def _sample_norms(ops_hat, y0_hat, samples):
    W = np.asarray(y0_hat)[None, :] + samples.E @ ops_hat.Theta.T
    return np.abs(W).sum(axis=1), np.abs(samples.E).sum(axis=1)


def radius_coefficients(ops_hat, y0_hat, samples, budget, caps):
    """``(c_Phi, c_phi)`` with ``eps_bound = c_Phi ||Phi|| + c_phi ||phi_u||_1``."""
    rho = caps.rho
    if rho >= 1.0:
        raise ValidationError(f"must lie in [0, 1), got {rho}", field="rho")
    w_norms, e_norms = _sample_norms(ops_hat, y0_hat, samples)
    N = samples.N
    g1, g2, g3 = budget.gammas
    c_Phi = (rho * w_norms.sum() + g2 * e_norms.sum() + N * g3) / (N * (1.0 - rho))
    c_Phi += budget.kappa * (induced1(ops_hat.Theta) + g2) / (1.0 - rho)
    # (rho/gamma1 + sigma) * gamma1 without dividing by gamma1; the whole term
    # vanishes when gamma1 = 0 since then Delta = 0.
    c_phi = 0.0 if g1 == 0.0 else (rho + caps.sigma * g1) / (1.0 - rho)
    return c_Phi, c_phi


def eval_radius_bound(param, ops_hat, y0_hat, samples, budget, caps, tol=CAP_TOL):
    if budget.gamma1 * induced1(param.Phi_u) > caps.rho + tol:
        raise ValidationError(
            f"gamma1 * ||Phi_u|| = {budget.gamma1 * induced1(param.Phi_u):.6g} exceeds rho",
            field="rho")
    c_Phi, c_phi = radius_coefficients(ops_hat, y0_hat, samples, budget, caps)
    return c_Phi * induced1(param.Phi) + c_phi * float(np.abs(param.phi_u).sum())


def radius_terms(param, mm, ops_hat, y0_hat, samples, budget, caps):
    """Left and right sides of the four per-term shift bounds.

    Returns a dict mapping ``term1``..``term4`` to ``(lhs, rhs)`` arrays
    (per sample for terms 1 and 2).
    """
    rho, sigma = caps.rho, caps.sigma
    g1, g2, g3 = budget.gammas
    kappa = budget.kappa
    Phi = param.Phi
    nPhi = induced1(Phi)
    true = true_param_under_mismatch(param, mm.Delta)
    # Dense inverse on purpose: a second path next to the block solves.
    R = np.linalg.inv(np.eye(param.Phi_y.shape[0]) - mm.Delta @ param.Phi_u)
    W = np.asarray(y0_hat)[:, None] + ops_hat.Theta @ samples.E.T
    lhs1 = np.abs(Phi @ (R - np.eye(R.shape[0])) @ W).sum(axis=0)
    rhs1 = rho / (1 - rho) * nPhi * np.abs(W).sum(axis=0)
    V = mm.y0_tilde[:, None] + mm.Theta_tilde @ samples.E.T
    lhs2 = np.abs(Phi @ R @ V).sum(axis=0)
    rhs2 = nPhi * (g2 * np.abs(samples.E).sum(axis=1) + g3) / (1 - rho)
    lhs3 = float(np.abs(true.phi - param.phi).sum())
    rhs3 = 0.0 if g1 == 0.0 else (rho + sigma * g1) / (1 - rho) * float(np.abs(param.phi_u).sum())
    lhs4 = induced1(Phi @ R @ (ops_hat.Theta + mm.Theta_tilde)) * kappa
    rhs4 = kappa / (1 - rho) * nPhi * (induced1(ops_hat.Theta) + g2)
    return {
        "term1": (lhs1, rhs1),
        "term2": (lhs2, rhs2),
        "term3": (np.array([lhs3]), np.array([rhs3])),
        "term4": (np.array([lhs4]), np.array([rhs4])),
    }


def paired_shift(param, mm, ops_hat, y0_hat, samples):
    """``(1/N) sum_i ||eta_hat_i - eta_i||_1`` under the index-paired coupling."""
    true = true_param_under_mismatch(param, mm.Delta)
    y0 = np.asarray(y0_hat) + mm.y0_tilde
    Theta = ops_hat.Theta + mm.Theta_tilde
    W_hat = np.asarray(y0_hat)[:, None] + ops_hat.Theta @ samples.E.T
    W = y0[:, None] + Theta @ samples.E.T
    eta_hat = param.Phi @ W_hat + param.phi[:, None]
    eta = true.Phi @ W + true.phi[:, None]
    return float(np.abs(eta_hat - eta).sum(axis=0).mean())


def empirical_wasserstein(X, Y):
    """Exact 1-norm Wasserstein distance between two equal-size point clouds."""
    X, Y = np.atleast_2d(X), np.atleast_2d(Y)
    if X.shape != Y.shape:
        raise ValidationError("point clouds must have equal size and dimension")
    cost = np.abs(X[:, None, :] - Y[None, :, :]).sum(axis=2)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


# ------------------------------------------------------------- LP assembly

@dataclass(eq=False)
class Handles:
    Phi_y: ck.Expr
    Phi_u: ck.Expr
    phi_y: ck.Expr
    phi_u: ck.Expr
    vars: dict
    eps: ck.Var = None
    s: ck.Var = None
    q: ck.Var = None
    eta: ck.Expr = None
    abs_Phi_y: ck.Expr = None
    abs_Phi_u: ck.Expr = None


def _parameterization(prog, ops_hat):
    """Structured SLS variables and the affine-subspace equalities."""
    nb, m, q = ops_hat.nblk, ops_hat.m, ops_hat.q
    Phi_y_var = prog.add_variable((nb * q, nb * q), mask=lower_mask(nb, q, q, strict=True),
                                  name="Phi_y")
    Phi_u_var = prog.add_variable((nb * m, nb * q), mask=lower_mask(nb, m, q, strict=True),
                                  name="Phi_u")
    phi_y_var = prog.add_variable(nb * q, name="phi_y")
    phi_u_var = prog.add_variable(nb * m, name="phi_u")
    Phi_y = Phi_y_var.expr + np.eye(nb * q)
    Phi_u = Phi_u_var.expr
    phi_y, phi_u = phi_y_var.expr, phi_u_var.expr
    prog.add_eq(Phi_y - ops_hat.G @ Phi_u - np.eye(nb * q), name="subspace_Phi")
    prog.add_eq(phi_y - ops_hat.G @ phi_u, name="subspace_phi")
    h = Handles(Phi_y, Phi_u, phi_y, phi_u,
                {"Phi_y": Phi_y_var, "Phi_u": Phi_u_var, "phi_y": phi_y_var, "phi_u": phi_u_var})
    return h


def _responses(h, ops_hat, y0_hat, E):
    """``eta_i`` for each row of ``E`` as a ``(dim, N)`` expression."""
    W = np.asarray(y0_hat)[:, None] + ops_hat.Theta @ E.T
    Phi = ck.vstack([h.Phi_y, h.Phi_u])
    phi = ck.vstack([h.phi_y, h.phi_u])
    N = E.shape[0]
    tiled = phi[np.repeat(np.arange(phi.size), N)].reshape(phi.size, N)
    return Phi @ W + tiled


def _check_dims(ops_hat, y0_hat, samples, cost, constraints):
    nb, m, q = ops_hat.nblk, ops_hat.m, ops_hat.q
    dim = nb * (q + m)
    if np.size(y0_hat) != nb * q:
        raise ValidationError(f"expected length {nb * q}, got {np.size(y0_hat)}", field="y0_hat")
    if samples is not None and samples.E.shape[1] != nb * q:
        raise ValidationError(f"samples must have length {nb * q}", field="samples")
    if cost.weights.size != dim:
        raise ValidationError(f"expected {dim} weights, got {cost.weights.size}", field="weights")
    for k, (A, _) in enumerate(constraints.stages):
        if A.shape[1] != dim:
            raise ValidationError(f"pieces must have length {dim}", field=f"stages[{k}]")


def _cost_rows(prog, h, cost, eta):
    """Per-sample cost epigraphs ``h(eta_i) <= s_i``; returns ``s``."""
    N = eta.shape[1]
    s = prog.add_variable(N, name="s")
    weighted = eta * np.repeat(cost.weights[:, None], N, axis=1)
    prog.add_le(ck.abs_bounds(prog, weighted, name="cost_abs").sum(axis=0) - s.expr, name="cost")
    return s


def _constraint_pieces(prog, constraints, eta):
    """``g_k(eta_i) <= q_ki`` for every stage and sample; returns ``q``."""
    A, b, owner = constraints.stacked()
    K, N = len(constraints.stages), eta.shape[1]
    qv = prog.add_variable((K, N), name="q")
    pieces = A @ eta + np.repeat(b[:, None], N, axis=1)
    q_rows = qv.expr[owner]
    ck.add_max_affine_leq(prog, pieces.ravel(), q_rows.ravel(), name="pieces")
    return qv


def build_radius_constraint(prog, ops_hat, y0_hat, samples, budget, caps, h):
    """Add ``eps >= c_Phi ||Phi|| + c_phi ||phi_u||_1``; returns the ``eps`` handle."""
    c_Phi, c_phi = radius_coefficients(ops_hat, y0_hat, samples, budget, caps)
    if h.abs_Phi_y is None:
        h.abs_Phi_y = ck.abs_bounds(prog, h.Phi_y, name="abs_Phi_y")
        h.abs_Phi_u = ck.abs_bounds(prog, h.Phi_u, name="abs_Phi_u")
    t_Phi = prog.add_variable((), name="t_Phi")
    colsums = h.abs_Phi_y.sum(axis=0) + h.abs_Phi_u.sum(axis=0)
    prog.add_le(colsums - t_Phi.expr, name="t_Phi")
    t_phi = ck.add_l1_epigraph(prog, h.phi_u, name="t_phi_u")
    eps = prog.add_variable((), name="eps")
    prog.add_le(t_Phi.expr * c_Phi + t_phi.expr * c_phi - eps.expr, name="radius")
    h.eps = eps
    return eps


def build_drsls(ops_hat, y0_hat, samples, budget, caps, cost, constraints):
    _check_dims(ops_hat, y0_hat, samples, cost, constraints)
    prog = ck.Program()
    h = _parameterization(prog, ops_hat)
    eta = _responses(h, ops_hat, y0_hat, samples.E)
    h.eta = eta
    h.s = _cost_rows(prog, h, cost, eta)
    h.q = _constraint_pieces(prog, constraints, eta)
    eps = build_radius_constraint(prog, ops_hat, y0_hat, samples, budget, caps, h)
    N = samples.N
    lg = stage_lipschitz(constraints)
    q_mean = h.q.expr.sum(axis=1) * (1.0 / N)
    prog.add_le(q_mean + eps.expr * lg, name="dr_constraint")
    prog.add_le(h.abs_Phi_y.sum(axis=0) - caps.sigma, name="cap_Phi_y")
    if budget.gamma1 > 0.0:
        prog.add_le(h.abs_Phi_u.sum(axis=0) - caps.rho / budget.gamma1, name="cap_Phi_u")
    prog.minimize(eps.expr * lipschitz_of_cost(cost) + h.s.expr.sum() * (1.0 / N))
    return prog, h


def build_saa(ops_hat, y0_hat, samples, cost, constraints):
    """Sample-average program: averaged cost and averaged stage constraints."""
    _check_dims(ops_hat, y0_hat, samples, cost, constraints)
    prog = ck.Program()
    h = _parameterization(prog, ops_hat)
    eta = _responses(h, ops_hat, y0_hat, samples.E)
    h.eta = eta
    h.s = _cost_rows(prog, h, cost, eta)
    h.q = _constraint_pieces(prog, constraints, eta)
    N = samples.N
    prog.add_le(h.q.expr.sum(axis=1) * (1.0 / N), name="saa_constraint")
    prog.minimize(h.s.expr.sum() * (1.0 / N))
    return prog, h


def build_nominal(ops_hat, y0_hat, e_ref, cost, constraints):
    """Certainty-equivalent program at a single innovation stack ``e_ref``."""
    E = np.atleast_2d(np.asarray(e_ref, dtype=float))
    _check_dims(ops_hat, y0_hat, SampleSet(E), cost, constraints)
    prog = ck.Program()
    h = _parameterization(prog, ops_hat)
    eta = _responses(h, ops_hat, y0_hat, E)
    h.eta = eta
    h.s = _cost_rows(prog, h, cost, eta)
    A, b, _ = constraints.stacked()
    ck.add_max_affine_leq(prog, (A @ eta).ravel() + b, 0.0, name="pointwise")
    prog.minimize(h.s.expr.sum())
    return prog, h


# ------------------------------------------------------------------ solve

def _finish(prog, h, ops_hat, mode, caps=None, backend=DEFAULT_BACKEND):
    sol = ck.solve(prog, backend=backend)
    if not sol.optimal:
        return SynthesisResult(mode, sol.status.value, float("nan"), caps=caps,
                               max_violation=sol.max_violation)
    nb, m, q = ops_hat.nblk, ops_hat.m, ops_hat.q
    param = SlsParam(sol.value(h.Phi_y), sol.value(h.Phi_u), sol.value(h.phi_y),
                     sol.value(h.phi_u), ops_hat.T, m, q)
    if not validate_structure(param):
        raise InternalConsistencyError("solved parameterization breaks block structure")
    residual = validate_subspace(ops_hat.G, param)
    if residual > SUBSPACE_TOL:
        raise InternalConsistencyError(f"subspace residual {residual:.3e} exceeds {SUBSPACE_TOL}")
    return SynthesisResult(
        mode=mode,
        status=sol.status.value,
        objective=sol.objective,
        param=param,
        policy=extract_policy(param),
        epsilon_bar=float(sol.value(h.eps)) if h.eps is not None else 0.0,
        caps=caps,
        eta_hat=sol.value(h.eta).T,
        s=sol.value(h.s),
        q=None if h.q is None else sol.value(h.q),
        subspace_residual=residual,
        max_violation=sol.max_violation,
    )


def solve_drsls(ops_hat, y0_hat, samples, budget, caps, cost, constraints,
                backend=DEFAULT_BACKEND):
    prog, h = build_drsls(ops_hat, y0_hat, samples, budget, caps, cost, constraints)
    return _finish(prog, h, ops_hat, "drsls", caps, backend)


def build_nominal_sls(ops_hat, y0_hat, e_ref, cost, constraints, backend=DEFAULT_BACKEND):
    """Nominal SLS baseline.

    ``e_ref`` as a vector: certainty equivalence at that innovation stack with
    pointwise constraints (the N-SLS design, normally the sample mean). As a
    :class:`SampleSet`: sample average approximation over all samples.
    """
    if isinstance(e_ref, SampleSet):
        prog, h = build_saa(ops_hat, y0_hat, e_ref, cost, constraints)
        result = _finish(prog, h, ops_hat, "saa", backend=backend)
    else:
        prog, h = build_nominal(ops_hat, y0_hat, e_ref, cost, constraints)
        result = _finish(prog, h, ops_hat, "nominal", backend=backend)
    if not result.optimal:
        raise SolverError(f"nominal SLS ended with status {result.status}", status=result.status)
    return result


def normalized_rho_grid(ratios, budget):
    """Map ratios ``r`` to ``rho = gamma1 * r`` so that ``||Phi_u|| <= r``.

    With ``gamma1 = 0`` every ratio collapses to ``rho = 0``, which is exact
    there since the input-path mismatch vanishes.
    """
    return tuple(sorted({round(budget.gamma1 * float(r), 12) for r in ratios}))


def grid_search(rho_grid, sigma_grid, ops_hat, y0_hat, samples, budget, cost, constraints,
                backend=DEFAULT_BACKEND):
    """Solve the robust LP on every ``(rho, sigma)`` pair; keep the cheapest.

    Ties go to the smaller ``rho``, then the smaller ``sigma``.
    """
    rho_grid, sigma_grid = sorted(rho_grid), sorted(sigma_grid)
    if not rho_grid or not sigma_grid:
        raise ValidationError("grids must be nonempty", field="grid")
    best = None
    table = []
    for rho in rho_grid:
        for sigma in sigma_grid:
            caps = GainCaps(rho, sigma)
            res = solve_drsls(ops_hat, y0_hat, samples, budget, caps, cost, constraints, backend)
            table.append({"rho": rho, "sigma": sigma, "objective": res.objective,
                          "status": res.status, "epsilon_bar": res.epsilon_bar})
            if res.optimal and (best is None or res.objective < best.objective - 1e-12 * (
                    1.0 + abs(best.objective))):
                best = res
    if best is None:
        counts = {}
        for row in table:
            counts[row["status"]] = counts.get(row["status"], 0) + 1
        raise SolverError(f"no feasible grid point ({counts})", status="infeasible", table=table)
    best.table = table
    return best


def predicted_response(param, y0_hat, Theta_hat, e):
    return response_from_param(param, y0_hat, Theta_hat, e)
