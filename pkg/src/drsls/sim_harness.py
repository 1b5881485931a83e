"""Closed-loop Monte Carlo comparison of nominal and robust SLS policies.

The true plant is a noisy state-space system; innovations are the residuals
of a fixed-gain observer run on that plant. Each model draw perturbs
``(A, B, C)`` until the lifted operators fall inside the mismatch budget,
synthesizes both policies on the perturbed model, and simulates them on the
true plant with shared noise.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .blocks import induced1
from .dro_synthesis import (
    DEFAULT_RHO_GRID,
    DEFAULT_SIGMA_GRID,
    ConstraintSpec,
    CostSpec,
    SampleSet,
    UncertaintyBudget,
    build_nominal_sls,
    grid_search,
    normalized_rho_grid,
)
from .errors import DrslsError, SamplingError, ValidationError
from .lti_model import (
    InnovationModel,
    PastWindow,
    free_response_offset,
    predictor_decay_check,
    predictor_markov_params,
    stacked_operators,
)
from .sls_core import response_from_param

log = logging.getLogger(__name__)

CLIP = 1e9
METRICS_HEADER = ("draw_id", "method", "open_loop_cost", "closed_loop_cost",
                  "violation_ratio_steps", "violated", "status", "epsilon_bar", "rho", "sigma")


@dataclass(frozen=True, eq=False)
class DisturbanceSpec:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).ravel()
        hi = np.asarray(self.upper, dtype=float).ravel()
        if lo.shape != hi.shape or np.any(lo > hi) or not np.all(np.isfinite(lo + hi)):
            raise ValidationError("need finite bounds with lower <= upper", field="noise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def symmetric(cls, size, half_width):
        return cls(np.full(size, -half_width), np.full(size, half_width))

    def draw(self, rng, steps):
        return rng.uniform(self.lower, self.upper, size=(steps, self.lower.size))


@dataclass(frozen=True, eq=False)
class TrueSystem:
    """``x+ = A x + B u + w``, ``y = C x + D u + v`` with observer gain ``L``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    L: np.ndarray
    w: DisturbanceSpec
    v: DisturbanceSpec

    def __post_init__(self):
        model = InnovationModel(self.A, self.B, self.C, self.D, self.L)
        for name in "ABCDL":
            object.__setattr__(self, name, getattr(model, name))
        if self.w.lower.size != model.n:
            raise ValidationError(f"process noise needs {model.n} entries", field="w")
        if self.v.lower.size != model.q:
            raise ValidationError(f"measurement noise needs {model.q} entries", field="v")

    @property
    def model(self):
        return InnovationModel(self.A, self.B, self.C, self.D, self.L)

    @classmethod
    def benchmark(cls, noise=0.01):
        """Two-state benchmark with ``B_2 = 0`` and ``L = [0.1, 0.1]^T``."""
        return cls(
            A=np.array([[0.7326, -0.0861], [0.1722, 0.9909]]),
            B=np.array([[0.0609], [0.0]]),
            C=np.array([[0.0, 1.4142]]),
            D=np.zeros((1, 1)),
            L=np.array([[0.1], [0.1]]),
            w=DisturbanceSpec.symmetric(2, noise),
            v=DisturbanceSpec.symmetric(1, noise),
        )

    def with_model(self, model):
        return TrueSystem(model.A, model.B, model.C, model.D, model.L, self.w, self.v)


@dataclass(frozen=True, eq=False)
class NoiseDraws:
    """Per-step noise, rows indexed by time."""

    w: np.ndarray
    v: np.ndarray

    @classmethod
    def draw(cls, sys, steps, rng):
        return cls(sys.w.draw(rng, steps), sys.v.draw(rng, steps))

    @classmethod
    def zeros(cls, sys, steps):
        return cls(np.zeros((steps, sys.A.shape[0])), np.zeros((steps, sys.C.shape[0])))


@dataclass(frozen=True, eq=False)
class WarmStart:
    """True state at ``t = 0`` plus the past window that led to it."""

    x0: np.ndarray
    xhat0: np.ndarray
    window: PastWindow
    x_past: np.ndarray
    y_past: np.ndarray
    u_past: np.ndarray
    e_past: np.ndarray


@dataclass(frozen=True, eq=False)
class TrajectoryRecord:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    e: np.ndarray
    violations: np.ndarray
    diverged: bool

    def horizon(self):
        """``(y, u)`` stacked over ``t = 0..T``."""
        k = self.t >= 0
        return self.y[k].ravel(), self.u[k].ravel()


@dataclass
class MetricsRow:
    draw_id: int
    method: str
    open_loop_cost: float
    closed_loop_cost: float
    violation_ratio_steps: float
    violated: bool
    status: str = "optimal"
    epsilon_bar: float = float("nan")
    rho: float = float("nan")
    sigma: float = float("nan")
    clipped: bool = False

    def as_csv_row(self):
        def num(v):
            return "nan" if v is None or not np.isfinite(v) else repr(float(v))

        return [str(self.draw_id), self.method, num(self.open_loop_cost),
                num(self.closed_loop_cost), num(self.violation_ratio_steps),
                str(bool(self.violated)).lower(), self.status, num(self.epsilon_bar),
                num(self.rho), num(self.sigma)]


def _run_observer_plant(sys, x, xhat, u, w, v):
    """One step of plant and observer; returns ``(y, e, x+, xhat+)``."""
    y = sys.C @ x + sys.D @ u + v
    e = y - sys.C @ xhat - sys.D @ u
    return y, e, sys.A @ x + sys.B @ u + w, sys.A @ xhat + sys.B @ u + sys.L @ e


def warm_up(sys, tau, rng, x_init=None, u_low=-1.0, u_high=1.0):
    """Drive the plant with uniform inputs for ``tau`` steps from ``x_init``.

    The observer starts from zero, so its state at ``t = 0`` equals the
    window reconstruction exactly.
    """
    n, m = sys.A.shape[0], sys.B.shape[1]
    x = np.zeros(n) if x_init is None else np.asarray(x_init, dtype=float)
    xhat = np.zeros(n)
    U = rng.uniform(u_low, u_high, size=(tau, m))
    noise = NoiseDraws.draw(sys, tau, rng)
    xs, ys, es = [], [], []
    for k in range(tau):
        xs.append(x)
        y, e, x, xhat = _run_observer_plant(sys, x, xhat, U[k], noise.w[k], noise.v[k])
        ys.append(y)
        es.append(e)
    return WarmStart(x, xhat, PastWindow(U.ravel(), np.ravel(ys)), np.array(xs), np.array(ys),
                     U, np.array(es))


def generate_innovation_samples(sys, T, tau, N, rng):
    """``N`` innovation stacks over ``t = 0..T`` and their trailing windows."""
    if N < 1:
        raise ValidationError(f"need N >= 1, got {N}", field="N")
    n, m = sys.A.shape[0], sys.B.shape[1]
    steps = tau + T + 1
    E, windows = [], []
    for _ in range(N):
        U = rng.uniform(-1.0, 1.0, size=(steps, m))
        noise = NoiseDraws.draw(sys, steps, rng)
        x, xhat = np.zeros(n), np.zeros(n)
        ys, es = [], []
        for k in range(steps):
            y, e, x, xhat = _run_observer_plant(sys, x, xhat, U[k], noise.w[k], noise.v[k])
            ys.append(y)
            es.append(e)
        E.append(np.ravel(es[tau:]))
        windows.append(PastWindow(U[:tau].ravel(), np.ravel(ys[:tau])))
    return SampleSet(np.array(E)), windows


def innovation_bound(sys, tau, T):
    """Worst-case ``|e_t|`` per output over the sample window.

    Interval propagation of the estimation error
    ``err+ = (A - L C) err + w - L v`` from zero, with ``e = C err + v``.
    """
    F = sys.A - sys.L @ sys.C
    w_abs = np.maximum(np.abs(sys.w.lower), np.abs(sys.w.upper))
    v_abs = np.maximum(np.abs(sys.v.lower), np.abs(sys.v.upper))
    # Accumulate |C F^k| applied to the per-step noise magnitude.
    bound = v_abs.copy()
    worst = bound.copy()
    P = np.eye(F.shape[0])
    for _ in range(tau + T):
        drive = np.abs(sys.C @ P) @ w_abs + np.abs(sys.C @ P @ sys.L) @ v_abs
        bound = bound + drive
        worst = np.maximum(worst, bound)
        P = F @ P
    return worst


@dataclass(frozen=True, eq=False)
class NominalDraw:
    model: InnovationModel
    ops: object
    y0: np.ndarray
    mismatch_norms: tuple
    tries: int


def mismatch_norms(ops_true, y0_true, ops_hat, y0_hat):
    return (induced1(ops_true.G - ops_hat.G), induced1(ops_true.Theta - ops_hat.Theta),
            float(np.abs(y0_true - y0_hat).sum()))


def sample_nominal_model(sys, budget, T, tau, window, rng, scale=0.02, max_tries=100000):
    """Rejection-sample a perturbed ``(A, B, C)`` inside the mismatch budget."""
    model = sys.model
    ops = stacked_operators(model, T)
    y0 = free_response_offset(ops, predictor_markov_params(model, tau), window)
    if budget.gamma1 == budget.gamma2 == budget.gamma3 == 0.0:
        return NominalDraw(model, ops, y0, (0.0, 0.0, 0.0), 0)
    limits = np.array(budget.gammas)
    for tries in range(1, max_tries + 1):
        cand = InnovationModel(
            model.A + rng.uniform(-scale, scale, model.A.shape),
            model.B + rng.uniform(-scale, scale, model.B.shape),
            model.C + rng.uniform(-scale, scale, model.C.shape),
            model.D,
            model.L,
        )
        ops_hat = stacked_operators(cand, T)
        y0_hat = free_response_offset(ops_hat, predictor_markov_params(cand, tau), window)
        norms = mismatch_norms(ops, y0, ops_hat, y0_hat)
        if np.all(np.array(norms) <= limits):
            return NominalDraw(cand, ops_hat, y0_hat, norms, tries)
    raise SamplingError(
        f"no perturbation within budget after {max_tries} tries at scale {scale} "
        f"(acceptance rate < {1.0 / max_tries:.1e})")


def simulate_closed_loop(sys, policy, start, noise, T, constraints=None):
    """Apply ``u_t = sum_{k<t} K_tk y_k + p_t`` to the true plant.

    Per-step violation flags cover ``t = 0..T`` and are filled in when
    ``constraints`` is given.
    """
    n, m, q = sys.A.shape[0], sys.B.shape[1], sys.C.shape[0]
    nb = T + 1
    x, xhat = start.x0.copy(), start.xhat0.copy()
    xs, ys, us, es = [], [], [], []
    y_hist = np.zeros(nb * q)
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(nb):
            u = policy.K[t * m:(t + 1) * m, :t * q] @ y_hist[:t * q] + policy.p[t * m:(t + 1) * m]
            xs.append(x)
            y, e, x, xhat = _run_observer_plant(sys, x, xhat, u, noise.w[t], noise.v[t])
            y_hist[t * q:(t + 1) * q] = y
            ys.append(y)
            us.append(u)
            es.append(e)
    tau = start.u_past.shape[0]
    t_axis = np.arange(-tau, nb)
    X = np.vstack([start.x_past, np.array(xs)]) if tau else np.array(xs)
    Y = np.vstack([start.y_past, np.array(ys)]) if tau else np.array(ys)
    U = np.vstack([start.u_past, np.array(us)]) if tau else np.array(us)
    E = np.vstack([start.e_past, np.array(es)]) if tau else np.array(es)
    diverged = bool(not np.all(np.isfinite(Y)) or np.abs(np.nan_to_num(Y, nan=np.inf)).max() > CLIP
                    or not np.all(np.isfinite(U)) or np.abs(np.nan_to_num(U, nan=np.inf)).max() > CLIP)
    flags = np.zeros(nb, dtype=bool)
    if constraints is not None:
        eta = np.concatenate([_clipped(np.ravel(ys)), _clipped(np.ravel(us))])
        flags = constraints.values(eta) > 0.0
    return TrajectoryRecord(t_axis, X, Y, U, E, flags, diverged)


def simulate_innovation_model(model, policy, x0, e, T):
    """Closed loop on the innovation-form model driven by a given ``e``."""
    m, q = model.m, model.q
    x = np.asarray(x0, dtype=float)
    e = np.asarray(e, dtype=float).reshape(T + 1, q)
    ys, us = [], []
    y_hist = np.zeros((T + 1) * q)
    for t in range(T + 1):
        u = policy.K[t * m:(t + 1) * m, :t * q] @ y_hist[:t * q] + policy.p[t * m:(t + 1) * m]
        y = model.C @ x + model.D @ u + e[t]
        x = model.A @ x + model.B @ u + model.L @ e[t]
        y_hist[t * q:(t + 1) * q] = y
        ys.append(y)
        us.append(u)
    return np.ravel(ys), np.ravel(us)


def _clipped(v):
    return np.clip(np.nan_to_num(v, nan=CLIP, posinf=CLIP, neginf=-CLIP), -CLIP, CLIP)


def evaluate_metrics(traj, predicted, cost, constraints, method="", draw_id=0):
    y, u = traj.horizon()
    eta = np.concatenate([_clipped(y), _clipped(u)])
    stage = constraints.values(eta)
    violated_steps = stage > 0.0
    return MetricsRow(
        draw_id=draw_id,
        method=method,
        open_loop_cost=cost(predicted.eta),
        closed_loop_cost=cost(eta),
        violation_ratio_steps=float(violated_steps.mean()),
        violated=bool(violated_steps.any()),
        clipped=traj.diverged,
    )


# ----------------------------------------------------------- Monte Carlo

@dataclass
class MonteCarloConfig:
    system: TrueSystem
    T: int = 15
    tau: int = 25
    N: int = 100
    M: int = 50
    budget: UncertaintyBudget = field(
        default_factory=lambda: UncertaintyBudget(0.01, 0.01, 0.01, 0.005))
    rho_grid: tuple = DEFAULT_RHO_GRID
    rho_normalized: bool = True
    sigma_grid: tuple = DEFAULT_SIGMA_GRID
    y_weight: float = 1.0
    u_weight: float = 0.1
    y_min: float = -0.01
    u_max: float = 1.0
    seed: int = 0
    perturbation_scale: float = 0.002
    max_tries: int = 100000
    window_floor: float = 0.1
    window_tries: int = 10000
    workers: int = 1

    def rho_values(self):
        if self.rho_normalized:
            return normalized_rho_grid(self.rho_grid, self.budget)
        return tuple(sorted(self.rho_grid))

    def cost(self):
        q, m = self.system.C.shape[0], self.system.B.shape[1]
        return CostSpec.output_input(self.T, q, m, self.y_weight, self.u_weight)

    def constraints(self):
        q, m = self.system.C.shape[0], self.system.B.shape[1]
        return ConstraintSpec.output_input_bounds(self.T, q, m, self.y_min, self.u_max)


def reference_start(sys, T, tau, rng, floor=0.0, max_tries=10000):
    """Seeded warm-up whose free output response starts at or above ``floor``.

    Outputs that no input can reach within the horizon are fixed by the
    window; the floor keeps that uncontrollable prefix inside the output
    constraint so the synthesis problems are feasible.
    """
    model = sys.model
    ops = stacked_operators(model, T)
    bank = predictor_markov_params(model, tau)
    q = model.q
    fixed = _uncontrollable_steps(ops.G, q, model.m)
    for _ in range(max_tries):
        start = warm_up(sys, tau, rng)
        y0 = free_response_offset(ops, bank, start.window)
        if fixed == 0 or np.all(y0[:fixed * q] >= floor):
            return start
    raise SamplingError(f"no warm-up window met the free-response floor {floor}")


def _uncontrollable_steps(G, q, m):
    """Number of leading output blocks with no input influence."""
    nb = G.shape[0] // q
    for t in range(nb):
        if np.any(G[t * q:(t + 1) * q] != 0.0):
            return t
    return nb


@dataclass(frozen=True, eq=False)
class _DrawTask:
    draw_id: int
    seed_seq: np.random.SeedSequence
    config: MonteCarloConfig
    samples: SampleSet
    start: WarmStart


def _predicted(result, draw, samples):
    return response_from_param(result.param, draw.y0, draw.ops.Theta, samples.mean())


def _run_draw(task):
    cfg = task.config
    sys = cfg.system
    cost, constraints = cfg.cost(), cfg.constraints()
    model_rng, noise_rng = (np.random.default_rng(s) for s in task.seed_seq.spawn(2))
    rows, trajectories = [], {}
    try:
        draw = sample_nominal_model(sys, cfg.budget, cfg.T, cfg.tau, task.start.window, model_rng,
                                    cfg.perturbation_scale, cfg.max_tries)
    except SamplingError as exc:
        log.warning("draw %d: %s", task.draw_id, exc)
        for method in ("N-SLS", "DR-SLS"):
            rows.append(MetricsRow(task.draw_id, method, np.nan, np.nan, np.nan, False,
                                   status="sampling-failure"))
        return rows, trajectories
    noise = NoiseDraws.draw(sys, cfg.T + 1, noise_rng)
    for method in ("N-SLS", "DR-SLS"):
        try:
            if method == "N-SLS":
                res = build_nominal_sls(draw.ops, draw.y0, task.samples.mean(), cost, constraints)
            else:
                res = grid_search(cfg.rho_values(), cfg.sigma_grid, draw.ops, draw.y0, task.samples,
                                  cfg.budget, cost, constraints)
        except DrslsError as exc:
            log.warning("draw %d %s: %s", task.draw_id, method, exc)
            status = getattr(exc, "status", None) or "failure"
            rows.append(MetricsRow(task.draw_id, method, np.nan, np.nan, np.nan, False,
                                   status=str(status)))
            continue
        traj = simulate_closed_loop(sys, res.policy, task.start, noise, cfg.T, constraints)
        row = evaluate_metrics(traj, _predicted(res, draw, task.samples), cost, constraints,
                               method, task.draw_id)
        row.status = res.status
        row.epsilon_bar = res.epsilon_bar if method == "DR-SLS" else np.nan
        if res.caps is not None:
            row.rho, row.sigma = res.caps.rho, res.caps.sigma
        rows.append(row)
        trajectories[method] = traj
    return rows, trajectories


@dataclass
class MonteCarloResult:
    rows: list
    samples: SampleSet
    start: WarmStart
    trajectories: dict
    decay_residual: float


def monte_carlo(cfg):
    """Run ``cfg.M`` independent model draws; rows come back in draw order."""
    if cfg.M < 1:
        raise ValidationError(f"need M >= 1, got {cfg.M}", field="M")
    root = np.random.SeedSequence(cfg.seed)
    sample_ss, window_ss, draw_ss = root.spawn(3)
    samples, _ = generate_innovation_samples(cfg.system, cfg.T, cfg.tau, cfg.N,
                                             np.random.default_rng(sample_ss))
    start = reference_start(cfg.system, cfg.T, cfg.tau, np.random.default_rng(window_ss),
                            cfg.window_floor, cfg.window_tries)
    tasks = [_DrawTask(i, ss, cfg, samples, start) for i, ss in enumerate(draw_ss.spawn(cfg.M))]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            outputs = list(pool.map(_run_draw, tasks))
    else:
        outputs = [_run_draw(t) for t in tasks]
    rows, trajectories = [], {}
    for task, (draw_rows, trajs) in zip(tasks, outputs):
        rows.extend(draw_rows)
        for method, traj in trajs.items():
            trajectories[(task.draw_id, method)] = traj
    return MonteCarloResult(rows, samples, start, trajectories,
                            predictor_decay_check(cfg.system.model, cfg.tau))


def metrics_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for row in rows:
        writer.writerow(row.as_csv_row())
    return buf.getvalue()


def trajectories_csv(trajectories):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("draw_id", "method", "t", "signal", "value"))
    for (draw_id, method), traj in sorted(trajectories.items()):
        for k, t in enumerate(traj.t):
            for name, arr in (("y", traj.y), ("u", traj.u)):
                for j, v in enumerate(np.atleast_1d(arr[k])):
                    signal = name if arr.shape[1] == 1 else f"{name}{j}"
                    writer.writerow((draw_id, method, int(t), signal, repr(float(v))))
    return buf.getvalue()


def summarize(rows):
    """Per-method means and violation counts."""
    out = {}
    for method in sorted({r.method for r in rows}):
        sel = [r for r in rows if r.method == method]
        ok = [r for r in sel if r.status == "optimal"]
        out[method] = {
            "draws": len(sel),
            "solved": len(ok),
            "violated": sum(r.violated for r in ok),
            "mean_open_loop_cost": float(np.mean([r.open_loop_cost for r in ok])) if ok else None,
            "mean_closed_loop_cost": float(np.mean([r.closed_loop_cost for r in ok])) if ok else None,
            "median_closed_loop_cost": float(np.median([r.closed_loop_cost for r in ok]))
            if ok else None,
            "mean_violation_ratio_steps": float(np.mean([r.violation_ratio_steps for r in ok]))
            if ok else None,
            "clipped": sum(r.clipped for r in ok),
        }
    return out
