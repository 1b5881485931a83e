"""Command-line entry point: synthesis, Monte Carlo runs, validation suites.

Every run is driven by one JSON config document; flags only pick the
command, the config file and overrides for the seed and output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dro_synthesis as ds
from . import sim_harness as sh
from .blocks import induced1, lower_mask
from .errors import (
    ConditioningError,
    DrslsError,
    InternalConsistencyError,
    SamplingError,
    SolverError,
    ValidationError,
)
from .lti_model import (
    DEFAULT_DECAY_THRESHOLD,
    InnovationModel,
    horizon_operators,
    predictor_decay_check,
)
from .sls_core import (
    AffinePolicy,
    extract_policy,
    params_from_policy,
    random_mismatch,
    validate_subspace,
)

log = logging.getLogger("drsls")

EXIT_OK, EXIT_VALIDATION, EXIT_SOLVER, EXIT_SUITE = 0, 2, 3, 4


# ----------------------------------------------------------------- config

def _number(doc, key, default, field_name, *, integer=False, minimum=None, strict=False):
    value = doc.get(key, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"expected a number, got {value!r}", field=field_name)
    if integer and int(value) != value:
        raise ValidationError(f"expected an integer, got {value!r}", field=field_name)
    if not math.isfinite(value):
        raise ValidationError("must be finite", field=field_name)
    if minimum is not None and (value <= minimum if strict else value < minimum):
        op = ">" if strict else ">="
        raise ValidationError(f"must be {op} {minimum}, got {value}", field=field_name)
    return int(value) if integer else float(value)


def _number_list(doc, key, default, field_name):
    value = doc.get(key, default)
    if not isinstance(value, (list, tuple)) or not value:
        raise ValidationError("expected a nonempty list of numbers", field=field_name)
    return tuple(_number({"v": v}, "v", None, f"{field_name}[{i}]") for i, v in enumerate(value))


def _interval(doc, size, field_name):
    if not isinstance(doc, dict):
        raise ValidationError("expected an object with lower/upper", field=field_name)
    lo = np.asarray(doc.get("lower"), dtype=float).ravel()
    hi = np.asarray(doc.get("upper"), dtype=float).ravel()
    if lo.size != size or hi.size != size:
        raise ValidationError(f"lower/upper need {size} entries", field=field_name)
    try:
        return sh.DisturbanceSpec(lo, hi)
    except ValidationError as exc:
        raise ValidationError(str(exc).split(": ", 1)[-1], field=field_name) from None


def system_from_dict(doc):
    """True plant: an innovation model document plus ``w``/``v`` noise intervals."""
    if not isinstance(doc, dict):
        raise ValidationError("system must be a JSON object", field="system")
    model = InnovationModel.from_dict(doc)
    return sh.TrueSystem(model.A, model.B, model.C, model.D, model.L,
                         _interval(doc.get("w"), model.n, "system.w"),
                         _interval(doc.get("v"), model.q, "system.v"))


def system_to_dict(sys_):
    doc = sys_.model.to_dict()
    doc["w"] = {"lower": sys_.w.lower.tolist(), "upper": sys_.w.upper.tolist()}
    doc["v"] = {"lower": sys_.v.lower.tolist(), "upper": sys_.v.upper.tolist()}
    return doc


@dataclass
class ExperimentConfig:
    system: sh.TrueSystem
    system_path: str = ""
    T: int = 15
    tau: int = 25
    N: int = 100
    M: int = 50
    budget: ds.UncertaintyBudget = field(
        default_factory=lambda: ds.UncertaintyBudget(0.01, 0.01, 0.01, 0.005))
    rho_grid: tuple = ds.DEFAULT_RHO_GRID
    rho_normalized: bool = True
    sigma_grid: tuple = ds.DEFAULT_SIGMA_GRID
    y_weight: float = 1.0
    u_weight: float = 0.1
    y_min: float = -0.01
    u_max: float = 1.0
    seed: int = 0
    output_dir: str = "out"
    perturbation_scale: float = 0.002
    max_tries: int = 100000
    window_floor: float = 0.1
    workers: int = 1
    export_trajectories: bool = False

    @classmethod
    def from_dict(cls, doc, base_dir=Path(".")):
        if not isinstance(doc, dict):
            raise ValidationError("config must be a JSON object", field="config")
        known = {"system", "T", "tau", "N", "M", "budget", "rho_grid", "rho_normalized",
                 "sigma_grid", "cost", "constraints", "seed", "output_dir", "perturbation_scale",
                 "max_tries", "window_floor", "workers", "export_trajectories"}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValidationError("unknown key", field=unknown[0])
        if "system" not in doc:
            raise ValidationError("missing", field="system")
        system_doc, system_path = doc["system"], ""
        if isinstance(system_doc, str):
            system_path = system_doc
            path = (Path(base_dir) / system_doc)
            try:
                system_doc = json.loads(path.read_text())
            except FileNotFoundError:
                raise ValidationError(f"file not found: {path}", field="system") from None
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path} is not valid JSON ({exc})", field="system") from None
        try:
            system = system_from_dict(system_doc)
        except ValidationError as exc:
            raise ValidationError(str(exc), field="system") from None

        budget_doc = doc.get("budget", {})
        if not isinstance(budget_doc, dict):
            raise ValidationError("expected an object", field="budget")
        budget = ds.UncertaintyBudget(*(
            _number(budget_doc, k, d, f"budget.{k}", minimum=0.0)
            for k, d in (("gamma1", 0.01), ("gamma2", 0.01), ("gamma3", 0.01), ("kappa", 0.005))))
        rho_grid = _number_list(doc, "rho_grid", ds.DEFAULT_RHO_GRID, "rho_grid")
        for i, r in enumerate(rho_grid):
            if not 0.0 <= r < 1.0:
                raise ValidationError(f"must lie in [0, 1), got {r}", field=f"rho_grid[{i}]")
        rho_normalized = doc.get("rho_normalized", True)
        if not isinstance(rho_normalized, bool):
            raise ValidationError("expected true or false", field="rho_normalized")
        sigma_grid = _number_list(doc, "sigma_grid", ds.DEFAULT_SIGMA_GRID, "sigma_grid")
        for i, s in enumerate(sigma_grid):
            if not s > 0.0:
                raise ValidationError(f"must be positive, got {s}", field=f"sigma_grid[{i}]")
        cost = doc.get("cost", {})
        cons = doc.get("constraints", {})
        for name, sub in (("cost", cost), ("constraints", cons)):
            if not isinstance(sub, dict):
                raise ValidationError("expected an object", field=name)
        seed = _number(doc, "seed", 0, "seed", integer=True, minimum=0)
        if seed >= 2 ** 64:
            raise ValidationError("must fit in 64 bits", field="seed")
        export = doc.get("export_trajectories", False)
        if not isinstance(export, bool):
            raise ValidationError("expected true or false", field="export_trajectories")
        out = doc.get("output_dir", "out")
        if not isinstance(out, str):
            raise ValidationError("expected a path string", field="output_dir")
        return cls(
            system=system,
            system_path=system_path,
            T=_number(doc, "T", 15, "T", integer=True, minimum=1),
            tau=_number(doc, "tau", 25, "tau", integer=True, minimum=1),
            N=_number(doc, "N", 100, "N", integer=True, minimum=1),
            M=_number(doc, "M", 50, "M", integer=True, minimum=1),
            budget=budget,
            rho_grid=rho_grid,
            rho_normalized=rho_normalized,
            sigma_grid=sigma_grid,
            y_weight=_number(cost, "y_weight", 1.0, "cost.y_weight", minimum=0.0),
            u_weight=_number(cost, "u_weight", 0.1, "cost.u_weight", minimum=0.0),
            y_min=_number(cons, "y_min", -0.01, "constraints.y_min"),
            u_max=_number(cons, "u_max", 1.0, "constraints.u_max", minimum=0.0),
            seed=seed,
            output_dir=out,
            perturbation_scale=_number(doc, "perturbation_scale", 0.002, "perturbation_scale",
                                       minimum=0.0, strict=True),
            max_tries=_number(doc, "max_tries", 100000, "max_tries", integer=True, minimum=1),
            window_floor=_number(doc, "window_floor", 0.1, "window_floor"),
            workers=_number(doc, "workers", 1, "workers", integer=True, minimum=1),
            export_trajectories=export,
        )

    def to_dict(self):
        """Every numeric setting, with the plant inlined."""
        return {
            "system": system_to_dict(self.system),
            "system_path": self.system_path,
            "T": self.T, "tau": self.tau, "N": self.N, "M": self.M,
            "budget": {"gamma1": self.budget.gamma1, "gamma2": self.budget.gamma2,
                       "gamma3": self.budget.gamma3, "kappa": self.budget.kappa},
            "rho_grid": list(self.rho_grid),
            "rho_normalized": self.rho_normalized,
            "rho_values": list(self.monte_carlo().rho_values()),
            "sigma_grid": list(self.sigma_grid),
            "cost": {"y_weight": self.y_weight, "u_weight": self.u_weight},
            "constraints": {"y_min": self.y_min, "u_max": self.u_max},
            "seed": self.seed,
            "output_dir": self.output_dir,
            "perturbation_scale": self.perturbation_scale,
            "max_tries": self.max_tries,
            "window_floor": self.window_floor,
            "workers": self.workers,
            "export_trajectories": self.export_trajectories,
            "clip_magnitude": sh.CLIP,
        }

    def monte_carlo(self):
        return sh.MonteCarloConfig(
            system=self.system, T=self.T, tau=self.tau, N=self.N, M=self.M, budget=self.budget,
            rho_grid=self.rho_grid, rho_normalized=self.rho_normalized,
            sigma_grid=self.sigma_grid, y_weight=self.y_weight, u_weight=self.u_weight,
            y_min=self.y_min, u_max=self.u_max, seed=self.seed,
            perturbation_scale=self.perturbation_scale, max_tries=self.max_tries,
            window_floor=self.window_floor, workers=self.workers)


def load_config(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ValidationError(f"file not found: {path}", field="config") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"not valid JSON ({exc})", field="config") from None
    return ExperimentConfig.from_dict(doc, base_dir=path.parent)


# ---------------------------------------------------------------- helpers

def _clean(value):
    """JSON-safe copy: numpy scalars/arrays to lists, non-finite floats to None."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, (np.floating, float)):
        return float(value) if math.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def _write_json(path, doc):
    path.write_text(json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n")


def _problem(cfg):
    """Samples, reference start and operators of the configured plant."""
    mc = cfg.monte_carlo()
    sample_ss, window_ss, _ = np.random.SeedSequence(cfg.seed).spawn(3)
    samples, windows = sh.generate_innovation_samples(cfg.system, cfg.T, cfg.tau, cfg.N,
                                                      np.random.default_rng(sample_ss))
    start = sh.reference_start(cfg.system, cfg.T, cfg.tau, np.random.default_rng(window_ss),
                               cfg.window_floor)
    ops, _, y0 = horizon_operators(cfg.system.model, cfg.T, cfg.tau, start.window)
    return mc, samples, windows, start, ops, y0


def _decay_warning(cfg):
    residual = predictor_decay_check(cfg.system.model, cfg.tau)
    if residual > DEFAULT_DECAY_THRESHOLD:
        log.warning("||(A - L C)^tau|| = %.3e exceeds %.0e; tau may be too small",
                    residual, DEFAULT_DECAY_THRESHOLD)
    return residual


def _out_dir(cfg):
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------- commands

def cmd_synth(cfg, mode="drsls"):
    mc, samples, _, _, ops, y0 = _problem(cfg)
    cost, constraints = mc.cost(), mc.constraints()
    if mode == "nominal":
        result = ds.build_nominal_sls(ops, y0, samples.mean(), cost, constraints)
    else:
        result = ds.grid_search(mc.rho_values(), cfg.sigma_grid, ops, y0, samples, cfg.budget,
                                cost, constraints)
    out = _out_dir(cfg)
    doc = result.to_dict()
    doc["config"] = cfg.to_dict()
    _write_json(out / f"synth_{mode}.json", doc)
    np.savetxt(out / f"policy_{mode}_K.csv", result.policy.K, delimiter=",", fmt="%.17g")
    np.savetxt(out / f"policy_{mode}_p.csv", result.policy.p, delimiter=",", fmt="%.17g")
    print(f"status={result.status} objective={result.objective:.10g} "
          f"epsilon_bar={result.epsilon_bar:.10g}"
          + (f" rho={result.caps.rho:g} sigma={result.caps.sigma:g}" if result.caps else ""))
    return result


def cmd_montecarlo(cfg):
    mc = cfg.monte_carlo()
    result = sh.monte_carlo(mc)
    out = _out_dir(cfg)
    (out / "metrics.csv").write_text(sh.metrics_csv(result.rows))
    if cfg.export_trajectories:
        (out / "trajectories.csv").write_text(sh.trajectories_csv(result.trajectories))
    summary = {
        "methods": sh.summarize(result.rows),
        "decay_residual": result.decay_residual,
        "clipping": f"divergent signals clipped at magnitude {sh.CLIP:g} for cost reporting",
        "violation_definition": "violated = any stage g_k > 0 on t = 0..T; "
                                "violation_ratio_steps = violated stages / (T + 1)",
        "config": cfg.to_dict(),
    }
    _write_json(out / "summary.json", summary)
    for method, stats in summary["methods"].items():
        print(f"{method}: solved {stats['solved']}/{stats['draws']}, "
              f"violated {stats['violated']}/{stats['solved']}, "
              f"median closed-loop cost {stats['median_closed_loop_cost']}")
    return result


def _suite_round_trip(cfg, ops, y0, samples, rng):
    nb, m, q = ops.nblk, ops.m, ops.q
    worst_k = worst_res = 0.0
    for _ in range(20):
        K = np.where(lower_mask(nb, m, q, strict=True), rng.normal(size=(nb * m, nb * q)), 0.0)
        p = rng.normal(size=nb * m)
        pol = AffinePolicy(K, p, cfg.T, m, q)
        param = params_from_policy(pol, ops.G)
        back = extract_policy(param)
        worst_k = max(worst_k, float(np.abs(back.K - K).max()), float(np.abs(back.p - p).max()))
        worst_res = max(worst_res, validate_subspace(ops.G, param))
    return worst_k <= 1e-8 and worst_res <= 1e-10, f"max error {worst_k:.2e}, residual {worst_res:.2e}"


def _suite_subspace(cfg, ops, y0, samples, mc):
    cost, constraints = mc.cost(), mc.constraints()
    res = ds.build_nominal_sls(ops, y0, samples.mean(), cost, constraints)
    residual = validate_subspace(ops.G, res.param)
    return residual <= 1e-8, f"nominal solution residual {residual:.2e}", res


def _suite_term_bounds(cfg, ops, y0, samples, param, rng, draws=200):
    """Each of the four shift-term bounds on random in-budget mismatches."""
    rho = cfg.budget.gamma1 * induced1(param.Phi_u)
    if rho >= 1.0:
        return True, f"skipped: gamma1 ||Phi_u|| = {rho:.3g} leaves the small-gain premise"
    caps = ds.GainCaps(rho, max(induced1(param.Phi_y), 1e-12))
    failures = 0
    for _ in range(draws):
        mm = random_mismatch(cfg.T, ops.m, ops.q, cfg.budget.gammas, rng)
        terms = ds.radius_terms(param, mm, ops, y0, samples, cfg.budget, caps)
        failures += int(any(np.any(lhs > rhs * (1 + 1e-9) + 1e-12) for lhs, rhs in terms.values()))
    return failures == 0, f"{failures}/{draws} draws broke a term bound"


def cmd_validate(cfg):
    """Property suites on the configured problem; returns ``(ok, report)``."""
    residual = _decay_warning(cfg)
    mc, samples, _, _, ops, y0 = _problem(cfg)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(4)[3])
    report = []
    ok, msg = _suite_round_trip(cfg, ops, y0, samples, rng)
    report.append(("policy round trip", ok, msg))
    try:
        ok, msg, nominal = _suite_subspace(cfg, ops, y0, samples, mc)
    except SolverError as exc:
        ok, msg, nominal = False, str(exc), None
    report.append(("subspace residual", ok, msg))
    if nominal is not None:
        ok, msg = _suite_term_bounds(cfg, ops, y0, samples, nominal.param, rng)
        report.append(("radius term bounds", ok, msg))
    report.append(("predictor decay", True,
                   f"||(A-LC)^tau|| = {residual:.3e}"
                   + (" (warning: above threshold)" if residual > DEFAULT_DECAY_THRESHOLD else "")))
    for name, passed, msg in report:
        print(f"[{'PASS' if passed else 'FAIL'}] {name}: {msg}")
    return all(p for _, p, _ in report), report


def cmd_sample_innovations(cfg):
    _, samples, windows, start, _, y0 = _problem(cfg)
    out = _out_dir(cfg)
    np.savetxt(out / "innovations.csv", samples.E, delimiter=",", fmt="%.17g")
    np.savetxt(out / "windows.csv",
               np.array([np.concatenate([w.u_minus, w.y_minus]) for w in windows]),
               delimiter=",", fmt="%.17g")
    _write_json(out / "reference_window.json",
                {"u_minus": start.window.u_minus, "y_minus": start.window.y_minus,
                 "x0": start.x0, "y0": y0, "config": cfg.to_dict()})
    print(f"wrote {samples.N} innovation samples of length {samples.E.shape[1]}")
    return samples


# -------------------------------------------------------------------- main

def build_parser():
    parser = argparse.ArgumentParser(prog="drsls", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", "montecarlo", "validate", "sample-innovations"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, metavar="PATH")
        p.add_argument("--seed", type=int, metavar="U64")
        p.add_argument("--out", metavar="DIR")
        if name == "synth":
            p.add_argument("--mode", choices=("nominal", "drsls"), default="drsls")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise ValidationError("must be a 64-bit unsigned integer", field="--seed")
            cfg.seed = args.seed
        if args.out is not None:
            cfg.output_dir = args.out
        if args.command == "synth":
            cmd_synth(cfg, args.mode)
        elif args.command == "montecarlo":
            cmd_montecarlo(cfg)
        elif args.command == "validate":
            ok, _ = cmd_validate(cfg)
            if not ok:
                return EXIT_SUITE
        else:
            cmd_sample_innovations(cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        for row in exc.table or []:
            print(f"  rho={row['rho']:g} sigma={row['sigma']:g} status={row['status']}",
                  file=sys.stderr)
        return EXIT_SOLVER
    except (SamplingError, ConditioningError, InternalConsistencyError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except DrslsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
