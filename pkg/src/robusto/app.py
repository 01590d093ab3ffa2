"""Run orchestration for the command-line modes.

Each ``run_*`` function takes a validated :class:`RunConfig`, writes its
artifacts into ``config.io.output_dir`` and returns the summary dict.
Percentages follow one convention throughout: ``100 * worst / reference``
where the reference is the same design evaluated at ``delta = 0.5``.
"""

from __future__ import annotations

import csv
import logging
import time

import numpy as np

from . import mma, oracle, outputs
from .adjoint import compliance_gradient
from .config import RunConfig
from .fem import FEModel, LoadCase, StructuredGrid, cantilever
from .inner import DefectConstraints, solve_inner
from .material import MaterialParams
from .pipeline import DesignProblem, InnerSettings

logger = logging.getLogger(__name__)


class RunError(RuntimeError):
    pass


def material_params(cfg: RunConfig) -> MaterialParams:
    m = cfg.material
    return MaterialParams(E0=m.E0, ED=m.ED, nu=m.nu, p=m.p, rho_min=m.rho_min,
                          plane_model=m.plane_model)


def build_problem(cfg: RunConfig, D=None) -> DesignProblem:
    g = cfg.grid
    grid = StructuredGrid.from_domain(g.nx, g.ny, g.width, g.height)
    load = cantilever(grid, load_extent=cfg.load.extent)
    i = cfg.inner
    return DesignProblem(grid, load, material_params(cfg), cfg.radius, volfrac=cfg.constraints.V,
                         D=cfg.constraints.D if D is None else D,
                         mean_norm=cfg.constraints.mean_norm,
                         inner=InnerSettings(i.mu_star, i.kkt_tol, i.max_newton, i.solver))


def mma_config(cfg: RunConfig) -> mma.MmaConfig:
    o = cfg.outer
    return mma.MmaConfig(max_iters=o.max_iters, change_tol=o.change_tol, move_limit=o.move_limit,
                         asyinit=o.asyinit, conservative=o.conservative)


def _load_design(cfg: RunConfig, problem: DesignProblem):
    path = cfg.io.input_density_path
    if not path:
        return None
    _, _, rho = outputs.read_density(path, problem.grid)
    lo, hi = problem.bounds
    if np.any(rho < lo - 1e-12) or np.any(rho > hi + 1e-12):
        raise RunError(f"{path}: densities outside [{lo}, {hi}]")
    return np.clip(rho, lo, hi)


def _progress(label):
    def cb(k, x, ev, rec):
        logger.info("%s iter %d: objective %.10g volume %.6f change %.3e", label, k, ev.f,
                    rec["volume"], rec["design_change_inf"])
    return cb


def _optimize(problem: DesignProblem, evaluate, x0, cfg: RunConfig, label):
    try:
        return mma.run(evaluate, x0, *problem.bounds, mma_config(cfg), _progress(label))
    except mma.MmaError as exc:
        raise RunError(f"{label} optimization failed: {exc}") from exc


def evaluate_design(problem: DesignProblem, x, D=None):
    """Reference and worst-case compliance of design ``x`` (cold inner solve)."""
    rho = problem.physical(x)
    ref = problem.reference_compliance(rho)
    sol, _ = problem.solve_worst_case(rho, D=D)
    return {
        "reference_compliance": ref,
        "worst_case_compliance": sol.compliance,
        "worst_case_ratio_percent": 100.0 * sol.compliance / ref,
        "inner_newton_iters": sol.newton_iters,
        "inner_kkt_residual": sol.kkt_residual_inf,
        "equilibrium_residual": sol.equilibrium_residual,
    }, sol, rho


def run_baseline(cfg: RunConfig):
    t0 = time.perf_counter()
    problem = build_problem(cfg)
    x, history = _optimize(problem, problem.nominal, np.full(problem.n, cfg.constraints.V), cfg,
                           "baseline")
    rho = problem.physical(x)
    summary = {
        "mode": "baseline",
        "reference_compliance": problem.reference_compliance(rho),
        "volume": problem.volume(rho),
        "outer_iterations": len(history) - 1,
        "wall_time_s": time.perf_counter() - t0,
        "config": cfg.to_dict(),
    }
    outputs.write_outputs(cfg.io.output_dir, problem.grid, x, rho, history, summary)
    return summary


def run_evaluate(cfg: RunConfig):
    t0 = time.perf_counter()
    problem = build_problem(cfg)
    x = _load_design(cfg, problem)
    if x is None:
        raise RunError("evaluate needs io.input_density_path")
    result, sol, rho = evaluate_design(problem, x)
    summary = {"mode": "evaluate", **result, "D": problem.D, "volume": problem.volume(rho),
               "wall_time_s": time.perf_counter() - t0, "config": cfg.to_dict()}
    outputs.write_outputs(cfg.io.output_dir, problem.grid, x, rho, None, summary, delta=sol.delta)
    return summary


def run_robust(cfg: RunConfig):
    t0 = time.perf_counter()
    problem = build_problem(cfg)
    baseline = _load_design(cfg, problem)
    x0 = np.full(problem.n, cfg.constraints.V) if baseline is None else baseline
    x, history = _optimize(problem, problem.robust, x0, cfg, "robust")
    rho = problem.physical(x)
    sol = problem.last_inner
    ref = problem.reference_compliance(rho)
    summary = {
        "mode": "robust",
        "D": problem.D,
        "reference_compliance": ref,
        "worst_case_compliance": sol.compliance,
        "worst_case_ratio_percent": 100.0 * sol.compliance / ref,
        "volume": problem.volume(rho),
        "outer_iterations": len(history) - 1,
        "inner_newton_iters_median_from_10":
            float(np.median([r["inner_newton_iters"] for r in history[10:]]))
            if len(history) > 10 else None,
        "inner_kkt_residual_max": max(r["inner_kkt_residual"] for r in history),
        "equilibrium_residual_max": max(r["equilibrium_residual"] for r in history),
        "optimization_time_s": time.perf_counter() - t0,
    }
    if baseline is not None:
        base, _, _ = evaluate_design(problem, baseline)
        summary["baseline"] = base
        summary["improvement_percentage_points"] = (
            base["worst_case_ratio_percent"] - summary["worst_case_ratio_percent"])
        summary["worst_case_percent_of_baseline_reference"] = (
            100.0 * sol.compliance / base["reference_compliance"])
    summary["wall_time_s"] = time.perf_counter() - t0
    summary["config"] = cfg.to_dict()
    outputs.write_outputs(cfg.io.output_dir, problem.grid, x, rho, history, summary,
                          delta=sol.delta)
    return summary


def run_gradcheck(cfg: RunConfig):
    """Adjoint gradient against central differences at a random design.

    Returns rows ``(element, analytic, numeric, rel_error)``; every
    evaluation is a cold inner solve at ``gradcheck.tol``.
    """
    problem = build_problem(cfg)
    rng = np.random.default_rng(cfg.run.seed)
    x = _load_design(cfg, problem)
    if x is None:
        x = rng.uniform(0.3, 1.0, problem.n)
    tol = cfg.gradcheck.tol
    k = min(cfg.gradcheck.probes, problem.n)
    probes = np.sort(rng.choice(problem.n, size=k, replace=False))

    rho = problem.physical(x)
    sol, cons = problem.solve_worst_case(rho, tol=tol)
    analytic = compliance_gradient(problem.model, problem.filter, sol, cons, rho)[probes]

    def objective(xx):
        return problem.solve_worst_case(problem.physical(xx), tol=tol)[0].compliance

    numeric = oracle.fd_gradient(objective, x, probes, cfg.gradcheck.h)
    rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), np.finfo(float).tiny)
    return [(int(e), float(a), float(n), float(r))
            for e, a, n, r in zip(probes, analytic, numeric, rel)]


def oracle_instances(params: MaterialParams):
    yield oracle.tip_loaded(2, 1, params=params), np.ones(2)
    yield oracle.tip_loaded(2, 1, params=params, name="tip_2x1_graded"), np.array([1.0, 0.7])
    yield oracle.tip_loaded(3, 1, params=params), np.ones(3)
    yield oracle.tip_loaded(3, 1, params=params, name="tip_3x1_graded"), np.array([1.0, 0.8, 0.6])


def production_model(inst: oracle.TinyInstance):
    grid = StructuredGrid.from_domain(inst.nx, inst.ny, inst.width, inst.height)
    return FEModel(grid, LoadCase(inst.fixed, inst.force), inst.params)


def run_oracle(cfg: RunConfig, budgets=(0.01, 0.02, 0.04)):
    """Compare the production inner solver with brute-force enumeration.

    Returns rows ``(instance, D, oracle, solver, rel_gap, allowance, ok)``
    where the allowance is 0.5% of the oracle value plus the barrier-gap
    bound, and ``ok`` means ``|oracle - solver| <= allowance``.
    """
    params = material_params(cfg)
    rows = []
    for inst, rho in oracle_instances(params):
        model = production_model(inst)
        for D in sorted(set(budgets) | {cfg.constraints.D}):
            _, c_star = oracle.brute_force_worst_case(inst, rho, D, cfg.oracle.resolution,
                                                      cfg.constraints.mean_norm)
            cons = DefectConstraints.build(model, rho, D, cfg.constraints.mean_norm)
            sol = solve_inner(model, rho, cons, mu_star=cfg.inner.mu_star, tol=cfg.inner.kkt_tol)
            bound = oracle.barrier_gap_bound(cfg.inner.mu_star, inst.n_elem,
                                             inst.width * inst.height)
            allowance = 5e-3 * c_star + bound
            gap = abs(c_star - sol.compliance)
            rows.append((inst.name, D, c_star, sol.compliance, gap / c_star, allowance,
                         gap <= allowance))
    return rows


def write_csv_rows(stream, header, rows):
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


RUNNERS = {"baseline": run_baseline, "evaluate": run_evaluate, "robust": run_robust,
           "gradcheck": run_gradcheck, "oracle": run_oracle}
