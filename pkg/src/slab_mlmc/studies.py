"""Experiment drivers behind the CLI: single solve, convergence study, eps-cost
study and KL check. Each returns its results and writes its output files."""
from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .config import StudyConfig
from .errors import ConfigError, ConvergenceError, RefinementExhausted, SampleError, SolverError
from .estimators import (Ladder, QoISpec, SamplingProblem, SampleRunner, StabilitySettings,
                         evaluate_qoi, fit_bias_model, mc_estimate, mlmc_estimate)
from .io import write_csv, write_json, write_text
from .quadrature import double_gauss, gauss_legendre_unit
from .randfield import (FieldSampler, ModePolicy, build_kl, kl_analytic_exponential, kl_nystrom)
from .rng import SampleStream, normals_block, stream_id
from .specfun import MaternParams
from .transport import (CoefficientSample, Mesh, boundary_defect, rule_for, scheme_residual, solve,
                        stability_constants, stable_mesh_width)

NUMERICAL_ERRORS = (ConvergenceError, SolverError, RefinementExhausted, SampleError, ArithmeticError)


def _slope(x, y):
    x, y = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    if x.size < 2:
        return math.nan, math.nan
    xc = x - x.mean()
    b = float(xc @ (y - y.mean()) / (xc @ xc))
    if x.size < 3:
        return b, math.nan
    r = y - y.mean() - b * xc
    return b, math.sqrt(float(r @ r) / (x.size - 2) / float(xc @ xc))


# -- shared setup ---------------------------------------------------------------

def matern_params(cfg: StudyConfig):
    return MaternParams(cfg.nu, cfg.lambda_c, cfg.sigma_var2)


def kl_method(cfg: StudyConfig):
    if cfg.kl_method != "auto":
        return cfg.kl_method
    return "analytic" if cfg.nu == 0.5 else "nystrom"


def mode_policy(cfg: StudyConfig):
    cap = cfg.modes_cap
    if kl_method(cfg) == "nystrom":
        # the Nyström grid resolves at most quad_points / 4 modes
        limit = cfg.quad_points // 4
        cap = limit if cap is None else min(cap, limit)
    return ModePolicy(cfg.nu, cfg.modes_coef, cap)


def field_for(cfg: StudyConfig, modes):
    return build_kl(matern_params(cfg), max(1, int(modes)), cfg.quad_points, kl_method(cfg))


def sampling_problem(cfg: StudyConfig, finest_cells, extra_modes=0):
    policy = mode_policy(cfg)
    kl = field_for(cfg, max(policy(finest_cells), extra_modes))
    stab = StabilitySettings(cfg.stability, cfg.stability_k, cfg.stability_eta,
                             max_cells=cfg.stability_max_cells)
    return SamplingProblem(kl, cfg.coupling_policy, cfg.qoi_spec, cfg.sigma_a, cfg.source, cfg.solver,
                           cfg.tol, cfg.max_iter, policy, stab, cfg.seed)


# -- solve ----------------------------------------------------------------------

def run_solve(cfg: StudyConfig, out_dir=None):
    """Deterministic (constant sigma_s) or single random-field solve; writes flux.csv, stats.json."""
    cells = cfg.cells
    mesh = Mesh.uniform(cells, cfg.breakpoints)
    if cfg.sigma_s is not None:
        def coefficients(m):
            return CoefficientSample.from_functions(m, cfg.sigma_s, cfg.sigma_a, cfg.source)
        modes = 0
    else:
        policy = mode_policy(cfg)
        modes = policy(cells)
        sampler = FieldSampler(field_for(cfg, modes), cfg.sigma_a, cfg.source)
        z = SampleStream(cfg.seed, stream_id("solve"), 0, cfg.sample_index).normals(modes)

        def coefficients(m):
            return sampler.coefficients(m, z)
    coeffs = coefficients(mesh)
    refined_from = None
    if cfg.stability:
        params = stability_constants(coeffs, cfg.stability_eta, K=cfg.stability_k)
        h_omega = stable_mesh_width(params, mesh.h, cfg.coupling_policy,
                                     h_floor=1.0 / cfg.stability_max_cells)
        if h_omega < mesh.h:
            refined_from = cells
            cells = int(round(1.0 / h_omega))
            mesh = Mesh.uniform(cells, cfg.breakpoints)
            coeffs = coefficients(mesh)
    rule = double_gauss(cfg.angles) if cfg.angles else rule_for(mesh.h, cfg.coupling_policy)
    phi, psi, stats = solve(coeffs, rule, cfg.solver, cfg.tol, cfg.max_iter)
    summary = {
        "cells": cells, "angles": rule.half_order, "modes": modes, "solver": cfg.solver,
        "iterations": stats.iterations, "final_residual": stats.final_residual,
        "scheme_residual": scheme_residual(coeffs, psi), "boundary_defect": boundary_defect(psi),
        "scattering_ratio_sup": coeffs.scattering_ratio_sup, "work_units": stats.work_units,
        "stability_refined_from": refined_from, "wall_time": stats.wall_time,
    }
    if out_dir is not None:
        write_csv(os.path.join(out_dir, "flux.csv"), cfg, "solve", ["x", "phi"],
                  list(zip(mesh.nodes.tolist(), phi.nodal.tolist())))
        write_json(os.path.join(out_dir, "stats.json"), cfg, "solve", summary)
    return phi, summary


# -- convergence study ------------------------------------------------------------

@dataclass(frozen=True)
class ReferenceSpec:
    cells: int
    half_order: int
    modes: int


class ReferenceSolution:
    """Fine-mesh solutions for the same random fields as the study samples, cached per index."""

    def __init__(self, spec: ReferenceSpec, stream="convergence"):
        self.spec = spec
        self.stream = stream
        self.fluxes = {}

    def gaussians(self, problem, indices):
        # all modes the problem carries, so ladder meshes can use more than the reference
        count = max(self.spec.modes, problem.kl.truncation)
        return normals_block(problem.seed, stream_id(self.stream), 0, indices, count)

    def solve(self, problem, indices, z=None):
        missing = [i for i in indices if i not in self.fluxes]
        if missing:
            zz = self.gaussians(problem, missing) if z is None else z[[indices.index(i) for i in missing]]
            outs = problem.solve_fields(zz, self.spec.cells, half_order=self.spec.half_order,
                                        modes=self.spec.modes)
            for i, o in zip(missing, outs):
                self.fluxes[i] = o.flux
        return [self.fluxes[i] for i in indices]


@dataclass(frozen=True)
class ConvergenceItem:
    index: int
    ladder: tuple
    reference: ReferenceSpec


def _convergence_batch(problem, items):
    spec = items[0].reference
    ladder = items[0].ladder
    ref = ReferenceSolution(spec)
    indices = [it.index for it in items]
    z = ref.gaussians(problem, indices)
    ref_flux = ref.solve(problem, indices, z)
    ref_q = [evaluate_qoi(problem.qoi, f) for f in ref_flux]
    sup_spec = QoISpec("sup_norm_error")
    sup = np.zeros((len(items), len(ladder)))
    qerr = np.zeros((len(items), len(ladder)))
    for c, cells in enumerate(ladder):
        for r, o in enumerate(problem.solve_fields(z, cells)):
            sup[r, c] = evaluate_qoi(sup_spec, o.flux, ref_flux[r])
            qerr[r, c] = abs(evaluate_qoi(problem.qoi, o.flux) - ref_q[r])
    return [(sup[r], qerr[r]) for r in range(len(items))]


def run_convergence(cfg: StudyConfig, out_dir=None):
    """Mean sup-norm and QoI errors against a per-sample reference, for each mesh in the ladder."""
    ladder = tuple(cfg.ladder)
    if any(m >= cfg.ref_cells or cfg.ref_cells % m for m in ladder):
        raise ConfigError("reference mesh must be finer than and nested with every ladder mesh",
                          key="ref_cells")
    policy = mode_policy(cfg)
    ref_modes = policy(cfg.ref_cells) if cfg.ref_modes is None else cfg.ref_modes
    problem = sampling_problem(cfg, cfg.ref_cells, ref_modes)
    spec = ReferenceSpec(cfg.ref_cells, cfg.ref_angles, min(ref_modes, problem.kl.truncation))
    t0 = time.perf_counter()
    rows = []
    sup_mean = qoi_mean = np.zeros(0)
    if ladder:
        items = [ConvergenceItem(i, ladder, spec) for i in range(cfg.samples)]
        with SampleRunner(problem, cfg.worker_count, cache=False) as runner:
            res = runner.map_batches(_convergence_batch, items)
        sup = np.array([r[0] for r in res])
        qerr = np.array([r[1] for r in res])
        n = sup.shape[0]
        sup_mean, qoi_mean = sup.mean(axis=0), qerr.mean(axis=0)
        sup_se = sup.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.full(len(ladder), math.nan)
        qoi_se = qerr.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.full(len(ladder), math.nan)
        for c, cells in enumerate(ladder):
            h = 1.0 / cells
            rows.append((h, problem.coupling(h), float(sup_mean[c]), float(sup_se[c]),
                         float(qoi_mean[c]), float(qoi_se[c])))
    hs = [r[0] for r in rows]
    sup_slope, sup_slope_se = _slope(hs, sup_mean) if rows else (math.nan, math.nan)
    qoi_slope, qoi_slope_se = _slope(hs, qoi_mean) if rows else (math.nan, math.nan)
    rates = {"sup_err_slope": sup_slope, "sup_err_slope_se": sup_slope_se,
             "qoi_err_slope": qoi_slope, "qoi_err_slope_se": qoi_slope_se,
             "samples": cfg.samples, "reference_cells": spec.cells, "reference_angles": spec.half_order,
             "reference_modes": spec.modes}
    if out_dir is not None:
        write_csv(os.path.join(out_dir, "convergence.csv"), cfg, "convergence",
                  ["h", "N", "mean_sup_err", "se_sup_err", "mean_qoi_err", "se_qoi_err"], rows)
        write_text(os.path.join(out_dir, "rates.txt"), cfg, "convergence", list(rates.items()))
    rates["wall_time"] = time.perf_counter() - t0
    return rows, rates


# -- eps-cost study -------------------------------------------------------------

EPSCOST_COLUMNS = ["method", "epsilon", "achieved_err", "work_units", "seconds", "levels",
                   "samples_per_level", "status"]


@dataclass
class EpsCostResult:
    rows: list
    reference: object
    bias_model: object
    reports: dict = field(default_factory=dict)
    slopes: dict = field(default_factory=dict)


def cost_slope(eps, work):
    """s in work ~ eps^-s, by least squares in log-log."""
    b, se = _slope(eps, work)
    return -b, se


def run_epscost(cfg: StudyConfig, out_dir=None):
    """MC and MLMC cost against epsilon; errors are measured against an MLMC run at eps_min / ref_factor."""
    ladder = Ladder(cfg.cells0, cfg.max_levels)
    problem = sampling_problem(cfg, ladder.cells(ladder.max_levels - 1))
    eps_grid = sorted(cfg.epsilons, reverse=True)
    with SampleRunner(problem, cfg.worker_count) as runner:
        ref = mlmc_estimate(runner, min(eps_grid) / cfg.ref_factor, ladder, stream="reference",
                            warmup=cfg.warmup, max_work=cfg.max_work)
        bias_model = fit_bias_model(ref.levels)
        rows, reports = [], {}
        for eps in eps_grid:
            for method in cfg.methods:
                try:
                    if method == "mc":
                        rep = mc_estimate(runner, eps, bias_model=bias_model, stream="mc",
                                          warmup=cfg.warmup, max_work=cfg.max_work)
                    else:
                        rep = mlmc_estimate(runner, eps, ladder, stream="mlmc", warmup=cfg.warmup,
                                            max_work=cfg.max_work)
                except NUMERICAL_ERRORS as exc:
                    rows.append((method, eps, math.nan, math.nan, math.nan, 0, (), f"error: {exc}"))
                    continue
                reports[(method, eps)] = rep
                rows.append((method, eps, abs(rep.estimate - ref.estimate), rep.total_work,
                             rep.total_seconds, len(rep.levels), tuple(rep.samples_per_level), rep.status))
    slopes = {}
    for method in cfg.methods:
        pts = [(r[1], r[3]) for r in rows if r[0] == method and r[7] == "ok"]
        s, se = cost_slope([p[0] for p in pts], [p[1] for p in pts]) if len(pts) >= 2 else (math.nan, math.nan)
        slopes[f"{method}_slope"] = s
        slopes[f"{method}_slope_se"] = se
    result = EpsCostResult(rows, ref, bias_model, reports, slopes)
    if out_dir is not None:
        write_csv(os.path.join(out_dir, "epscost.csv"), cfg, "epscost", EPSCOST_COLUMNS, rows)
        r = ref.rates
        summary = list(slopes.items()) + [
            ("reference_estimate", ref.estimate), ("reference_epsilon", ref.epsilon),
            ("reference_status", ref.status), ("reference_levels", len(ref.levels)),
            ("reference_work_units", ref.total_work), ("bias_model_A", bias_model.A),
            ("bias_model_alpha", bias_model.alpha),
            ("alpha", r.alpha if r else math.nan), ("beta", r.beta if r else math.nan),
            ("gamma", r.gamma if r else math.nan),
        ]
        write_text(os.path.join(out_dir, "epscost_rates.txt"), cfg, "epscost", summary)
    return result


# -- KL check -------------------------------------------------------------------

def gram_residual(kl, count, points):
    rule = gauss_legendre_unit(points)
    x, w = np.asarray(rule.nodes), np.asarray(rule.weights)
    e = kl.eigenfunctions(x, count)
    return float(np.max(np.abs(e.T @ (w[:, None] * e) - np.eye(count))))


def run_kl_check(cfg: StudyConfig, out_dir=None):
    """Eigenvalue table, analytic-vs-Nyström deltas (nu = 0.5), orthonormality and trace checks."""
    params = matern_params(cfg)
    k = cfg.check_modes
    if cfg.quad_points < 4 * k:
        raise ConfigError("quad_points must be at least 4 * check_modes", key="quad_points")
    ny = kl_nystrom(params, cfg.quad_points, k)
    analytic = kl_analytic_exponential(params, k) if cfg.nu == 0.5 else None
    rows = []
    cum = 0.0
    for i in range(k):
        cum += float(ny.eigenvalues[i])
        a = float(analytic.eigenvalues[i]) if analytic is not None else math.nan
        delta = abs(float(ny.eigenvalues[i]) / a - 1.0) if analytic is not None else math.nan
        rows.append((i + 1, float(ny.eigenvalues[i]), float(ny.eigenvalues[i] / ny.eigenvalues[0]), cum, a, delta))
    summary = {
        "nu": cfg.nu, "modes": k, "quad_points": cfg.quad_points,
        "max_rel_delta": max(r[5] for r in rows) if analytic is not None else math.nan,
        "gram_residual_nystrom": gram_residual(ny, k, cfg.check_points),
        "gram_residual_analytic": gram_residual(analytic, k, cfg.check_points) if analytic else math.nan,
        "trace": cum, "sigma_var2": cfg.sigma_var2, "trace_ok": cum <= cfg.sigma_var2,
        "decay_ratio": float(ny.eigenvalues[k - 1] / ny.eigenvalues[0]),
    }
    if out_dir is not None:
        write_csv(os.path.join(out_dir, "kl_eigenvalues.csv"), cfg, "kl-check",
                  ["i", "xi", "xi_over_xi1", "cumulative_trace", "xi_analytic", "rel_delta"], rows)
        write_text(os.path.join(out_dir, "kl_check.txt"), cfg, "kl-check", list(summary.items()))
    return rows, summary


STUDY_RUNNERS = {"solve": run_solve, "convergence": run_convergence, "epscost": run_epscost,
                 "kl-check": run_kl_check}
