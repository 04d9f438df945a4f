"""Quantities of interest, plain Monte Carlo and multilevel Monte Carlo estimators.

Samples are identified by (stream, level key, index). Every sample draws its
Gaussian KL coefficients from its own counter-based stream, so results do not
depend on evaluation order or on the number of worker processes; per-level
statistics are reduced in index order.
"""
from __future__ import annotations

import math
import multiprocessing
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import _kernels
from .errors import ConfigError, ConvergenceError, RefinementExhausted, SampleError
from .randfield import DEFAULT_SIGMA_A, DEFAULT_SOURCE, FieldSampler, KLExpansion
from .quadrature import double_gauss
from .rng import normals_block, stream_id
from .transport import (CouplingPolicy, Mesh, ScalarFlux, rule_for, solve, stability_constants,
                        stable_mesh_width)

_NESTED_TOL = 1e-12
# level key offset for the independent coarse draws of an uncoupled pair
_UNCOUPLED_OFFSET = 1 << 16


# -- quantities of interest -----------------------------------------------------

@dataclass(frozen=True)
class QoISpec:
    kind: str = "l1_norm_power"
    q: int = 1
    x: float = 0.5

    def __post_init__(self):
        if self.kind not in ("l1_norm_power", "sup_norm_error", "point_value"):
            raise ConfigError(f"unknown QoI kind {self.kind!r}", key="qoi")
        if self.kind == "l1_norm_power" and (int(self.q) != self.q or self.q < 1):
            raise ConfigError("QoI power q must be an integer >= 1", key="qoi_q")
        if self.kind == "point_value" and not 0.0 <= self.x <= 1.0:
            raise ConfigError("QoI point must lie in [0, 1]", key="qoi_x")

    @classmethod
    def parse(cls, text):
        """'l1(q)', 'point(x)' or 'sup_error'."""
        t = text.strip().replace(" ", "")
        if t.startswith("l1"):
            return cls("l1_norm_power", q=int(t[3:-1]) if "(" in t else 1)
        if t.startswith("point(") and t.endswith(")"):
            return cls("point_value", x=float(t[6:-1]))
        if t in ("sup_error", "sup_norm_error"):
            return cls("sup_norm_error")
        raise ConfigError(f"cannot parse QoI {text!r}", key="qoi")

    def __str__(self):
        if self.kind == "l1_norm_power":
            return f"l1({self.q})"
        if self.kind == "point_value":
            return f"point({self.x!r})"
        return "sup_error"


def l1_norm(nodes, values):
    """Exact integral of |g| for the continuous piecewise-linear g with these nodal values."""
    return float(_kernels.l1_norm(np.asarray(nodes, dtype=float), np.asarray(values, dtype=float)))


def restrict_to(fine: ScalarFlux, nodes):
    """Nodal values of ``fine`` at ``nodes``, which must be nodes of the fine mesh."""
    xf = fine.mesh.nodes
    idx = np.searchsorted(xf, nodes)
    idx = np.clip(idx, 0, xf.size - 1)
    left = np.clip(idx - 1, 0, xf.size - 1)
    pick = np.where(np.abs(xf[left] - nodes) < np.abs(xf[idx] - nodes), left, idx)
    if np.max(np.abs(xf[pick] - nodes)) > _NESTED_TOL:
        raise ValueError("meshes are not nested: reference mesh does not contain every node")
    return fine.nodal[pick]


def evaluate_qoi(spec: QoISpec, flux: ScalarFlux, reference: Optional[ScalarFlux] = None) -> float:
    if (spec.kind == "sup_norm_error") != (reference is not None):
        raise ValueError("a reference flux is required exactly for the sup_norm_error QoI")
    if spec.kind == "l1_norm_power":
        return l1_norm(flux.mesh.nodes, flux.nodal) ** spec.q
    if spec.kind == "point_value":
        return float(flux(spec.x))
    ref = restrict_to(reference, flux.mesh.nodes)
    return float(np.max(np.abs(flux.nodal - ref)))


# -- sampling problem -----------------------------------------------------------

@dataclass(frozen=True)
class StabilitySettings:
    enabled: bool = False
    K: float = 1.0
    eta: float = 0.5
    # coefficients are sampled on this fixed mesh for R3 so that h_omega depends
    # on the sample only, not on the level being solved
    cells: int = 256
    # refinement beyond this many cells raises RefinementExhausted
    max_cells: int = 4096


@dataclass(frozen=True)
class SolveOutcome:
    q: float
    work: float
    refined: bool
    cells: int
    flux: Optional[ScalarFlux] = None


class SamplingProblem:
    """Random transport problem: KL field, physics, discretisation and QoI."""

    def __init__(self, kl: KLExpansion, coupling: CouplingPolicy, qoi: QoISpec = QoISpec(),
                 sigma_a=DEFAULT_SIGMA_A, source=DEFAULT_SOURCE, solver="source_iteration",
                 tol=1e-10, max_iter=10_000, modes: Optional[Callable[[int], int]] = None,
                 stability: StabilitySettings = StabilitySettings(), seed=0):
        if solver not in ("source_iteration", "direct"):
            raise ConfigError(f"unknown solver {solver!r}", key="solver")
        self.kl = kl
        self.coupling = coupling
        self.qoi = qoi
        self.solver = solver
        self.tol = float(tol)
        self.max_iter = int(max_iter)
        self.modes = modes
        self.stability = stability
        self.seed = int(seed)
        self.sampler = FieldSampler(kl, sigma_a, source)

    def __getstate__(self):
        state = self.__dict__.copy()
        state["sampler"] = FieldSampler(self.kl, self.sampler.sigma_a, self.sampler.source)
        return state

    def modes_at(self, cells):
        k = self.kl.truncation if self.modes is None else int(self.modes(cells))
        return max(0, min(k, self.kl.truncation))

    def gaussians(self, stream, level, index, count):
        return normals_block(self.seed, stream_id(stream), level, [index], count)[0]

    def stable_cells(self, z, cells):
        """Cells of the mesh actually solved on: 1/h_omega when refinement triggers."""
        st = self.stability
        if not st.enabled:
            return cells
        mesh = Mesh.uniform(st.cells)
        coeffs = self.sampler.coefficients(mesh, z[: self.modes_at(st.cells)])
        params = stability_constants(coeffs, st.eta, K=st.K)
        h_omega = stable_mesh_width(params, 1.0 / cells, self.coupling, enabled=True,
                                     h_floor=1.0 / st.max_cells)
        return int(round(1.0 / h_omega))

    def solve_fields(self, z, cells, half_order=None, modes=None):
        """Solve for every row of z (Gaussian KL coefficients) at nominal width 1/cells.

        Returns one SolveOutcome (with flux) per row. Rows use the leading
        modes_at(cells) coefficients (or ``modes``); ``half_order`` fixes the angular
        rule instead of the coupling policy. Without stability refinement all rows share
        one mesh and are solved in a single compiled loop; results per row are
        identical to solving that row alone.
        """
        z = np.atleast_2d(np.asarray(z, dtype=float))
        k = self.modes_at(cells) if modes is None else min(int(modes), self.kl.truncation)
        if self.stability.enabled or self.solver != "source_iteration":
            outs = []
            for r, row in enumerate(z):
                try:
                    outs.append(self._solve_one(row, cells, k, half_order))
                except (ArithmeticError, RuntimeError, ValueError, RefinementExhausted) as exc:
                    exc.row = r
                    raise
            return outs
        mesh = Mesh.uniform(cells)
        _, absorb, src = self.sampler.table(mesh)
        sig_s = self.sampler.scattering(mesh, z, k)
        sigma = sig_s + absorb
        if not np.all(absorb > 0.0):
            raise ValueError("absorption cross-section must be positive")
        rule = rule_for(1.0 / cells, self.coupling) if half_order is None else double_gauss(half_order)
        nodal, iters, resid = _kernels.batch_source_iteration(
            mesh.widths, sigma, sig_s, src, rule.mu, rule.w, self.tol, self.max_iter)
        bad = np.flatnonzero(iters < 0)
        if bad.size:
            r = int(bad[0])
            err = ConvergenceError(f"source iteration did not converge in {self.max_iter} iterations "
                                   f"(residual {resid[r]:.3e})", residual=float(resid[r]),
                                   iterations=self.max_iter)
            err.row = r
            raise err
        per = mesh.cells * rule.mu.size
        return [SolveOutcome(math.nan, float(iters[r] * per), False, cells, ScalarFlux(mesh, nodal[r]))
                for r in range(z.shape[0])]

    def _solve_one(self, z, cells, k, half_order=None):
        solve_cells = self.stable_cells(z, cells) if half_order is None else cells
        mesh = Mesh.uniform(solve_cells)
        coeffs = self.sampler.coefficients(mesh, z[:k])
        if half_order is None:
            rule = rule_for(1.0 / solve_cells, self.coupling)
        else:
            rule = double_gauss(half_order)
        phi, _, stats = solve(coeffs, rule, solver=self.solver, tol=self.tol, max_iter=self.max_iter,
                              want_psi=False)
        return SolveOutcome(math.nan, stats.work_units, solve_cells != cells, solve_cells, phi)

    def solve_q(self, z, cells, reference=None):
        """QoI and cost for a single Gaussian vector."""
        out = self.solve_fields(z, cells)[0]
        return replace(out, q=evaluate_qoi(self.qoi, out.flux, reference))

    def evaluate(self, tasks):
        """SampleResults in task order; tasks sharing a level layout are drawn and solved together."""
        tasks = list(tasks)
        out = [None] * len(tasks)
        groups = {}
        for i, t in enumerate(tasks):
            groups.setdefault((t.stream, t.draw_key, t.fine_cells, t.coarse_cells, t.coupled), []).append(i)
        for (stream, key, fine_cells, coarse_cells, coupled), members in groups.items():
            t0 = time.perf_counter()
            index = [tasks[i].index for i in members]
            try:
                z = normals_block(self.seed, stream_id(stream), key, index, self.modes_at(fine_cells))
                fine = self._qois(z, fine_cells)
                coarse = None
                if coarse_cells is not None:
                    if not coupled:
                        z = normals_block(self.seed, stream_id(stream), key + _UNCOUPLED_OFFSET, index,
                                          self.modes_at(coarse_cells))
                    coarse = self._qois(z, coarse_cells)
            except ConfigError:
                raise
            except (ArithmeticError, RuntimeError, ValueError, RefinementExhausted) as exc:
                row = getattr(exc, "row", 0) or 0
                task = tasks[members[min(row, len(members) - 1)]]
                raise SampleError(f"sample {task.index} on level {task.level} failed: {exc}",
                                  level=task.level, index=task.index) from exc
            seconds = (time.perf_counter() - t0) / len(members)
            for r, i in enumerate(members):
                qf, wf, ref_f = fine[r]
                qc, wc, ref_c = coarse[r] if coarse is not None else (0.0, 0.0, False)
                out[i] = SampleResult(qf - qc, qf, qc, wf + wc, seconds, ref_f or ref_c)
        return out

    def _qois(self, z, cells):
        res = []
        for o in self.solve_fields(z, cells):
            res.append((evaluate_qoi(self.qoi, o.flux), o.work, o.refined))
        return res


@dataclass(frozen=True)
class SampleTask:
    stream: str
    level: int
    index: int
    fine_cells: int
    coarse_cells: Optional[int] = None
    coupled: bool = True
    # level key used for the Gaussian draws (defaults to ``level``)
    draw_level: Optional[int] = None

    @property
    def draw_key(self):
        return self.level if self.draw_level is None else self.draw_level


@dataclass(frozen=True)
class SampleResult:
    y: float
    q_fine: float
    q_coarse: float
    work: float
    seconds: float
    refined: bool


RESULT_DTYPE = np.dtype([("y", float), ("q_fine", float), ("q_coarse", float), ("work", float),
                         ("seconds", float), ("refined", bool)])


def results_to_array(results):
    if isinstance(results, np.ndarray):
        return results
    return np.array([(r.y, r.q_fine, r.q_coarse, r.work, r.seconds, r.refined) for r in results],
                    dtype=RESULT_DTYPE)


def _evaluate_array(problem, tasks):
    return [results_to_array(problem.evaluate(tasks))]


def run_single_sample(problem: SamplingProblem, task: SampleTask) -> SampleResult:
    """Y = Q_fine - Q_coarse for one random field (Q_coarse = 0 without a coarse mesh)."""
    return problem.evaluate([task])[0]


# -- worker pool ----------------------------------------------------------------

_WORKER_PROBLEM = None


def _init_worker(problem):
    global _WORKER_PROBLEM
    _WORKER_PROBLEM = problem


def _run_chunk(args):
    fn, items = args
    return fn(_WORKER_PROBLEM, items)


def _evaluate(problem, tasks):
    return problem.evaluate(tasks)


MAX_BATCH = 2048


class SampleRunner:
    """Evaluates sample tasks, in-process or over a process pool, with a result cache.

    Cached results keep the work and seconds of their first evaluation, so reports
    built from them account for the full cost of every sample they use.
    """

    def __init__(self, problem: SamplingProblem, workers: int = 1, cache: bool = True):
        if workers < 1:
            raise ConfigError("workers must be >= 1", key="workers")
        self.problem = problem
        self.workers = int(workers)
        self._cache = {} if cache else None
        self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def _executor(self):
        if self._pool is None:
            methods = multiprocessing.get_all_start_methods()
            ctx = multiprocessing.get_context("fork" if "fork" in methods else "spawn")
            self._pool = ProcessPoolExecutor(self.workers, mp_context=ctx, initializer=_init_worker,
                                             initargs=(self.problem,))
        return self._pool

    def map_batches(self, fn, items):
        """[fn(problem, batch) results concatenated] over consecutive batches of items.

        ``fn`` must be a module-level function returning one result per item and
        must treat items independently; the output order is the input order.
        """
        items = list(items)
        if not items:
            return []
        return self.map_batches_raw(fn, items)

    def run(self, tasks):
        """SampleResults in task order (uncached)."""
        return self.map_batches(_evaluate, tasks)

    def run_range(self, template: SampleTask, start, stop):
        """Results for sample indices start..stop-1 of the sequence ``template`` describes.

        Returned as a structured array (RESULT_DTYPE). The cache keeps, per
        sequence, the contiguous prefix of indices evaluated so far.
        """
        key = replace(template, index=0)
        have = self._cache.get(key) if self._cache is not None else None
        done = 0 if have is None else have.size
        if self._cache is None or start > done:
            return self._compute(template, start, stop)
        if stop > done:
            have = np.concatenate([have[:done], self._compute(template, done, stop)]) if done else \
                self._compute(template, done, stop)
            self._cache[key] = have
        return have[start:stop].copy()

    def _compute(self, template, start, stop):
        tasks = [replace(template, index=i) for i in range(start, stop)]
        if not tasks:
            return np.zeros(0, dtype=RESULT_DTYPE)
        return np.concatenate(self.map_batches_raw(_evaluate_array, tasks))

    def map_batches_raw(self, fn, items):
        """Like map_batches, but fn returns one object per batch."""
        size = min(MAX_BATCH, max(1, -(-len(items) // (4 * self.workers))))
        if self.workers == 1 or len(items) == 1:
            return [r for i in range(0, len(items), MAX_BATCH) for r in fn(self.problem, items[i:i + MAX_BATCH])]
        chunks = [(fn, items[i:i + size]) for i in range(0, len(items), size)]
        return [r for part in self._executor().map(_run_chunk, chunks) for r in part]


# -- statistics and reports -----------------------------------------------------

@dataclass
class LevelRecord:
    level: int
    h: float
    angles: int
    y: np.ndarray = field(default_factory=lambda: np.zeros(0))
    q: np.ndarray = field(default_factory=lambda: np.zeros(0))
    work_units: float = 0.0
    wall_time: float = 0.0
    refined: int = 0

    @property
    def samples(self):
        return len(self.y)

    def add(self, results):
        """Append SampleResults (or a RESULT_DTYPE array) in sample-index order."""
        arr = results_to_array(list(results) if not isinstance(results, np.ndarray) else results)
        if not arr.size:
            return
        self.y = np.concatenate([self.y, arr["y"]])
        self.q = np.concatenate([self.q, arr["q_fine"]])
        # sequential sums, so totals equal the per-sample sums in index order
        for w, t in zip(arr["work"].tolist(), arr["seconds"].tolist()):
            self.work_units += w
            self.wall_time += t
        self.refined += int(np.count_nonzero(arr["refined"]))

    @property
    def mean(self):
        return float(np.mean(self.y)) if self.y.size else math.nan

    @property
    def variance(self):
        return float(np.var(self.y, ddof=1)) if len(self.y) >= 2 else math.nan

    @property
    def mean_q(self):
        return float(np.mean(self.q)) if self.q.size else math.nan

    @property
    def variance_q(self):
        return float(np.var(self.q, ddof=1)) if len(self.q) >= 2 else math.nan

    @property
    def cost(self):
        """Mean work per sample."""
        return self.work_units / self.samples if self.samples else math.nan


@dataclass(frozen=True)
class Rates:
    alpha: float
    beta: float
    gamma: float
    se_alpha: float = math.nan
    se_beta: float = math.nan
    se_gamma: float = math.nan


@dataclass
class EstimatorReport:
    method: str
    estimate: float
    epsilon: Optional[float]
    levels: list
    estimator_variance: float
    bias_bound: float
    rates: Optional[Rates] = None
    success: bool = True
    status: str = "ok"
    flags: tuple = ()

    @property
    def total_work(self):
        return float(sum(lv.work_units for lv in self.levels))

    @property
    def total_seconds(self):
        return float(sum(lv.wall_time for lv in self.levels))

    @property
    def sampling_error(self):
        return math.sqrt(self.estimator_variance) if self.estimator_variance >= 0 else math.nan

    @property
    def samples_per_level(self):
        return [lv.samples for lv in self.levels]

    def mse_split_ok(self):
        if self.epsilon is None:
            return False
        half = 0.5 * self.epsilon ** 2
        return self.bias_bound ** 2 <= half and self.estimator_variance <= half


def _slope(x, y):
    """Least-squares slope and its standard error (nan with two points)."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    xc = x - x.mean()
    sxx = float(xc @ xc)
    b = float(xc @ (y - y.mean())) / sxx
    if x.size <= 2:
        return b, math.nan
    resid = y - y.mean() - b * xc
    return b, math.sqrt(float(resid @ resid) / (x.size - 2) / sxx)


def fit_rates(means, variances, costs) -> Rates:
    """alpha, beta, gamma from log2 |E Y_l|, log2 V_l, log2 C_l against l >= 1."""
    means, variances, costs = (np.asarray(a, float) for a in (means, variances, costs))
    if not means.size == variances.size == costs.size:
        raise ValueError("per-level arrays must have equal length")
    if means.size < 3:
        raise ValueError("rate fit needs at least 3 levels")
    lv = np.arange(1, means.size)
    with np.errstate(divide="ignore"):
        a, sa = _slope(lv, np.log2(np.abs(means[1:])))
        b, sb = _slope(lv, np.log2(variances[1:]))
        g, sg = _slope(lv, np.log2(costs[1:]))
    return Rates(-a, -b, g, sa, sb, sg)


def optimal_allocation(variances, costs, epsilon):
    """Real-valued N_l minimising sum N_l C_l subject to sum V_l / N_l = eps^2 / 2."""
    v = np.asarray(variances, float)
    c = np.asarray(costs, float)
    return 2.0 / epsilon ** 2 * np.sqrt(v / c) * float(np.sum(np.sqrt(v * c)))


# -- estimators -----------------------------------------------------------------

@dataclass(frozen=True)
class Ladder:
    """Geometric mesh ladder h_l = h_0 2^-l, stored as cell counts."""
    cells0: int = 8
    max_levels: int = 8

    def cells(self, level):
        return self.cells0 * 2 ** level

    def h(self, level):
        return 1.0 / self.cells(level)


@dataclass(frozen=True)
class BiasModel:
    """|E[Q_h - Q_{2h}]| ~ A h^alpha, hence |E[Q - Q_h]| ~ A h^alpha / (2^alpha - 1)."""
    A: float
    alpha: float

    def bias(self, h):
        return self.A * h ** self.alpha / (2.0 ** self.alpha - 1.0)

    def width_for(self, epsilon):
        return (epsilon * (2.0 ** self.alpha - 1.0) / (math.sqrt(2.0) * self.A)) ** (1.0 / self.alpha)


def fit_bias_model(levels, alpha_floor=0.5, significance=2.0):
    """Least squares fit of log|mean Y_l| against log h_l over levels >= 1.

    Levels whose mean is within ``significance`` standard errors of zero carry
    no information about the bias and are dropped when at least two remain.
    """
    use = [lv for lv in levels if lv.level >= 1 and lv.samples >= 2]
    if len(use) < 2:
        raise ValueError("bias model needs at least two coupled levels")
    strong = [lv for lv in use if abs(lv.mean) > significance * math.sqrt(lv.variance / lv.samples)]
    if len(strong) >= 2:
        use = strong
    lh = np.log([lv.h for lv in use])
    lm = np.log([abs(lv.mean) for lv in use])
    alpha, _ = _slope(lh, lm)
    alpha = max(alpha, alpha_floor)
    log_a = float(np.mean(lm - alpha * lh))
    return BiasModel(math.exp(log_a), alpha)


def pilot_bias_model(runner: SampleRunner, ladder: Ladder, levels=4, samples=32, stream="pilot"):
    recs = []
    for lvl in range(levels):
        rec = LevelRecord(lvl, ladder.h(lvl), rule_for(ladder.h(lvl), runner.problem.coupling).mu.size)
        coarse = ladder.cells(lvl - 1) if lvl > 0 else None
        rec.add(runner.run(SampleTask(stream, lvl, i, ladder.cells(lvl), coarse) for i in range(samples)))
        recs.append(rec)
    return fit_bias_model(recs), recs


def mc_estimate(runner: SampleRunner, epsilon=None, n_samples=None, cells=None,
                bias_model: Optional[BiasModel] = None, stream="mc", warmup=32,
                max_samples=10 ** 7, max_work=math.inf) -> EstimatorReport:
    """Plain Monte Carlo at one mesh width.

    With ``epsilon`` the mesh is chosen from the bias model (h ~ eps^(1/alpha)) and
    samples are added until the sampling variance is at most eps^2 / 2. With
    ``n_samples`` exactly that many samples are used.
    """
    if epsilon is None and n_samples is None:
        raise ValueError("give a target epsilon or a sample count")
    if epsilon is not None and not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if cells is None:
        if bias_model is None:
            raise ValueError("a bias model or an explicit mesh is needed")
        cells = max(1, math.ceil(1.0 / bias_model.width_for(epsilon) - 1e-9))
    cells = int(cells)
    h = 1.0 / cells
    bias = bias_model.bias(h) if bias_model is not None else math.nan
    rec = LevelRecord(0, h, rule_for(h, runner.problem.coupling).mu.size)

    def extend(n):
        start = rec.samples
        rec.add(runner.run_range(SampleTask(stream, 0, 0, cells), start, n))

    status, success = "ok", True
    if n_samples is not None:
        extend(int(n_samples))
    else:
        extend(min(warmup, max_samples))
        while True:
            need = math.ceil(2.0 * rec.variance / epsilon ** 2) if rec.samples >= 2 else 2
            if need <= rec.samples:
                break
            if need > max_samples or rec.work_units >= max_work:
                status, success = "budget_exhausted", False
                break
            extend(need)
    var_est = rec.variance / rec.samples if rec.samples >= 2 else math.nan
    report = EstimatorReport("mc", rec.mean, epsilon, [rec], var_est, bias, None, success, status)
    if epsilon is not None and success and not report.mse_split_ok():
        report.success, report.status = False, "mse_split_violated"
    return report


def _level_task(stream, lvl, ladder, share):
    coarse = ladder.cells(lvl - 1) if lvl > 0 else None
    return SampleTask(stream, lvl, 0, ladder.cells(lvl), coarse, True, 0 if share else None)


def mlmc_estimate(runner: SampleRunner, epsilon=None, ladder: Ladder = Ladder(), stream="mlmc",
                  warmup=32, min_levels=3, alpha=None, alpha_floor=0.5, fixed_samples=None,
                  fixed_levels=None, share_samples=False, max_work=math.inf) -> EstimatorReport:
    """Adaptive multilevel Monte Carlo.

    Each round tops up every level to N_l = ceil(2 eps^-2 sqrt(V_l/C_l) sum_j sqrt(V_j C_j))
    and then either stops (bias proxy at most eps/sqrt(2)) or adds a level. With
    ``fixed_samples``/``fixed_levels`` the ladder and N_l are prescribed instead;
    ``share_samples`` makes every level draw the same Gaussian vectors.
    """
    problem = runner.problem
    recs = []

    def new_level():
        lvl = len(recs)
        h = ladder.h(lvl)
        recs.append(LevelRecord(lvl, h, rule_for(h, problem.coupling).mu.size))

    def extend(lvl, n):
        rec = recs[lvl]
        if n > rec.samples:
            rec.add(runner.run_range(_level_task(stream, lvl, ladder, share_samples), rec.samples, n))

    if fixed_samples is not None:
        n_levels = int(fixed_levels if fixed_levels is not None else min_levels)
        for lvl in range(n_levels):
            new_level()
            extend(lvl, int(fixed_samples))
        var_est = float(sum(r.variance / r.samples for r in recs)) if fixed_samples >= 2 else math.nan
        rates = _rates_or_none(recs)
        return EstimatorReport("mlmc", float(sum(r.mean for r in recs)), epsilon, recs, var_est,
                               math.nan, rates, True, "fixed")

    if epsilon is None or not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if min_levels < 1:
        raise ValueError("min_levels must be >= 1")
    for lvl in range(min(min_levels, ladder.max_levels)):
        new_level()
        extend(lvl, warmup)
    status, success, flags = "ok", True, []
    while True:
        v = np.array([r.variance for r in recs])
        c = np.array([r.cost for r in recs])
        target = np.ceil(optimal_allocation(v, c, epsilon)).astype(int)
        grow = [lvl for lvl in range(len(recs)) if target[lvl] > recs[lvl].samples]
        if grow:
            if sum(r.work_units for r in recs) >= max_work:
                status, success = "budget_exhausted", False
                break
            for lvl in grow:
                extend(lvl, int(target[lvl]))
            continue
        a = _alpha(recs, alpha, alpha_floor)
        bias = _bias_proxy(recs, a)
        if bias <= epsilon / math.sqrt(2.0) and len(recs) >= min_levels:
            break
        if len(recs) >= ladder.max_levels:
            status, success = "level_cap", False
            break
        new_level()
        extend(len(recs) - 1, warmup)
    v = np.array([r.variance for r in recs])
    var_est = float(np.sum(v / np.array([r.samples for r in recs])))
    for lvl in range(2, len(recs)):
        if recs[lvl].variance >= recs[lvl - 1].variance:
            flags.append(f"variance_not_decaying_at_level_{lvl}")
    a = _alpha(recs, alpha, alpha_floor)
    report = EstimatorReport("mlmc", float(sum(r.mean for r in recs)), epsilon, recs, var_est,
                             _bias_proxy(recs, a), _rates_or_none(recs), success, status, tuple(flags))
    if success and not report.mse_split_ok():
        report.success, report.status = False, "mse_split_violated"
    if flags:
        warnings.warn("MLMC level variances not decaying: " + ", ".join(flags), RuntimeWarning,
                      stacklevel=2)
    return report


def _rates_or_none(recs):
    if len(recs) < 3 or any(r.samples < 2 for r in recs):
        return None
    return fit_rates([r.mean for r in recs], [r.variance for r in recs], [r.cost for r in recs])


def _alpha(recs, alpha, floor):
    if alpha is not None:
        return float(alpha)
    rates = _rates_or_none(recs)
    if rates is None or not math.isfinite(rates.alpha):
        return max(1.0, floor)
    return max(rates.alpha, floor)


def _bias_proxy(recs, alpha):
    """|Y_L| / (2^alpha - 1), guarded by the previous level extrapolated by 2^-alpha."""
    scale = 2.0 ** alpha - 1.0
    last = abs(recs[-1].mean)
    if len(recs) >= 3:
        last = max(last, abs(recs[-2].mean) / 2.0 ** alpha)
    return last / scale


__all__ = [
    "QoISpec", "evaluate_qoi", "l1_norm", "restrict_to", "StabilitySettings", "SamplingProblem",
    "SampleTask", "SampleResult", "run_single_sample", "SampleRunner", "LevelRecord", "Rates",
    "EstimatorReport", "fit_rates", "optimal_allocation", "Ladder", "BiasModel", "fit_bias_model",
    "pilot_bias_model", "mc_estimate", "mlmc_estimate",
]
