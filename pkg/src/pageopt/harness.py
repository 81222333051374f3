"""Experiment orchestration: problem loading, theoretical parameter selection,
runs, sweeps, sampling verification and CSV emission.

Method presets name the experiment arms:

* ``vanilla``     with-replacement sampling, baseline stepsize from the
                  mean-square constant L+ in both slots of the rate;
* ``uniform``     the same sampling with the sharper Hessian-variance constant;
* ``importance``  with-replacement sampling with weights q_i = L_i / sum L;
* ``nice``        without-replacement batches, sharper constant;
* ``full-batch``  deterministic gradient descent (refresh every step).

For quadratic problems the constants are exact spectral quantities; for
logistic problems they are the certified upper bounds from the per-sample
Lipschitz constants.
"""
from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import logistic_problem, parse_libsvm, shard
from .objective import (GroupedProblem, Problem, QuadraticProblem,
                        exact_weighted_curvatures, lipschitz_constants,
                        weighted_curvature_sq)
from .page import (PageConfig, Trace, compose := None) if False else None  # placeholder
from .page import (PageConfig, Trace, default_p, iteration_budget, run_page,
                   run_page_composed, stepsize_composed, stepsize_nonconvex,
                   stepsize_pl)
from .sampling import (SamplingSpec, build, compose_variance,
                       composed_cardinality, composed_variance_exact,
                       enumerated_cardinality, enumerated_mean_error, full_batch,
                       importance, nice, optimal_weights,
                       uniform_with_replacement, variance_exact, variance_mc)
from .taskgen import gen_controlled_li, gen_controlled_lpm, load_task, save_task

METHODS = ("vanilla", "uniform", "importance", "nice", "full-batch")

TRACE_COLUMNS = ("iter", "calls", "grad_norm_sq", "objective", "refreshed")


class ConfigError(ValueError):
    """Invalid experiment configuration; message lists every problem found."""


def default_out_dir() -> str:
    return os.environ.get("PAGEOPT_OUTDIR", "pageopt-out")


# ---------------------------------------------------------------------------
# parameter selection
# ---------------------------------------------------------------------------


@dataclass
class RunPlan:
    """Resolved parameters for one experiment arm."""

    method: str
    spec: SamplingSpec
    gamma: float
    p: float
    L_minus: float
    plus_sq: float
    pm_sq: float
    constants_kind: str  # exact-spectral | certified-bound


def _curvatures(problem, weights, report):
    if isinstance(problem, QuadraticProblem):
        plus_sq, pm_sq = exact_weighted_curvatures(problem, weights)
        return plus_sq, pm_sq, "exact-spectral"
    certified = weighted_curvature_sq(report.L_i, weights)
    return certified, certified, "certified-bound"


def plan_single(problem: Problem, method: str, tau: int,
                p_override: float | None = None,
                gamma_override: float | None = None,
                mu: float | None = None) -> RunPlan:
    """Sampling spec plus theoretical stepsize and refresh probability."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
    report = lipschitz_constants(problem)
    n = problem.n
    if method == "importance":
        spec = importance(n, optimal_weights(report.L_i), tau)
    elif method == "nice":
        spec = nice(n, tau)
    elif method == "full-batch":
        spec = full_batch(n)
    else:
        spec = uniform_with_replacement(n, tau)
    plus_sq, pm_sq, ckind = _curvatures(problem, spec.weights, report)
    if method == "vanilla":
        pm_sq = plus_sq  # baseline rate ignores the Hessian-variance refinement
    if method == "full-batch":
        p = 1.0
    else:
        p = p_override if p_override is not None else default_p(spec.expected_cardinality, n)
    if mu is not None:
        gamma = stepsize_pl(report.L_minus, spec.A, spec.B, plus_sq, pm_sq, p, mu)
    else:
        gamma = stepsize_nonconvex(report.L_minus, spec.A, spec.B, plus_sq, pm_sq, p)
    if gamma_override is not None:
        gamma = gamma_override
    return RunPlan(method, spec, gamma, p, report.L_minus, plus_sq, pm_sq, ckind)


@dataclass
class ComposedPlan:
    method: str
    outer: SamplingSpec
    inner: list[SamplingSpec]
    gamma: float
    p: float
    L_minus: float
    effective: float
    cardinality: float


def plan_composed(grouped: GroupedProblem, method: str, tau_clients: int,
                  tau_points: int, p_override: float | None = None,
                  gamma_override: float | None = None) -> ComposedPlan:
    """Parameters for a two-level run with the same sampling kind per level."""
    if method not in ("uniform", "importance", "nice", "full-batch"):
        raise ConfigError(f"method {method!r} unsupported for composed runs")
    rep = grouped.smoothness()
    n = grouped.n

    def level_spec(count, lips, tau):
        if method == "importance":
            return importance(count, optimal_weights(lips), tau)
        if method == "nice":
            return nice(count, tau)
        if method == "full-batch":
            return full_batch(count)
        return uniform_with_replacement(count, tau)

    outer = level_spec(n, rep.L_i, tau_clients)
    inner = [level_spec(int(m), rep.L_ij[i], tau_points)
             for i, m in enumerate(grouped.m)]

    inner_plus, inner_pm = [], []
    for i, client in enumerate(grouped.clients):
        crep = client.smoothness()
        plus_sq, pm_sq, _ = _curvatures(client, inner[i].weights, crep)
        inner_plus.append(plus_sq)
        inner_pm.append(pm_sq)
    if all(isinstance(c, QuadraticProblem) for c in grouped.clients):
        flat = grouped.flatten()
        mats = [c.mean_matrix() for c in grouped.clients]
        from .objective import DenseQuadraticProblem
        client_level = DenseQuadraticProblem(mats, [np.zeros(grouped.d)] * n)
        outer_plus, outer_pm, _ = _curvatures(client_level, outer.weights, rep)
        del flat
    else:
        certified = weighted_curvature_sq(rep.L_i, outer.weights)
        outer_plus = outer_pm = certified

    comp = compose_variance(outer, inner, inner_plus, inner_pm, outer_plus, outer_pm)
    card = composed_cardinality(outer, inner)
    total = float(grouped.m.sum())
    p = p_override if p_override is not None else default_p(card, int(total))
    gamma = stepsize_composed(rep.L_minus, comp, p)
    if gamma_override is not None:
        gamma = gamma_override
    return ComposedPlan(method, outer, inner, gamma, p, rep.L_minus,
                        comp.effective, card)


# ---------------------------------------------------------------------------
# problem sources
# ---------------------------------------------------------------------------


@dataclass
class ProblemSource:
    """Exactly one of generator parameters, a task file, or a dataset file."""

    generator: dict | None = None
    task_file: str | None = None
    dataset_file: str | None = None
    lam: float = 0.001
    clients: int | None = None
    shard_seed: int = 0

    def validate(self) -> list[str]:
        problems = []
        chosen = [s for s in (self.generator, self.task_file, self.dataset_file)
                  if s is not None]
        if len(chosen) != 1:
            problems.append("exactly one problem source must be given "
                            "(generator, task file, or dataset file)")
        if self.generator is not None:
            kind = self.generator.get("kind")
            if kind not in ("lpm", "li"):
                problems.append(f"generator kind must be 'lpm' or 'li', got {kind!r}")
        if self.clients is not None and self.dataset_file is None:
            problems.append("client sharding requires a dataset file")
        return problems

    def load(self):
        errs = self.validate()
        if errs:
            raise ConfigError("; ".join(errs))
        if self.generator is not None:
            g = self.generator
            if g["kind"] == "lpm":
                return gen_controlled_lpm(g["n"], g["d"], g["lambda"], g["s"], g["seed"])
            return gen_controlled_li(g["n"], g["d"], g["s"], g["seed"])
        if self.task_file is not None:
            return load_task(self.task_file)
        data = parse_libsvm(self.dataset_file)
        if self.clients is not None:
            return shard(data, self.clients, self.shard_seed, self.lam)
        return logistic_problem(data, self.lam)


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------


def write_trace_csv(trace: Trace, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(TRACE_COLUMNS)
        for i in range(trace.iterations.size):
            out.writerow([int(trace.iterations[i]), repr(float(trace.calls[i])),
                          repr(float(trace.grad_norm_sq[i])),
                          repr(float(trace.objective[i])),
                          int(trace.refreshed[i])])


def read_trace_csv(path: str) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return {
        "iter": np.array([int(r["iter"]) for r in rows]),
        "calls": np.array([float(r["calls"]) for r in rows]),
        "grad_norm_sq": np.array([float(r["grad_norm_sq"]) for r in rows]),
        "objective": np.array([float(r["objective"]) for r in rows]),
        "refreshed": np.array([bool(int(r["refreshed"])) for r in rows]),
    }


def write_aggregate_csv(traces: list[Trace], path: str) -> None:
    """Across seeds: per monitored iteration, the median call budget plus
    median and quartiles of the gradient norm."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["iter", "calls_median", "grad_norm_sq_q25",
                      "grad_norm_sq_median", "grad_norm_sq_q75",
                      "objective_median"])
        length = min(t.iterations.size for t in traces)
        gns = np.stack([t.grad_norm_sq[:length] for t in traces])
        calls = np.stack([t.calls[:length] for t in traces])
        objs = np.stack([t.objective[:length] for t in traces])
        iters = traces[0].iterations[:length]
        q25, q50, q75 = np.percentile(gns, [25, 50, 75], axis=0)
        cmed = np.median(calls, axis=0)
        omed = np.median(objs, axis=0)
        for k in range(length):
            out.writerow([int(iters[k]), repr(float(cmed[k])), repr(float(q25[k])),
                          repr(float(q50[k])), repr(float(q75[k])),
                          repr(float(omed[k]))])


def maybe_plot(traces: list[Trace], path: str) -> bool:
    """Optional static chart: median gradient norm against call budget."""
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return False
    length = min(t.iterations.size for t in traces)
    gns = np.median(np.stack([t.grad_norm_sq[:length] for t in traces]), axis=0)
    calls = np.median(np.stack([t.calls[:length] for t in traces]), axis=0)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(calls, np.maximum(gns, 1e-300))
    ax.set_xlabel("gradient calls")
    ax.set_ylabel("squared gradient norm (median)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


# ---------------------------------------------------------------------------
# run / sweep drivers
# ---------------------------------------------------------------------------


def resolve_budget(T: int | None, epsilon: float | None, gamma: float,
                   delta0: float | None) -> int:
    if T is not None:
        return int(T)
    problems = []
    if epsilon is None:
        problems.append("either an iteration budget T or a target epsilon is required")
    if delta0 is None:
        problems.append("epsilon-based budgets need delta0 (known optimum or --delta0)")
    if problems:
        raise ConfigError("; ".join(problems))
    return iteration_budget(delta0, epsilon, gamma)


def _delta0_of(problem, override: float | None) -> float | None:
    if override is not None:
        return override
    f_star = getattr(problem, "f_star", None)
    if f_star is None:
        return None
    return problem.value(problem.x0) - f_star


def run_experiment(problem, plan: RunPlan, T: int, seeds: list[int],
                   out_dir: str | None = None, workers: int = 1,
                   output_rule: str = "uniform-random-iterate") -> list[Trace]:
    cfgs = [PageConfig(gamma=plan.gamma, p=plan.p, T=T, seed=s,
                       output_rule=output_rule, gamma_bound=plan.gamma)
            for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            traces = list(pool.map(_run_one, [(problem, plan.spec, c) for c in cfgs]))
    else:
        traces = [run_page(problem, plan.spec, c) for c in cfgs]
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        for seed, tr in zip(seeds, traces):
            write_trace_csv(tr, os.path.join(out_dir, f"{plan.method}_seed{seed}.csv"))
        write_aggregate_csv(traces, os.path.join(out_dir, f"{plan.method}_aggregate.csv"))
    return traces


def _run_one(args):
    problem, spec, cfg = args
    return run_page(problem, spec, cfg)


def run_experiment_composed(grouped, plan: ComposedPlan, T: int, seeds: list[int],
                            out_dir: str | None = None,
                            output_rule: str = "uniform-random-iterate") -> list[Trace]:
    traces = []
    for s in seeds:
        cfg = PageConfig(gamma=plan.gamma, p=plan.p, T=T, seed=s,
                         output_rule=output_rule, gamma_bound=plan.gamma)
        traces.append(run_page_composed(grouped, plan.outer, plan.inner, cfg))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        for seed, tr in zip(seeds, traces):
            write_trace_csv(tr, os.path.join(
                out_dir, f"{plan.method}_tc{plan.outer.expected_cardinality:g}_seed{seed}.csv"))
        write_aggregate_csv(traces, os.path.join(
            out_dir, f"{plan.method}_tc{plan.outer.expected_cardinality:g}_aggregate.csv"))
    return traces


@dataclass
class SweepCell:
    label: str
    method: str
    problem: object
    tau: int
    tau_points: int | None = None  # composed cells


def run_sweep(cells: list[SweepCell], seeds: list[int], epsilon: float,
              T: int | None, delta0: float | None, out_path: str,
              workers: int = 1) -> list[dict]:
    """Run every (cell, seed) pair and emit one long-format CSV row each.

    Cells are independent: per-cell results depend only on the cell's own
    problem, parameters and the shared seed list.
    """
    rows = []
    jobs = []
    for cell in cells:
        if isinstance(cell.problem, GroupedProblem):
            plan = plan_composed(cell.problem, cell.method, cell.tau,
                                 cell.tau_points or 1)
            d0 = _delta0_of(cell.problem, delta0)
            budget = resolve_budget(T, epsilon, plan.gamma, d0)
            traces = run_experiment_composed(cell.problem, plan, budget, seeds)
            gamma, p = plan.gamma, plan.p
        else:
            plan = plan_single(cell.problem, cell.method, cell.tau)
            d0 = _delta0_of(cell.problem, delta0)
            budget = resolve_budget(T, epsilon, plan.gamma, d0)
            traces = run_experiment(cell.problem, plan, budget, seeds,
                                    workers=workers)
            gamma, p = plan.gamma, plan.p
        for seed, tr in zip(seeds, traces):
            rows.append({
                "cell": cell.label, "method": cell.method, "tau": cell.tau,
                "tau_points": cell.tau_points if cell.tau_points else "",
                "seed": seed, "gamma": gamma, "p": p, "T": budget,
                "calls_to_eps": tr.calls_to_reach(epsilon),
                "final_grad_norm_sq": float(tr.grad_norm_sq[-1]),
            })
    del jobs
    if out_path:
        os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
        with open(out_path, "w", newline="", encoding="utf-8") as fh:
            out = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            out.writeheader()
            out.writerows(rows)
    return rows


# ---------------------------------------------------------------------------
# verification report
# ---------------------------------------------------------------------------


def verify_samplings(n: int = 5, d: int = 3, tau: int = 2, trials: int = 20000,
                     seed: int = 0, instances: int = 20) -> tuple[list[str], bool]:
    """Certificate equality, unbiasedness and cardinality on enumerable
    instances; Monte-Carlo bands at scale; composition soundness."""
    rng = np.random.default_rng(seed)
    lines = []
    ok = True

    def check(name, passed, detail):
        nonlocal ok
        ok &= passed
        lines.append(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")

    specs = {
        "nice": lambda: nice(n, min(tau, n)),
        "uniform-with-replacement": lambda: uniform_with_replacement(n, tau),
        "importance": lambda: importance(
            n, (lambda q: q / q.sum())(rng.dirichlet(np.ones(n)) + 0.05), tau),
        "independent": lambda: (lambda p: build("independent", n, p=p))(
            rng.uniform(0.15, 0.85, n)),
        "extended-nice": lambda: build(
            "extended-nice", n, tau=tau, l=rng.integers(1, 4, n)),
    }
    for name, make in specs.items():
        worst_gap = 0.0
        worst_bias = 0.0
        for _ in range(instances):
            spec = make()
            vectors = rng.standard_normal((n, d))
            var, bound = variance_exact(spec, vectors)
            worst_gap = max(worst_gap, abs(var - bound))
            worst_bias = max(worst_bias, enumerated_mean_error(spec, vectors))
        check(f"{name} certificate equality", worst_gap <= 1e-12,
              f"max |variance - bound| = {worst_gap:.3e}")
        check(f"{name} unbiasedness", worst_bias <= 1e-12,
              f"max mean error = {worst_bias:.3e}")

    card = enumerated_cardinality(nice(n, min(tau, n)))
    check("nice cardinality", abs(card - min(tau, n)) <= 1e-12, f"E|S| = {card:.12f}")

    uni = uniform_with_replacement(n, tau)
    imp = importance(n, np.full(n, 1.0 / n), tau)
    same = (uni.A == imp.A and uni.B == imp.B
            and np.array_equal(uni.weights, imp.weights))
    check("importance reduces to uniform at equal weights", same,
          f"A={uni.A:g} B={uni.B:g}")

    big = uniform_with_replacement(1000, 10)
    rep = variance_mc(big, rng.standard_normal((1000, d)), trials, rng)
    check("large-instance Monte-Carlo band", not rep.violation,
          f"variance {rep.variance_est:.4f} vs bound {rep.rhs_bound:.4f} "
          f"(+4se = {rep.rhs_bound + 4 * rep.stderr:.4f})")

    outer = uniform_with_replacement(2, 1)
    inner = [uniform_with_replacement(2, 1)] * 2
    worst = -math.inf
    bias = 0.0
    for _ in range(instances):
        vecs = [rng.standard_normal((2, d)), rng.standard_normal((2, d))]
        res = composed_variance_exact(outer, inner, vecs)
        worst = max(worst, res.variance - res.rhs)
        bias = max(bias, res.mean_err)
    check("composed variance below propagated bound", worst <= 1e-12,
          f"max (variance - bound) = {worst:.3e}")
    check("composed unbiasedness", bias <= 1e-12, f"max mean error = {bias:.3e}")
    return lines, ok


# ---------------------------------------------------------------------------
# constants report
# ---------------------------------------------------------------------------


def constants_report(problem, tau: int = 1, epsilon: float = 1e-3,
                     delta0: float | None = None) -> tuple[list[str], dict]:
    """Smoothness constants plus per-method theoretical parameters and
    predicted call complexities."""
    lines = []
    values: dict = {}
    grouped = isinstance(problem, GroupedProblem)
    target = problem.flatten() if grouped else problem
    rep = lipschitz_constants(target)
    d0 = _delta0_of(problem, delta0)
    n = target.n
    lines.append(f"n={n} d={target.d}")
    lines.append(f"L_minus={rep.L_minus:.6g} mean_Li={rep.mean_L:.6g} "
                 f"max_Li={rep.L_i.max():.6g} method={rep.method}")
    values.update(L_minus=rep.L_minus, mean_L=rep.mean_L)

    for method in METHODS:
        plan = plan_single(target, method, tau)
        values[method] = plan
        row = (f"{method:14s} gamma={plan.gamma:.6g} p={plan.p:.6g} "
               f"Lplus^2={plan.plus_sq:.6g} Lpm^2={plan.pm_sq:.6g}")
        if d0 is not None:
            T = iteration_budget(d0, epsilon, plan.gamma)
            per_iter = plan.p * n + (1 - plan.p) * 2 * plan.spec.expected_cardinality
            pred = n + T * per_iter
            row += f" T={T} predicted_calls={pred:.6g}"
            values[method + "_N"] = pred
        lines.append(row)

    if grouped and d0 is not None:
        # stratified regime: all groups every step, within-group subsampling
        g = problem.n
        total = float(problem.m.sum())
        li_pm = []
        for client in problem.clients:
            w = np.full(client.n, 1.0 / client.n)
            li_pm.append(_curvatures(client, w, client.smoothness())[1])
        li_pm = np.asarray(li_pm)
        flatrep = rep
        uni_plan = plan_single(target, "uniform", tau)
        scale = 2.0 * d0 / epsilon
        n_uniform = total + scale * max(math.sqrt(total) * math.sqrt(uni_plan.pm_sq),
                                        flatrep.L_minus)
        n_group = total + scale * max(math.sqrt(total) * math.sqrt(float(li_pm.mean())),
                                      g * flatrep.L_minus)
        values["N_uniform"] = n_uniform
        values["N_group"] = n_group
        values["group_ratio"] = n_group / n_uniform
        lines.append(f"stratified      N_group={n_group:.6g} N_uniform={n_uniform:.6g} "
                     f"ratio={n_group / n_uniform:.6g}")
    return lines, values
