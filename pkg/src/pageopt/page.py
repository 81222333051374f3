"""Loopless variance-reduced optimizer with pluggable sampling estimators.

The method keeps a gradient estimate g^t and iterates x^{t+1} = x^t - gamma
g^t; with probability p the estimate is refreshed from the full gradient,
otherwise it is corrected by a sampled estimate of the gradient differences.
Stepsize rules here turn certified smoothness and sampling constants into the
largest admissible gamma, for the nonconvex rate, its linear-rate variant
under a gradient-dominance constant mu, and the composed (client x data)
sampling setting.

Complexity is accounted in component-gradient calls: n for every full
refresh, two per raw sampled pick (one per point of the difference).
Monitoring gradients recorded in the trace are excluded from the counter.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .objective import GroupedProblem, Problem
from .sampling import SamplingSpec, apply_draw, draw

OUTPUT_RULES = ("uniform-random-iterate", "last-iterate", "best-gradient-iterate")


class PageConfigError(ValueError):
    """Invalid optimizer configuration."""


class PageDivergence(RuntimeError):
    """Iterates or objective became non-finite."""

    def __init__(self, iteration: int):
        super().__init__(f"non-finite iterate at iteration {iteration}")
        self.iteration = iteration


@dataclass
class PageConfig:
    """Run parameters: stepsize, refresh probability, iteration budget, seed.

    ``gamma_bound`` records the theoretical stepsize bound when gamma was
    produced by one of the stepsize rules, for audit; ``monitor_every``
    overrides the trace cadence (default max(1, T // 500)).
    """

    gamma: float
    p: float
    T: int
    seed: int
    output_rule: str = "uniform-random-iterate"
    monitor_every: int | None = None
    gamma_bound: float | None = None

    def __post_init__(self):
        if not (self.gamma > 0 and math.isfinite(self.gamma)):
            raise PageConfigError("stepsize must be positive and finite")
        if not 0.0 < self.p <= 1.0:
            raise PageConfigError("refresh probability must lie in (0, 1]")
        if int(self.T) < 1:
            raise PageConfigError("iteration budget must be at least 1")
        self.T = int(self.T)
        if self.output_rule not in OUTPUT_RULES:
            raise PageConfigError(f"output rule must be one of {OUTPUT_RULES}")

    @property
    def cadence(self) -> int:
        return self.monitor_every or max(1, self.T // 500)


@dataclass
class Trace:
    """Per-run record: monitored iterations plus run outputs.

    ``est_err_sq`` is the monitored squared estimator error ||g - grad f||^2,
    a diagnostic from which the run's Lyapunov sequence derives.
    """

    iterations: np.ndarray
    calls: np.ndarray
    grad_norm_sq: np.ndarray
    objective: np.ndarray
    est_err_sq: np.ndarray
    refreshed: np.ndarray
    final_point: np.ndarray
    selected_point: np.ndarray
    selected_iteration: int
    delta0: float
    total_calls: float
    gamma: float
    p: float
    T: int
    seed: int
    output_rule: str

    def calls_to_reach(self, eps: float) -> float:
        """Calls at the first monitored iterate with grad_norm_sq <= eps."""
        hit = np.nonzero(self.grad_norm_sq <= eps)[0]
        return float(self.calls[hit[0]]) if hit.size else math.nan

    def lyapunov(self, f_star: float) -> np.ndarray:
        """Monitored potential (f - f*) + gamma/(2p) ||g - grad f||^2."""
        return (self.objective - f_star) + self.gamma / (2.0 * self.p) * self.est_err_sq


# ---------------------------------------------------------------------------
# parameter selection
# ---------------------------------------------------------------------------


def _variance_term(A: float, B: float, L_plus_w_sq: float, L_pm_w_sq: float) -> float:
    for name, val in (("A", A), ("B", B), ("L_plus_w_sq", L_plus_w_sq),
                      ("L_pm_w_sq", L_pm_w_sq)):
        if val < 0:
            raise PageConfigError(f"{name} must be nonnegative")
    term = (A - B) * L_plus_w_sq + B * L_pm_w_sq
    if term < 0:
        if term < -1e-12 * max(1.0, A * L_plus_w_sq):
            raise PageConfigError("negative variance term; check constants")
        term = 0.0
    return term


def _inverse_rate(L_minus: float, scaled_variance: float) -> float:
    denom = L_minus + math.sqrt(scaled_variance)
    if denom <= 0:
        raise PageConfigError("cannot certify a stepsize: zero curvature bound")
    return 1.0 / denom


def stepsize_nonconvex(L_minus: float, A: float, B: float, L_plus_w_sq: float,
                       L_pm_w_sq: float, p: float) -> float:
    """Largest stepsize certified for the nonconvex rate 2 Delta0/(gamma T)."""
    if not 0.0 < p <= 1.0:
        raise PageConfigError("refresh probability must lie in (0, 1]")
    if L_minus < 0:
        raise PageConfigError("L_minus must be nonnegative")
    term = _variance_term(A, B, L_plus_w_sq, L_pm_w_sq)
    return _inverse_rate(L_minus, (1.0 - p) / p * term)


def stepsize_pl(L_minus: float, A: float, B: float, L_plus_w_sq: float,
                L_pm_w_sq: float, p: float, mu: float) -> float:
    """Largest stepsize certified for the linear rate (1 - gamma mu)^T."""
    if mu <= 0:
        raise PageConfigError("gradient-dominance constant must be positive")
    if not 0.0 < p <= 1.0:
        raise PageConfigError("refresh probability must lie in (0, 1]")
    term = _variance_term(A, B, L_plus_w_sq, L_pm_w_sq)
    first = _inverse_rate(L_minus, 2.0 * (1.0 - p) / p * term)
    return min(first, p / (2.0 * mu))


def stepsize_composed(L_minus: float, composed, p: float) -> float:
    """Stepsize from the effective variance constant of a composed sampling."""
    if not 0.0 < p <= 1.0:
        raise PageConfigError("refresh probability must lie in (0, 1]")
    eff = composed.effective if hasattr(composed, "effective") else float(composed)
    if eff < 0:
        raise PageConfigError("effective variance constant must be nonnegative")
    return _inverse_rate(L_minus, (1.0 - p) / p * eff)


def default_p(cardinality: float, n: int) -> float:
    """Refresh probability |S| / (|S| + n) balancing refresh and sampling cost."""
    if cardinality <= 0:
        raise PageConfigError("expected cardinality must be positive")
    return cardinality / (cardinality + n)


def iteration_budget(delta0: float, epsilon: float, gamma: float) -> int:
    """Smallest T with 2 delta0 / (gamma T) <= epsilon."""
    if delta0 <= 0 or epsilon <= 0 or gamma <= 0:
        raise PageConfigError("delta0, epsilon and gamma must be positive")
    return max(1, math.ceil(2.0 * delta0 / (gamma * epsilon)))


def expected_complexity(n: int, cardinality: float, T: int) -> float:
    """Predicted total gradient calls n + 2 |S| T for a T-iteration run."""
    if n <= 0 or cardinality <= 0 or T < 0:
        raise PageConfigError("need positive sizes")
    return float(n) + 2.0 * cardinality * T


# ---------------------------------------------------------------------------
# the optimizer
# ---------------------------------------------------------------------------


class _Recorder:
    def __init__(self):
        self.iters: list[int] = []
        self.calls: list[float] = []
        self.gns: list[float] = []
        self.obj: list[float] = []
        self.err: list[float] = []
        self.refreshed: list[bool] = []

    def add(self, t, calls, grad, obj, g, refreshed):
        if not math.isfinite(obj):
            raise PageDivergence(t)
        self.iters.append(t)
        self.calls.append(calls)
        self.gns.append(float(grad @ grad))
        self.obj.append(obj)
        dev = g - grad
        self.err.append(float(dev @ dev))
        self.refreshed.append(refreshed)


def _finish(rec: _Recorder, cfg: PageConfig, x, selected, sel_iter, best_point,
            calls, f_star) -> Trace:
    obj = np.array(rec.obj)
    fstar = f_star if f_star is not None else float(obj.min())
    if cfg.output_rule == "last-iterate":
        selected, sel_iter = x, cfg.T
    elif cfg.output_rule == "best-gradient-iterate":
        selected, sel_iter = best_point
    return Trace(
        iterations=np.array(rec.iters, dtype=np.int64),
        calls=np.array(rec.calls),
        grad_norm_sq=np.array(rec.gns),
        objective=obj,
        est_err_sq=np.array(rec.err),
        refreshed=np.array(rec.refreshed, dtype=bool),
        final_point=x,
        selected_point=selected,
        selected_iteration=int(sel_iter),
        delta0=float(obj[0] - fstar),
        total_calls=float(calls),
        gamma=cfg.gamma, p=cfg.p, T=cfg.T, seed=cfg.seed,
        output_rule=cfg.output_rule,
    )


def run_page(problem: Problem, spec: SamplingSpec, cfg: PageConfig,
             x0: np.ndarray | None = None) -> Trace:
    """Run the optimizer on a single-level finite sum.

    The per-run stream drives, in order: the output-iterate selection (once),
    then per iteration the refresh coin followed by the sampling draw.
    """
    if problem.n != spec.n:
        raise PageConfigError("problem and sampling disagree on component count")
    rng = np.random.default_rng(cfg.seed)
    T, gamma, K = cfg.T, cfg.gamma, cfg.cadence
    x = np.array(problem.x0 if x0 is None else x0, dtype=float)
    sel_iter = int(rng.integers(T)) if cfg.output_rule == "uniform-random-iterate" else 0
    selected = x.copy()

    g = problem.full_grad(x)
    calls = problem.total_call_cost()
    refreshed = True
    rec = _Recorder()
    best = (x.copy(), 0, math.inf)

    unit_costs = problem.call_costs is None
    for t in range(T):
        if t % K == 0:
            grad = problem.full_grad(x)
            rec.add(t, calls, grad, problem.value(x), g, refreshed)
            gns = rec.gns[-1]
            if gns < best[2]:
                best = (x.copy(), t, gns)
        if t == sel_iter:
            selected = x.copy()
        x_new = x - gamma * g
        if not np.all(np.isfinite(x_new)):
            raise PageDivergence(t + 1)
        if rng.random() < cfg.p:
            g = problem.full_grad(x_new)
            calls += problem.total_call_cost()
            refreshed = True
        else:
            d = draw(spec, rng)
            g = g + apply_draw(d, lambda i: problem.component_grad_diff(i, x_new, x))
            if unit_costs:
                calls += 2.0 * d.raw_size
            else:
                calls += 2.0 * float(d.raw_counts @ problem.call_costs[d.indices])
            refreshed = False
        x = x_new

    grad = problem.full_grad(x)
    rec.add(T, calls, grad, problem.value(x), g, refreshed)
    if rec.gns[-1] < best[2]:
        best = (x.copy(), T, rec.gns[-1])
    return _finish(rec, cfg, x, selected, sel_iter, best[:2], calls, problem.f_star)


def run_page_composed(grouped: GroupedProblem, outer: SamplingSpec,
                      inner: Sequence[SamplingSpec], cfg: PageConfig,
                      x0: np.ndarray | None = None) -> Trace:
    """Run the optimizer with an outer client sampling and per-client inner
    samplings over each client's data.

    Inner draws are materialized only for clients the outer draw references,
    once per distinct client; call accounting counts the evaluated
    (client, point) pairs, two calls each.
    """
    if outer.n != grouped.n:
        raise PageConfigError("outer sampling and problem disagree on client count")
    if outer.B > 1.0 + 1e-12:
        raise PageConfigError("outer sampling must have B <= 1")
    if len(inner) != grouped.n:
        raise PageConfigError("need one inner sampling per client")
    for i, s in enumerate(inner):
        if s.n != grouped.m[i]:
            raise PageConfigError(f"inner sampling {i} does not match client size")

    rng = np.random.default_rng(cfg.seed)
    T, gamma, K = cfg.T, cfg.gamma, cfg.cadence
    x = np.array(grouped.x0 if x0 is None else x0, dtype=float)
    sel_iter = int(rng.integers(T)) if cfg.output_rule == "uniform-random-iterate" else 0
    selected = x.copy()

    g = grouped.full_grad(x)
    calls = grouped.total_call_cost()
    refreshed = True
    rec = _Recorder()
    best = (x.copy(), 0, math.inf)

    for t in range(T):
        if t % K == 0:
            grad = grouped.full_grad(x)
            rec.add(t, calls, grad, grouped.value(x), g, refreshed)
            if rec.gns[-1] < best[2]:
                best = (x.copy(), t, rec.gns[-1])
        if t == sel_iter:
            selected = x.copy()
        x_new = x - gamma * g
        if not np.all(np.isfinite(x_new)):
            raise PageDivergence(t + 1)
        if rng.random() < cfg.p:
            g = grouped.full_grad(x_new)
            calls += grouped.total_call_cost()
            refreshed = True
        else:
            od = draw(outer, rng)
            cost = [0.0]

            def client_estimate(i: int) -> np.ndarray:
                spec_i = inner[i]
                client = grouped.clients[i]
                if spec_i.kind == "full-batch":
                    cost[0] += client.total_call_cost()
                    return grouped.client_grad_diff(i, x_new, x)
                di = draw(spec_i, rng)
                if client.call_costs is None:
                    cost[0] += float(di.raw_size)
                else:
                    cost[0] += float(di.raw_counts @ client.call_costs[di.indices])
                return apply_draw(di, lambda j: client.component_grad_diff(j, x_new, x))

            g = g + apply_draw(od, client_estimate)
            calls += 2.0 * cost[0]
            refreshed = False
        x = x_new

    grad = grouped.full_grad(x)
    rec.add(T, calls, grad, grouped.value(x), g, refreshed)
    if rec.gns[-1] < best[2]:
        best = (x.copy(), T, rec.gns[-1])
    return _finish(rec, cfg, x, selected, sel_iter, best[:2], calls, grouped.f_star)
