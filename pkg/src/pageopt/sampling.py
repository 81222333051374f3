"""Unbiased mean-estimating samplings with certified variance constants.

Each sampling scheme estimates the mean of n vectors from a random subset
(possibly with repetitions) and carries constants (A, B, weights w) certifying

    E||S(a_1..a_n) - mean||^2  <=  (A/n) sum_i ||a_i||^2/(n w_i) - B ||mean||^2.

For every built-in kind the certificate holds with equality, which the
enumeration verifier checks exactly on small instances and the Monte-Carlo
verifier checks statistically on large ones. Samplings compose: an outer
sampling over clients applied to inner samplings over each client's data is
again unbiased, with an effective variance constant used for stepsizes.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations, product
from math import comb, prod
from typing import Callable, Sequence

import numpy as np

KINDS = (
    "uniform-with-replacement",
    "importance",
    "nice",
    "independent",
    "extended-nice",
    "full-batch",
)

ENUM_BUDGET = 1_000_000


class SamplingError(ValueError):
    """Invalid sampling parameters."""


class EnumerationBudgetError(RuntimeError):
    """Outcome space too large for exhaustive enumeration."""


@dataclass(frozen=True)
class SamplingSpec:
    """A sampling scheme over a ground set of size n with certified constants.

    ``expected_cardinality`` is the expected number of distinct arguments a
    realization depends on; for with-replacement kinds it stores the nominal
    batch size, an upper bound used by the complexity accounting.
    """

    kind: str
    n: int
    A: float
    B: float
    weights: np.ndarray
    expected_cardinality: float
    tau: int | None = None
    probs: np.ndarray | None = None       # categorical q (with-replacement kinds)
    bern: np.ndarray | None = None        # Bernoulli p (independent)
    reps: np.ndarray | None = None        # repetition counts l (extended nice)

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        if self.probs is not None:
            object.__setattr__(self, "probs", np.asarray(self.probs, dtype=float))
            object.__setattr__(self, "_cum", np.cumsum(self.probs))
        if self.reps is not None:
            object.__setattr__(self, "reps", np.asarray(self.reps, dtype=np.int64))
            object.__setattr__(self, "_cumreps", np.cumsum(self.reps))

    def describe(self) -> dict:
        out = {"kind": self.kind, "n": self.n}
        if self.tau is not None:
            out["tau"] = self.tau
        if self.kind == "importance":
            out["q"] = self.probs.tolist()
        if self.kind == "independent":
            out["p"] = self.bern.tolist()
        if self.kind == "extended-nice":
            out["l"] = self.reps.tolist()
        return out


@dataclass
class Draw:
    """One sampling realization: the estimator sum_k coeffs[k] * a[indices[k]].

    Repeated raw picks of the same index are merged (indices are distinct and
    sorted); ``raw_counts`` keeps per-index raw pick counts and ``raw_size``
    their total, both used by the conservative call accounting.
    """

    indices: np.ndarray
    coeffs: np.ndarray
    raw_size: int
    raw_counts: np.ndarray | None = None

    def __post_init__(self):
        if self.raw_counts is None:
            self.raw_counts = np.ones(self.indices.shape[0], dtype=np.int64)


# ---------------------------------------------------------------------------
# constructors
# ---------------------------------------------------------------------------


def _check_tau(tau: int, limit: int) -> int:
    tau = int(tau)
    if not 1 <= tau <= limit:
        raise SamplingError(f"batch size {tau} out of range [1, {limit}]")
    return tau


def nice(n: int, tau: int) -> SamplingSpec:
    """Uniform subset of fixed size tau, without replacement."""
    tau = _check_tau(tau, n)
    factor = 0.0 if tau == n else (n - tau) / (tau * (n - 1))
    return SamplingSpec("nice", n, factor, factor, np.full(n, 1.0 / n),
                        float(tau), tau=tau)


def importance(n: int, q: Sequence[float], tau: int) -> SamplingSpec:
    """tau i.i.d. categorical picks with probabilities q, rescaled by 1/(n q)."""
    tau = _check_tau(tau, 10**9)
    q = np.asarray(q, dtype=float)
    if q.shape != (n,) or np.any(q <= 0) or abs(q.sum() - 1.0) > 1e-12:
        raise SamplingError("q must be a strictly positive simplex vector of length n")
    return SamplingSpec("importance", n, 1.0 / tau, 1.0 / tau, q.copy(),
                        float(tau), tau=tau, probs=q.copy())


def uniform_with_replacement(n: int, tau: int) -> SamplingSpec:
    """tau i.i.d. uniform picks with replacement."""
    tau = _check_tau(tau, 10**9)
    q = np.full(n, 1.0 / n)
    return SamplingSpec("uniform-with-replacement", n, 1.0 / tau, 1.0 / tau,
                        q, float(tau), tau=tau, probs=q)


def independent(p: Sequence[float]) -> SamplingSpec:
    """Per-index Bernoulli inclusion with probabilities p."""
    p = np.asarray(p, dtype=float)
    n = p.shape[0]
    if np.any((p <= 0) | (p >= 1)):
        raise SamplingError("inclusion probabilities must lie strictly in (0, 1)")
    ratio = p / (1.0 - p)
    total = float(ratio.sum())
    return SamplingSpec("independent", n, 1.0 / total, 0.0, ratio / total,
                        float(p.sum()), bern=p.copy())


def extended_nice(l: Sequence[int], tau: int) -> SamplingSpec:
    """Each index i repeated l_i times, then a Nice draw over the expanded set.

    The variance factor uses the expanded-set size N = sum(l); the enumeration
    verifier confirms the certificate holds with equality under this choice.
    """
    l = np.asarray(l, dtype=np.int64)
    n = l.shape[0]
    if np.any(l < 1):
        raise SamplingError("repetition counts must be integers >= 1")
    big_n = int(l.sum())
    tau = _check_tau(tau, big_n)
    factor = 0.0 if tau == big_n else (big_n - tau) / (tau * (big_n - 1))
    return SamplingSpec("extended-nice", n, factor, factor, l / big_n,
                        float(tau), tau=tau, reps=l)


def full_batch(n: int) -> SamplingSpec:
    """Degenerate zero-variance sampling: the exact mean."""
    return SamplingSpec("full-batch", n, 0.0, 0.0, np.full(n, 1.0 / n), float(n))


def build(kind: str, n: int, tau: int | None = None, q=None, p=None, l=None
          ) -> SamplingSpec:
    """Construct a spec by kind name; used by the config/CLI layer."""
    if kind == "nice":
        return nice(n, tau)
    if kind == "importance":
        return importance(n, q, tau)
    if kind == "uniform-with-replacement":
        return uniform_with_replacement(n, tau)
    if kind == "independent":
        return independent(p)
    if kind == "extended-nice":
        return extended_nice(l, tau)
    if kind == "full-batch":
        return full_batch(n)
    raise SamplingError(f"unknown sampling kind {kind!r}; expected one of {KINDS}")


# ---------------------------------------------------------------------------
# drawing
# ---------------------------------------------------------------------------


def _partial_fisher_yates(n: int, tau: int, rng: np.random.Generator) -> np.ndarray:
    """tau distinct uniform indices from [0, n) in O(tau) time and memory."""
    perm: dict[int, int] = {}
    out = np.empty(tau, dtype=np.int64)
    for j in range(tau):
        r = int(rng.integers(j, n))
        out[j] = perm.get(r, r)
        perm[r] = perm.get(j, j)
    return out


def _aggregate(idx: np.ndarray, coeff: np.ndarray, raw: int) -> Draw:
    uniq, inv, counts = np.unique(idx, return_inverse=True, return_counts=True)
    summed = np.zeros(uniq.shape[0])
    np.add.at(summed, inv, coeff)
    return Draw(uniq, summed, raw, raw_counts=counts)


def draw(spec: SamplingSpec, rng: np.random.Generator) -> Draw:
    """Sample one realization from the spec using the given stream."""
    n = spec.n
    if spec.kind == "full-batch":
        return Draw(np.arange(n), np.full(n, 1.0 / n), n)
    if spec.kind == "nice":
        idx = np.sort(_partial_fisher_yates(n, spec.tau, rng))
        return Draw(idx, np.full(spec.tau, 1.0 / spec.tau), spec.tau)
    if spec.kind in ("importance", "uniform-with-replacement"):
        u = rng.random(spec.tau)
        idx = np.searchsorted(spec._cum, u, side="right")
        np.clip(idx, 0, n - 1, out=idx)
        coeff = 1.0 / (spec.tau * n * spec.probs[idx])
        return _aggregate(idx, coeff, spec.tau)
    if spec.kind == "independent":
        mask = rng.random(n) < spec.bern
        idx = np.nonzero(mask)[0]
        return Draw(idx, 1.0 / (n * spec.bern[idx]), int(idx.size))
    if spec.kind == "extended-nice":
        big_n = int(spec.reps.sum())
        picks = _partial_fisher_yates(big_n, spec.tau, rng)
        orig = np.searchsorted(spec._cumreps, picks, side="right")
        coeff = big_n / (n * spec.tau * spec.reps[orig].astype(float))
        return _aggregate(orig, coeff, spec.tau)
    raise SamplingError(f"unknown sampling kind {spec.kind!r}")


def apply_draw(d: Draw, vector_fn: Callable[[int], np.ndarray]) -> np.ndarray:
    """Evaluate the estimator, touching only the indices the draw references."""
    out = None
    for i, c in zip(d.indices, d.coeffs):
        v = c * vector_fn(int(i))
        out = v if out is None else out + v
    return out


def apply_draw_matrix(d: Draw, vectors: np.ndarray) -> np.ndarray:
    """apply_draw against a stacked (n, d) array of vectors."""
    if d.indices.size == 0:
        return np.zeros(vectors.shape[1])
    return d.coeffs @ vectors[d.indices]


# ---------------------------------------------------------------------------
# exact enumeration
# ---------------------------------------------------------------------------


def outcome_count(spec: SamplingSpec) -> int:
    if spec.kind == "full-batch":
        return 1
    if spec.kind == "nice":
        return comb(spec.n, spec.tau)
    if spec.kind in ("importance", "uniform-with-replacement"):
        return spec.n ** spec.tau
    if spec.kind == "independent":
        return 2 ** spec.n
    if spec.kind == "extended-nice":
        return comb(int(spec.reps.sum()), spec.tau)
    raise SamplingError(spec.kind)


def enumerate_draws(spec: SamplingSpec, budget: int = ENUM_BUDGET):
    """Yield (probability, Draw) over the spec's full outcome space."""
    count = outcome_count(spec)
    if count > budget:
        raise EnumerationBudgetError(
            f"{spec.kind} outcome space has {count} > {budget} outcomes")
    n = spec.n
    if spec.kind == "full-batch":
        yield 1.0, Draw(np.arange(n), np.full(n, 1.0 / n), n)
        return
    if spec.kind == "nice":
        pr = 1.0 / comb(n, spec.tau)
        for subset in combinations(range(n), spec.tau):
            idx = np.array(subset, dtype=np.int64)
            yield pr, Draw(idx, np.full(spec.tau, 1.0 / spec.tau), spec.tau)
        return
    if spec.kind in ("importance", "uniform-with-replacement"):
        q = spec.probs
        for picks in product(range(n), repeat=spec.tau):
            pr = float(prod(q[i] for i in picks))
            idx = np.array(picks, dtype=np.int64)
            coeff = 1.0 / (spec.tau * n * q[idx])
            yield pr, _aggregate(idx, coeff, spec.tau)
        return
    if spec.kind == "independent":
        p = spec.bern
        for mask in product((0, 1), repeat=n):
            m = np.array(mask, dtype=bool)
            pr = float(np.prod(np.where(m, p, 1.0 - p)))
            idx = np.nonzero(m)[0]
            yield pr, Draw(idx, 1.0 / (n * p[idx]), int(idx.size))
        return
    if spec.kind == "extended-nice":
        big_n = int(spec.reps.sum())
        cum = spec._cumreps
        pr = 1.0 / comb(big_n, spec.tau)
        for subset in combinations(range(big_n), spec.tau):
            picks = np.array(subset, dtype=np.int64)
            orig = np.searchsorted(cum, picks, side="right")
            coeff = big_n / (n * spec.tau * spec.reps[orig].astype(float))
            yield pr, _aggregate(orig, coeff, spec.tau)
        return
    raise SamplingError(spec.kind)


def _true_mean(vectors: np.ndarray) -> np.ndarray:
    # computed as the weighted dot the full-batch estimator performs, so the
    # degenerate sampling has exactly zero deviation
    n = vectors.shape[0]
    return np.full(n, 1.0 / n) @ vectors


def rhs_bound(spec: SamplingSpec, vectors: np.ndarray) -> float:
    """Right-hand side of the variance certificate for explicit vectors."""
    vectors = np.asarray(vectors, dtype=float)
    n = spec.n
    norms_sq = np.sum(vectors ** 2, axis=1)
    mean = _true_mean(vectors)
    lead = float((spec.A / n) * np.sum(norms_sq / (n * spec.weights)))
    return lead - spec.B * float(mean @ mean)


def variance_exact(spec: SamplingSpec, vectors: np.ndarray,
                   budget: int = ENUM_BUDGET) -> tuple[float, float]:
    """(exact variance by full enumeration, certificate right-hand side)."""
    vectors = np.asarray(vectors, dtype=float)
    mean = _true_mean(vectors)
    var = 0.0
    for pr, d in enumerate_draws(spec, budget):
        dev = apply_draw_matrix(d, vectors) - mean
        var += pr * float(dev @ dev)
    return var, rhs_bound(spec, vectors)


def enumerated_mean_error(spec: SamplingSpec, vectors: np.ndarray,
                          budget: int = ENUM_BUDGET) -> float:
    vectors = np.asarray(vectors, dtype=float)
    acc = np.zeros(vectors.shape[1])
    for pr, d in enumerate_draws(spec, budget):
        acc += pr * apply_draw_matrix(d, vectors)
    return float(np.linalg.norm(acc - _true_mean(vectors)))


def enumerated_cardinality(spec: SamplingSpec, budget: int = ENUM_BUDGET) -> float:
    """Expected number of distinct indices a realization depends on."""
    return sum(pr * d.indices.size for pr, d in enumerate_draws(spec, budget))


# ---------------------------------------------------------------------------
# Monte-Carlo verification
# ---------------------------------------------------------------------------


@dataclass
class MCVarianceReport:
    mean_err: float
    variance_est: float
    rhs_bound: float
    stderr: float
    trials: int
    violation: bool


def variance_mc(spec: SamplingSpec, vectors: np.ndarray, trials: int,
                rng: np.random.Generator) -> MCVarianceReport:
    """Monte-Carlo variance check for specs too large to enumerate.

    Flags a certificate violation only when the variance estimate exceeds the
    bound by more than four standard errors (one-sided test).
    """
    if trials < 1000:
        raise SamplingError("need at least 1000 trials")
    vectors = np.asarray(vectors, dtype=float)
    mean = _true_mean(vectors)
    acc = np.zeros(vectors.shape[1])
    sq = np.empty(trials)
    for t in range(trials):
        est = apply_draw_matrix(draw(spec, rng), vectors)
        acc += est
        dev = est - mean
        sq[t] = float(dev @ dev)
    var_est = float(sq.mean())
    se = float(sq.std(ddof=1) / np.sqrt(trials))
    bound = rhs_bound(spec, vectors)
    mean_err = float(np.linalg.norm(acc / trials - mean))
    # rounding floor: deviations of order eps * ||a|| square to ~1e-30 and
    # must not flag a certificate violation
    atol = (1e-12 * max(1.0, float(np.max(np.sum(vectors ** 2, axis=1))))) ** 2
    return MCVarianceReport(mean_err, var_est, bound, se, trials,
                            violation=var_est > bound + 4.0 * se + atol)


# ---------------------------------------------------------------------------
# importance weights
# ---------------------------------------------------------------------------


def optimal_weights(L: np.ndarray) -> np.ndarray:
    """Weights q_i proportional to L_i, minimizing the weighted curvature
    constant; attains ((1/n) sum L_i)^2. Zero constants get zero weight."""
    L = np.asarray(L, dtype=float)
    if np.any(L < 0):
        raise SamplingError("constants must be nonnegative")
    total = L.sum()
    if total <= 0:
        raise SamplingError("at least one constant must be positive")
    return L / total


# ---------------------------------------------------------------------------
# composition of samplings
# ---------------------------------------------------------------------------


@dataclass
class ComposedVariance:
    """Effective variance constant of an outer-over-inner composition, used in
    the composed stepsize rule. Reduces to (A-B) L+^2 + B Lpm^2 when every
    inner sampling is the full batch."""

    effective: float
    inner_term: float
    outer_term: float


def compose_variance(outer: SamplingSpec, inner: Sequence[SamplingSpec],
                     inner_plus_sq: Sequence[float], inner_pm_sq: Sequence[float],
                     outer_plus_sq: float, outer_pm_sq: float) -> ComposedVariance:
    """Effective constant for a composed sampling from per-level constants."""
    if outer.B > 1.0 + 1e-12:
        raise SamplingError("outer sampling must have B <= 1")
    n = outer.n
    if len(inner) != n or len(inner_plus_sq) != n or len(inner_pm_sq) != n:
        raise SamplingError("need one inner sampling and constant pair per client")
    inner_plus_sq = np.asarray(inner_plus_sq, dtype=float)
    inner_pm_sq = np.asarray(inner_pm_sq, dtype=float)
    a_i = np.array([s.A for s in inner])
    b_i = np.array([s.B for s in inner])
    lever = outer.A / (n * outer.weights) + (1.0 - outer.B) / n
    inner_term = float(np.mean(lever * ((a_i - b_i) * inner_plus_sq + b_i * inner_pm_sq)))
    outer_term = (outer.A - outer.B) * outer_plus_sq + outer.B * outer_pm_sq
    return ComposedVariance(inner_term + outer_term, inner_term, outer_term)


def composed_cardinality(outer: SamplingSpec, inner: Sequence[SamplingSpec]) -> float:
    """Expected number of (client, point) pairs one composed realization
    touches; inner draws are materialized once per distinct outer client."""
    ref = _reference_probs(outer)
    return float(sum(r * s.expected_cardinality for r, s in zip(ref, inner)))


def _reference_probs(spec: SamplingSpec) -> np.ndarray:
    """Probability that each index appears in a draw."""
    n = spec.n
    if spec.kind == "full-batch":
        return np.ones(n)
    if spec.kind == "nice":
        return np.full(n, spec.tau / n)
    if spec.kind in ("importance", "uniform-with-replacement"):
        return 1.0 - (1.0 - spec.probs) ** spec.tau
    if spec.kind == "independent":
        return spec.bern.copy()
    if spec.kind == "extended-nice":
        big_n = int(spec.reps.sum())
        # 1 - C(N - l_i, tau)/C(N, tau), computed stably in log space
        out = np.empty(n)
        for i, li in enumerate(spec.reps):
            if big_n - int(li) < spec.tau:
                out[i] = 1.0
            else:
                ratio = comb(big_n - int(li), spec.tau) / comb(big_n, spec.tau)
                out[i] = 1.0 - ratio
        return out
    raise SamplingError(spec.kind)


def lemma_rhs_composed(outer: SamplingSpec, inner: Sequence[SamplingSpec],
                       vectors: Sequence[np.ndarray]) -> float:
    """Variance bound for the composed estimator on explicit vectors: the
    inner certificates propagated through the outer one."""
    n = outer.n
    client_means = np.stack([np.asarray(v, dtype=float).mean(axis=0) for v in vectors])
    grand = client_means.mean(axis=0)
    total = 0.0
    for i in range(n):
        v = np.asarray(vectors[i], dtype=float)
        m_i = v.shape[0]
        inner_lead = (inner[i].A / m_i) * float(
            np.sum(np.sum(v ** 2, axis=1) / (m_i * inner[i].weights)))
        inner_bound = inner_lead - inner[i].B * float(client_means[i] @ client_means[i])
        lever = outer.A / (n * outer.weights[i]) + (1.0 - outer.B) / n
        total += lever * inner_bound / n
    outer_lead = (outer.A / n) * float(
        np.sum(np.sum(client_means ** 2, axis=1) / (n * outer.weights)))
    return total + outer_lead - outer.B * float(grand @ grand)


@dataclass
class ComposedEnumeration:
    mean_err: float
    variance: float
    rhs: float


def composed_variance_exact(outer: SamplingSpec, inner: Sequence[SamplingSpec],
                            vectors: Sequence[np.ndarray],
                            budget: int = ENUM_BUDGET) -> ComposedEnumeration:
    """Exhaustively enumerate the composed estimator's law and compare its
    variance against the propagated certificate."""
    if outer.B > 1.0 + 1e-12:
        raise SamplingError("outer sampling must have B <= 1")
    vectors = [np.asarray(v, dtype=float) for v in vectors]
    d = vectors[0].shape[1]
    grand = np.stack([v.mean(axis=0) for v in vectors]).mean(axis=0)

    outer_outcomes = list(enumerate_draws(outer, budget))
    inner_outcomes = [list(enumerate_draws(s, budget)) for s in inner]
    count = sum(
        prod(len(inner_outcomes[int(i)]) for i in od.indices)
        for _, od in outer_outcomes)
    if count > budget:
        raise EnumerationBudgetError(f"composed outcome space has {count} outcomes")

    acc = np.zeros(d)
    var = 0.0
    for po, od in outer_outcomes:
        chosen = [int(i) for i in od.indices]
        for combo in product(*(inner_outcomes[i] for i in chosen)):
            pr = po * prod(pi for pi, _ in combo)
            est = np.zeros(d)
            for coef, i, (_, idng) in zip(od.coeffs, chosen, combo):
                est += coef * apply_draw_matrix(idng, vectors[i])
            acc += pr * est
            dev = est - grand
            var += pr * float(dev @ dev)
    rhs = lemma_rhs_composed(outer, inner, vectors)
    return ComposedEnumeration(float(np.linalg.norm(acc - grand)), var, rhs)
