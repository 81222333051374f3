"""Finite-sum objectives and their smoothness-constant machinery.

A problem is an oracle for f(x) = (1/n) sum_i f_i(x): component values and
gradients, the full gradient, and whatever smoothness constants the problem
class supports (exact spectral values for quadratics, documented upper bounds
for everything else). Grouped problems hold one sub-problem per client and
expose the two-level mean f(x) = (1/n) sum_i (1/m_i) sum_j f_ij(x).

All oracles are immutable after construction and safe for concurrent
read-only use.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Vector = np.ndarray


class ObjectiveError(ValueError):
    """Raised for malformed oracle inputs (bad index, dimension mismatch)."""


def _check_point(x: Vector, d: int) -> Vector:
    x = np.asarray(x, dtype=float)
    if x.shape != (d,):
        raise ObjectiveError(f"expected point of dimension {d}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ObjectiveError("point has non-finite entries")
    return x


# ---------------------------------------------------------------------------
# problem base
# ---------------------------------------------------------------------------


class Problem:
    """Finite-sum objective with n components over R^d.

    Subclasses implement ``component_value`` and ``component_grad``; the mean
    oracles have generic implementations that subclasses may override with
    closed forms. ``call_costs`` weights each component in gradient-call
    accounting (defaults to one call per component).
    """

    kind = "generic"

    def __init__(self, n: int, d: int, x0: Vector | None = None,
                 f_star: float | None = None,
                 call_costs: np.ndarray | None = None):
        self.n = int(n)
        self.d = int(d)
        self.x0 = np.zeros(d) if x0 is None else np.asarray(x0, dtype=float)
        self.f_star = f_star
        self.call_costs = None if call_costs is None else np.asarray(call_costs, float)

    # -- component oracles -------------------------------------------------
    def component_value(self, i: int, x: Vector) -> float:
        raise NotImplementedError

    def component_grad(self, i: int, x: Vector) -> Vector:
        raise NotImplementedError

    def component_grad_diff(self, i: int, x: Vector, y: Vector) -> Vector:
        """grad f_i(x) - grad f_i(y); subclasses override when a closed form
        avoids cancellation or halves the work."""
        return self.component_grad(i, x) - self.component_grad(i, y)

    def _check_index(self, i: int) -> int:
        if not 0 <= i < self.n:
            raise ObjectiveError(f"component index {i} out of range [0, {self.n})")
        return int(i)

    # -- mean oracles -------------------------------------------------------
    def value(self, x: Vector) -> float:
        x = _check_point(x, self.d)
        return float(np.mean([self.component_value(i, x) for i in range(self.n)]))

    def full_grad(self, x: Vector) -> Vector:
        x = _check_point(x, self.d)
        g = np.zeros(self.d)
        for i in range(self.n):
            g += self.component_grad(i, x)
        return g / self.n

    # -- accounting ---------------------------------------------------------
    def call_cost(self, i: int) -> float:
        return 1.0 if self.call_costs is None else float(self.call_costs[i])

    def total_call_cost(self) -> float:
        return float(self.n) if self.call_costs is None else float(self.call_costs.sum())

    # -- structure ----------------------------------------------------------
    def subset(self, indices: Sequence[int]) -> "Problem":
        """Problem restricted to the given components (mean over the subset)."""
        return SubsetProblem(self, np.asarray(indices, dtype=int))

    def smoothness(self) -> "SmoothnessReport":
        raise ObjectiveError(f"smoothness constants unsupported for kind {self.kind!r}")


class SubsetProblem(Problem):
    """View of a subset of a parent problem's components."""

    def __init__(self, parent: Problem, indices: np.ndarray, x0: Vector | None = None):
        costs = None
        if parent.call_costs is not None:
            costs = parent.call_costs[indices]
        super().__init__(len(indices), parent.d,
                         x0=parent.x0 if x0 is None else x0, call_costs=costs)
        self.parent = parent
        self.indices = indices
        self.kind = parent.kind

    def component_value(self, i, x):
        return self.parent.component_value(int(self.indices[self._check_index(i)]), x)

    def component_grad(self, i, x):
        return self.parent.component_grad(int(self.indices[self._check_index(i)]), x)

    def component_grad_diff(self, i, x, y):
        return self.parent.component_grad_diff(int(self.indices[self._check_index(i)]), x, y)


# ---------------------------------------------------------------------------
# quadratic problems: f_i(x) = 1/2 x^T A_i x + b_i^T x
# ---------------------------------------------------------------------------


class QuadraticProblem(Problem):
    """Base for quadratics; provides exact spectral smoothness constants."""

    kind = "quadratic"

    def component_matrix(self, i: int) -> np.ndarray:
        raise NotImplementedError

    def component_linear(self, i: int) -> Vector:
        raise NotImplementedError

    def mean_matrix(self) -> np.ndarray:
        raise NotImplementedError

    def mean_linear(self) -> Vector:
        raise NotImplementedError

    def component_value(self, i, x):
        i = self._check_index(i)
        x = _check_point(x, self.d)
        ax = self.component_matvec(i, x)
        return float(0.5 * x @ ax + self.component_linear(i) @ x)

    def component_grad(self, i, x):
        i = self._check_index(i)
        x = _check_point(x, self.d)
        return self.component_matvec(i, x) + self.component_linear(i)

    def component_grad_diff(self, i, x, y):
        i = self._check_index(i)
        return self.component_matvec(i, np.asarray(x) - np.asarray(y))

    def component_matvec(self, i: int, x: Vector) -> Vector:
        return self.component_matrix(i) @ x

    def value(self, x):
        x = _check_point(x, self.d)
        return float(0.5 * x @ (self.mean_matrix() @ x) + self.mean_linear() @ x)

    def full_grad(self, x):
        x = _check_point(x, self.d)
        return self.mean_matrix() @ x + self.mean_linear()

    def minimum(self) -> tuple[float, Vector] | None:
        """(f*, x*) when the mean matrix is positive definite, else None."""
        mat = self.mean_matrix()
        try:
            low = np.linalg.cholesky(mat)
        except np.linalg.LinAlgError:
            return None
        rhs = -self.mean_linear()
        xstar = np.linalg.solve(low.T, np.linalg.solve(low, rhs))
        return self.value(xstar), xstar

    def smoothness(self) -> "SmoothnessReport":
        l_i = np.array([spectral_norm(self.component_matrix(i)) for i in range(self.n)])
        l_minus = spectral_norm(self.mean_matrix())
        return SmoothnessReport(L_minus=l_minus, L_i=l_i, method="exact-eigenvalue")


class DenseQuadraticProblem(QuadraticProblem):
    """Generic quadratic with explicit symmetric matrices."""

    def __init__(self, matrices: Sequence[np.ndarray], linears: Sequence[Vector],
                 x0: Vector | None = None):
        mats = [np.asarray(m, dtype=float) for m in matrices]
        lins = [np.asarray(b, dtype=float) for b in linears]
        if len(mats) != len(lins) or not mats:
            raise ObjectiveError("need equal, nonzero numbers of matrices and vectors")
        d = mats[0].shape[0]
        for m in mats:
            if m.shape != (d, d) or not np.allclose(m, m.T, atol=1e-12):
                raise ObjectiveError("matrices must be symmetric and of equal shape")
        super().__init__(len(mats), d, x0=x0)
        self.matrices = np.stack(mats)
        self.linears = np.stack(lins)
        self._mean_matrix = self.matrices.mean(axis=0)
        self._mean_linear = self.linears.mean(axis=0)
        mn = self.minimum()
        self.f_star = mn[0] if mn is not None else None

    def component_matrix(self, i):
        return self.matrices[self._check_index(i)]

    def component_linear(self, i):
        return self.linears[self._check_index(i)]

    def mean_matrix(self):
        return self._mean_matrix

    def mean_linear(self):
        return self._mean_linear


class TridiagQuadraticProblem(QuadraticProblem):
    """Quadratic with A_i = nu_i * B + sigma * I for a shared tridiagonal
    stencil B; gradient oracles cost O(d).

    ``diag_base``/``off_base`` are the diagonals of B, ``nu`` the per-component
    scales and ``sigma`` the common scalar shift.
    """

    def __init__(self, diag_base: Vector, off_base: Vector, nu: Vector,
                 sigma: float, linears: np.ndarray, x0: Vector | None = None,
                 meta: dict | None = None):
        diag_base = np.asarray(diag_base, dtype=float)
        off_base = np.asarray(off_base, dtype=float)
        nu = np.asarray(nu, dtype=float)
        linears = np.asarray(linears, dtype=float)
        d = diag_base.shape[0]
        if off_base.shape != (d - 1,):
            raise ObjectiveError("off diagonal must have length d-1")
        if linears.shape != (nu.shape[0], d):
            raise ObjectiveError("linear terms must be (n, d)")
        super().__init__(nu.shape[0], d, x0=x0)
        self.diag_base = diag_base
        self.off_base = off_base
        self.nu = nu
        self.sigma = float(sigma)
        self.linears = linears
        self.meta = dict(meta or {})
        self._nu_mean = float(nu.mean())
        self._mean_linear = linears.mean(axis=0)
        mn = self.minimum()
        self.f_star = mn[0] if mn is not None else None

    # -- O(d) oracles -------------------------------------------------------
    def _base_matvec(self, x: Vector) -> Vector:
        y = self.diag_base * x
        y[:-1] += self.off_base * x[1:]
        y[1:] += self.off_base * x[:-1]
        return y

    def component_matvec(self, i, x):
        x = np.asarray(x, dtype=float)
        return self.nu[i] * self._base_matvec(x) + self.sigma * x

    def full_grad(self, x):
        x = _check_point(x, self.d)
        return self._nu_mean * self._base_matvec(x) + self.sigma * x + self._mean_linear

    def value(self, x):
        x = _check_point(x, self.d)
        ax = self._nu_mean * self._base_matvec(x) + self.sigma * x
        return float(0.5 * x @ ax + self._mean_linear @ x)

    # -- dense access for spectral work --------------------------------------
    def base_matrix(self) -> np.ndarray:
        mat = np.diag(self.diag_base)
        idx = np.arange(self.d - 1)
        mat[idx, idx + 1] = self.off_base
        mat[idx + 1, idx] = self.off_base
        return mat

    def component_matrix(self, i):
        i = self._check_index(i)
        return self.nu[i] * self.base_matrix() + self.sigma * np.eye(self.d)

    def component_linear(self, i):
        return self.linears[self._check_index(i)]

    def mean_matrix(self):
        return self._nu_mean * self.base_matrix() + self.sigma * np.eye(self.d)

    def mean_linear(self):
        return self._mean_linear

    # -- spectra -------------------------------------------------------------
    def base_spectrum_extremes(self) -> tuple[float, float]:
        """(min, max) eigenvalue of the stencil B: closed form for the
        constant-diagonal stencil, exact tridiagonal eigenvalues otherwise."""
        if np.ptp(self.diag_base) == 0.0 and (self.d < 2 or np.ptp(self.off_base) == 0.0):
            a = self.diag_base[0]
            b = self.off_base[0] if self.d > 1 else 0.0
            k = np.arange(1, self.d + 1)
            eig = a + 2.0 * b * np.cos(k * np.pi / (self.d + 1))
            return float(eig.min()), float(eig.max())
        from scipy.linalg import eigvalsh_tridiagonal
        eig = eigvalsh_tridiagonal(self.diag_base, self.off_base)
        return float(eig[0]), float(eig[-1])

    def _is_toeplitz(self) -> bool:
        return np.ptp(self.diag_base) == 0.0 and (self.d < 2 or np.ptp(self.off_base) == 0.0)

    def smoothness(self) -> "SmoothnessReport":
        lo, hi = self.base_spectrum_extremes()
        ext = np.stack([self.nu * lo + self.sigma, self.nu * hi + self.sigma])
        l_i = np.abs(ext).max(axis=0)
        l_minus = max(abs(self._nu_mean * lo + self.sigma),
                      abs(self._nu_mean * hi + self.sigma))
        method = "closed-form" if self._is_toeplitz() else "exact-eigenvalue"
        return SmoothnessReport(L_minus=float(l_minus), L_i=l_i, method=method)

    def min_eigenvalue_mean(self) -> float:
        lo, hi = self.base_spectrum_extremes()
        return min(self._nu_mean * lo, self._nu_mean * hi) + self.sigma

    def subset(self, indices):
        idx = np.asarray(indices, dtype=int)
        return TridiagQuadraticProblem(self.diag_base, self.off_base, self.nu[idx],
                                       self.sigma, self.linears[idx], x0=self.x0)


# ---------------------------------------------------------------------------
# grouped (two-level) problems
# ---------------------------------------------------------------------------


class GroupedProblem:
    """Two-level mean f(x) = (1/n) sum_i f_i(x) with f_i the mean over client
    i's own finite-sum problem (m_i components)."""

    def __init__(self, clients: Sequence[Problem], x0: Vector | None = None):
        if not clients:
            raise ObjectiveError("need at least one client")
        d = clients[0].d
        for c in clients:
            if c.d != d:
                raise ObjectiveError("clients disagree on dimension")
        self.clients = list(clients)
        self.n = len(self.clients)
        self.d = d
        self.m = np.array([c.n for c in self.clients])
        self.x0 = clients[0].x0 if x0 is None else np.asarray(x0, dtype=float)
        self.f_star: float | None = None

    def value(self, x: Vector) -> float:
        return float(np.mean([c.value(x) for c in self.clients]))

    def full_grad(self, x: Vector) -> Vector:
        g = np.zeros(self.d)
        for c in self.clients:
            g += c.full_grad(x)
        return g / self.n

    def client_grad(self, i: int, x: Vector) -> Vector:
        return self.clients[i].full_grad(x)

    def client_grad_diff(self, i: int, x: Vector, y: Vector) -> Vector:
        return self.clients[i].full_grad(x) - self.clients[i].full_grad(y)

    def pair_grad(self, i: int, j: int, x: Vector) -> Vector:
        return self.clients[i].component_grad(j, x)

    def total_call_cost(self) -> float:
        return float(sum(c.total_call_cost() for c in self.clients))

    def flatten(self) -> Problem:
        """Single-level problem whose component i is client i's mean; one
        component evaluation is accounted as m_i gradient calls."""
        return _FlattenedGrouped(self)

    def smoothness(self) -> "SmoothnessReport":
        per_client = [c.smoothness() for c in self.clients]
        l_ij = [r.L_i for r in per_client]
        # client-level constants: exact where the client supports minimum-free
        # spectral norms, else the mean-of-constants bound
        l_i = np.empty(self.n)
        method = "exact-eigenvalue"
        for i, c in enumerate(self.clients):
            if isinstance(c, QuadraticProblem):
                l_i[i] = spectral_norm(c.mean_matrix())
            else:
                l_i[i] = float(per_client[i].L_i.mean())
                method = "upper-bound"
        if any(r.method == "upper-bound" for r in per_client):
            method = "upper-bound"
        mats = [c.mean_matrix() for c in self.clients if isinstance(c, QuadraticProblem)]
        if len(mats) == self.n:
            l_minus = spectral_norm(sum(mats) / self.n)
        else:
            l_minus = float(l_i.mean())
        return SmoothnessReport(L_minus=l_minus, L_i=l_i, L_ij=l_ij, method=method)


class _FlattenedGrouped(Problem):
    kind = "flattened-grouped"

    def __init__(self, grouped: GroupedProblem):
        costs = np.array([c.total_call_cost() for c in grouped.clients])
        super().__init__(grouped.n, grouped.d, x0=grouped.x0, call_costs=costs)
        self.grouped = grouped

    def component_value(self, i, x):
        return self.grouped.clients[self._check_index(i)].value(x)

    def component_grad(self, i, x):
        return self.grouped.client_grad(self._check_index(i), x)

    def component_grad_diff(self, i, x, y):
        return self.grouped.client_grad_diff(self._check_index(i), x, y)

    def value(self, x):
        return self.grouped.value(x)

    def full_grad(self, x):
        return self.grouped.full_grad(x)

    def smoothness(self):
        rep = self.grouped.smoothness()
        return SmoothnessReport(L_minus=rep.L_minus, L_i=rep.L_i, method=rep.method)


# ---------------------------------------------------------------------------
# smoothness constants
# ---------------------------------------------------------------------------


@dataclass
class SmoothnessReport:
    """Certified Lipschitz constants of a problem.

    ``L_minus`` bounds the full gradient, ``L_i`` the component gradients,
    ``L_ij`` (grouped problems) the per-client component gradients. ``method``
    records how the constants were obtained.
    """

    L_minus: float
    L_i: np.ndarray
    method: str
    L_ij: list[np.ndarray] | None = None

    def __post_init__(self):
        self.L_i = np.asarray(self.L_i, dtype=float)
        if self.L_minus < 0 or np.any(self.L_i < 0):
            raise ObjectiveError("Lipschitz constants must be nonnegative")

    @property
    def mean_L(self) -> float:
        return float(self.L_i.mean())

    @property
    def L_plus_sq(self) -> float:
        """Uniform-weight mean-square constant (1/n) sum L_i^2."""
        return float(np.mean(self.L_i ** 2))


def lipschitz_constants(problem) -> SmoothnessReport:
    """Smoothness constants for a problem that supports estimation."""
    return problem.smoothness()


def weighted_curvature_sq(L: np.ndarray, w: np.ndarray) -> float:
    """(1/n) sum_i L_i^2 / (n w_i): the certified value serving as both the
    weighted mean-square smoothness and weighted Hessian-variance constant.

    Zero weights are admissible only against zero constants (their terms
    vanish); weights must lie on the standard simplex.
    """
    L = np.asarray(L, dtype=float)
    w = np.asarray(w, dtype=float)
    if L.shape != w.shape:
        raise ObjectiveError("constants and weights must have equal length")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise ObjectiveError("weights must be nonnegative and sum to 1 within 1e-12")
    zero = w == 0
    if np.any(zero & (L != 0)):
        raise ObjectiveError("zero weight paired with a nonzero constant")
    n = L.shape[0]
    terms = np.zeros(n)
    nz = ~zero
    terms[nz] = L[nz] ** 2 / (n * w[nz])
    return float(terms.mean())


def exact_weighted_curvatures(problem: QuadraticProblem, w: np.ndarray
                              ) -> tuple[float, float]:
    """Exact (L_+w^2, L_pm_w^2) for a quadratic problem: the top eigenvalues of
    (1/n) sum_i A_i^2/(n w_i) and of that matrix minus the squared mean matrix.
    """
    if not isinstance(problem, QuadraticProblem):
        raise ObjectiveError("exact weighted curvatures need a quadratic problem")
    w = np.asarray(w, dtype=float)
    n, d = problem.n, problem.d
    if w.shape != (n,):
        raise ObjectiveError("weights must have one entry per component")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise ObjectiveError("weights must be nonnegative and sum to 1 within 1e-12")
    if isinstance(problem, TridiagQuadraticProblem) and not np.any(w == 0):
        base = problem.base_matrix()
        m1 = float((problem.nu / w).sum()) / n**2
        m2 = float((problem.nu**2 / w).sum()) / n**2
        m0 = float((1.0 / w).sum()) / n**2
        sig = problem.sigma
        mplus = m2 * (base @ base) + 2.0 * sig * m1 * base + sig**2 * m0 * np.eye(d)
    else:
        mplus = np.zeros((d, d))
        for i in range(n):
            if w[i] == 0:
                mat = problem.component_matrix(i)
                if spectral_norm(mat) > 0:
                    raise ObjectiveError("zero weight paired with a nonzero component")
                continue
            mat = problem.component_matrix(i)
            mplus += (mat @ mat) / w[i]
        mplus /= n**2
    mean = problem.mean_matrix()
    plus_sq = max(float(np.linalg.eigvalsh(mplus)[-1]), 0.0)
    pm_sq = max(float(np.linalg.eigvalsh(mplus - mean @ mean)[-1]), 0.0)
    return plus_sq, pm_sq


def empirical_hessian_variance(problem, w: np.ndarray, pairs: int,
                               rng: np.random.Generator) -> float:
    """Lower estimate of the weighted Hessian variance, maximizing the defining
    ratio over random point pairs. Always at most the certified constant."""
    if pairs < 1:
        raise ObjectiveError("need at least one pair")
    w = np.asarray(w, dtype=float)
    n, d = problem.n, problem.d
    best = 0.0
    for _ in range(pairs):
        x = rng.standard_normal(d)
        y = rng.standard_normal(d)
        usq = float(np.sum((x - y) ** 2))
        if usq < 1e-24:
            continue
        acc = 0.0
        for i in range(n):
            diff = problem.component_grad(i, x) - problem.component_grad(i, y)
            dsq = float(diff @ diff)
            if w[i] == 0:
                if dsq > 1e-18 * usq:
                    raise ObjectiveError("zero weight paired with a varying component")
                continue
            acc += dsq / (n * w[i])
        acc /= n
        fd = problem.full_grad(x) - problem.full_grad(y)
        ratio = (acc - float(fd @ fd)) / usq
        best = max(best, ratio)
    return best


def grad_check(problem, x: Vector, h: float) -> float:
    """Max relative error between analytic and central-difference component
    gradients over all components and coordinates."""
    if h <= 0:
        raise ObjectiveError("step must be positive")
    x = _check_point(np.asarray(x, dtype=float), problem.d)
    worst = 0.0
    for i in range(problem.n):
        ana = problem.component_grad(i, x)
        for k in range(problem.d):
            e = np.zeros(problem.d)
            e[k] = h
            num = (problem.component_value(i, x + e) - problem.component_value(i, x - e)) / (2 * h)
            worst = max(worst, abs(num - ana[k]) / (1.0 + abs(ana[k])))
    return worst


# ---------------------------------------------------------------------------
# spectral helpers
# ---------------------------------------------------------------------------


def power_method(matvec: Callable[[Vector], Vector], dim: int,
                 tol: float = 1e-10, maxiter: int = 100000) -> float:
    """Largest absolute eigenvalue of a symmetric operator by power iteration."""
    v = np.ones(dim) + 1e-3 * np.arange(dim)
    v /= np.linalg.norm(v)
    prev = np.inf
    for _ in range(maxiter):
        av = matvec(v)
        nrm = np.linalg.norm(av)
        if nrm == 0.0:
            return 0.0
        lam = abs(float(v @ av))
        v = av / nrm
        if abs(lam - prev) <= tol * max(lam, 1e-300):
            return lam
        prev = lam
    return prev


def spectral_norm(mat: np.ndarray) -> float:
    """Spectral norm of a symmetric matrix via power iteration on its square
    (positive semidefinite, so the iteration cannot stall on a sign tie)."""
    mat = np.asarray(mat, dtype=float)
    lam_sq = power_method(lambda v: mat @ (mat @ v), mat.shape[0])
    return float(np.sqrt(lam_sq))
