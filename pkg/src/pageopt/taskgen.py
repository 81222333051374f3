"""Synthetic quadratic task generators, analytic fixtures and stratification.

Two generator families produce finite sums of tridiagonal quadratics
f_i(x) = 1/2 x^T A_i x + b_i^T x with A_i = nu_i * B + sigma * I for the
stencil B = (1/4) tridiag(-1, 2, -1):

* ``gen_controlled_lpm`` draws Gaussian scale noise and shifts every matrix so
  the mean matrix has minimum eigenvalue exactly ``lam``; the noise scale s
  controls the spread of the component Hessians around their mean.
* ``gen_controlled_li`` draws exponential scale noise (no shift), so s
  controls the spread of the per-component Lipschitz constants.

The analytic fixtures are one-dimensional problems whose smoothness constants
have closed forms, used to cross-check every estimator in the library.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .objective import (DenseQuadraticProblem, GroupedProblem, Problem,
                        TridiagQuadraticProblem)


class TaskGenError(ValueError):
    """Invalid generator or fixture parameters."""


def _stencil(d: int) -> tuple[np.ndarray, np.ndarray]:
    return np.full(d, 0.5), np.full(d - 1, -0.25)


def _stencil_extremes(d: int) -> tuple[float, float]:
    # eigenvalues of (1/4) tridiag(-1,2,-1): (1 - cos(k pi/(d+1)))/2
    c = np.cos(np.pi / (d + 1))
    return 0.5 * (1.0 - c), 0.5 * (1.0 + c)


def _start_point(d: int) -> np.ndarray:
    x0 = np.zeros(d)
    x0[0] = np.sqrt(d)
    return x0


def gen_controlled_lpm(n: int, d: int, lam: float, s: float, seed: int
                       ) -> TridiagQuadraticProblem:
    """Quadratic task whose mean matrix has minimum eigenvalue exactly lam.

    Scale noises nu_i = 1 + s xi_i and linear noises are standard normal; the
    common scalar shift lam - lambda_min(mean) is applied to every component.
    """
    if n < 1 or d < 2 or lam < 0 or s < 0:
        raise TaskGenError("need n >= 1, d >= 2, lam >= 0, s >= 0")
    rng = np.random.default_rng(seed)
    nu = 1.0 + s * rng.standard_normal(n)
    nu_b = s * rng.standard_normal(n)
    b = np.zeros((n, d))
    b[:, 0] = nu / 4.0 * (-1.0 + nu_b)
    lo, hi = _stencil_extremes(d)
    nubar = float(nu.mean())
    lam_min = min(nubar * lo, nubar * hi)
    sigma = lam - lam_min
    diag, off = _stencil(d)
    return TridiagQuadraticProblem(
        diag, off, nu, sigma, b, x0=_start_point(d),
        meta={"kind": "lpm", "n": n, "d": d, "lambda": lam, "s": s, "seed": seed})


def gen_controlled_li(n: int, d: int, s: float, seed: int
                      ) -> TridiagQuadraticProblem:
    """Quadratic task whose per-component Lipschitz constants spread with s.

    Scale noises nu_i = 1 + s xi_i with exponential xi_i >= 0, so every
    component keeps a positive-definite Hessian; no shift is applied.
    """
    if n < 1 or d < 2 or s < 0:
        raise TaskGenError("need n >= 1, d >= 2, s >= 0")
    rng = np.random.default_rng(seed)
    nu = 1.0 + s * rng.standard_exponential(n)
    nu_b = s * rng.standard_normal(n)
    b = np.zeros((n, d))
    b[:, 0] = -0.25 + nu_b
    diag, off = _stencil(d)
    return TridiagQuadraticProblem(
        diag, off, nu, 0.0, b, x0=_start_point(d),
        meta={"kind": "li", "n": n, "d": d, "s": s, "seed": seed})


# ---------------------------------------------------------------------------
# analytic fixtures
# ---------------------------------------------------------------------------


@dataclass
class FixtureConstants:
    """Closed-form constants of an analytic fixture."""

    L_minus: float
    L_i: np.ndarray
    L_plus_sq: float
    L_pm_sq: float
    mean_L: float
    f_star: float
    L_i_pm_sq: np.ndarray | None = None  # per-client Hessian variances (grouped)


def example_fixture(which: int, **params):
    """(problem, closed-form constants) for the analytic examples 1..3."""
    if which == 1:
        return _example_opposing(**params)
    if which == 2:
        return _example_single(**params)
    if which == 3:
        return _example_grouped(**params)
    raise TaskGenError("fixture index must be 1, 2 or 3")


def _scalar_quadratic(coeffs) -> DenseQuadraticProblem:
    mats = [np.array([[c]], dtype=float) for c in coeffs]
    lins = [np.zeros(1) for _ in coeffs]
    return DenseQuadraticProblem(mats, lins, x0=np.ones(1))


def _example_opposing(n: int = 2, a: float = 5.0, b: float = 2.0):
    """Half the components have curvature a+b, half b-a: the mean stays mildly
    curved while the mean-square curvature grows with a."""
    if n % 2 != 0 or n < 2:
        raise TaskGenError("component count must be even")
    if b < 0:
        raise TaskGenError("mean curvature must be nonnegative")
    coeffs = [a + b] * (n // 2) + [b - a] * (n // 2)
    prob = _scalar_quadratic(coeffs)
    prob.f_star = 0.0
    consts = FixtureConstants(
        L_minus=b,
        L_i=np.abs(np.array(coeffs, dtype=float)),
        L_plus_sq=0.5 * ((a + b) ** 2 + (a - b) ** 2),
        L_pm_sq=a ** 2,
        mean_L=(abs(a + b) + abs(b - a)) / 2.0,
        f_star=0.0)
    return prob, consts


def _example_single(n: int = 4, b: float = 4.0):
    """Only the first component is curved; optimal importance weights beat the
    uniform mean-square constant by a factor of n."""
    if n < 2 or b < 0:
        raise TaskGenError("need n >= 2 and b >= 0")
    coeffs = [b] + [0.0] * (n - 1)
    prob = _scalar_quadratic(coeffs)
    prob.f_star = 0.0
    consts = FixtureConstants(
        L_minus=b / n,
        L_i=np.array(coeffs, dtype=float),
        L_plus_sq=b ** 2 / n,
        L_pm_sq=b ** 2 / n - b ** 2 / n ** 2,
        mean_L=b / n,
        f_star=0.0)
    return prob, consts


def _example_grouped(b1: float = 3.0, g: int = 3, m: int = 2):
    """g groups of m identical components; within-group Hessian variance is
    zero while the across-group variance stays order b1^2/g."""
    if b1 < 0 or g < 1 or m < 1:
        raise TaskGenError("need b1 >= 0, g >= 1, m >= 1")
    clients = []
    for i in range(g):
        c = b1 if i == 0 else 0.0
        clients.append(_scalar_quadratic([c] * m))
    grouped = GroupedProblem(clients, x0=np.ones(1))
    grouped.f_star = 0.0
    consts = FixtureConstants(
        L_minus=b1 / g,
        L_i=np.array([b1] + [0.0] * (g - 1)),
        L_plus_sq=b1 ** 2 / g,
        L_pm_sq=(1.0 / g - 1.0 / g ** 2) * b1 ** 2,
        mean_L=b1 / g,
        f_star=0.0,
        L_i_pm_sq=np.zeros(g))
    return grouped, consts


# ---------------------------------------------------------------------------
# stratification
# ---------------------------------------------------------------------------


def stratify(problem: Problem, g: int, rule: str = "contiguous") -> GroupedProblem:
    """Split a problem's components into g equal groups.

    ``by-Li-sorted`` places components with similar Lipschitz constants in the
    same group, which shrinks the within-group Hessian variances.
    """
    if g < 1 or problem.n % g != 0:
        raise TaskGenError(f"group count {g} must divide component count {problem.n}")
    if rule == "contiguous":
        order = np.arange(problem.n)
    elif rule == "by-Li-sorted":
        order = np.argsort(problem.smoothness().L_i, kind="stable")
    else:
        raise TaskGenError("rule must be 'contiguous' or 'by-Li-sorted'")
    m = problem.n // g
    clients = [problem.subset(order[k * m:(k + 1) * m]) for k in range(g)]
    grouped = GroupedProblem(clients, x0=problem.x0)
    grouped.f_star = problem.f_star
    return grouped


# ---------------------------------------------------------------------------
# task file format
# ---------------------------------------------------------------------------

_FORMAT_VERSION = 1


def _fmt_row(values) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(values, dtype=float))


def _parse_row(text: str) -> np.ndarray:
    return np.array([float(tok) for tok in text.split()], dtype=float)


def save_task(problem: TridiagQuadraticProblem, path) -> None:
    """Write a replayable text description: metadata, stencil diagonals,
    per-component scales and linear terms."""
    if not isinstance(problem, TridiagQuadraticProblem):
        raise TaskGenError("only compact tridiagonal tasks are serializable")
    lines = [f"format_version {_FORMAT_VERSION}"]
    for key, val in sorted(problem.meta.items()):
        lines.append(f"meta {key} {val}")
    lines.append(f"n {problem.n}")
    lines.append(f"d {problem.d}")
    lines.append(f"sigma {problem.sigma!r}")
    lines.append("diag " + _fmt_row(problem.diag_base))
    lines.append("off " + (_fmt_row(problem.off_base) if problem.d > 1 else ""))
    lines.append("x0 " + _fmt_row(problem.x0))
    lines.append("nu " + _fmt_row(problem.nu))
    for row in problem.linears:
        lines.append("b " + _fmt_row(row))
    text = "\n".join(lines) + "\n"
    if hasattr(path, "write"):
        path.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def load_task(path) -> TridiagQuadraticProblem:
    """Read a task file written by save_task."""
    if hasattr(path, "read"):
        text = path.read()
    else:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("format_version"):
        raise TaskGenError("task file must start with a format_version line")
    version = int(lines[0].split()[1])
    if version != _FORMAT_VERSION:
        raise TaskGenError(f"unsupported task format version {version}")
    meta: dict = {}
    fields: dict = {}
    b_rows: list[np.ndarray] = []
    for ln in lines[1:]:
        key, _, rest = ln.partition(" ")
        if key == "meta":
            mkey, _, mval = rest.partition(" ")
            meta[mkey] = mval
        elif key == "b":
            b_rows.append(_parse_row(rest))
        else:
            fields[key] = rest
    n, d = int(fields["n"]), int(fields["d"])
    diag = _parse_row(fields["diag"])
    off = _parse_row(fields.get("off", "")) if d > 1 else np.zeros(0)
    linears = np.vstack(b_rows) if b_rows else np.zeros((n, d))
    if linears.shape != (n, d) or diag.shape != (d,):
        raise TaskGenError("task file arrays do not match the declared sizes")
    return TridiagQuadraticProblem(
        diag, off, _parse_row(fields["nu"]), float(fields["sigma"]),
        linears, x0=_parse_row(fields["x0"]), meta=meta)
