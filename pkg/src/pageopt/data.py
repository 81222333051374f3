"""LIBSVM-format datasets and the nonconvex two-class objective over them.

The objective concatenates one parameter vector per class, x = [x_1 || x_2]
in R^{2d}, and adds per-coordinate regularization lam * c^2/(1 + c^2), which
is bounded and nonconvex. Per-sample gradients are analytic; the per-sample
Lipschitz constants use the certified bound 0.5 ||a_i||^2 + 2 lam.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .objective import GroupedProblem, Problem, SmoothnessReport, _check_point


class DataError(ValueError):
    """Malformed dataset input."""


@dataclass
class SparseDataset:
    """Sparse feature rows with two-class labels mapped onto {1, 2}.

    ``label_values`` holds the raw label of class 1 and class 2 (smaller raw
    label first), so serialization can reproduce the source text.
    """

    X: sparse.csr_matrix
    labels: np.ndarray
    label_values: tuple[float, float]

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def __eq__(self, other) -> bool:
        return (isinstance(other, SparseDataset)
                and self.X.shape == other.X.shape
                and np.array_equal(self.labels, other.labels)
                and self.label_values == other.label_values
                and (self.X != other.X).nnz == 0)


def parse_libsvm(source) -> SparseDataset:
    """Parse `<label> <idx>:<val> ...` lines; '#' starts a comment.

    Feature indices are 1-based and must increase strictly within a row; the
    file must contain exactly two distinct labels.
    """
    if hasattr(source, "read"):
        text = source.read()
    elif isinstance(source, str) and "\n" not in source and ":" not in source:
        with open(source, "r", encoding="utf-8") as fh:
            text = fh.read()
    else:
        text = source
    raw_labels: list[float] = []
    rows: list[tuple[np.ndarray, np.ndarray]] = []
    d = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            raw_labels.append(float(parts[0]))
        except ValueError:
            raise DataError(f"line {lineno}: bad label {parts[0]!r}")
        idx: list[int] = []
        val: list[float] = []
        prev = 0
        for tok in parts[1:]:
            try:
                k, v = tok.split(":", 1)
                k, v = int(k), float(v)
            except ValueError:
                raise DataError(f"line {lineno}: bad feature token {tok!r}")
            if k <= prev:
                raise DataError(f"line {lineno}: feature indices must increase "
                                f"strictly (got {k} after {prev})")
            if not np.isfinite(v):
                raise DataError(f"line {lineno}: non-finite feature value")
            prev = k
            idx.append(k)
            val.append(v)
        if idx:
            d = max(d, idx[-1])
        rows.append((np.array(idx, dtype=np.int64), np.array(val)))
    if not rows:
        raise DataError("empty dataset")
    distinct = sorted(set(raw_labels))
    if len(distinct) != 2:
        raise DataError(f"expected exactly two classes, found {len(distinct)}")
    labels = np.where(np.array(raw_labels) == distinct[0], 1, 2).astype(np.int8)
    indptr = np.zeros(len(rows) + 1, dtype=np.int64)
    for i, (idx, _) in enumerate(rows):
        indptr[i + 1] = indptr[i] + idx.size
    indices = np.concatenate([idx - 1 for idx, _ in rows]) if indptr[-1] else np.zeros(0, np.int64)
    values = np.concatenate([v for _, v in rows]) if indptr[-1] else np.zeros(0)
    X = sparse.csr_matrix((values, indices, indptr), shape=(len(rows), d))
    return SparseDataset(X, labels, (distinct[0], distinct[1]))


def dump_libsvm(ds: SparseDataset) -> str:
    """Serialize back to LIBSVM text with the original raw labels."""
    raw = np.where(ds.labels == 1, ds.label_values[0], ds.label_values[1])
    out = io.StringIO()
    indptr, indices, values = ds.X.indptr, ds.X.indices, ds.X.data
    for i in range(ds.n):
        lab = float(raw[i])
        toks = [repr(int(lab)) if lab.is_integer() else repr(lab)]
        for k in range(indptr[i], indptr[i + 1]):
            toks.append(f"{indices[k] + 1}:{float(values[k])!r}")
        out.write(" ".join(toks) + "\n")
    return out.getvalue()


# ---------------------------------------------------------------------------
# the two-class objective
# ---------------------------------------------------------------------------


def _reg_value(x: np.ndarray) -> float:
    sq = x * x
    return float(np.sum(sq / (1.0 + sq)))


def _reg_grad(x: np.ndarray) -> np.ndarray:
    return 2.0 * x / (1.0 + x * x) ** 2


class LogisticProblem(Problem):
    """Two-class softmax loss with bounded nonconvex regularization."""

    kind = "logistic"

    def __init__(self, X: sparse.csr_matrix, labels: np.ndarray, lam: float = 0.001):
        if lam < 0:
            raise DataError("regularization constant must be nonnegative")
        n, d_feat = X.shape
        super().__init__(n, 2 * d_feat, x0=np.zeros(2 * d_feat))
        self.X = X.tocsr()
        self.labels = np.asarray(labels, dtype=np.int8)
        self.lam = float(lam)
        self.d_feat = d_feat
        self._row_norms_sq = np.asarray(self.X.multiply(self.X).sum(axis=1)).ravel()

    def _row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.X.indptr[i], self.X.indptr[i + 1]
        return self.X.indices[lo:hi], self.X.data[lo:hi]

    def component_value(self, i, x):
        i = self._check_index(i)
        x = _check_point(x, self.d)
        cols, vals = self._row(i)
        z1 = float(vals @ x[cols])
        z2 = float(vals @ x[self.d_feat + cols])
        zy = z1 if self.labels[i] == 1 else z2
        return float(np.logaddexp(z1, z2) - zy + self.lam * _reg_value(x))

    def component_grad(self, i, x):
        i = self._check_index(i)
        x = _check_point(x, self.d)
        cols, vals = self._row(i)
        z1 = float(vals @ x[cols])
        z2 = float(vals @ x[self.d_feat + cols])
        m = max(z1, z2)
        e1, e2 = np.exp(z1 - m), np.exp(z2 - m)
        s1 = e1 / (e1 + e2)
        r1 = s1 - (1.0 if self.labels[i] == 1 else 0.0)
        r2 = (1.0 - s1) - (1.0 if self.labels[i] == 2 else 0.0)
        g = self.lam * _reg_grad(x)
        g[cols] += r1 * vals
        g[self.d_feat + cols] += r2 * vals
        return g

    def value(self, x):
        x = _check_point(x, self.d)
        z1 = self.X @ x[:self.d_feat]
        z2 = self.X @ x[self.d_feat:]
        zy = np.where(self.labels == 1, z1, z2)
        return float(np.mean(np.logaddexp(z1, z2) - zy) + self.lam * _reg_value(x))

    def full_grad(self, x):
        x = _check_point(x, self.d)
        z1 = self.X @ x[:self.d_feat]
        z2 = self.X @ x[self.d_feat:]
        m = np.maximum(z1, z2)
        e1, e2 = np.exp(z1 - m), np.exp(z2 - m)
        s1 = e1 / (e1 + e2)
        r1 = (s1 - (self.labels == 1)) / self.n
        r2 = ((1.0 - s1) - (self.labels == 2)) / self.n
        g = self.lam * _reg_grad(x)
        g[:self.d_feat] += self.X.T @ r1
        g[self.d_feat:] += self.X.T @ r2
        return g

    def smoothness(self) -> SmoothnessReport:
        l_i = 0.5 * self._row_norms_sq + 2.0 * self.lam
        return SmoothnessReport(L_minus=float(l_i.mean()), L_i=l_i, method="upper-bound")

    def subset(self, indices):
        idx = np.asarray(indices, dtype=int)
        return LogisticProblem(self.X[idx], self.labels[idx], self.lam)


def logistic_problem(data: SparseDataset, lam: float = 0.001) -> LogisticProblem:
    """Problem over R^{2d} (one parameter block per class)."""
    return LogisticProblem(data.X, data.labels, lam)


def shard(data: SparseDataset, clients: int, seed: int,
          lam: float = 0.001) -> GroupedProblem:
    """Uniformly reshuffle the rows and split them into near-equal contiguous
    shards, each wrapping its own objective over its rows.

    The grouped objective averages the per-client means, which equals the
    whole-dataset mean exactly when the shard sizes are equal.
    """
    if clients < 1 or clients > data.n:
        raise DataError(f"client count must lie in [1, {data.n}]")
    perm = np.random.default_rng(seed).permutation(data.n)
    base, rem = divmod(data.n, clients)
    sizes = [base + 1 if c < rem else base for c in range(clients)]
    parts = []
    at = 0
    full = LogisticProblem(data.X, data.labels, lam)
    for size in sizes:
        parts.append(full.subset(perm[at:at + size]))
        at += size
    return GroupedProblem(parts, x0=np.zeros(2 * data.d))
