import os

import numpy as np
import pytest

from pageopt import parse_libsvm


def synthetic_two_class_text(n: int = 690, d: int = 14, seed: int = 7) -> str:
    """Deterministic LIBSVM-format stand-in with the australian dataset's
    shape: n rows, d features, labels in {-1, +1}."""
    rng = np.random.default_rng(seed)
    scales = rng.uniform(0.5, 2.0, size=d)
    feats = rng.standard_normal((n, d)) * scales
    w = rng.standard_normal(d)
    margin = feats @ w + 0.5 * rng.standard_normal(n)
    labels = np.where(margin > 0, 1, -1)
    keep = rng.random((n, d)) > 0.25
    keep[np.arange(n), rng.integers(0, d, n)] = True  # no empty rows
    lines = []
    for i in range(n):
        toks = [str(labels[i])]
        for j in range(d):
            if keep[i, j]:
                toks.append(f"{j + 1}:{float(feats[i, j])!r}")
        lines.append(" ".join(toks))
    # pin d by making sure some row touches the last feature
    if not keep[:, d - 1].any():
        lines[0] += f" {d}:{0.123!r}"
    return "\n".join(lines) + "\n"


def dataset_path(name: str):
    """Path to a real LIBSVM file when the user supplied one, else None."""
    candidates = []
    env = os.environ.get("PAGEOPT_DATA")
    if env:
        candidates += [os.path.join(env, name), os.path.join(env, name + ".txt")]
    here = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    candidates += [os.path.join(here, "data", name),
                   os.path.join(here, "data", name + ".txt")]
    for path in candidates:
        if os.path.isfile(path):
            return path
    return None


@pytest.fixture(scope="session")
def synthetic_dataset():
    return parse_libsvm(synthetic_two_class_text())


@pytest.fixture(scope="session")
def small_dataset():
    return parse_libsvm(synthetic_two_class_text(n=60, d=6, seed=11))
