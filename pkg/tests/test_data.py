import numpy as np
import pytest

from pageopt import (DataError, dump_libsvm, grad_check, lipschitz_constants,
                     logistic_problem, parse_libsvm, shard)

from conftest import dataset_path, synthetic_two_class_text


def test_parse_two_line_example():
    ds = parse_libsvm("+1 1:0.5 3:2.0\n-1 2:1.0")
    assert ds.n == 2 and ds.d == 3
    # smaller raw label (-1) becomes class 1
    np.testing.assert_array_equal(ds.labels, [2, 1])
    assert ds.label_values == (-1.0, 1.0)
    assert ds.X[0, 0] == 0.5 and ds.X[0, 2] == 2.0 and ds.X[1, 1] == 1.0


def test_parse_tolerates_comments_and_blank_lines():
    ds = parse_libsvm("# header\n+1 1:1.0  # trailing\n\n-1 1:2.0\n")
    assert ds.n == 2


def test_parse_errors_report_line_numbers():
    with pytest.raises(DataError, match="line 2"):
        parse_libsvm("+1 1:1.0\n-1 1:oops")
    with pytest.raises(DataError, match="line 1"):
        parse_libsvm("+1 3:1.0 2:2.0\n-1 1:1.0")
    with pytest.raises(DataError, match="two classes"):
        parse_libsvm("1 1:1.0\n2 1:1.0\n3 1:1.0")
    with pytest.raises(DataError, match="two classes"):
        parse_libsvm("1 1:1.0\n1 1:2.0")


def test_roundtrip_identity(synthetic_dataset):
    again = parse_libsvm(dump_libsvm(synthetic_dataset))
    assert again == synthetic_dataset


def test_synthetic_stand_in_has_expected_shape(synthetic_dataset):
    assert (synthetic_dataset.n, synthetic_dataset.d) == (690, 14)


@pytest.mark.skipif(dataset_path("australian") is None,
                    reason="australian dataset file not supplied")
def test_australian_shape():
    ds = parse_libsvm(dataset_path("australian"))
    assert (ds.n, ds.d) == (690, 14)


@pytest.mark.skipif(dataset_path("w8a") is None,
                    reason="w8a dataset file not supplied")
def test_w8a_shape():
    ds = parse_libsvm(dataset_path("w8a"))
    assert (ds.n, ds.d) == (49749, 300)


# ---------------------------------------------------------------------------
# the two-class objective
# ---------------------------------------------------------------------------


def test_loss_at_origin_is_log_two(small_dataset):
    prob = logistic_problem(small_dataset, lam=0.001)
    x = np.zeros(prob.d)
    assert prob.value(x) == pytest.approx(np.log(2.0))
    assert prob.component_value(0, x) == pytest.approx(np.log(2.0))


def test_regularizer_single_coordinate(small_dataset):
    lam = 0.01
    prob = logistic_problem(small_dataset, lam=lam)
    c = 0.7
    x = np.zeros(prob.d)
    x[3] = c
    base = prob.component_value(0, np.zeros(prob.d))
    # feature 4 may be active in row 0; pick a row with no feature at column 3
    row = next(i for i in range(prob.n) if 3 not in set(prob._row(i)[0]))
    val = prob.component_value(row, x) - prob.component_value(row, np.zeros(prob.d))
    assert val == pytest.approx(lam * c * c / (1 + c * c), rel=1e-12)
    g = prob.component_grad(row, x)
    assert g[3] == pytest.approx(2 * lam * c / (1 + c * c) ** 2, rel=1e-12)
    del base


def test_gradients_match_finite_differences(small_dataset):
    prob = logistic_problem(small_dataset, lam=0.001)
    rng = np.random.default_rng(8)
    x = 0.3 * rng.standard_normal(prob.d)
    assert grad_check(prob, x, 1e-5) < 1e-5


def test_full_grad_matches_component_mean(small_dataset):
    prob = logistic_problem(small_dataset)
    rng = np.random.default_rng(1)
    for _ in range(5):
        x = rng.standard_normal(prob.d)
        mean = np.mean([prob.component_grad(i, x) for i in range(prob.n)], axis=0)
        np.testing.assert_allclose(prob.full_grad(x), mean, rtol=1e-10, atol=1e-14)


def test_objective_bounds(small_dataset):
    lam = 0.001
    prob = logistic_problem(small_dataset, lam=lam)
    rng = np.random.default_rng(2)
    for _ in range(20):
        x = 3.0 * rng.standard_normal(prob.d)
        for i in (0, prob.n - 1):
            v = prob.component_value(i, x)
            assert v >= 0.0
        reg = lam * np.sum(x * x / (1 + x * x))
        assert 0.0 <= reg <= 2.0 * lam * prob.d_feat


def test_lipschitz_certificate(small_dataset):
    prob = logistic_problem(small_dataset, lam=0.001)
    rep = lipschitz_constants(prob)
    assert rep.method == "upper-bound"
    rng = np.random.default_rng(3)
    for _ in range(100):
        x = rng.standard_normal(prob.d)
        y = rng.standard_normal(prob.d)
        i = int(rng.integers(prob.n))
        lhs = np.linalg.norm(prob.component_grad(i, x) - prob.component_grad(i, y))
        assert lhs <= rep.L_i[i] * np.linalg.norm(x - y) * (1 + 1e-9)


# ---------------------------------------------------------------------------
# sharding
# ---------------------------------------------------------------------------


def test_shard_single_client_equals_full(synthetic_dataset):
    grouped = shard(synthetic_dataset, 1, seed=0)
    full = logistic_problem(synthetic_dataset)
    rng = np.random.default_rng(4)
    x = 0.1 * rng.standard_normal(full.d)
    assert grouped.value(x) == pytest.approx(full.value(x), rel=1e-12)
    np.testing.assert_allclose(grouped.full_grad(x), full.full_grad(x),
                               rtol=1e-12, atol=1e-16)


def test_shard_sizes_and_flattened_identity(synthetic_dataset):
    grouped = shard(synthetic_dataset, 10, seed=1)
    assert list(grouped.m) == [69] * 10
    full = logistic_problem(synthetic_dataset)
    flat = grouped.flatten()
    rng = np.random.default_rng(5)
    for _ in range(10):
        x = 0.2 * rng.standard_normal(full.d)
        gf = full.full_grad(x)
        gg = flat.full_grad(x)
        assert np.abs(gg - gf).max() <= 1e-12 * (1 + np.abs(gf).max())


def test_shard_validation(small_dataset):
    with pytest.raises(DataError):
        shard(small_dataset, 0, seed=0)
    with pytest.raises(DataError):
        shard(small_dataset, small_dataset.n + 1, seed=0)


def test_shard_uneven_sizes(small_dataset):
    grouped = shard(small_dataset, 7, seed=2)
    sizes = sorted(grouped.m, reverse=True)
    assert sum(sizes) == small_dataset.n
    assert max(sizes) - min(sizes) <= 1
