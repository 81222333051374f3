import math

import numpy as np
import pytest

from pageopt import (GroupedProblem, PageConfig, PageConfigError,
                     PageDivergence, compose_variance, default_p,
                     exact_weighted_curvatures, expected_complexity,
                     full_batch, gen_controlled_lpm, iteration_budget,
                     lipschitz_constants, nice, run_page, run_page_composed,
                     stepsize_composed, stepsize_nonconvex, stepsize_pl,
                     stratify, uniform_with_replacement)
from pageopt.sampling import enumerate_draws, apply_draw_matrix


# ---------------------------------------------------------------------------
# parameter rules
# ---------------------------------------------------------------------------


def test_stepsize_nonconvex_reference_value():
    p = 10 / 110  # so (1-p)/p = 10
    gamma = stepsize_nonconvex(1.0, 0.1, 0.1, 123.0, 1.0, p)
    assert gamma == pytest.approx(0.5)


def test_stepsize_nonconvex_full_refresh_is_inverse_smoothness():
    assert stepsize_nonconvex(2.5, 0.3, 0.1, 7.0, 3.0, 1.0) == pytest.approx(1 / 2.5)


def test_stepsize_nonconvex_ignores_plus_constant_when_a_equals_b():
    base = stepsize_nonconvex(1.0, 0.2, 0.2, 5.0, 1.0, 0.3)
    bumped = stepsize_nonconvex(1.0, 0.2, 0.2, 500.0, 1.0, 0.3)
    assert base == bumped


def test_stepsize_nonconvex_validation():
    with pytest.raises(PageConfigError):
        stepsize_nonconvex(1.0, 0.1, 0.1, 1.0, 1.0, 0.0)
    with pytest.raises(PageConfigError):
        stepsize_nonconvex(1.0, -0.1, 0.1, 1.0, 1.0, 0.5)


def test_stepsize_monotonicity():
    rng = np.random.default_rng(17)
    for _ in range(50):
        lm = rng.uniform(0.1, 3.0)
        b = rng.uniform(0.0, 1.0)
        plus, pm = sorted(rng.uniform(0.5, 5.0, 2))[::-1], None
        plus_sq = max(plus)
        pm_sq = min(plus)
        p = rng.uniform(0.05, 1.0)
        a = b + rng.uniform(0.0, 1.0)
        g0 = stepsize_nonconvex(lm, a, b, plus_sq, pm_sq, p)
        assert stepsize_nonconvex(lm, a + 0.5, b, plus_sq, pm_sq, p) <= g0
        assert stepsize_nonconvex(lm, a, b, plus_sq, pm_sq * 2 + 0.1, p) <= g0 + 1e-15
        assert stepsize_nonconvex(lm, a, b, plus_sq, pm_sq, p * 0.5) <= g0


def test_stepsize_pl_branches():
    # second branch dominates for large mu
    assert stepsize_pl(1.0, 0.1, 0.1, 1.0, 1.0, 0.5, mu=100.0) == pytest.approx(0.5 / 200)
    # reference evaluation
    got = stepsize_pl(1.0, 0.1, 0.1, 3.0, 1.0, 0.5, mu=0.01)
    assert got == pytest.approx(min(1 / (1 + math.sqrt(0.2)), 25.0))
    # vanishing mu recovers the nonconvex rule with the variance term doubled
    tiny = stepsize_pl(1.0, 0.2, 0.1, 3.0, 1.0, 0.4, mu=1e-12)
    doubled = stepsize_nonconvex(1.0, 0.2 * 2, 0.1 * 2, 3.0, 1.0, 0.4)
    assert tiny == pytest.approx(doubled, rel=1e-12)
    with pytest.raises(PageConfigError):
        stepsize_pl(1.0, 0.1, 0.1, 1.0, 1.0, 0.5, mu=0.0)


def test_stepsize_composed_reduces_and_grows_with_inner_batches():
    outer = uniform_with_replacement(6, 2)
    inner_fb = [full_batch(4)] * 6
    comp = compose_variance(outer, inner_fb, [5.0] * 6, [2.0] * 6, 7.0, 3.0)
    assert stepsize_composed(1.0, comp, 0.25) == pytest.approx(
        stepsize_nonconvex(1.0, outer.A, outer.B, 7.0, 3.0, 0.25))

    def gamma_for(taus):
        inner = [uniform_with_replacement(8, t) for t in taus]
        c = compose_variance(outer, inner, [5.0] * 6, [2.0] * 6, 7.0, 3.0)
        return stepsize_composed(1.0, c, 0.25)

    gammas = [gamma_for([t] * 6) for t in (1, 2, 4, 8)]
    assert all(a <= b + 1e-15 for a, b in zip(gammas, gammas[1:]))


def test_default_p():
    assert default_p(10, 1000) == pytest.approx(10 / 1010)
    assert default_p(7, 7) == pytest.approx(0.5)
    rng = np.random.default_rng(2)
    for _ in range(20):
        n = int(rng.integers(2, 1000))
        card = float(rng.uniform(1, n))
        p = default_p(card, n)
        assert p * n + (1 - p) * card <= 2 * card + 1e-12
    with pytest.raises(PageConfigError):
        default_p(0, 10)


def test_iteration_budget():
    assert iteration_budget(1.0, 0.01, 0.5) == 400
    assert iteration_budget(1.0, 10.0, 0.5) == 1
    assert iteration_budget(1.0, 0.01, 0.25) == 800
    with pytest.raises(PageConfigError):
        iteration_budget(0.0, 0.01, 0.5)


def test_expected_complexity():
    assert expected_complexity(1000, 10, 400) == 9000.0
    assert expected_complexity(1000, 10, 0) == 1000.0


# ---------------------------------------------------------------------------
# the optimizer loop
# ---------------------------------------------------------------------------


def small_task(n=40, d=5, s=0.5, seed=3):
    return gen_controlled_lpm(n, d, 0.001, s, seed)


def test_full_refresh_probability_is_gradient_descent():
    prob = small_task()
    gamma = 0.3
    cfg = PageConfig(gamma=gamma, p=1.0, T=60, seed=5, monitor_every=10)
    trace = run_page(prob, uniform_with_replacement(prob.n, 3), cfg)
    x = prob.x0.copy()
    g = prob.full_grad(x)
    for _ in range(60):
        x = x - gamma * g
        g = prob.full_grad(x)
    np.testing.assert_array_equal(trace.final_point, x)
    assert np.all(trace.refreshed)


def test_full_batch_sampling_tracks_exact_gradient():
    prob = small_task()
    cfg = PageConfig(gamma=0.3, p=0.25, T=100, seed=6, monitor_every=1)
    trace = run_page(prob, full_batch(prob.n), cfg)
    assert trace.est_err_sq.max() <= 1e-24


def test_refreshed_records_have_zero_estimator_error():
    prob = small_task()
    cfg = PageConfig(gamma=0.2, p=0.4, T=80, seed=7, monitor_every=1)
    trace = run_page(prob, uniform_with_replacement(prob.n, 2), cfg)
    assert trace.refreshed.any() and not trace.refreshed.all()
    assert np.all(trace.est_err_sq[trace.refreshed] == 0.0)


def test_trace_bookkeeping():
    prob = small_task()
    cfg = PageConfig(gamma=0.2, p=0.3, T=50, seed=8, monitor_every=5)
    trace = run_page(prob, uniform_with_replacement(prob.n, 2), cfg)
    assert trace.calls[0] == prob.n
    assert np.all(np.diff(trace.calls) >= 0)
    assert trace.iterations[0] == 0 and trace.iterations[-1] == 50
    assert trace.delta0 == pytest.approx(prob.value(prob.x0) - prob.f_star)
    assert trace.total_calls == trace.calls[-1]


def test_determinism_bitwise():
    prob = small_task()
    cfg = PageConfig(gamma=0.2, p=0.3, T=40, seed=9)
    spec = nice(prob.n, 4)
    t1 = run_page(prob, spec, cfg)
    t2 = run_page(prob, spec, cfg)
    np.testing.assert_array_equal(t1.final_point, t2.final_point)
    np.testing.assert_array_equal(t1.grad_norm_sq, t2.grad_norm_sq)
    np.testing.assert_array_equal(t1.calls, t2.calls)
    assert t1.selected_iteration == t2.selected_iteration
    t3 = run_page(prob, spec, PageConfig(gamma=0.2, p=0.3, T=40, seed=10))
    assert not np.array_equal(t1.final_point, t3.final_point)


def test_output_rules():
    prob = small_task()
    spec = uniform_with_replacement(prob.n, 1)
    base = dict(gamma=0.2, p=0.3, T=30, seed=11, monitor_every=3)
    last = run_page(prob, spec, PageConfig(output_rule="last-iterate", **base))
    np.testing.assert_array_equal(last.selected_point, last.final_point)
    best = run_page(prob, spec, PageConfig(output_rule="best-gradient-iterate", **base))
    gbest = prob.full_grad(best.selected_point)
    assert float(gbest @ gbest) == pytest.approx(best.grad_norm_sq.min(), rel=1e-12)
    uni = run_page(prob, spec, PageConfig(**base))
    assert 0 <= uni.selected_iteration < 30


def test_one_step_estimator_law():
    prob = small_task(n=2, d=3, s=1.0, seed=12)
    spec = uniform_with_replacement(2, 1)
    p = 0.3
    gamma = 0.2
    x0 = prob.x0
    g0 = prob.full_grad(x0)
    x1 = x0 - gamma * g0
    # enumerate the transition law of g^1
    expected = p * prob.full_grad(x1)
    diffs = np.stack([prob.component_grad_diff(i, x1, x0) for i in range(2)])
    for pr, d in enumerate_draws(spec):
        expected += (1 - p) * pr * (g0 + apply_draw_matrix(d, diffs))
    law = p * prob.full_grad(x1) + (1 - p) * (g0 + prob.full_grad(x1) - prob.full_grad(x0))
    np.testing.assert_allclose(expected, law, rtol=1e-12, atol=1e-15)


def test_divergence_guard_reports_iteration():
    prob = small_task()
    cfg = PageConfig(gamma=1000.0, p=1.0, T=500, seed=13, monitor_every=1)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(PageDivergence) as err:
            run_page(prob, full_batch(prob.n), cfg)
    assert err.value.iteration > 0


def test_config_validation():
    with pytest.raises(PageConfigError):
        PageConfig(gamma=0.0, p=0.5, T=10, seed=0)
    with pytest.raises(PageConfigError):
        PageConfig(gamma=0.1, p=1.5, T=10, seed=0)
    with pytest.raises(PageConfigError):
        PageConfig(gamma=0.1, p=0.5, T=0, seed=0)
    with pytest.raises(PageConfigError):
        PageConfig(gamma=0.1, p=0.5, T=10, seed=0, output_rule="middle")
    prob = small_task()
    with pytest.raises(PageConfigError):
        run_page(prob, uniform_with_replacement(prob.n + 1, 1),
                 PageConfig(gamma=0.1, p=0.5, T=10, seed=0))


def test_measured_calls_concentrate_around_expectation():
    prob = gen_controlled_lpm(200, 5, 0.001, 0.5, 14)
    tau = 5
    spec = uniform_with_replacement(prob.n, tau)
    p = default_p(tau, prob.n)
    T = 2000
    cfg = PageConfig(gamma=0.05, p=p, T=T, seed=15)
    trace = run_page(prob, spec, cfg)
    per_iter = p * prob.n + (1 - p) * 2 * tau
    expect = prob.n + T * per_iter
    assert abs(trace.total_calls - expect) <= 0.2 * expect
    assert trace.total_calls >= prob.n + tau * T * 0.8
    # the a-priori budget n + 2|S|T brackets the sampled-step cost
    assert expected_complexity(prob.n, tau, T) >= prob.n + (1 - p) * 2 * tau * T


# ---------------------------------------------------------------------------
# composed runs
# ---------------------------------------------------------------------------


def test_composed_single_client_reduces_to_flat_run():
    client = small_task(n=12, d=4, seed=16)
    grouped = GroupedProblem([client])
    grouped.f_star = client.f_star
    spec = uniform_with_replacement(client.n, 2)
    cfg = PageConfig(gamma=0.2, p=0.3, T=40, seed=17)
    tc = run_page_composed(grouped, full_batch(1), [spec], cfg)
    tf = run_page(client, spec, cfg)
    np.testing.assert_array_equal(tc.final_point, tf.final_point)
    np.testing.assert_array_equal(tc.grad_norm_sq, tf.grad_norm_sq)
    np.testing.assert_array_equal(tc.calls, tf.calls)


def test_composed_full_batch_inner_couples_bitwise_with_flat():
    grouped = stratify(gen_controlled_lpm(12, 4, 0.001, 0.5, 18), 3)
    flat = grouped.flatten()
    outer = nice(3, 2)
    inner = [full_batch(int(m)) for m in grouped.m]
    cfg = PageConfig(gamma=0.1, p=0.25, T=60, seed=19)
    tc = run_page_composed(grouped, outer, inner, cfg)
    tf = run_page(flat, outer, cfg)
    np.testing.assert_array_equal(tc.final_point, tf.final_point)
    np.testing.assert_array_equal(tc.selected_point, tf.selected_point)
    np.testing.assert_array_equal(tc.grad_norm_sq, tf.grad_norm_sq)
    np.testing.assert_array_equal(tc.objective, tf.objective)
    np.testing.assert_array_equal(tc.calls, tf.calls)
    assert tc.selected_iteration == tf.selected_iteration


def test_composed_validation():
    grouped = stratify(gen_controlled_lpm(12, 4, 0.001, 0.5, 20), 3)
    cfg = PageConfig(gamma=0.1, p=0.25, T=10, seed=0)
    with pytest.raises(PageConfigError):
        run_page_composed(grouped, nice(4, 1), [full_batch(4)] * 3, cfg)
    with pytest.raises(PageConfigError):
        run_page_composed(grouped, nice(3, 1), [full_batch(5)] * 3, cfg)


def test_composed_gradient_decreases_on_grouped_task():
    grouped = stratify(gen_controlled_lpm(40, 5, 0.001, 0.5, 21), 5)
    outer = uniform_with_replacement(5, 2)
    inner = [uniform_with_replacement(8, 2)] * 5
    cfg = PageConfig(gamma=0.05, p=0.2, T=400, seed=22, monitor_every=40)
    trace = run_page_composed(grouped, outer, inner, cfg)
    assert trace.grad_norm_sq[-1] < 0.25 * trace.grad_norm_sq[0]


# ---------------------------------------------------------------------------
# statistical sanity on a small task (full-size checks live in acceptance)
# ---------------------------------------------------------------------------


def test_nonconvex_bound_small_scale():
    prob = gen_controlled_lpm(100, 5, 0.001, 0.5, 1)
    rep = lipschitz_constants(prob)
    w = np.full(prob.n, 1.0 / prob.n)
    plus_sq, pm_sq = exact_weighted_curvatures(prob, w)
    spec = uniform_with_replacement(prob.n, 1)
    p = default_p(1, prob.n)
    gamma = stepsize_nonconvex(rep.L_minus, spec.A, spec.B, plus_sq, pm_sq, p)
    delta0 = prob.value(prob.x0) - prob.f_star
    eps = 1e-2
    T = iteration_budget(delta0, eps, gamma)
    sq = []
    for seed in range(1, 11):
        tr = run_page(prob, spec, PageConfig(gamma=gamma, p=p, T=T, seed=seed))
        g = prob.full_grad(tr.selected_point)
        sq.append(float(g @ g))
    bound = 2 * delta0 / (gamma * T)
    assert np.mean(sq) <= 1.5 * bound


def test_linear_rate_small_scale():
    prob = gen_controlled_lpm(100, 5, 0.001, 0.5, 1)
    rep = lipschitz_constants(prob)
    w = np.full(prob.n, 1.0 / prob.n)
    plus_sq, pm_sq = exact_weighted_curvatures(prob, w)
    spec = uniform_with_replacement(prob.n, 1)
    p = default_p(1, prob.n)
    mu = 0.001
    gamma = stepsize_pl(rep.L_minus, spec.A, spec.B, plus_sq, pm_sq, p, mu)
    T = math.ceil(4.0 / (gamma * mu))
    slopes = []
    for seed in range(1, 6):
        tr = run_page(prob, spec, PageConfig(gamma=gamma, p=p, T=T, seed=seed))
        gap = tr.objective - prob.f_star
        keep = gap > 0
        coef = np.polyfit(tr.iterations[keep], np.log(gap[keep]), 1)
        slopes.append(coef[0])
    bound = math.log1p(-gamma * mu)
    assert np.median(slopes) <= bound + 0.1 * abs(bound)
