"""Mode-tracking solver: cost values, optimality certificates, oracle
agreement, the joint outlier variant, and the brute-force support search."""

import math

import numpy as np
import pytest

from helpers import cost_direct, ridge_closed_form, sign_pattern_minimum
from pafimocs.dictionary import Dictionary
from pafimocs.models import SupportSet
from pafimocs.solver import (
    ModeTrackingProblem,
    SolverConfig,
    brute_force_ssc_oracle,
    evaluate_cost,
    kkt_residual,
    power_iteration_lmax,
    smooth_gradient,
    soft_threshold,
    solve,
    solve_with_outliers,
    write_trace_csv,
)


def custom_dictionary(matrix):
    matrix = np.asarray(matrix, dtype=float)
    return Dictionary(matrix=matrix, order=0, kind="custom")


def random_problem(rng, n_lambda=4, n_pixels=30, support_size=None, **kw):
    phi = rng.standard_normal((n_pixels, n_lambda))
    if support_size is None:
        support_size = int(rng.integers(0, n_lambda + 1))
    support = SupportSet.from_indices(
        rng.choice(n_lambda, size=support_size, replace=False), n_lambda
    )
    lam_true = rng.standard_normal(n_lambda)
    y = phi @ lam_true + 0.1 * rng.standard_normal(n_pixels)
    defaults = dict(
        y_residual_base=y,
        dictionary=custom_dictionary(phi),
        lambda_prev=rng.standard_normal(n_lambda),
        cond_support=support,
        sigma_o_sq=1.0,
        sigma_l_sq=1.0,
        beta=1.0,
        gamma=0.5,
    )
    defaults.update(kw)
    return ModeTrackingProblem(**defaults)


def full_support(n):
    return SupportSet.from_indices(range(n), n)


# -------------------------------------------------------------------- cost


def test_cost_hand_instance():
    problem = ModeTrackingProblem(
        y_residual_base=np.array([1.0, 0.0]),
        dictionary=custom_dictionary(np.eye(2)),
        lambda_prev=np.zeros(2),
        cond_support=SupportSet.from_indices([0], 2),
        sigma_o_sq=1.0,
        sigma_l_sq=1.0,
        beta=1.0,
        gamma=1.0,
    )
    lam = np.array([0.5, 0.2])
    # 0.5*(0.25 + 0.04) + 0.5*0.25 + 0.2
    assert evaluate_cost(problem, lam) == pytest.approx(0.47, abs=1e-15)


def test_cost_degenerates_to_ridge_form_on_full_support():
    rng = np.random.default_rng(0)
    problem = random_problem(rng, support_size=4, beta=1.0)
    problem.cond_support = full_support(4)
    lam = rng.standard_normal(4)
    r = problem.y_residual_base - problem.dictionary.matrix @ lam
    d = lam - problem.lambda_prev
    expected = 0.5 * float(r @ r) + 0.5 * float(d @ d)
    assert evaluate_cost(problem, lam) == pytest.approx(expected, rel=1e-12)


def test_cost_at_prev_with_consistent_data():
    rng = np.random.default_rng(1)
    phi = rng.standard_normal((20, 4))
    lam_prev = rng.standard_normal(4)
    problem = ModeTrackingProblem(
        y_residual_base=phi @ lam_prev,
        dictionary=custom_dictionary(phi),
        lambda_prev=lam_prev,
        cond_support=SupportSet.from_indices([0, 2], 4),
        sigma_o_sq=2.0,
        sigma_l_sq=0.5,
        gamma=0.3,
    )
    off = [1, 3]
    expected = 0.3 * float(np.sum(np.abs(lam_prev[off])))
    assert evaluate_cost(problem, lam_prev) == pytest.approx(expected, rel=1e-12)


def test_problem_validation():
    rng = np.random.default_rng(2)
    phi = rng.standard_normal((10, 3))
    good = dict(
        y_residual_base=np.zeros(10),
        dictionary=custom_dictionary(phi),
        lambda_prev=np.zeros(3),
        cond_support=full_support(3),
        sigma_o_sq=1.0,
        sigma_l_sq=1.0,
    )
    with pytest.raises(ValueError, match="finite"):
        ModeTrackingProblem(**{**good, "y_residual_base": np.full(10, np.nan)})
    with pytest.raises(ValueError, match="length"):
        ModeTrackingProblem(**{**good, "lambda_prev": np.zeros(4)})
    with pytest.raises(ValueError, match="positive"):
        ModeTrackingProblem(**{**good, "sigma_o_sq": 0.0})
    with pytest.raises(ValueError, match="nonnegative"):
        ModeTrackingProblem(**{**good, "gamma": -0.1})


# ---------------------------------------------------------------- gradients


def test_smooth_gradient_finite_difference():
    rng = np.random.default_rng(3)
    problem = random_problem(rng, n_lambda=5, gamma=0.0)
    problem.cond_support = SupportSet.from_indices([0, 3], 5)
    lam = rng.standard_normal(5)
    grad, _ = smooth_gradient(problem, lam)
    eps = 1e-6
    for j in rng.choice(5, size=10, replace=True):
        e = np.zeros(5)
        e[j] = eps
        # gamma=0 makes the full cost smooth, so central differences apply
        fd = (evaluate_cost(problem, lam + e) - evaluate_cost(problem, lam - e)) / (2 * eps)
        assert fd == pytest.approx(grad[j], rel=1e-5, abs=1e-7)


def test_soft_threshold_values():
    v = np.array([3.0, -0.2, 0.5, -2.0])
    assert np.allclose(soft_threshold(v, 0.5), [2.5, 0.0, 0.0, -1.5])
    assert soft_threshold(np.array([0.4]), 0.5)[0] == 0.0


def test_power_iteration_matches_eigh():
    rng = np.random.default_rng(4)
    a = rng.standard_normal((8, 8))
    mat = a @ a.T
    lmax = float(np.linalg.eigvalsh(mat)[-1])
    assert power_iteration_lmax(mat) == pytest.approx(lmax, rel=1e-6)


# ------------------------------------------------------------------ solve


def test_ridge_closed_form_match():
    rng = np.random.default_rng(5)
    for _ in range(20):
        n = int(rng.integers(2, 8))
        problem = random_problem(rng, n_lambda=n, n_pixels=40, support_size=n)
        problem.cond_support = full_support(n)
        result = solve(problem)
        ref = ridge_closed_form(
            problem.dictionary.matrix,
            problem.y_residual_base,
            problem.lambda_prev,
            problem.sigma_o_sq,
            problem.sigma_l_sq,
            problem.beta,
        )
        assert result.converged
        scale = max(1.0, float(np.linalg.norm(ref)))
        assert np.linalg.norm(result.lambda_opt - ref) <= 1e-8 * scale
        # smooth stationarity at the closed form itself
        assert kkt_residual(problem, ref) <= 1e-8


def test_large_gamma_zeroes_off_support():
    rng = np.random.default_rng(6)
    for _ in range(10):
        problem = random_problem(rng, n_lambda=6, support_size=3, gamma=0.0)
        pinned = _restricted_smooth_min(problem, problem.cond_support.indices)
        grad, _ = smooth_gradient(problem, pinned)
        off = ~problem.cond_support.mask()
        # drive gamma above the off-support gradient at the pinned optimum:
        # the subgradient condition then holds with the off block at zero
        problem_l1 = ModeTrackingProblem(
            y_residual_base=problem.y_residual_base,
            dictionary=problem.dictionary,
            lambda_prev=problem.lambda_prev,
            cond_support=problem.cond_support,
            sigma_o_sq=problem.sigma_o_sq,
            sigma_l_sq=problem.sigma_l_sq,
            beta=problem.beta,
            gamma=float(np.max(np.abs(grad[off]))) * 1.5 + 0.1,
        )
        result = solve(problem_l1)
        assert result.converged
        assert np.all(result.lambda_opt[off] == 0.0)
        assert np.allclose(result.lambda_opt, pinned, atol=1e-7)


def test_solver_matches_sign_pattern_enumeration():
    rng = np.random.default_rng(7)
    for _ in range(30):
        problem = random_problem(rng, n_lambda=4, n_pixels=25, gamma=float(rng.uniform(0.1, 2.0)))
        result = solve(problem)
        _, best = sign_pattern_minimum(
            problem.dictionary.matrix,
            problem.y_residual_base,
            problem.lambda_prev,
            problem.cond_support.mask(),
            problem.sigma_o_sq,
            problem.sigma_l_sq,
            problem.beta,
            problem.gamma,
        )
        assert result.converged
        assert result.objective <= best + 1e-6
        assert result.objective >= best - 1e-9


def test_kkt_residual_behaviour():
    rng = np.random.default_rng(8)
    problem = random_problem(rng, n_lambda=4, support_size=2)
    result = solve(problem)
    assert result.kkt_residual <= 1e-6

    # a random non-optimal point scores strictly positive
    assert kkt_residual(problem, result.lambda_opt + 0.5) > 1e-3

    # zero is optimal iff the data gradient fits inside the l1 slack
    tiny = ModeTrackingProblem(
        y_residual_base=problem.y_residual_base * 1e-6,
        dictionary=problem.dictionary,
        lambda_prev=np.zeros(4),
        cond_support=SupportSet.from_indices([], 4),
        sigma_o_sq=1.0,
        sigma_l_sq=1.0,
        gamma=1.0,
    )
    grad0, _ = smooth_gradient(tiny, np.zeros(4))
    assert np.max(np.abs(grad0)) < 1.0
    assert kkt_residual(tiny, np.zeros(4)) == 0.0


def test_warm_start_equivalence_and_short_circuit():
    rng = np.random.default_rng(9)
    problem = random_problem(rng, n_lambda=6, support_size=2, gamma=0.4)
    cold = solve(problem)
    warm = solve(problem, SolverConfig(warm_start=rng.standard_normal(6)))
    assert abs(cold.objective - warm.objective) <= 1e-8

    # warm-starting at the solution certifies immediately, bit-identically
    again = solve(problem, SolverConfig(warm_start=cold.lambda_opt))
    assert again.iterations == 0
    assert np.array_equal(again.lambda_opt, cold.lambda_opt)


def test_backtracking_descent_trace():
    rng = np.random.default_rng(10)
    problem = random_problem(rng, n_lambda=8, n_pixels=60, support_size=3)
    config = SolverConfig(step_rule="backtracking", record_trace=True)
    result = solve(problem, config)
    assert result.converged
    objectives = [row[1] for row in result.trace]
    diffs = np.diff(objectives)
    assert np.all(diffs <= 1e-12)


def test_scaling_consistency():
    rng = np.random.default_rng(11)
    base = random_problem(rng, n_lambda=5, support_size=2, gamma=0.6)
    scaled = ModeTrackingProblem(
        y_residual_base=base.y_residual_base,
        dictionary=base.dictionary,
        lambda_prev=base.lambda_prev,
        cond_support=base.cond_support,
        sigma_o_sq=base.sigma_o_sq * 3.0,
        sigma_l_sq=base.sigma_l_sq * 3.0,
        beta=base.beta,
        gamma=base.gamma / 3.0,
    )
    a = solve(base)
    b = solve(scaled, SolverConfig(kkt_tolerance=1e-8))
    assert np.allclose(a.lambda_opt, b.lambda_opt, atol=1e-6)
    assert a.objective == pytest.approx(3.0 * b.objective, rel=1e-6)


def test_unconverged_reports_flag_not_exception():
    rng = np.random.default_rng(12)
    problem = random_problem(rng, n_lambda=8, n_pixels=60, support_size=3)
    result = solve(problem, SolverConfig(max_iterations=1, polish=False, kkt_tolerance=1e-14))
    assert not result.converged
    assert result.iterations == 1


def test_trace_csv(tmp_path):
    rng = np.random.default_rng(13)
    problem = random_problem(rng, n_lambda=4, support_size=2)
    result = solve(problem, SolverConfig(record_trace=True))
    path = tmp_path / "trace.csv"
    write_trace_csv(result.trace, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "iteration,objective,kkt_residual"
    assert len(lines) == len(result.trace) + 1


# ------------------------------------------------------------- outlier solve


def test_outlier_free_instance_matches_plain_solve():
    rng = np.random.default_rng(14)
    problem = random_problem(rng, n_lambda=4, support_size=2, gamma=0.4)
    plain = solve(problem)
    grad, _ = smooth_gradient(problem, plain.lambda_opt)
    resid = problem.y_residual_base - problem.dictionary.matrix @ plain.lambda_opt
    high = float(np.max(np.abs(resid))) / problem.sigma_o_sq * 2.0 + 1.0
    joint_problem = ModeTrackingProblem(
        y_residual_base=problem.y_residual_base,
        dictionary=problem.dictionary,
        lambda_prev=problem.lambda_prev,
        cond_support=problem.cond_support,
        sigma_o_sq=problem.sigma_o_sq,
        sigma_l_sq=problem.sigma_l_sq,
        beta=problem.beta,
        gamma=problem.gamma,
        gamma_outlier=high,
    )
    joint = solve_with_outliers(joint_problem, SolverConfig(max_iterations=5000))
    assert joint.converged
    assert np.all(joint.outlier_opt == 0.0)
    assert np.linalg.norm(joint.lambda_opt - plain.lambda_opt) <= 1e-6 * max(
        1.0, float(np.linalg.norm(plain.lambda_opt))
    )


def test_outlier_spike_recovery_with_shrinkage():
    """On a decoupled instance (dictionary zero at the spike pixels) the O
    block is an exact diagonal prox, so the shrinkage bound is sharp."""
    rng = np.random.default_rng(15)
    n_pixels, n_lambda = 80, 4
    phi = rng.standard_normal((n_pixels, n_lambda))
    lam_true = rng.standard_normal(n_lambda)
    spikes = rng.choice(n_pixels, size=4, replace=False)
    phi[spikes] = 0.0
    magnitudes = 200.0 * rng.choice([-1.0, 1.0], size=4)
    y = phi @ lam_true
    y[spikes] += magnitudes
    gamma_out = 100.0  # gamma' sigma_o_sq = half the spike magnitude
    problem = ModeTrackingProblem(
        y_residual_base=y,
        dictionary=custom_dictionary(phi),
        lambda_prev=lam_true,
        cond_support=full_support(n_lambda),
        sigma_o_sq=1.0,
        sigma_l_sq=1e6,  # negligible prior: outlier structure drives the fit
        gamma=0.0,
        gamma_outlier=gamma_out,
    )
    result = solve_with_outliers(problem, SolverConfig(max_iterations=5000))
    assert result.converged
    found = np.flatnonzero(result.outlier_opt)
    assert np.array_equal(np.sort(found), np.sort(spikes))
    # each recovered spike sits within the soft-threshold shrinkage of truth
    for idx, mag in zip(spikes, magnitudes):
        assert abs(result.outlier_opt[idx] - mag) <= gamma_out * problem.sigma_o_sq + 1e-3


def test_joint_cost_midpoint_convexity():
    rng = np.random.default_rng(16)
    problem = random_problem(rng, n_lambda=4, support_size=2, gamma_outlier=0.7)
    for _ in range(50):
        l1, l2 = rng.standard_normal(4), rng.standard_normal(4)
        o1, o2 = rng.standard_normal(30), rng.standard_normal(30)
        mid = evaluate_cost(problem, (l1 + l2) / 2, (o1 + o2) / 2)
        avg = 0.5 * (evaluate_cost(problem, l1, o1) + evaluate_cost(problem, l2, o2))
        assert mid <= avg + 1e-10


# ------------------------------------------------------------- support oracle


def test_ssc_oracle_even_odds_reduces_to_best_support():
    rng = np.random.default_rng(17)
    problem = random_problem(rng, n_lambda=4, n_pixels=20, support_size=2, gamma=0.0)
    result = brute_force_ssc_oracle(problem, 0.5, 0.5, max_total_change=4)
    # with log-odds zero, adding helpful indices is free: exhaustive check
    best = None
    for added in _all_subsets(problem.cond_support.complement().indices):
        for removed in _all_subsets(problem.cond_support.indices):
            support = (set(problem.cond_support.indices) | set(added)) - set(removed)
            lam = _restricted_smooth_min(problem, sorted(support))
            value = _smooth_value(problem, lam)
            if best is None or value < best - 1e-12:
                best = value
    assert result.objective == pytest.approx(best, rel=1e-9)


def _all_subsets(indices):
    import itertools

    for r in range(len(indices) + 1):
        yield from itertools.combinations(indices, r)


def _restricted_smooth_min(problem, support):
    support = np.array(sorted(support), dtype=int)
    n = problem.dictionary.n_lambda
    lam = np.zeros(n)
    if support.size == 0:
        return lam
    phi = problem.dictionary.matrix[:, support]
    on_prev = problem.cond_support.mask()[support].astype(float)
    lhs = phi.T @ phi / problem.sigma_o_sq + np.diag(
        problem.beta / problem.sigma_l_sq * on_prev
    )
    rhs = phi.T @ problem.y_residual_base / problem.sigma_o_sq + (
        problem.beta / problem.sigma_l_sq * on_prev * problem.lambda_prev[support]
    )
    lam[support] = np.linalg.solve(lhs, rhs)
    return lam


def _smooth_value(problem, lam):
    r = problem.y_residual_base - problem.dictionary.matrix @ lam
    d = (lam - problem.lambda_prev)[problem.cond_support.mask()]
    return 0.5 * float(r @ r) / problem.sigma_o_sq + 0.5 * problem.beta * float(
        d @ d
    ) / problem.sigma_l_sq


def test_ssc_oracle_no_change_equals_restricted_ridge():
    rng = np.random.default_rng(18)
    problem = random_problem(rng, n_lambda=5, support_size=3, gamma=0.0)
    result = brute_force_ssc_oracle(problem, 0.1, 0.2, max_total_change=0)
    assert len(result.added) == 0 and len(result.removed) == 0
    ref = _restricted_smooth_min(problem, problem.cond_support.indices)
    assert np.allclose(result.lambda_opt, ref, atol=1e-10)


def test_ssc_oracle_dominates_heuristics():
    rng = np.random.default_rng(19)
    for _ in range(10):
        problem = random_problem(rng, n_lambda=5, support_size=2, gamma=0.0)
        p_a, p_r = 0.1, 0.3
        result = brute_force_ssc_oracle(problem, p_a, p_r, max_total_change=3)
        # any heuristic (lam, A, R) must score at least the oracle objective
        for _ in range(20):
            n_add = int(rng.integers(0, 3))
            comp = list(problem.cond_support.complement().indices)
            inside = list(problem.cond_support.indices)
            added = rng.choice(comp, size=min(n_add, len(comp)), replace=False)
            n_rem = int(rng.integers(0, min(3 - n_add, len(inside)) + 1))
            removed = rng.choice(inside, size=n_rem, replace=False)
            support = (set(inside) | set(added)) - set(removed)
            lam = _restricted_smooth_min(problem, sorted(support))
            value = _smooth_value(problem, lam)
            value -= len(added) * math.log(p_a / (1 - p_a))
            value -= len(removed) * math.log(p_r / (1 - p_r))
            assert value >= result.objective - 1e-9


def test_ssc_oracle_guard():
    rng = np.random.default_rng(20)
    problem = random_problem(rng, n_lambda=13, n_pixels=40, support_size=2)
    with pytest.raises(ValueError, match="n_lambda"):
        brute_force_ssc_oracle(problem, 0.1, 0.1, max_total_change=1)
