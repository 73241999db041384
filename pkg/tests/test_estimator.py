import math
import warnings

import numpy as np
import pytest

from uwb_rte.estimator import (
    DegenerateGeometryError,
    DegenerateResidualWarning,
    FirstStepEstimate,
    block_projector,
    build_design_matrix,
    build_rhs,
    cost,
    first_step,
    gn_jacobian,
    gn_one_step,
    predicted_ranges,
    solve_linear_step,
    stacked_ranges,
    two_step_estimate,
)
from uwb_rte.geometry import FrameTransform, rotation_block, yaw_matrix
from uwb_rte.scenario import (
    MeasurementSet,
    default_layout,
    make_rng,
    random_scenario,
    synthesize_ranges,
)

from conftest import exact_measurements

TRUTH = FrameTransform(math.radians(60), [20.0, 20.0, 20.0])
REGIMES = [(j1, j2) for j1 in range(1, 5) for j2 in range(1, 4)]


def toy_positions():
    """One anchor path of 4 non-coplanar points, one tag path of 3 independent points."""
    p1 = np.array([[0.0, 0.0, 10.0], [5.0, 1.0, 12.0], [-2.0, 6.0, 9.0], [1.0, -4.0, 16.0]])
    p2 = np.array([[0.0, 0.0, 10.0], [4.0, -3.0, 11.0], [-1.0, 5.0, 7.0]])
    return p1, p2


def rhs_by_hand(p1, p2, ranges, sigma):
    """Loop-based construction of the linear right-hand side, independent of the vectorized code."""
    n1, n2, n = ranges.shape
    out = []
    z1_mean = np.mean(p1[:, 2])
    for l2 in range(n2):
        block = []
        for l1 in range(n1):
            for i in range(n):
                block.append(ranges[l1, l2, i] ** 2 - sigma[l1, l2] ** 2 - p1[l1] @ p1[l1])
        block = np.array(block) - np.mean(block)
        k = 0
        for l1 in range(n1):
            for i in range(n):
                block[k] += 2.0 * p2[l2, 2] * (p1[l1, 2] - z1_mean)
                k += 1
        out.extend(block)
    return np.array(out)


def model_by_hand(p1, p2, tf, n):
    """-2 p1_bar^T (gamma1 Rblock gamma1^T p2 + t) for every (l2, l1, i), by explicit loops."""
    planar = np.zeros((3, 3))
    planar[:2, :2] = rotation_block(tf.theta)
    mean = p1.mean(axis=0)
    out = []
    for l2 in range(len(p2)):
        q = planar @ p2[l2] + tf.translation
        for l1 in range(len(p1)):
            out.extend([-2.0 * (p1[l1] - mean) @ q] * n)
    return np.array(out)


def test_rhs_matches_loop_oracle_on_noisy_data(case_i_noisy):
    _, m = case_i_noisy
    np.testing.assert_allclose(build_rhs(m), rhs_by_hand(m.anchor_positions, m.tag_positions, m.ranges, m.sigma_pair),
                               rtol=1e-12, atol=1e-8)


def test_rhs_equals_design_times_truth_noise_free():
    p1, p2 = toy_positions()
    m = exact_measurements(p1, p2, TRUTH)
    sys = build_design_matrix(m)
    y_true = np.array([math.sin(TRUTH.theta), math.cos(TRUTH.theta), *TRUTH.translation])
    np.testing.assert_allclose(sys.rhs, model_by_hand(p1, p2, TRUTH, 1), atol=1e-9)
    np.testing.assert_allclose(sys.rhs, sys.h @ y_true, atol=1e-9)


def test_rhs_blocks_are_centered(case_i_noisy):
    _, m = case_i_noisy
    pre = build_rhs(m, gamma2_shift=False).reshape(m.n2, -1)
    assert np.all(np.abs(pre.sum(axis=1)) < 1e-9 * m.n)


def test_rhs_ignores_constant_added_to_squared_ranges(case_i_noisy):
    _, m = case_i_noisy
    shifted = m.replace_ranges(np.sqrt(m.ranges ** 2 + 37.0))
    np.testing.assert_allclose(build_rhs(shifted), build_rhs(m), atol=1e-8)


def test_block_projector_properties():
    p = block_projector(400)
    assert np.abs(p @ np.ones(400)).max() < 1e-12
    assert np.abs(p @ p - p).max() < 1e-12


def test_design_matrix_dims_case_i(case_i_noisy):
    _, m = case_i_noisy
    sys = build_design_matrix(m)
    assert sys.h.shape == (1200, 5)
    assert sys.rhs.shape == (1200,)
    assert sys.n == 1200
    assert sys.rank_h == 5


def test_design_matrix_rank_drops_for_coplanar_anchors():
    p1, p2 = toy_positions()
    p1[:, 2] = 3.0
    sys = build_design_matrix(exact_measurements(p1, p2, TRUTH))
    assert sys.rank_h <= 4
    assert sys.anchor_centered_rank == 2


def test_design_matrix_columns_by_hand():
    p1, p2 = toy_positions()
    sys = build_design_matrix(exact_measurements(p1, p2, TRUTH, n_rep=2))
    mean = p1.mean(axis=0)
    row = 0
    for l2 in range(3):
        for l1 in range(4):
            for _ in range(2):
                c = p1[l1] - mean
                expected = -2.0 * np.array([
                    -c[0] * p2[l2, 1] + c[1] * p2[l2, 0],   # d/d sin
                    c[0] * p2[l2, 0] + c[1] * p2[l2, 1],    # d/d cos
                    *c,
                ])
                np.testing.assert_allclose(sys.h[row], expected, atol=1e-12)
                row += 1


def test_solve_recovers_truth_noise_free():
    p1, p2 = toy_positions()
    est = solve_linear_step(build_design_matrix(exact_measurements(p1, p2, TRUTH)))
    assert abs(est.theta_hat - TRUTH.theta) < 1e-6
    np.testing.assert_allclose(est.t_hat, TRUTH.translation, atol=1e-6)
    np.testing.assert_allclose(est.x_hat, [math.sin(TRUTH.theta), math.cos(TRUTH.theta)], atol=1e-9)


def test_first_step_translation_equivariance(case_i_noisy):
    _, m = case_i_noisy
    delta = np.array([5.0, -3.0, 2.0])
    moved = MeasurementSet(m.anchor_positions + delta, m.tag_positions, m.ranges, m.sigma_pair)
    a, b = first_step(m), first_step(moved)
    np.testing.assert_allclose(b.t_hat, a.t_hat + delta, atol=1e-9)
    np.testing.assert_allclose(b.x_hat, a.x_hat, atol=1e-9)
    assert abs(b.theta_hat - a.theta_hat) < 1e-9


def test_solve_rejects_rank_deficient_system():
    p1, p2 = toy_positions()
    p1[:, 2] = 3.0
    with pytest.raises(DegenerateGeometryError, match="anchor positions are coplanar"):
        solve_linear_step(build_design_matrix(exact_measurements(p1, p2, TRUTH)))


def test_projection_needed_at_high_noise():
    cfg = random_scenario(default_layout(1, 1), 1, sigma=100.0)
    est = first_step(synthesize_ranges(cfg))
    r = est.r_tilde_hat
    assert np.abs(r.T @ r - np.eye(2)).max() > 1e-3
    proj = FrameTransform(est.theta_hat, est.t_hat).rotation.block
    np.testing.assert_allclose(proj.T @ proj, np.eye(2), atol=1e-12)


def test_cost_zero_at_truth_noise_free():
    p1, p2 = toy_positions()
    m = exact_measurements(p1, p2, TRUTH, sigma=1.0)
    assert cost(m, TRUTH) < 1e-20


def test_cost_single_measurement_by_hand():
    p1 = np.array([[1.0, 2.0, 3.0]])
    p2 = np.array([[0.0, 0.0, 1.0]])
    tf = FrameTransform(0.3, [0.5, -1.0, 2.0])
    d = np.linalg.norm(p1[0] - yaw_matrix(0.3) @ p2[0] - tf.translation)
    m = MeasurementSet(p1, p2, [[[d + 1.0]]], [[1.0]])
    assert cost(m, tf) == pytest.approx(1.0, abs=1e-12)


def test_cost_at_truth_follows_chi_square_mean():
    costs = []
    for seed in range(200):
        cfg = random_scenario(default_layout(1, 1), seed, sigma=1.0)
        m = synthesize_ranges(cfg)
        costs.append(cost(m, cfg.ground_truth))
    assert abs(np.mean(costs) / 1200 - 1.0) < 0.05


def _fd_jacobian(m, theta, t, h=1e-6):
    def f(th, tt):
        return np.repeat(predicted_ranges(m, th, tt).T.reshape(-1), m.n_rep)

    cols = [(f(theta + h, t) - f(theta - h, t)) / (2 * h)]
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        cols.append((f(theta, t + e) - f(theta, t - e)) / (2 * h))
    return np.stack(cols, axis=1)


def jacobian_fd_error(m, theta, t):
    """Max entry deviation relative to its row norm (each row norm is >= 1)."""
    jac = gn_jacobian(m, theta, t)
    fd = _fd_jacobian(m, theta, t)
    return float((np.abs(jac - fd) / np.linalg.norm(jac, axis=1, keepdims=True)).max())


def test_jacobian_matches_finite_differences():
    gen = make_rng(77)
    for seed, (j1, j2) in enumerate(REGIMES):
        m = synthesize_ranges(random_scenario(default_layout(j1, j2), seed, repetitions_N=2))
        theta, t = gen.uniform(0, 2 * math.pi), gen.normal(scale=10, size=3)
        assert jacobian_fd_error(m, theta, t) <= 1e-5


def test_jacobian_theta_column_zero_for_axial_tags():
    p1, _ = toy_positions()
    p2 = np.array([[0, 0, 1.0], [0, 0, 4.0], [0, 0, -2.0]])
    m = exact_measurements(p1, p2, TRUTH, n_rep=3)
    jac = gn_jacobian(m, 1.1, np.array([3.0, 1.0, -2.0]))
    assert np.abs(jac[:, 0]).max() < 1e-15


def test_jacobian_translation_rows_are_unit(case_i_noisy):
    _, m = case_i_noisy
    jac = gn_jacobian(m, 0.7, np.array([10.0, 5.0, 3.0]))
    assert jac.shape == (m.n, 4)
    np.testing.assert_allclose(np.linalg.norm(jac[:, 1:], axis=1), 1.0, atol=1e-12)


def test_jacobian_singular_geometry():
    p1 = np.array([[1.0, 2.0, 3.0], [0, 0, 0]])
    p2 = np.array([[1.0, 2.0, 3.0]])
    m = MeasurementSet(p1, p2, np.ones((2, 1, 1)), np.ones((2, 1)))
    with pytest.raises(DegenerateGeometryError):
        gn_jacobian(m, 0.0, np.zeros(3))
    jac, keep = gn_jacobian(m, 0.0, np.zeros(3), drop_degenerate=True)
    np.testing.assert_array_equal(keep, [False, True])
    np.testing.assert_array_equal(jac[0], 0.0)


def test_gn_step_zero_at_exact_first_step():
    p1, p2 = toy_positions()
    m = exact_measurements(p1, p2, TRUTH, sigma=1.0)
    first = FirstStepEstimate(np.array([math.sin(TRUTH.theta), math.cos(TRUTH.theta)]), rotation_block(TRUTH.theta),
                              TRUTH.theta, TRUTH.translation)
    ref = gn_one_step(m, first)
    assert abs(ref.delta_theta) < 1e-9
    np.testing.assert_allclose(ref.transform.translation, TRUTH.translation, atol=1e-9)


def test_gn_step_lowers_cost_on_seeded_instance(case_i_noisy):
    _, m = case_i_noisy
    ref = gn_one_step(m, first_step(m))
    assert ref.cost_after <= ref.cost_before


def test_gn_step_lowers_cost_for_most_seeds():
    violating = []
    for seed in range(300):
        est = two_step_estimate(synthesize_ranges(random_scenario(default_layout(1, 1), seed, sigma=1.0)))
        if est.cost_after > est.cost_before:
            violating.append(seed)
    # a single undamped step is not guaranteed to descend; record which seeds do not
    print("seeds where one GN step raised the cost:", violating)
    assert len(violating) <= 0.05 * 300


def test_gn_singular_normal_matrix():
    p1, _ = toy_positions()
    p2 = np.array([[0, 0, 1.0], [0, 0, 4.0], [0, 0, -2.0]])
    m = exact_measurements(p1, p2, TRUTH, sigma=1.0)
    first = FirstStepEstimate(np.zeros(2), np.eye(2), 0.0, np.zeros(3))
    with pytest.raises(DegenerateGeometryError, match="singular"):
        gn_one_step(m, first)


def test_gn_drops_degenerate_rows_with_warning():
    p1, p2 = toy_positions()
    tf = FrameTransform(0.0, [0.0, 0.0, 0.0])
    m = exact_measurements(p1, p2, TRUTH, sigma=1.0)
    # place the linearization point so one predicted tag sits exactly on anchor 0
    t = p1[0] - p2[0]
    first = FirstStepEstimate(np.zeros(2), np.eye(2), tf.theta, t)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        gn_one_step(m, first)
    assert any(issubclass(w.category, DegenerateResidualWarning) for w in caught)


def test_refined_rotation_composes_first_step_and_increment(case_i_noisy):
    _, m = case_i_noisy
    est = two_step_estimate(m)
    expected = (est.first.theta_hat + est.delta_theta) % (2 * math.pi)
    assert est.transform.theta == pytest.approx(expected, abs=1e-12)
    assert 0 <= est.transform.theta < 2 * math.pi
    assert est.wall_time > 0


def test_two_step_noise_free_case_i():
    cfg = random_scenario(default_layout(1, 1), 0, sigma=1e-12)
    est = two_step_estimate(synthesize_ranges(cfg))
    assert abs(est.transform.theta - math.radians(60)) < 1e-6
    np.testing.assert_allclose(est.transform.translation, [20, 20, 20], atol=1e-6)


@pytest.mark.parametrize("j1, j2", REGIMES)
def test_zero_noise_exactness_all_regimes(j1, j2):
    layout = default_layout(j1, j2)
    gen = make_rng(j1 * 10 + j2)
    for seed in range(50):
        truth = FrameTransform(gen.uniform(0, 2 * math.pi), gen.uniform(-30, 30, size=3))
        cfg = random_scenario(layout, seed, sigma=1e-12, ground_truth=truth)
        est = two_step_estimate(synthesize_ranges(cfg))
        dth = abs((est.transform.theta - truth.theta + math.pi) % (2 * math.pi) - math.pi)
        assert dth < 1e-6
        np.testing.assert_allclose(est.transform.translation, truth.translation, atol=1e-6)


def test_stacking_order_is_tag_major(case_i_noisy):
    _, m = case_i_noisy
    d = stacked_ranges(m)
    assert d[0] == m.ranges[0, 0, 0]
    assert d[1] == m.ranges[0, 0, 1]
    assert d[m.n_rep] == m.ranges[1, 0, 0]
    assert d[m.n_rep * m.n1] == m.ranges[0, 1, 0]
