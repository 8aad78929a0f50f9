import numpy as np
import pytest

from src.aao import (
    AaoDirection,
    AaoProblem,
    AaoResidual,
    AaoState,
    HeatSolver,
    aao_landweber,
    apply_adjoint,
    apply_derivative,
    i1_i2,
    norm_drift,
    residual,
    u_inner,
    w_inner,
)
from src.config import parse_config, refinement_levels
from src.grid import FieldSeries, neumann_laplacian, space_time_inner
from src.llg import Params
from src.reduced_inverse import DomainBall, StoppingRule, forward, forward_state
from src.verification import (
    VerifyContext,
    aao_setting,
    check_aao_consistency,
    smooth_channels,
    smooth_series,
    time_levels,
)

TRUTH = np.array([2.0, 0.5])


def _setting(scenario, alpha):
    base, _ = forward_state(alpha, scenario)
    problem = AaoProblem(scenario.m0, scenario.field, scenario.setup, scenario.nt, scenario.dt)
    m_hat = FieldSeries(scenario.grid, scenario.dt, base.m.values - scenario.m0[None])
    return problem, AaoState(m_hat, base.params)


def test_i2_vanishes_at_both_ends(rng):
    w = rng.standard_normal((33, 5, 3))
    _, i2 = i1_i2(w, 0.03)
    assert np.max(np.abs(i2[[0, -1]])) <= 1e-12


def test_i2_derivative_is_minus_i1():
    nt, dt = 400, 1.0 / 400
    t = np.arange(nt + 1) * dt
    w = np.cos(3 * t)[:, None, None] * np.array([[1.0, -2.0, 0.5]])
    i1, i2 = i1_i2(w, dt)
    np.testing.assert_allclose(np.gradient(i2, dt, axis=0)[1:-1], -i1[1:-1], atol=1e-4)


def test_i1_i2_need_two_samples():
    with pytest.raises(ValueError):
        i1_i2(np.ones((1, 3)), 0.1)


def _time_profiles(nt):
    t = np.arange(nt + 1) / nt
    w1 = np.cos(3 * t)[:, None, None] * np.array([[1.0, -2.0, 0.5]]) + t[:, None, None] ** 2
    w2 = np.sin(5 * t + 0.2)[:, None, None] * np.array([[0.5, 1.0, -1.0]])
    return w1, w2, 1.0 / nt


def test_i1_pairing_equals_i2_pairing_to_quadrature_order():
    mismatches = []
    for nt in (100, 200):
        w1, w2, dt = _time_profiles(nt)
        i1_a, i2_a = i1_i2(w1, dt)
        i1_b, _ = i1_i2(w2, dt)
        weights = np.full(nt + 1, dt)
        weights[[0, -1]] *= 0.5
        lhs = np.einsum("n,nij,nij->", weights, i1_a, i1_b)
        rhs = np.einsum("n,nij,nij->", weights, i2_a, w2)
        mismatches.append(abs(lhs - rhs) / abs(lhs))
    assert mismatches[1] <= 1e-3
    assert mismatches[0] / mismatches[1] >= 2 ** 0.9


def test_w_inner_matches_i2_pairing(grid):
    x, y = grid.coordinates
    profile = np.column_stack([np.cos(np.pi * x / grid.lx), np.ones_like(x), y / grid.ly])
    w1, w2, dt = _time_profiles(400)
    w1 = w1 * profile[None]
    w2 = w2 * profile[None]
    expected = space_time_inner(i1_i2(w1, dt)[1], w2, grid, dt)
    assert np.isclose(w_inner(w1, w2, grid, dt), expected, rtol=1e-3)


def test_inner_products_are_positive(small_scenario):
    grid, nt, dt = small_scenario.grid, small_scenario.nt, small_scenario.dt
    series = smooth_series(grid, nt, dt)
    assert w_inner(series, series, grid, dt) > 0
    assert u_inner(series, series, grid, dt) > 0


def test_heat_solver_steps_implicit_euler(grid, rng):
    dt = 0.01
    heat = HeatSolver(grid, dt)
    source = rng.standard_normal((6, grid.n_nodes, 3))
    z = heat.forward(source)
    assert np.all(z[0] == 0.0)
    np.testing.assert_allclose(
        (z[1:] - z[:-1]) / dt - neumann_laplacian(z[1:], grid), source[1:], atol=1e-9,
    )

    final = rng.standard_normal((grid.n_nodes, 3))
    v = heat.backward(source, final)
    np.testing.assert_array_equal(v[-1], final)
    np.testing.assert_allclose(
        -(v[1:] - v[:-1]) / dt - neumann_laplacian(v[:-1], grid), source[:-1], atol=1e-9,
    )


def test_state_and_direction_vanish_at_start(small_scenario):
    grid, nt, dt = small_scenario.grid, small_scenario.nt, small_scenario.dt
    values = np.ones((nt + 1, grid.n_nodes, 3))
    with pytest.raises(ValueError):
        AaoState(FieldSeries(grid, dt, values), Params(2.0, 0.5))
    with pytest.raises(ValueError):
        AaoDirection(FieldSeries(grid, dt, values), [1.0, 0.0])


def test_observation_part_matches_reduced_forward(small_scenario):
    problem, state = _setting(small_scenario, [2.0, 0.5])
    reduced = forward([2.0, 0.5], small_scenario)
    gap = (residual(state, problem).obs - reduced).norm() / reduced.norm()
    assert gap <= 1e-10


def test_pde_residual_of_unprojected_solution_falls_under_time_refinement(small_config):
    norms = []
    for level in time_levels(small_config, 3):
        problem, state, _ = aao_setting(level, [2.0, 0.5], projection=False)
        norms.append(residual(state, problem).pde_norm())
    orders = np.log2(np.array(norms[:-1]) / np.array(norms[1:]))
    assert np.all(orders >= 0.9)


def test_consistency_check_passes_on_small_config(small_config):
    result = check_aao_consistency(small_config, VerifyContext())
    assert result.passed
    assert min(result.measured["orders"]) >= 0.9
    assert result.measured["nt"] == [64, 128]
    assert result.measured["projected_floor"] > 0.0


def test_derivative_taylor_slope(small_scenario):
    problem, state = _setting(small_scenario, [1.8, 0.7])
    grid, nt, dt = problem.grid, problem.nt, problem.dt
    direction = AaoDirection(FieldSeries(grid, dt, 0.1 * smooth_series(grid, nt, dt)), [1.0, 0.5])
    current = residual(state, problem)
    derivative = apply_derivative(state, direction, problem)

    remainders = []
    for eps in (1e-1, 1e-2, 1e-3):
        moved = AaoState(
            FieldSeries(grid, dt, state.m_hat.values + eps * direction.u.values),
            Params.from_vector(state.alpha + eps * direction.beta),
        )
        remainders.append((residual(moved, problem) - current - eps * derivative).norm())
    slopes = np.log10(np.array(remainders[:-1]) / np.array(remainders[1:]))
    assert np.all(slopes >= 1.9)


def test_adjoint_pairing_improves_under_refinement(small_config):
    mismatches = []
    for level in refinement_levels(small_config.refined(17, 17, 256), 2):
        problem, state = _setting(level.build_scenario(), [1.8, 0.7])
        grid, nt, dt = problem.grid, problem.nt, problem.dt
        series = smooth_series(grid, nt, dt)
        direction = AaoDirection(FieldSeries(grid, dt, series), [0.3, -0.7])
        datum = AaoResidual(
            FieldSeries(grid, dt, np.cos(np.pi * np.arange(nt + 1) / nt)[:, None, None] * series[-1]),
            smooth_channels(problem.setup.K, problem.setup.L, nt, dt),
        )
        lhs = apply_derivative(state, direction, problem).inner(datum)
        adjoint = apply_adjoint(state, datum, problem)
        rhs = u_inner(direction.u.values, adjoint.u.values, grid, dt) + direction.beta @ adjoint.beta
        mismatches.append(abs(lhs - rhs) / abs(lhs))
    assert mismatches[1] < mismatches[0]


def test_aao_landweber_lowers_the_residual(small_scenario):
    y = forward([2.0, 0.5], small_scenario)
    problem, state = _setting(small_scenario, [1.6, 0.8])
    ball = DomainBall(center=(2.0, 0.5), radius=1.5)
    result = aao_landweber(y, state, problem, ball, StoppingRule(max_iter=3))
    assert len(result.history) > 1
    assert result.history[-1].residual < result.history[0].residual
    assert "pde_residual_W" in result.history[-1].extra
    assert result.state is not None
    assert norm_drift(result.state, problem) >= 0.0
    assert result.summary()["method"] == "aao_landweber"


def test_consistent_start_stops_at_the_discretization_floor(small_config):
    problem, state, scenario = aao_setting(small_config, TRUTH)
    y = forward(TRUTH, scenario)
    floor = residual(state, problem).pde_norm()
    stop = StoppingRule(max_iter=5, tau_disc=1.5, delta=floor)
    result = aao_landweber(y, state, problem, small_config.ball, stop)
    assert result.status == "converged"
    assert result.iterations == 0
    np.testing.assert_array_equal(result.params.as_array(), TRUTH)


def test_aao_landweber_halves_the_parameter_error_at_desk_scale(desk_document):
    config = parse_config(desk_document)
    start = 1.1 * TRUTH
    problem, state, scenario = aao_setting(config, start)
    y = forward(TRUTH, scenario)
    result = aao_landweber(y, state, problem, config.ball, StoppingRule(max_iter=300))
    error = np.linalg.norm(result.params.as_array() - TRUTH)
    assert error <= 0.5 * np.linalg.norm(start - TRUTH)
    residuals = [record.residual for record in result.history]
    assert all(b <= a for a, b in zip(residuals, residuals[1:]))
