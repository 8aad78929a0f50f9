import numpy as np
import pytest

from src.exceptions import ConfigurationError, ShapeMismatchError
from src.grid import (
    FieldSeries,
    Grid,
    check_time_grid,
    dirichlet_form,
    forward_difference,
    gradient,
    integrate_space,
    integrate_time,
    l2_inner,
    neumann_laplacian,
    space_time_inner,
)


def _interior(grid):
    i, j = np.divmod(np.arange(grid.n_nodes), grid.ny)
    return (i > 0) & (i < grid.nx - 1) & (j > 0) & (j < grid.ny - 1)


def test_laplacian_of_constant_vanishes(grid):
    f = np.tile([1.0, 2.0, 3.0], (grid.n_nodes, 1))
    np.testing.assert_allclose(neumann_laplacian(f, grid), 0.0, atol=1e-12)


def test_laplacian_of_quadratic_inside(grid):
    x, y = grid.coordinates
    f = np.column_stack([x**2, y**2, x**2 + y**2])
    lap = neumann_laplacian(f, grid)
    np.testing.assert_allclose(lap[_interior(grid)], np.tile([2.0, 2.0, 4.0], (_interior(grid).sum(), 1)), rtol=1e-10)


def test_laplacian_mirrors_at_boundary(grid):
    # x² has zero normal derivative at x = 0, so the mirrored stencil is exact there
    x, _ = grid.coordinates
    f = np.column_stack([x**2, np.zeros_like(x), np.zeros_like(x)])
    lap = neumann_laplacian(f, grid)
    np.testing.assert_allclose(lap[x == 0, 0], 2.0, rtol=1e-10)


def test_laplacian_is_symmetric(grid, rng):
    f, g = rng.standard_normal((2, grid.n_nodes, 3))
    lhs = l2_inner(neumann_laplacian(f, grid), g, grid)
    rhs = l2_inner(f, neumann_laplacian(g, grid), grid)
    assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), abs(rhs))


def test_sparse_matrix_matches_stencil(rng):
    grid = Grid.from_extent(7, 5, 3.0, 1.0)
    f = rng.standard_normal((grid.n_nodes, 3))
    np.testing.assert_allclose(grid.laplacian_matrix @ f, neumann_laplacian(f, grid), rtol=1e-12, atol=1e-12)


def test_laplacian_handles_batches(grid, rng):
    f = rng.standard_normal((4, grid.n_nodes, 3))
    batched = neumann_laplacian(f, grid)
    for n in range(4):
        np.testing.assert_allclose(batched[n], neumann_laplacian(f[n], grid))


def test_laplacian_rejects_wrong_node_count(grid):
    with pytest.raises(ShapeMismatchError):
        neumann_laplacian(np.zeros((grid.n_nodes + 1, 3)), grid)


def test_dirichlet_form_is_nonnegative(grid, rng):
    f = rng.standard_normal((grid.n_nodes, 3))
    assert dirichlet_form(f, f, grid) > 0
    constant = np.ones((grid.n_nodes, 3))
    assert abs(dirichlet_form(constant, constant, grid)) < 1e-12


def test_weights_integrate_bilinear_exactly(grid):
    x, y = grid.coordinates
    assert np.isclose(grid.weights.sum(), grid.area, rtol=1e-14)
    expected = (grid.lx**2 / 2) * (grid.ly**2 / 2)
    assert np.isclose(integrate_space(x * y, grid), expected, rtol=1e-13)


def test_gradient_exact_for_quadratics(grid):
    x, y = grid.coordinates
    f = np.column_stack([x**2, x * y, y])
    grad = gradient(f, grid)
    assert grad.shape == (grid.n_nodes, 3, 2)
    np.testing.assert_allclose(grad[:, 0, 0], 2 * x, atol=1e-12)
    np.testing.assert_allclose(grad[:, 1, 0], y, atol=1e-12)
    np.testing.assert_allclose(grad[:, 1, 1], x, atol=1e-12)
    np.testing.assert_allclose(grad[:, 2, 1], 1.0, atol=1e-12)


def test_flat_index_round_trip(grid):
    assert grid.flat_index(2, 3) == 2 * grid.ny + 3
    assert grid.node_index(grid.flat_index(5, 1)) == (5, 1)
    with pytest.raises(IndexError):
        grid.flat_index(grid.nx, 0)


def test_grid_needs_three_nodes():
    with pytest.raises(ConfigurationError):
        Grid.from_extent(2, 5, 1.0, 1.0)
    with pytest.raises(ConfigurationError):
        Grid.from_extent(3, 3, -1.0, 1.0)


def test_refined_grid_keeps_extent(grid):
    fine = grid.refined()
    assert (fine.nx, fine.ny) == (17, 17)
    assert np.isclose(fine.lx, grid.lx) and np.isclose(fine.hx, grid.hx / 2)


def test_trapezoid_in_time_is_exact_for_linear():
    dt, nt = 0.1, 10
    t = np.arange(nt + 1) * dt
    assert np.isclose(integrate_time(t, dt), 0.5, rtol=1e-14)


def test_forward_difference_repeats_last_slot():
    t = np.linspace(0.0, 1.0, 5)
    rate = forward_difference(t**2, 0.25)
    np.testing.assert_allclose(rate[:-1], (t[1:] ** 2 - t[:-1] ** 2) / 0.25)
    assert rate[-1] == rate[-2]


def test_field_series_shape_checks(grid):
    series = FieldSeries.zeros(grid, 4, 0.1)
    assert series.nt == 4 and np.isclose(series.T, 0.4)
    with pytest.raises(ShapeMismatchError):
        FieldSeries(grid, 0.1, np.zeros((1, grid.n_nodes, 3)))
    with pytest.raises(ConfigurationError):
        FieldSeries(grid, 0.0, np.zeros((3, grid.n_nodes, 3)))


def test_space_time_inner_of_constant(grid):
    ones = np.ones((11, grid.n_nodes, 3))
    assert np.isclose(space_time_inner(ones, ones, grid, 0.1), 3 * grid.area * 1.0, rtol=1e-13)


def test_time_grid_mismatch():
    check_time_grid(8, 0.125, 8, 0.125 * (1 + 1e-14))
    with pytest.raises(ShapeMismatchError):
        check_time_grid(8, 0.125, 16, 0.0625)


def _laplacian_error(n):
    grid = Grid.from_extent(n, n, 4.0, 4.0)
    x, y = grid.coordinates
    # Neumann-compatible: zero normal derivative on every side
    f = np.cos(np.pi * x / 4.0) * np.cos(np.pi * y / 2.0)
    exact = -(np.pi**2) * (1 / 16 + 1 / 4) * f
    lap = neumann_laplacian(np.column_stack([f, f, f]), grid)[:, 0]
    return np.max(np.abs(lap - exact))


def test_laplacian_error_falls_by_four_per_refinement():
    errors = [_laplacian_error(n) for n in (9, 17, 33)]
    ratios = np.array(errors[:-1]) / np.array(errors[1:])
    assert np.all((3.5 <= ratios) & (ratios <= 4.5))


def _green_defect(n):
    grid = Grid.from_extent(n, n, 4.0, 4.0)
    x, y = grid.coordinates
    a = 0.8 * np.cos(np.pi * x / 4.0) * np.cos(np.pi * y / 4.0)
    m = np.column_stack([np.sin(a), np.zeros_like(a), np.cos(a)])
    lhs = l2_inner(m, neumann_laplacian(m, grid), grid)
    energy = integrate_space(np.sum(gradient(m, grid) ** 2, axis=(-2, -1)), grid)
    return abs(lhs + energy)


def test_unit_field_green_identity_defect_is_second_order():
    defects = [_green_defect(n) for n in (9, 17, 33)]
    assert defects[2] < defects[1] < defects[0]
    assert np.log2(defects[1] / defects[2]) >= 1.8


def test_space_quadrature_of_a_sine_is_second_order():
    errors = []
    for n in (9, 17, 33):
        grid = Grid.from_extent(n, n, 1.0, 1.0)
        x, y = grid.coordinates
        errors.append(abs(integrate_space(np.sin(np.pi * x) * np.sin(np.pi * y), grid) - 4 / np.pi**2))
    ratios = np.array(errors[:-1]) / np.array(errors[1:])
    assert np.all((3.5 <= ratios) & (ratios <= 4.5))
    assert errors[-1] <= 1e-3


def test_time_quadrature_of_a_full_sine_period():
    t = np.linspace(0.0, 1.0, 101)
    assert abs(integrate_time(np.sin(2 * np.pi * t), 0.01)) <= 1e-3
    assert np.isclose(integrate_time(np.ones(7), 1 / 6), 1.0, rtol=1e-14)
