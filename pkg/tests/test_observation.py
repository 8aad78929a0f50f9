import numpy as np
import pytest

from src.exceptions import ConfigurationError, ShapeMismatchError
from src.grid import FieldSeries, Grid, l2_inner, space_time_inner
from src.observation import (
    ChannelSelection,
    CoilSetup,
    FourierTransfer,
    Measurements,
    TabulatedTransfer,
    apply_K,
    apply_Ktilde,
    apply_KtildeT,
    kernel,
    restrict_channels,
    time_windows,
)
from src.verification import smooth_channels, smooth_series


@pytest.fixture
def tiny_setup(small_config):
    grid = Grid.from_extent(4, 4, 4.0, 4.0)
    return small_config.build_setup(grid)


def test_apply_K_matches_kernel_loop(tiny_setup):
    grid, nt, dt = tiny_setup.grid, 8, 0.0625
    m_t = FieldSeries(grid, dt, smooth_series(grid, nt, dt))
    fast = apply_K(m_t, tiny_setup).traces

    tw = np.full(nt + 1, dt)
    tw[[0, -1]] *= 0.5
    times = np.arange(nt + 1) * dt
    naive = np.zeros_like(fast)
    for k in range(tiny_setup.K):
        for l in range(tiny_setup.L):
            for i, t in enumerate(times):
                for n, tau in enumerate(times):
                    for node in range(grid.n_nodes):
                        weight = tw[n] * grid.weights[node]
                        naive[k, l, i] += weight * kernel(tiny_setup, k, l, t, tau, node) @ m_t.values[n, node]
    assert np.max(np.abs(fast - naive)) <= 1e-12 * np.max(np.abs(naive))


def test_static_state_gives_no_signal(tiny_setup):
    m_t = FieldSeries.zeros(tiny_setup.grid, 8, 0.0625)
    assert np.all(apply_K(m_t, tiny_setup).traces == 0.0)


def test_kernel_index_checks(tiny_setup):
    with pytest.raises(IndexError):
        kernel(tiny_setup, tiny_setup.K, 0, 0.0, 0.0, 0)
    with pytest.raises(IndexError):
        kernel(tiny_setup, 0, 0, 0.0, 0.0, tiny_setup.grid.n_nodes)


def test_duality_mismatch_is_first_order(small_config):
    grid = small_config.build_grid()
    setup = small_config.build_setup(grid)
    mismatches = []
    for nt in (64, 128):
        dt = small_config.time.T / nt
        u = FieldSeries(grid, dt, smooth_series(grid, nt, dt))
        z = smooth_channels(setup.K, setup.L, nt, dt)
        lhs = apply_K(u.derivative(), setup).inner(z)
        rhs = space_time_inner(u.values, apply_Ktilde(z, setup).values, grid, dt)
        rhs += l2_inner(u.values[-1], apply_KtildeT(z, setup), grid)
        mismatches.append(abs(lhs - rhs) / abs(lhs))
    assert mismatches[0] / mismatches[1] >= 1.8


def test_flipped_ktilde_breaks_duality(small_config):
    grid = small_config.build_grid()
    setup = small_config.build_setup(grid)
    nt, dt = 64, small_config.time.T / 64
    u = FieldSeries(grid, dt, smooth_series(grid, nt, dt))
    z = smooth_channels(setup.K, setup.L, nt, dt)
    lhs = apply_K(u.derivative(), setup).inner(z)
    right = space_time_inner(u.values, apply_Ktilde(z, setup).values, grid, dt)
    flipped = space_time_inner(u.values, apply_Ktilde(z, setup, sign=-1.0).values, grid, dt)
    tail = l2_inner(u.values[-1], apply_KtildeT(z, setup), grid)
    assert abs(lhs - (flipped + tail)) > 10 * abs(lhs - (right + tail))


def test_ktilde_needs_analytic_derivative(tiny_setup):
    setup = CoilSetup(
        tiny_setup.grid, tiny_setup.concentrations, tiny_setup.sensitivities,
        (TabulatedTransfer([0.0, 1.0, 0.0, -1.0]), tiny_setup.transfers[1]),
    )
    z = Measurements(np.ones((setup.K, setup.L, 9)), 0.125)
    # the forward chain works with samples only
    apply_K(FieldSeries.zeros(setup.grid, 8, 0.125), setup)
    with pytest.raises(ConfigurationError):
        apply_Ktilde(z, setup)


def test_tabulated_transfer_is_periodic():
    transfer = TabulatedTransfer([0.0, 1.0, 0.0, -1.0], period=1.0)
    assert np.isclose(transfer(0.25), 1.0)
    assert np.isclose(transfer(1.25), 1.0)
    assert np.isclose(transfer(0.125), 0.5)
    assert np.isclose(transfer(-0.25), -1.0)


def test_fourier_transfer_derivative():
    transfer = FourierTransfer([0.2, 1.0, 0.3], [0.5, -0.4], period=2.0)
    t = np.linspace(-1.0, 3.0, 17)
    step = 1e-6
    fd = (transfer(t + step) - transfer(t - step)) / (2 * step)
    np.testing.assert_allclose(transfer.derivative(t), fd, atol=1e-7)
    np.testing.assert_allclose(transfer(t + 2.0), transfer(t), atol=1e-13)


def test_measurement_inner_product():
    data = Measurements(np.ones((2, 3, 11)), 0.1)
    assert np.isclose(data.norm() ** 2, 6 * 1.0)
    assert np.isclose((data * 2.0 - data).norm(), data.norm())
    with pytest.raises(ShapeMismatchError):
        data + Measurements(np.ones((2, 3, 21)), 0.05)


def test_measurements_reject_non_finite():
    traces = np.ones((1, 1, 5))
    traces[0, 0, 2] = np.nan
    with pytest.raises(ValueError):
        Measurements(traces, 0.1)


def test_restrict_channels_zero_extends():
    data = Measurements(np.arange(2 * 2 * 5, dtype=float).reshape(2, 2, 5) + 1.0, 0.25)
    block = ChannelSelection(frozenset({(0, 1)}), label="channel_0_1")
    restricted = restrict_channels(data, block)
    np.testing.assert_array_equal(restricted.traces[0, 1], data.traces[0, 1])
    assert np.count_nonzero(restricted.traces) == 5
    assert block.share(2, 2, 4) == 0.25


def test_time_windows_partition_samples():
    windows = time_windows([0.0, 0.25, 0.5], 1 / 64, 32)
    assert windows == [(0, 16), (16, 33)]
    covered = np.concatenate([np.arange(*w) for w in windows])
    np.testing.assert_array_equal(covered, np.arange(33))


@pytest.mark.parametrize("breakpoints", [[0.0, 0.3, 0.5], [0.0, 0.25], [0.0, 0.25, 0.25, 0.5]])
def test_time_windows_reject_bad_breakpoints(breakpoints):
    with pytest.raises(ConfigurationError):
        time_windows(breakpoints, 1 / 64, 32)


def test_time_partition_blocks_sum_to_the_data(tiny_setup):
    nt, dt = 32, 1 / 64
    z = smooth_channels(tiny_setup.K, tiny_setup.L, nt, dt)
    blocks = [ChannelSelection(window=w, label=f"window_{i}") for i, w in enumerate(time_windows([0.0, 0.125, 0.375, 0.5], dt, nt))]
    total = sum((restrict_channels(z, block).traces for block in blocks), np.zeros_like(z.traces))
    np.testing.assert_array_equal(total, z.traces)


def test_ktilde_is_additive_over_a_time_partition(tiny_setup):
    nt, dt = 32, 1 / 64
    z = smooth_channels(tiny_setup.K, tiny_setup.L, nt, dt)
    blocks = [ChannelSelection(window=w) for w in time_windows([0.0, 0.25, 0.5], dt, nt)]
    whole = apply_Ktilde(z, tiny_setup).values
    parts = sum(apply_Ktilde(restrict_channels(z, block), tiny_setup).values for block in blocks)
    scale = np.max(np.abs(whole))
    assert scale > 0
    assert np.max(np.abs(parts - whole)) <= 1e-12 * scale

    whole_T = apply_KtildeT(z, tiny_setup)
    parts_T = sum(apply_KtildeT(restrict_channels(z, block), tiny_setup) for block in blocks)
    assert np.max(np.abs(parts_T - whole_T)) <= 1e-12 * max(np.max(np.abs(whole_T)), 1.0)


def test_final_time_adjoint_vanishes_on_modes_absent_from_the_transfer():
    grid = Grid.from_extent(4, 4, 4.0, 4.0)
    setup = CoilSetup(
        grid,
        np.ones((1, grid.n_nodes)),
        np.ones((1, grid.n_nodes, 3)),
        (FourierTransfer([0.0, 1.0], period=1.0),),
    )
    nt = 64
    s = np.arange(nt + 1) / nt
    for mode in (np.cos(2 * np.pi * 3 * s), np.sin(2 * np.pi * 2 * s), np.sin(2 * np.pi * s)):
        z = Measurements(mode.reshape(1, 1, -1), 1 / nt)
        assert np.max(np.abs(apply_KtildeT(z, setup))) <= 1e-12

    matched = Measurements(np.cos(2 * np.pi * s).reshape(1, 1, -1), 1 / nt)
    assert np.max(np.abs(apply_KtildeT(matched, setup))) > 0.1
