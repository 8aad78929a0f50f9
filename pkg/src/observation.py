"""
MPI measurement chain.

The voltage in receive coil ℓ for concentration k is

    v_kℓ(t) = ∫₀ᵀ ∫_Ω K_kℓ(t, τ, x) · m_t(x, τ) dx dτ,
    K_kℓ(t, τ, x) = -μ₀ ã_ℓ(t - τ) c_k(x) p_ℓ(x),

with T-periodic transfer functions ã_ℓ. The adjoint-side operators K̃ and K̃_T
appear after integrating the pairing ⟨𝒦 u_t, z⟩ by parts in time.
"""

import logging
from dataclasses import dataclass, field
from typing import FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src.exceptions import ConfigurationError, ShapeMismatchError
from src.grid import FieldSeries, Grid, check_time_grid, integrate_time, time_weights

logger = logging.getLogger(__name__)


class TransferFunction:
    """Periodic transfer function of a receive chain"""

    has_derivative = False

    def __init__(self, period: float):
        if not period > 0:
            raise ConfigurationError(f"transfer.period must be positive, got {period}")
        self.period = float(period)

    def __call__(self, t) -> np.ndarray:
        raise NotImplementedError

    def derivative(self, t) -> np.ndarray:
        raise ConfigurationError(
            f"{type(self).__name__} has no analytic derivative; "
            "the adjoint-side operators need one"
        )


class FourierTransfer(TransferFunction):
    """ã(t) = a₀ + Σ_j a_j cos(2πjt/T) + b_j sin(2πjt/T)

    Args:
        cos_coefficients (Sequence[float]): a₀, a₁, ..., a_J
        sin_coefficients (Sequence[float]): b₁, ..., b_J
        period (float): period T
    """

    has_derivative = True

    def __init__(self, cos_coefficients: Sequence[float], sin_coefficients: Sequence[float] = (), period: float = 1.0):
        super().__init__(period)
        self.cos_coefficients = np.asarray(cos_coefficients, dtype=float).reshape(-1)
        self.sin_coefficients = np.asarray(sin_coefficients, dtype=float).reshape(-1)
        if self.cos_coefficients.size == 0:
            self.cos_coefficients = np.zeros(1)

    def _phases(self, t):
        # reduce to one period first so shifts by multiples of T are exact
        s = np.mod(np.asarray(t, dtype=float), self.period)
        return 2.0 * np.pi * s / self.period

    def __call__(self, t) -> np.ndarray:
        phase = self._phases(t)
        value = np.full(phase.shape, self.cos_coefficients[0])
        for j, a in enumerate(self.cos_coefficients[1:], start=1):
            value = value + a * np.cos(j * phase)
        for j, b in enumerate(self.sin_coefficients, start=1):
            value = value + b * np.sin(j * phase)
        return value

    def derivative(self, t) -> np.ndarray:
        phase = self._phases(t)
        omega = 2.0 * np.pi / self.period
        value = np.zeros(phase.shape)
        for j, a in enumerate(self.cos_coefficients[1:], start=1):
            value = value - a * j * omega * np.sin(j * phase)
        for j, b in enumerate(self.sin_coefficients, start=1):
            value = value + b * j * omega * np.cos(j * phase)
        return value


class TabulatedTransfer(TransferFunction):
    """Transfer function known only through samples over one period"""

    def __init__(self, samples: Sequence[float], period: float = 1.0):
        super().__init__(period)
        self.samples = np.asarray(samples, dtype=float).reshape(-1)
        if self.samples.size < 2 or not np.all(np.isfinite(self.samples)):
            raise ConfigurationError("transfer.samples: need at least 2 finite samples")
        self.nodes = np.arange(self.samples.size) * self.period / self.samples.size

    def __call__(self, t) -> np.ndarray:
        return np.interp(np.asarray(t, dtype=float), self.nodes, self.samples, period=self.period)


@dataclass(frozen=True, eq=False)
class CoilSetup:
    """Concentrations, receive coil sensitivities and transfer functions

    Args:
        grid (Grid): spatial grid of the nodal profiles
        concentrations (np.ndarray): K x N nonnegative concentrations c_k
        sensitivities (np.ndarray): L x N x 3 sensitivity profiles p_ℓ
        transfers (tuple): L transfer functions ã_ℓ
        mu0 (float, optional): magnetic constant. Defaults to 1.
    """

    grid: Grid
    concentrations: np.ndarray = field(repr=False)
    sensitivities: np.ndarray = field(repr=False)
    transfers: Tuple[TransferFunction, ...] = field(repr=False)
    mu0: float = 1.0

    def __post_init__(self):
        c = np.asarray(self.concentrations, dtype=float)
        p = np.asarray(self.sensitivities, dtype=float)
        n_nodes = self.grid.n_nodes
        if c.ndim != 2 or c.shape[1] != n_nodes:
            raise ShapeMismatchError(f"concentrations have shape {c.shape}, expected (K, {n_nodes})")
        if p.ndim != 3 or p.shape[1:] != (n_nodes, 3):
            raise ShapeMismatchError(f"sensitivities have shape {p.shape}, expected (L, {n_nodes}, 3)")
        if len(self.transfers) != p.shape[0]:
            raise ShapeMismatchError(f"{len(self.transfers)} transfer functions for {p.shape[0]} coils")
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(p))):
            raise ConfigurationError("coils: concentrations and sensitivities must be finite")
        if np.any(c < 0):
            raise ConfigurationError("coils.concentrations: values must be nonnegative")
        object.__setattr__(self, "concentrations", c)
        object.__setattr__(self, "sensitivities", p)
        object.__setattr__(self, "transfers", tuple(self.transfers))

    @property
    def K(self) -> int:
        return self.concentrations.shape[0]

    @property
    def L(self) -> int:
        return self.sensitivities.shape[0]

    @property
    def channels(self) -> List[Tuple[int, int]]:
        return [(k, l) for k in range(self.K) for l in range(self.L)]

    def check_grid(self, grid: Grid):
        if grid != self.grid:
            raise ShapeMismatchError(f"data on {grid} but the coil setup lives on {self.grid}")


@dataclass(frozen=True, eq=False)
class Measurements:
    """Voltage traces v_kℓ(t_i), stored as a K x L x (nt + 1) array"""

    traces: np.ndarray = field(repr=False)
    dt: float

    def __post_init__(self):
        traces = np.asarray(self.traces, dtype=float)
        if traces.ndim != 3 or traces.shape[2] < 2:
            raise ShapeMismatchError(f"traces have shape {traces.shape}, expected (K, L, nt + 1)")
        if not np.all(np.isfinite(traces)):
            raise ValueError("measurements contain non-finite entries")
        if not self.dt > 0:
            raise ConfigurationError(f"time step must be positive, got {self.dt}")
        object.__setattr__(self, "traces", traces)

    @property
    def K(self) -> int:
        return self.traces.shape[0]

    @property
    def L(self) -> int:
        return self.traces.shape[1]

    @property
    def nt(self) -> int:
        return self.traces.shape[2] - 1

    @property
    def T(self) -> float:
        return self.nt * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.nt + 1) * self.dt

    def channel(self, k: int, l: int) -> np.ndarray:
        return self.traces[k, l]

    def _check_other(self, other: "Measurements"):
        if self.traces.shape != other.traces.shape:
            raise ShapeMismatchError(f"measurements of shape {self.traces.shape} and {other.traces.shape}")
        check_time_grid(self.nt, self.dt, other.nt, other.dt, "measurements")

    def __add__(self, other: "Measurements") -> "Measurements":
        self._check_other(other)
        return Measurements(self.traces + other.traces, self.dt)

    def __sub__(self, other: "Measurements") -> "Measurements":
        self._check_other(other)
        return Measurements(self.traces - other.traces, self.dt)

    def __mul__(self, scalar: float) -> "Measurements":
        return Measurements(scalar * self.traces, self.dt)

    __rmul__ = __mul__

    def __neg__(self) -> "Measurements":
        return Measurements(-self.traces, self.dt)

    def inner(self, other: "Measurements") -> float:
        """Σ_kℓ ∫₀ᵀ v_kℓ w_kℓ dt"""
        self._check_other(other)
        return float(np.sum(integrate_time(np.moveaxis(self.traces * other.traces, -1, 0), self.dt)))

    def norm(self) -> float:
        return float(np.sqrt(max(self.inner(self), 0.0)))


def kernel(setup: CoilSetup, k: int, l: int, t: float, tau: float, node: int) -> np.ndarray:
    """K_kℓ(t, τ, x) at one node"""
    if not 0 <= k < setup.K:
        raise IndexError(f"concentration index {k} out of range for K = {setup.K}")
    if not 0 <= l < setup.L:
        raise IndexError(f"coil index {l} out of range for L = {setup.L}")
    if not 0 <= node < setup.grid.n_nodes:
        raise IndexError(f"node {node} out of range for N = {setup.grid.n_nodes}")
    a = float(setup.transfers[l](t - tau))
    return -setup.mu0 * a * setup.concentrations[k, node] * setup.sensitivities[l, node]


def transfer_matrix(transfer: TransferFunction, times: np.ndarray, derivative: bool = False) -> np.ndarray:
    """A[i, n] = ã(t_i - τ_n) (or ã′) on a shared time grid"""
    lag = times[:, None] - times[None, :]
    return transfer.derivative(lag) if derivative else transfer(lag)


def apply_K(m_t: FieldSeries, setup: CoilSetup) -> Measurements:
    """Voltages v_kℓ(t_i) from a time-derivative series, trapezoid in τ and space"""

    setup.check_grid(m_t.grid)
    weighted_c = setup.concentrations * m_t.grid.weights
    # s[k, l, n] = ∫ c_k p_ℓ · m_t(·, τ_n)
    projected = np.einsum("lxc,nxc->lnx", setup.sensitivities, m_t.values)
    spatial = np.einsum("kx,lnx->kln", weighted_c, projected)

    times = m_t.times
    spatial = spatial * time_weights(m_t.nt, m_t.dt)
    traces = np.empty_like(spatial)
    for l, transfer in enumerate(setup.transfers):
        traces[:, l, :] = -setup.mu0 * spatial[:, l, :] @ transfer_matrix(transfer, times).T
    return Measurements(traces, m_t.dt)


def _spread(coefficients: np.ndarray, setup: CoilSetup) -> np.ndarray:
    # Σ_kℓ g_kℓ(...) c_k p_ℓ over the trailing channel axes of `coefficients`
    return np.einsum("...kl,kx,lxc->...xc", coefficients, setup.concentrations, setup.sensitivities)


def apply_Ktilde(z: Measurements, setup: CoilSetup, sign: float = 1.0) -> FieldSeries:
    """(K̃z)(x, τ) = Σ_kℓ c_k p_ℓ ∫₀ᵀ (-μ₀) ã′_ℓ(t - τ) z_kℓ(t) dt

    Args:
        z (Measurements): channel functions on the time grid
        setup (CoilSetup): coil setup
        sign (float, optional): debugging hook that scales the result. Defaults to 1.

    Raises:
        ConfigurationError: if a transfer function has no analytic derivative
    """

    _check_channels(z, setup)
    times = z.times
    weighted = z.traces * time_weights(z.nt, z.dt)
    coefficients = np.empty((z.nt + 1, setup.K, setup.L))
    for l, transfer in enumerate(setup.transfers):
        if not transfer.has_derivative:
            raise ConfigurationError(f"transfer function of coil {l} has no analytic derivative")
        # rows: data time t_i, columns: state time τ_n
        coefficients[:, :, l] = (weighted[:, l, :] @ transfer_matrix(transfer, times, derivative=True)).T
    coefficients *= -setup.mu0 * sign
    return FieldSeries(setup.grid, z.dt, _spread(coefficients, setup))


def apply_KtildeT(z: Measurements, setup: CoilSetup) -> np.ndarray:
    """(K̃_T z)(x) = Σ_kℓ c_k p_ℓ ∫₀ᵀ (-μ₀) ã_ℓ(t - T) z_kℓ(t) dt"""

    _check_channels(z, setup)
    times = z.times
    weighted = z.traces * time_weights(z.nt, z.dt)
    coefficients = np.empty((setup.K, setup.L))
    for l, transfer in enumerate(setup.transfers):
        coefficients[:, l] = weighted[:, l, :] @ transfer(times - z.T)
    return _spread(-setup.mu0 * coefficients, setup)


def _check_channels(z: Measurements, setup: CoilSetup):
    if (z.K, z.L) != (setup.K, setup.L):
        raise ShapeMismatchError(f"data has {z.K}x{z.L} channels, the setup {setup.K}x{setup.L}")


@dataclass(frozen=True)
class ChannelSelection:
    """A block of the data: a set of channels and a window of sample indices

    `channels=None` keeps all channels, `window=None` keeps all samples. A
    window (start, stop) keeps samples start <= i < stop.
    """

    channels: Optional[FrozenSet[Tuple[int, int]]] = None
    window: Optional[Tuple[int, int]] = None
    label: str = "all"

    def mask(self, K: int, L: int, nt: int) -> np.ndarray:
        mask = np.ones((K, L, nt + 1), dtype=bool)
        if self.channels is not None:
            for k, l in self.channels:
                if not (0 <= k < K and 0 <= l < L):
                    raise IndexError(f"channel ({k}, {l}) outside a {K}x{L} setup")
            chosen = np.zeros((K, L), dtype=bool)
            for k, l in self.channels:
                chosen[k, l] = True
            mask &= chosen[:, :, None]
        if self.window is not None:
            start, stop = self.window
            if not 0 <= start < stop <= nt + 1:
                raise IndexError(f"window {self.window} outside samples 0..{nt}")
            in_window = np.zeros(nt + 1, dtype=bool)
            in_window[start:stop] = True
            mask &= in_window[None, None, :]
        return mask

    def share(self, K: int, L: int, nt: int) -> float:
        """Fraction of all channel-time samples covered by the block"""
        return float(self.mask(K, L, nt).mean())


def restrict_channels(data: Measurements, selection: ChannelSelection) -> Measurements:
    """Zero-extend `data` outside the selected block"""
    mask = selection.mask(data.K, data.L, data.nt)
    return Measurements(np.where(mask, data.traces, 0.0), data.dt)


def time_windows(breakpoints: Iterable[float], dt: float, nt: int) -> List[Tuple[int, int]]:
    """Sample windows of a time partition 0 = t⁰ < t¹ < ... = T

    Every sample belongs to exactly one window, the last window keeps t = T.

    Raises:
        ConfigurationError: if a breakpoint is not a grid point or the
            breakpoints do not partition [0, T]
    """

    indices = []
    for point in breakpoints:
        index = int(round(point / dt))
        if abs(index * dt - point) > 1e-9 * max(dt, abs(point)):
            raise ConfigurationError(f"solver.breakpoints: {point} is off the time grid (dt = {dt})")
        indices.append(index)
    if len(indices) < 2 or indices[0] != 0 or indices[-1] != nt:
        raise ConfigurationError("solver.breakpoints: must start at 0 and end at T")
    if any(b <= a for a, b in zip(indices, indices[1:])):
        raise ConfigurationError("solver.breakpoints: must be strictly increasing")
    stops = indices[1:-1] + [nt + 1]
    return list(zip(indices[:-1], stops))
