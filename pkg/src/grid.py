"""
Spatial substrate for the LLG calibration toolkit.

Fields are 3-component vectors sampled on the nodes of a uniform rectangular
grid. A single VecField is an (N, 3) array, a time series of them is an
(nt + 1, N, 3) array wrapped by FieldSeries. Node (i, j) sits at
(i * hx, j * hy) and is stored at flat index i * ny + j.

Boundary conditions are homogeneous Neumann, realised by mirroring the first
interior node into the ghost layer (f[-1] = f[1]).
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Tuple

import numpy as np
import scipy.sparse as sp
from scipy.integrate import trapezoid

from src.exceptions import ConfigurationError, ShapeMismatchError

logger = logging.getLogger(__name__)

# relative tolerance when two time grids are compared
TIME_GRID_RTOL = 1e-12


@dataclass(frozen=True)
class Grid:
    """Uniform node grid on the rectangle [0, lx] x [0, ly]

    Args:
        nx (int): number of nodes along x (>= 3)
        ny (int): number of nodes along y (>= 3)
        hx (float): node spacing along x
        hy (float): node spacing along y
    """

    nx: int
    ny: int
    hx: float
    hy: float

    def __post_init__(self):
        if int(self.nx) != self.nx or int(self.ny) != self.ny:
            raise ConfigurationError("grid: node counts must be integers")
        if self.nx < 3 or self.ny < 3:
            raise ConfigurationError(
                f"grid: need at least 3 nodes per axis, got ({self.nx}, {self.ny})"
            )
        if not (self.hx > 0 and self.hy > 0):
            raise ConfigurationError(
                f"grid: spacings must be positive, got ({self.hx}, {self.hy})"
            )

    @classmethod
    def from_extent(cls, nx: int, ny: int, lx: float, ly: float) -> "Grid":
        if not (lx > 0 and ly > 0):
            raise ConfigurationError(f"grid: extents must be positive, got ({lx}, {ly})")
        return cls(nx=int(nx), ny=int(ny), hx=lx / (nx - 1), hy=ly / (ny - 1))

    @property
    def lx(self) -> float:
        return (self.nx - 1) * self.hx

    @property
    def ly(self) -> float:
        return (self.ny - 1) * self.hy

    @property
    def n_nodes(self) -> int:
        return self.nx * self.ny

    @property
    def area(self) -> float:
        return self.lx * self.ly

    def flat_index(self, i: int, j: int) -> int:
        if not (0 <= i < self.nx and 0 <= j < self.ny):
            raise IndexError(f"node ({i}, {j}) outside a {self.nx}x{self.ny} grid")
        return i * self.ny + j

    def node_index(self, flat: int) -> Tuple[int, int]:
        if not 0 <= flat < self.n_nodes:
            raise IndexError(f"flat index {flat} outside a grid of {self.n_nodes} nodes")
        return divmod(int(flat), self.ny)

    def refined(self, factor: int = 2) -> "Grid":
        """Grid on the same rectangle whose spacing is divided by `factor`"""
        return Grid(
            nx=(self.nx - 1) * factor + 1,
            ny=(self.ny - 1) * factor + 1,
            hx=self.hx / factor,
            hy=self.hy / factor,
        )

    @cached_property
    def coordinates(self) -> Tuple[np.ndarray, np.ndarray]:
        """Flat x and y node coordinates, each of length N"""
        x = np.arange(self.nx) * self.hx
        y = np.arange(self.ny) * self.hy
        xx, yy = np.meshgrid(x, y, indexing="ij")
        return xx.ravel(), yy.ravel()

    @cached_property
    def weights(self) -> np.ndarray:
        """Trapezoidal tensor weights: interior hx*hy, edges half, corners a quarter"""
        wx = np.full(self.nx, self.hx)
        wx[[0, -1]] *= 0.5
        wy = np.full(self.ny, self.hy)
        wy[[0, -1]] *= 0.5
        return np.outer(wx, wy).ravel()

    @cached_property
    def laplacian_matrix(self) -> sp.csr_matrix:
        """Sparse N x N Neumann Laplacian, same stencil as neumann_laplacian"""
        lap_x = _neumann_1d(self.nx, self.hx)
        lap_y = _neumann_1d(self.ny, self.hy)
        lap = sp.kron(lap_x, sp.identity(self.ny)) + sp.kron(sp.identity(self.nx), lap_y)
        return lap.tocsr()


def _neumann_1d(n: int, h: float) -> sp.dia_matrix:
    main = np.full(n, -2.0)
    upper = np.ones(n - 1)
    lower = np.ones(n - 1)
    # mirrored ghost node doubles the inward neighbour
    upper[0] = 2.0
    lower[-1] = 2.0
    return sp.diags([lower, main, upper], [-1, 0, 1]) / h**2


def check_nodal(values: np.ndarray, grid: Grid, name: str = "field") -> np.ndarray:
    """Check that `values` carries nodal data of `grid` along axis -2

    Returns:
        np.ndarray: the values as a float array

    Raises:
        ShapeMismatchError: if the node axis does not match the grid
    """

    values = np.asarray(values, dtype=float)
    if values.ndim < 2 or values.shape[-2] != grid.n_nodes:
        raise ShapeMismatchError(
            f"{name} has shape {values.shape}, expected (..., {grid.n_nodes}, components)"
        )
    return values


def _to_lattice(values: np.ndarray, grid: Grid) -> np.ndarray:
    return values.reshape(values.shape[:-2] + (grid.nx, grid.ny, values.shape[-1]))


def neumann_laplacian(f: np.ndarray, grid: Grid) -> np.ndarray:
    """Componentwise 5-point Laplacian with mirrored ghost nodes

    Args:
        f (np.ndarray): nodal values of shape (..., N, C); leading axes are batch axes
        grid (Grid): the grid the values live on

    Returns:
        np.ndarray: Δ_N f with the shape of `f`
    """

    f = check_nodal(f, grid)
    u = _to_lattice(f, grid)
    pad = [(0, 0)] * (u.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    p = np.pad(u, pad, mode="reflect")

    lap = (p[..., :-2, 1:-1, :] - 2.0 * u + p[..., 2:, 1:-1, :]) / grid.hx**2
    lap += (p[..., 1:-1, :-2, :] - 2.0 * u + p[..., 1:-1, 2:, :]) / grid.hy**2
    return lap.reshape(f.shape)


def gradient(f: np.ndarray, grid: Grid) -> np.ndarray:
    """Nodal Jacobian of `f`

    Central differences inside, one-sided second order differences on the
    boundary.

    Returns:
        np.ndarray: shape (..., N, C, 2), the last axis indexes (d/dx, d/dy)
    """

    f = check_nodal(f, grid)
    u = _to_lattice(f, grid)
    d_x = np.gradient(u, grid.hx, axis=-3, edge_order=2)
    d_y = np.gradient(u, grid.hy, axis=-2, edge_order=2)
    jac = np.stack([d_x, d_y], axis=-1)
    return jac.reshape(f.shape + (2,))


def gradient_norm_sq(grad: np.ndarray) -> np.ndarray:
    """|∇f|² per node"""
    return np.sum(grad * grad, axis=(-2, -1))


def frobenius_pairing(grad_u: np.ndarray, grad_w: np.ndarray) -> np.ndarray:
    """(∇u : ∇w) per node"""
    return np.sum(grad_u * grad_w, axis=(-2, -1))


def gram_apply(grad_a: np.ndarray, grad_b: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Apply the nodal 3x3 matrix (∇a)ᵀ∇b to v, i.e. Σ_j ∂_j a (∂_j b · v)"""
    inner = np.einsum("...dj,...d->...j", grad_b, v)
    return np.einsum("...cj,...j->...c", grad_a, inner)


def dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Nodal dot product over the component axis, keeping it for broadcasting"""
    return np.sum(a * b, axis=-1, keepdims=True)


def integrate_space(f: np.ndarray, grid: Grid) -> np.ndarray:
    """Trapezoidal quadrature over the rectangle of nodal scalars of shape (..., N)"""
    f = np.asarray(f, dtype=float)
    if f.shape[-1] != grid.n_nodes:
        raise ShapeMismatchError(
            f"scalar samples have shape {f.shape}, expected (..., {grid.n_nodes})"
        )
    return f @ grid.weights


def integrate_time(samples: np.ndarray, dt: float) -> np.ndarray:
    """Trapezoidal rule along axis 0"""
    samples = np.asarray(samples, dtype=float)
    if samples.shape[0] < 2:
        raise ShapeMismatchError("time quadrature needs at least 2 samples")
    return trapezoid(samples, dx=dt, axis=0)


def time_weights(nt: int, dt: float) -> np.ndarray:
    weights = np.full(nt + 1, dt)
    weights[[0, -1]] *= 0.5
    return weights


def l2_inner(f: np.ndarray, w: np.ndarray, grid: Grid) -> np.ndarray:
    return integrate_space(np.sum(f * w, axis=-1), grid)


def dirichlet_form(f: np.ndarray, w: np.ndarray, grid: Grid) -> np.ndarray:
    """Discrete ∫∇f:∇w, taken as −⟨Δ_N f, w⟩ so it matches the Neumann stencil"""
    return -l2_inner(neumann_laplacian(f, grid), w, grid)


def space_time_inner(f: np.ndarray, w: np.ndarray, grid: Grid, dt: float) -> float:
    return float(integrate_time(l2_inner(f, w, grid), dt))


def forward_difference(values: np.ndarray, dt: float) -> np.ndarray:
    """(f[n+1] - f[n]) / dt at slots n < nt; slot nt repeats slot nt - 1"""
    values = np.asarray(values, dtype=float)
    if values.shape[0] < 2:
        raise ShapeMismatchError("a time derivative needs at least 2 samples")
    rate = np.empty_like(values)
    rate[:-1] = (values[1:] - values[:-1]) / dt
    rate[-1] = rate[-2]
    return rate


@dataclass(frozen=True, eq=False)
class FieldSeries:
    """Vector fields at t_n = n * dt, n = 0..nt

    Args:
        grid (Grid): spatial grid
        dt (float): time step
        values (np.ndarray): samples of shape (nt + 1, N, 3)
    """

    grid: Grid
    dt: float
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 3 or values.shape[1:] != (self.grid.n_nodes, 3) or values.shape[0] < 2:
            raise ShapeMismatchError(
                f"field series has shape {values.shape}, "
                f"expected (nt + 1, {self.grid.n_nodes}, 3) with nt >= 1"
            )
        if not self.dt > 0:
            raise ConfigurationError(f"time step must be positive, got {self.dt}")
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, grid: Grid, nt: int, dt: float) -> "FieldSeries":
        return cls(grid=grid, dt=dt, values=np.zeros((nt + 1, grid.n_nodes, 3)))

    @property
    def nt(self) -> int:
        return self.values.shape[0] - 1

    @property
    def T(self) -> float:
        return self.nt * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.nt + 1) * self.dt

    def snapshot(self, n: int) -> np.ndarray:
        return self.values[n]

    def derivative(self) -> "FieldSeries":
        return FieldSeries(self.grid, self.dt, forward_difference(self.values, self.dt))

    def check_compatible(self, grid: Grid, nt: int, dt: float, name: str = "field series"):
        check_time_grid(self.nt, self.dt, nt, dt, name)
        if self.grid != grid:
            raise ShapeMismatchError(f"{name} lives on {self.grid}, expected {grid}")


def check_time_grid(nt_a: int, dt_a: float, nt_b: int, dt_b: float, name: str = "series"):
    if nt_a != nt_b or abs(dt_a - dt_b) > TIME_GRID_RTOL * max(dt_a, dt_b):
        raise ShapeMismatchError(
            f"{name} uses nt={nt_a}, dt={dt_a}; expected nt={nt_b}, dt={dt_b}"
        )
