"""
Forward Landau-Lifshitz-Gilbert solver.

Two equivalent forms are stepped with explicit Euler:

  llg1:  m_t = -α₁ m×(m×(Δm + h)) + α₂ m×(Δm + h)
  llg3:  (α̂₁ m_S² I - α̂₂ [m]×) m_t = m_S² Δm + |∇m|² m + m_S² h - (m·h) m

followed by an optional projection m <- m_S m/|m|. The llg3 system matrix is
inverted in closed form at every node.
"""

import logging
from dataclasses import dataclass, field as dataclass_field
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from src.exceptions import (
    ConfigurationError,
    ConvergenceError,
    DegenerateInputError,
    DomainError,
    InstabilityError,
    ShapeMismatchError,
)
from src.grid import (
    FieldSeries,
    Grid,
    check_nodal,
    check_time_grid,
    dirichlet_form,
    dot,
    gradient,
    gradient_norm_sq,
    integrate_space,
    l2_inner,
    neumann_laplacian,
)

logger = logging.getLogger(__name__)

# fraction of the explicit Euler limit 2 α̂₁ / λ_max that a run may use
STABILITY_SAFETY = 0.5
NORM_TOLERANCE = 1e-6
FORMS = ("llg1", "llg3")


@dataclass(frozen=True)
class Params:
    """Rescaled damping parameters (α̂₁, α̂₂) and the saturation magnetization"""

    alpha_hat1: float
    alpha_hat2: float
    m_s: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.alpha_hat1) or not np.isfinite(self.alpha_hat2):
            raise DomainError(f"parameters must be finite, got ({self.alpha_hat1}, {self.alpha_hat2})")
        if self.alpha_hat1 <= 0:
            raise DomainError(f"alpha_hat1 must be positive, got {self.alpha_hat1}")
        if self.m_s <= 0:
            raise DomainError(f"m_s must be positive, got {self.m_s}")

    @classmethod
    def from_alpha(cls, alpha1: float, alpha2: float, m_s: float = 1.0) -> "Params":
        scale = m_s**2 * alpha1**2 + alpha2**2
        return cls(alpha1 / scale, alpha2 / scale, m_s)

    @classmethod
    def from_vector(cls, vector: Sequence[float], m_s: float = 1.0) -> "Params":
        return cls(float(vector[0]), float(vector[1]), m_s)

    def to_alpha(self):
        # the map is an involution: α = α̂ / (m_S² α̂₁² + α̂₂²)
        scale = self.m_s**2 * self.alpha_hat1**2 + self.alpha_hat2**2
        return self.alpha_hat1 / scale, self.alpha_hat2 / scale

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha_hat1, self.alpha_hat2])


class ExternalField:
    """Rescaled external field h(x, t) on a grid

    Subclasses implement `__call__(t)` returning an (N, 3) array.
    """

    smoothness = "analytic"

    def __init__(self, grid: Grid):
        self.grid = grid

    def __call__(self, t: float) -> np.ndarray:
        raise NotImplementedError

    def sample(self, times: np.ndarray) -> np.ndarray:
        return np.stack([self(t) for t in times])

    def check_time_grid(self, nt: int, dt: float):
        pass


class ConstantField(ExternalField):
    """Static field, either one vector for every node or a full (N, 3) array"""

    def __init__(self, grid: Grid, values):
        super().__init__(grid)
        values = np.asarray(values, dtype=float)
        if values.shape == (3,):
            values = np.tile(values, (grid.n_nodes, 1))
        self.values = check_nodal(values, grid, "external field")
        self.values.setflags(write=False)

    def __call__(self, t: float) -> np.ndarray:
        return self.values

    def sample(self, times: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.values, (len(times),) + self.values.shape).copy()


class AffinePeriodicField(ExternalField):
    """h(x, t) = offset + G (x - center) + Σ_j [c_j cos(2πjt/T) + s_j sin(2πjt/T)]

    Args:
        grid (Grid): spatial grid
        offset (array): constant 3-vector
        slope (array): 3 x 2 matrix G acting on (x, y) - center
        center (array): reference point of the affine part
        cos_coefficients (array): J x 3 cosine coefficients c_1..c_J
        sin_coefficients (array): J x 3 sine coefficients s_1..s_J
        period (float): period T of the drive
    """

    def __init__(self, grid, offset, slope=None, center=None,
                 cos_coefficients=(), sin_coefficients=(), period=1.0):
        super().__init__(grid)
        offset = np.asarray(offset, dtype=float).reshape(3)
        slope = np.zeros((3, 2)) if slope is None else np.asarray(slope, dtype=float).reshape(3, 2)
        center = np.zeros(2) if center is None else np.asarray(center, dtype=float).reshape(2)
        x, y = grid.coordinates
        self.static = offset + np.outer(x - center[0], slope[:, 0]) + np.outer(y - center[1], slope[:, 1])

        self.cos_coefficients = np.asarray(cos_coefficients, dtype=float).reshape(-1, 3)
        self.sin_coefficients = np.asarray(sin_coefficients, dtype=float).reshape(-1, 3)
        if not period > 0:
            raise ConfigurationError(f"field.period must be positive, got {period}")
        self.period = float(period)

    def drive(self, times) -> np.ndarray:
        """Spatially uniform periodic part, shape (len(times), 3)"""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        out = np.zeros((times.size, 3))
        omega = 2.0 * np.pi / self.period
        for j, coef in enumerate(self.cos_coefficients, start=1):
            out += np.outer(np.cos(omega * j * times), coef)
        for j, coef in enumerate(self.sin_coefficients, start=1):
            out += np.outer(np.sin(omega * j * times), coef)
        return out

    def __call__(self, t: float) -> np.ndarray:
        return self.static + self.drive(t)[0]

    def sample(self, times: np.ndarray) -> np.ndarray:
        return self.static[None, :, :] + self.drive(times)[:, None, :]


class SampledField(ExternalField):
    """Field given by its samples on the solver time grid"""

    smoothness = "sampled"

    def __init__(self, grid: Grid, values: np.ndarray, dt: float):
        super().__init__(grid)
        values = np.asarray(values, dtype=float)
        if values.ndim != 3 or values.shape[1:] != (grid.n_nodes, 3):
            raise ShapeMismatchError(f"sampled field has shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ConfigurationError("sampled field has non-finite entries")
        self.values = values
        self.dt = float(dt)

    def __call__(self, t: float) -> np.ndarray:
        n = int(round(t / self.dt))
        if abs(n * self.dt - t) > 1e-9 * max(self.dt, abs(t)) or not 0 <= n < len(self.values):
            raise ShapeMismatchError(f"time {t} is not a sample time of the field")
        return self.values[n]

    def sample(self, times: np.ndarray) -> np.ndarray:
        return np.stack([self(t) for t in times])

    def check_time_grid(self, nt: int, dt: float):
        check_time_grid(len(self.values) - 1, self.dt, nt, dt, "sampled field")


@dataclass(frozen=True, eq=False)
class LlgSolution:
    """Trajectory m, its stored time derivative m_t and the scheme that made them"""

    m: FieldSeries
    m_t: FieldSeries
    params: Params
    form: str = "llg3"
    projection: bool = True
    metadata: Dict = dataclass_field(default_factory=dict)

    @property
    def grid(self) -> Grid:
        return self.m.grid

    @property
    def nt(self) -> int:
        return self.m.nt

    @property
    def dt(self) -> float:
        return self.m.dt

    def norm_deviation(self) -> float:
        """max over nodes and steps of ||m| - m_S|"""
        return float(np.max(np.abs(np.linalg.norm(self.m.values, axis=-1) - self.params.m_s)))


def cross_matrix(m: np.ndarray) -> np.ndarray:
    """Nodal matrices [m]× with [m]× v = m × v"""
    out = np.zeros(m.shape + (3,))
    out[..., 0, 1] = -m[..., 2]
    out[..., 0, 2] = m[..., 1]
    out[..., 1, 0] = m[..., 2]
    out[..., 1, 2] = -m[..., 0]
    out[..., 2, 0] = -m[..., 1]
    out[..., 2, 1] = m[..., 0]
    return out


def cross_system_matrix(a: float, b: float, m: np.ndarray) -> np.ndarray:
    """Nodal a I + b [m]×"""
    return a * np.eye(3) + b * cross_matrix(m)


def cross_system_inverse(a: float, b: float, m: np.ndarray) -> np.ndarray:
    """Closed-form inverse (a² I - a b [m]× + b² m mᵀ) / (a (a² + b² |m|²))"""
    det = a * (a * a + b * b * np.sum(m * m, axis=-1))
    inv = a * a * np.eye(3) - a * b * cross_matrix(m) + b * b * np.einsum("...i,...j->...ij", m, m)
    return inv / det[..., None, None]


def cross_system_solve(a: float, b: float, m: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Solve (a I + b [m]×) x = r at every node"""
    det = a * (a * a + b * b * dot(m, m))
    return (a * a * r - a * b * np.cross(m, r) + b * b * dot(m, r) * m) / det


def llg3_rate(m: np.ndarray, h: np.ndarray, params: Params, grid: Grid) -> np.ndarray:
    ms2 = params.m_s**2
    lap = neumann_laplacian(m, grid)
    grad_sq = gradient_norm_sq(gradient(m, grid))[..., None]
    rhs = ms2 * lap + grad_sq * m + ms2 * h - dot(m, h) * m
    return cross_system_solve(params.alpha_hat1 * ms2, -params.alpha_hat2, m, rhs)


def llg1_rate(m: np.ndarray, h: np.ndarray, params: Params, grid: Grid) -> np.ndarray:
    alpha1, alpha2 = params.to_alpha()
    h_eff = neumann_laplacian(m, grid) + h
    m_x_h = np.cross(m, h_eff)
    return -alpha1 * np.cross(m, m_x_h) + alpha2 * m_x_h


_RATES: Dict[str, Callable] = {"llg1": llg1_rate, "llg3": llg3_rate}


def rate_function(form: str) -> Callable:
    if form not in _RATES:
        raise ConfigurationError(f"solver.form: unknown LLG form '{form}', expected one of {FORMS}")
    return _RATES[form]


def normalize(m: np.ndarray, m_s: float = 1.0) -> np.ndarray:
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    zero = np.flatnonzero(norms.reshape(-1) == 0)
    if zero.size:
        raise DegenerateInputError(f"zero magnetization at flat node {zero[0]}", node=int(zero[0]))
    return m_s * m / norms


def stable_time_step(grid: Grid, alpha_hat1: float) -> float:
    """Largest admissible dt: STABILITY_SAFETY * 2 α̂₁ / λ_max(-Δ_N)"""
    lambda_max = 4.0 / grid.hx**2 + 4.0 / grid.hy**2
    return STABILITY_SAFETY * 2.0 * alpha_hat1 / lambda_max


def check_stability(grid: Grid, dt: float, alpha_hat1: float):
    """Reject a step size above the explicit bound before a run starts

    Raises:
        ConfigurationError: if dt exceeds the bound for the given α̂₁
    """

    if not dt > 0:
        raise ConfigurationError(f"time step must be positive, got {dt}")
    bound = stable_time_step(grid, alpha_hat1)
    if dt > bound:
        raise ConfigurationError(
            f"dt = {dt:.6g} exceeds the explicit stability bound {bound:.6g} "
            f"for alpha_hat1 = {alpha_hat1:.6g} on hx = {grid.hx:.6g}, hy = {grid.hy:.6g}"
        )


def check_normalized(m: np.ndarray, m_s: float, tolerance: float = NORM_TOLERANCE):
    deviation = np.abs(np.linalg.norm(m, axis=-1) - m_s)
    worst = int(np.argmax(deviation))
    if deviation[worst] > tolerance:
        raise DegenerateInputError(
            f"|m| deviates from m_s = {m_s} by {deviation[worst]:.3e} at flat node {worst}",
            node=worst,
        )


def _advance(m: np.ndarray, rate: np.ndarray, dt: float, m_s: float, projection: bool) -> np.ndarray:
    m_next = m + dt * rate
    if projection:
        m_next = normalize(m_next, m_s)
    return m_next


def _step(form, m_n, t_n, dt, params, field, grid, projection):
    check_stability(grid, dt, params.alpha_hat1)
    m_n = check_nodal(m_n, grid, "magnetization")
    check_normalized(m_n, params.m_s)
    rate = rate_function(form)(m_n, field(t_n), params, grid)
    return _advance(m_n, rate, dt, params.m_s, projection)


def step_llg3(m_n, t_n, dt, params: Params, field: ExternalField, grid: Grid, projection=True) -> np.ndarray:
    """One explicit Euler step of the llg3 form"""
    return _step("llg3", m_n, t_n, dt, params, field, grid, projection)


def step_llg1(m_n, t_n, dt, params: Params, field: ExternalField, grid: Grid, projection=True) -> np.ndarray:
    """One explicit Euler step of the llg1 form"""
    return _step("llg1", m_n, t_n, dt, params, field, grid, projection)


def solve(
    m0: np.ndarray,
    params: Params,
    field: ExternalField,
    nt: int,
    dt: float,
    grid: Grid,
    form: str = "llg3",
    projection: bool = True,
) -> LlgSolution:
    """Integrate the LLG equation from m0 over nt steps

    Args:
        m0 (np.ndarray): initial magnetization, shape (N, 3), |m0| = m_S
        params (Params): damping parameters
        field (ExternalField): external field
        nt (int): number of steps
        dt (float): step size
        grid (Grid): spatial grid
        form (str, optional): "llg3" or "llg1". Defaults to "llg3".
        projection (bool, optional): renormalize after each step. Defaults to True.

    Returns:
        LlgSolution: trajectory with forward-difference m_t

    Raises:
        ConfigurationError: if dt violates the stability bound
        InstabilityError: if a step produces non-finite values
    """

    rate_fn = rate_function(form)
    check_stability(grid, dt, params.alpha_hat1)
    m = check_nodal(m0, grid, "initial magnetization")
    check_normalized(m, params.m_s)
    field.check_time_grid(nt, dt)

    values = np.empty((nt + 1,) + m.shape)
    values[0] = m
    for n in range(nt):
        rate = rate_fn(m, field(n * dt), params, grid)
        m = _advance(m, rate, dt, params.m_s, projection)
        if not np.all(np.isfinite(m)):
            raise InstabilityError(f"non-finite magnetization at step {n + 1}", step=n + 1)
        values[n + 1] = m

    logger.debug(
        "solved %s (projection=%s) with nt=%d, dt=%.4g, alpha_hat=(%.6g, %.6g)",
        form, projection, nt, dt, params.alpha_hat1, params.alpha_hat2,
    )
    trajectory = FieldSeries(grid, dt, values)
    return LlgSolution(
        m=trajectory,
        m_t=trajectory.derivative(),
        params=params,
        form=form,
        projection=projection,
        metadata={"nt": nt, "dt": dt, "form": form, "projection": projection},
    )


def stationary_init(
    h0: np.ndarray,
    mode: str,
    params: Params,
    grid: Grid,
    tolerance: float = 1e-8,
    max_steps: int = 200_000,
    dt: Optional[float] = None,
) -> np.ndarray:
    """Initial magnetization in equilibrium with the field h0

    "approximate" aligns m with h0 nodewise. "relaxed" starts there and
    steps the llg1 form with frozen h0 until ‖m_t‖_{L²} < tolerance.

    Raises:
        DegenerateInputError: if h0 vanishes at a node
        ConvergenceError: if relaxation does not reach the tolerance
    """

    h0 = check_nodal(h0, grid, "initial field")
    norms = np.linalg.norm(h0, axis=-1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        i, j = grid.node_index(zero[0])
        raise DegenerateInputError(
            f"external field vanishes at flat node {zero[0]} (i={i}, j={j}); "
            "cannot align the initial magnetization",
            node=int(zero[0]),
        )
    m = params.m_s * h0 / norms[:, None]

    if mode == "approximate":
        return m
    if mode != "relaxed":
        raise ConfigurationError(f"initial_state.mode: unknown mode '{mode}'")

    dt = dt or stable_time_step(grid, params.alpha_hat1)
    for step in range(max_steps):
        rate = llg1_rate(m, h0, params, grid)
        residual = float(np.sqrt(l2_inner(rate, rate, grid)))
        if residual < tolerance:
            logger.debug("relaxed initial state after %d steps, |m_t| = %.3e", step, residual)
            return m
        m = _advance(m, rate, dt, params.m_s, True)
        if step % 5000 == 0:
            logger.debug("relaxation step %d, |m_t| = %.3e", step, residual)

    raise ConvergenceError(f"relaxation did not reach |m_t| < {tolerance} in {max_steps} steps")


def landau_energy(m: np.ndarray, h: np.ndarray, exchange: float, mu0: float, m_s: float, grid: Grid) -> float:
    """E = A ∫|∇m|² - μ₀ m_S ∫⟨h, m⟩

    The exchange integral is the discrete Dirichlet form of the Neumann
    Laplacian.
    """
    m = check_nodal(m, grid, "magnetization")
    h = check_nodal(h, grid, "external field")
    zeeman = integrate_space(np.sum(h * m, axis=-1), grid)
    return float(exchange * dirichlet_form(m, m, grid) - mu0 * m_s * zeeman)
