"""
Reduced formulation of the calibration problem: F(α̂) = 𝒦 ∂ₜ S(α̂).

The derivative is evaluated through the linearized LLG equation, its adjoint
through a backward-in-time adjoint PDE, and both feed Landweber and
Landweber-Kaczmarz iterations over the ball D(F) ⊂ ℝ².

Unit saturation magnetization is assumed throughout this module.
"""

import logging
import time
from dataclasses import dataclass, field as dataclass_field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.exceptions import ConfigurationError, DomainError, InstabilityError, ShapeMismatchError
from src.grid import (
    FieldSeries,
    Grid,
    check_nodal,
    check_time_grid,
    dot,
    frobenius_pairing,
    gradient as nodal_gradient,
    gradient_norm_sq,
    gram_apply,
    neumann_laplacian,
    space_time_inner,
)
from src.llg import (
    FORMS,
    ExternalField,
    LlgSolution,
    Params,
    check_stability,
    cross_system_inverse,
    cross_system_matrix,
    cross_system_solve,
    solve,
)
from src.observation import (
    ChannelSelection,
    CoilSetup,
    Measurements,
    apply_K,
    apply_Ktilde,
    apply_KtildeT,
    restrict_channels,
    time_windows,
)

logger = logging.getLogger(__name__)

KACZMARZ_SPLITS = ("all", "per-channel", "per-concentration", "per-coil", "time-subintervals")

# relative to ‖y‖
RESIDUAL_FLOOR = 1e-10


@dataclass(frozen=True, eq=False)
class Scenario:
    """Everything the parameter-to-state map needs besides α̂"""

    grid: Grid
    m0: np.ndarray = dataclass_field(repr=False)
    field: ExternalField = dataclass_field(repr=False)
    setup: CoilSetup = dataclass_field(repr=False)
    nt: int = 1
    dt: float = 1.0
    projection: bool = True
    form: str = "llg3"

    def __post_init__(self):
        if self.form not in FORMS:
            raise ConfigurationError(f"solver.form: unknown form '{self.form}', expected one of {FORMS}")
        m0 = check_nodal(self.m0, self.grid, "initial magnetization")
        if m0.shape != (self.grid.n_nodes, 3):
            raise ShapeMismatchError(f"initial magnetization has shape {m0.shape}")
        self.setup.check_grid(self.grid)
        if self.field.grid != self.grid:
            raise ShapeMismatchError("external field and scenario use different grids")
        self.field.check_time_grid(self.nt, self.dt)
        object.__setattr__(self, "m0", m0)

    @property
    def T(self) -> float:
        return self.nt * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.nt + 1) * self.dt


@dataclass(frozen=True)
class DomainBall:
    """Closed ball of admissible parameters around α̂⁰ with radius ρ < α̂⁰₁

    `smallness` (λ) and `interpolation_constant` (C^I) are diagnostic only.
    """

    center: Tuple[float, float]
    radius: float
    smallness: Optional[float] = None
    interpolation_constant: Optional[float] = None

    def __post_init__(self):
        center = tuple(float(c) for c in self.center)
        if len(center) != 2:
            raise DomainError(f"domain ball center must have 2 entries, got {self.center}")
        if center[0] <= 0:
            raise DomainError(f"domain ball center needs alpha_hat1 > 0, got {center[0]}")
        if not 0 < self.radius < center[0]:
            raise DomainError(
                f"domain ball radius must lie in (0, {center[0]}), got {self.radius}"
            )
        object.__setattr__(self, "center", center)

    @property
    def lower_alpha_hat1(self) -> float:
        return self.center[0] - self.radius

    def contains(self, alpha: Sequence[float], tolerance: float = 1e-12) -> bool:
        alpha = np.asarray(alpha, dtype=float)
        distance = np.linalg.norm(alpha - np.asarray(self.center))
        return bool(distance <= self.radius * (1 + tolerance) and alpha[0] >= self.lower_alpha_hat1 - tolerance)

    def check(self, alpha: Sequence[float]) -> np.ndarray:
        alpha = np.asarray(alpha, dtype=float).copy()
        if not self.contains(alpha):
            raise DomainError(
                f"alpha_hat = ({alpha[0]:.6g}, {alpha[1]:.6g}) lies outside the ball "
                f"around {self.center} with radius {self.radius}"
            )
        return alpha

    def project(self, alpha: Sequence[float]) -> np.ndarray:
        """Euclidean projection onto the ball, then α̂₁ >= α̂⁰₁ - ρ"""
        alpha = np.asarray(alpha, dtype=float)
        center = np.asarray(self.center)
        offset = alpha - center
        distance = np.linalg.norm(offset)
        if distance > self.radius:
            alpha = center + offset * (self.radius / distance)
        alpha = alpha.copy()
        alpha[0] = max(alpha[0], self.lower_alpha_hat1)
        return alpha

    def log_smallness(self):
        if self.smallness is not None and self.interpolation_constant is not None:
            logger.info(
                "smallness diagnostic: C^I * lambda = %.6g (radius %.6g)",
                self.interpolation_constant * self.smallness, self.radius,
            )


@dataclass(frozen=True, eq=False)
class AdjointState:
    p: FieldSeries


@dataclass(frozen=True)
class StoppingRule:
    """Stopping and step size controls shared by the Landweber variants

    Args:
        max_iter (int): iterations (Landweber) or sweeps (Kaczmarz)
        tau_disc (float): discrepancy factor τ
        delta (float): noise level δ of the data
        initial_step (float): first trial step μ₀
        max_backtracks (int): step halvings before a step is given up
        step_growth (float): the next trial step is step_growth times the last accepted one
    """

    max_iter: int = 500
    tau_disc: float = 1.5
    delta: float = 0.0
    initial_step: float = 1.0
    max_backtracks: int = 30
    step_growth: float = 2.0

    @property
    def target(self) -> float:
        return self.tau_disc * self.delta

    def reached(self, res_norm: float, data_norm: float) -> bool:
        """‖F(α̂) - y‖ <= τδ, or for noise-free data a residual at rounding level"""
        if res_norm <= self.target:
            return True
        return self.delta == 0 and res_norm <= RESIDUAL_FLOOR * data_norm


@dataclass
class IterationRecord:
    iteration: int
    alpha: np.ndarray
    residual: float
    mu: float
    wallclock_ms: float
    extra: Dict[str, float] = dataclass_field(default_factory=dict)


@dataclass
class ReconstructionResult:
    method: str
    params: Params
    status: str
    history: List[IterationRecord]
    delta: float
    tau_disc: float

    @property
    def iterations(self) -> int:
        return self.history[-1].iteration if self.history else 0

    @property
    def residual(self) -> float:
        return self.history[-1].residual

    def summary(self) -> dict:
        return {
            "method": self.method,
            "alpha_hat": [self.params.alpha_hat1, self.params.alpha_hat2],
            "status": self.status,
            "iterations": self.iterations,
            "residual": self.residual,
            "delta": self.delta,
            "discrepancy": self.tau_disc * self.delta,
        }


@dataclass(frozen=True, eq=False)
class _BaseCoefficients:
    laplacian: np.ndarray
    gradient: np.ndarray
    gradient_sq: np.ndarray
    h: np.ndarray
    rate: np.ndarray


def _base_coefficients(base: LlgSolution, field_: ExternalField) -> _BaseCoefficients:
    grid = base.grid
    m = base.m.values
    lap = neumann_laplacian(m, grid)
    grad = nodal_gradient(m, grid)
    grad_sq = gradient_norm_sq(grad)[..., None]
    h = field_.sample(base.m.times)
    a1, a2 = base.params.alpha_hat1, base.params.alpha_hat2
    # raw nodal rate of the llg3 step, before projection
    rate = cross_system_solve(a1, -a2, m, lap + grad_sq * m + h - dot(m, h) * m)
    return _BaseCoefficients(lap, grad, grad_sq, h, rate)


def _as_params(alpha) -> Params:
    if isinstance(alpha, Params):
        if alpha.m_s != 1.0:
            raise ConfigurationError("the inverse solvers assume unit saturation magnetization")
        return alpha
    return Params.from_vector(alpha)


def forward_state(alpha, scenario: Scenario) -> Tuple[LlgSolution, Measurements]:
    params = _as_params(alpha)
    base = solve(
        scenario.m0, params, scenario.field, scenario.nt, scenario.dt, scenario.grid,
        form=scenario.form, projection=scenario.projection,
    )
    return base, apply_K(base.m_t, scenario.setup)


def forward(alpha, scenario: Scenario) -> Measurements:
    """F(α̂) = 𝒦 ∂ₜ S(α̂)"""
    return forward_state(alpha, scenario)[1]


def solve_linearized(beta, base: LlgSolution, params: Params, field_: ExternalField) -> Tuple[FieldSeries, FieldSeries]:
    """Derivative u = S′(α̂)β of the discrete parameter-to-state map

    Steps the linearized llg3 equation with the coefficients of the base
    trajectory and differentiates the projection when the base used it.

    Returns:
        Tuple[FieldSeries, FieldSeries]: u and its forward difference u_t
    """

    params = _as_params(params)
    if base.form != "llg3":
        raise ConfigurationError(f"linearization needs an llg3 base trajectory, got {base.form}")
    beta = np.asarray(beta, dtype=float).reshape(2)
    grid, dt, nt = base.grid, base.dt, base.nt
    check_stability(grid, dt, params.alpha_hat1)
    a1, a2 = params.alpha_hat1, params.alpha_hat2
    coeff = _base_coefficients(base, field_)

    u = np.zeros_like(base.m.values)
    for n in range(nt):
        m = base.m.values[n]
        h = coeff.h[n]
        rate = coeff.rate[n]
        un = u[n]
        grad_u = nodal_gradient(un, grid)
        rhs = (
            neumann_laplacian(un, grid)
            + 2.0 * frobenius_pairing(coeff.gradient[n], grad_u)[..., None] * m
            + coeff.gradient_sq[n] * un
            - dot(un, h) * m
            - dot(m, h) * un
            - beta[0] * rate
            + beta[1] * np.cross(m, rate)
            + a2 * np.cross(un, rate)
        )
        u_next = un + dt * cross_system_solve(a1, -a2, m, rhs)
        if base.projection:
            m_tilde = m + dt * rate
            norm = np.linalg.norm(m_tilde, axis=-1, keepdims=True)
            u_next = u_next / norm - m_tilde * dot(m_tilde, u_next) / norm**3
        if not np.all(np.isfinite(u_next)):
            raise InstabilityError(f"non-finite linearized state at step {n + 1}", step=n + 1)
        u[n + 1] = u_next

    series = FieldSeries(grid, dt, u)
    return series, series.derivative()


def apply_Fprime(beta, base: LlgSolution, params: Params, setup: CoilSetup, field_: ExternalField) -> Measurements:
    """F′(α̂)β = 𝒦 u_t"""
    _, u_t = solve_linearized(beta, base, params, field_)
    return apply_K(u_t, setup)


def mt_final_matrix(params: Params, m_T: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Nodal M_T = α̂₁ I + α̂₂ [m(T)]× and its closed-form inverse

    The determinant is α̂₁ (α̂₁² + α̂₂² |m(T)|²), nonzero whenever α̂₁ > 0.

    Raises:
        DomainError: if α̂₁ <= 0
    """

    a1, a2 = float(params.alpha_hat1), float(params.alpha_hat2)
    if a1 <= 0:
        raise DomainError(f"alpha_hat1 must be positive, got {a1}")
    m_T = np.asarray(m_T, dtype=float)
    return cross_system_matrix(a1, a2, m_T), cross_system_inverse(a1, a2, m_T)


def solve_adjoint(
    z: Measurements,
    base: LlgSolution,
    params: Params,
    setup: CoilSetup,
    field_: ExternalField,
    ball: Optional[DomainBall] = None,
    ktilde_sign: float = 1.0,
) -> AdjointState:
    """Adjoint state p for the data-space direction z

    Solves, backward from p(T) = M_T⁻¹ K̃_T z,

        -(α̂₁ I + α̂₂[m]×) p_t - 2α̂₂ m_t×p - Δp + 2(∇mᵀ∇m)p + 2(∇mᵀ∇p)m
            + (-|∇m|² + m·h) p + (m·p)(h + 2Δm) = K̃z

    with explicit Euler in reversed time.
    """

    params = _as_params(params)
    if ball is not None:
        ball.check(params.as_array())
    check_time_grid(z.nt, z.dt, base.nt, base.dt, "adjoint data")
    grid, dt, nt = base.grid, base.dt, base.nt
    check_stability(grid, dt, params.alpha_hat1)
    a1, a2 = params.alpha_hat1, params.alpha_hat2

    source = apply_Ktilde(z, setup, sign=ktilde_sign).values
    coeff = _base_coefficients(base, field_)
    m_all, m_t_all = base.m.values, base.m_t.values

    p = np.empty_like(m_all)
    p[nt] = cross_system_solve(a1, a2, m_all[nt], apply_KtildeT(z, setup))
    for n in range(nt, 0, -1):
        pn = p[n]
        m, m_t, h = m_all[n], m_t_all[n], coeff.h[n]
        grad_m = coeff.gradient[n]
        rest = (
            -2.0 * a2 * np.cross(m_t, pn)
            - neumann_laplacian(pn, grid)
            + 2.0 * gram_apply(grad_m, grad_m, pn)
            + 2.0 * gram_apply(grad_m, nodal_gradient(pn, grid), m)
            + (dot(m, h) - coeff.gradient_sq[n]) * pn
            + dot(m, pn) * (h + 2.0 * coeff.laplacian[n])
        )
        p[n - 1] = pn + dt * cross_system_solve(a1, a2, m, source[n] - rest)
        if not np.all(np.isfinite(p[n - 1])):
            raise InstabilityError(f"non-finite adjoint state at step {n - 1}", step=n - 1)

    return AdjointState(FieldSeries(grid, dt, p))


def adjoint_gradient(state: AdjointState, base: LlgSolution) -> np.ndarray:
    """F′(α̂)*z = (-∬ m_t·p, ∬ (m×m_t)·p)"""
    grid, dt = base.grid, base.dt
    m, m_t, p = base.m.values, base.m_t.values, state.p.values
    return np.array([
        -space_time_inner(m_t, p, grid, dt),
        space_time_inner(np.cross(m, m_t), p, grid, dt),
    ])


def gradient(z: Measurements, base: LlgSolution, params: Params, setup: CoilSetup,
             field_: ExternalField, ktilde_sign: float = 1.0) -> np.ndarray:
    state = solve_adjoint(z, base, params, setup, field_, ktilde_sign=ktilde_sign)
    return adjoint_gradient(state, base)


def _line_search(
    alpha: np.ndarray,
    direction: np.ndarray,
    mu: float,
    current: float,
    evaluate: Callable,
    ball: DomainBall,
    stop: StoppingRule,
):
    """Halve the step until the residual drops below `current`"""
    for _ in range(stop.max_backtracks + 1):
        candidate = ball.project(alpha - mu * direction)
        try:
            evaluated = evaluate(candidate)
        except InstabilityError as error:
            logger.debug("trial step mu = %.3e rejected: %s", mu, error)
        else:
            if evaluated[-1] < current:
                return candidate, mu, evaluated
        mu *= 0.5
    return None


def _evaluator(scenario: Scenario, y: Measurements, block: Optional[ChannelSelection] = None):
    def evaluate(alpha):
        base, data = forward_state(alpha, scenario)
        residual = data - y
        if block is not None:
            residual = restrict_channels(residual, block)
        return base, data, residual, residual.norm()

    return evaluate


def _prepare(y: Measurements, alpha_init, scenario: Scenario, ball: DomainBall) -> np.ndarray:
    check_time_grid(y.nt, y.dt, scenario.nt, scenario.dt, "data")
    check_stability(scenario.grid, scenario.dt, ball.lower_alpha_hat1)
    alpha = ball.check(alpha_init)
    ball.log_smallness()
    return alpha


def landweber(
    y: Measurements,
    alpha_init,
    scenario: Scenario,
    ball: DomainBall,
    stop: StoppingRule = StoppingRule(),
) -> ReconstructionResult:
    """Projected Landweber iteration α̂ <- P(α̂ - μ F′(α̂)*(F(α̂) - y))

    The step μ is found by backtracking so that every accepted step lowers
    the residual. The iteration stops at ‖F(α̂) - y‖ <= τδ (for δ = 0 at a
    residual of rounding size), after max_iter iterations or when no step
    lowers the residual ("stalled").
    """

    alpha = _prepare(y, alpha_init, scenario, ball)
    evaluate = _evaluator(scenario, y)
    y_norm = y.norm()
    clock = time.perf_counter()
    base, _, residual, res_norm = evaluate(alpha)
    history = [IterationRecord(0, alpha.copy(), res_norm, 0.0, 1e3 * (time.perf_counter() - clock))]
    logger.info("iteration 0: |residual| = %.6e, target %.6e", res_norm, stop.target)

    status = "max_iter"
    mu_trial = stop.initial_step
    for iteration in range(1, stop.max_iter + 1):
        if stop.reached(res_norm, y_norm):
            status = "converged"
            break
        clock = time.perf_counter()
        params = Params.from_vector(alpha)
        direction = gradient(residual, base, params, scenario.setup, scenario.field)
        step = _line_search(alpha, direction, mu_trial, res_norm, evaluate, ball, stop)
        if step is None:
            status = "stalled"
            logger.warning("iteration %d: no step lowers the residual %.6e", iteration, res_norm)
            break
        alpha, mu, (base, _, residual, res_norm) = step
        mu_trial = stop.step_growth * mu
        history.append(IterationRecord(iteration, alpha.copy(), res_norm, mu, 1e3 * (time.perf_counter() - clock)))
        logger.info(
            "iteration %d: |residual| = %.6e, alpha_hat = (%.8f, %.8f), mu = %.3e",
            iteration, res_norm, alpha[0], alpha[1], mu,
        )
    else:
        if stop.reached(res_norm, y_norm):
            status = "converged"

    return ReconstructionResult("landweber", Params.from_vector(alpha), status, history, stop.delta, stop.tau_disc)


def kaczmarz_blocks(split: str, K: int, L: int, nt: int, dt: float,
                    breakpoints: Optional[Sequence[float]] = None) -> List[ChannelSelection]:
    """Sub-operators of a Kaczmarz split

    Raises:
        ConfigurationError: for an unknown split or invalid breakpoints
    """

    if split == "all":
        return [ChannelSelection()]
    if split == "per-channel":
        return [ChannelSelection(frozenset({(k, l)}), label=f"channel_{k}_{l}") for k in range(K) for l in range(L)]
    if split == "per-concentration":
        return [ChannelSelection(frozenset((k, l) for l in range(L)), label=f"concentration_{k}") for k in range(K)]
    if split == "per-coil":
        return [ChannelSelection(frozenset((k, l) for k in range(K)), label=f"coil_{l}") for l in range(L)]
    if split == "time-subintervals":
        if breakpoints is None:
            raise ConfigurationError("solver.breakpoints: required for the time-subintervals split")
        return [
            ChannelSelection(window=window, label=f"window_{j}")
            for j, window in enumerate(time_windows(breakpoints, dt, nt))
        ]
    raise ConfigurationError(f"solver.kaczmarz_split: unknown split '{split}', expected one of {KACZMARZ_SPLITS}")


def landweber_kaczmarz(
    y: Measurements,
    alpha_init,
    scenario: Scenario,
    ball: DomainBall,
    blocks: Sequence[ChannelSelection],
    stop: StoppingRule = StoppingRule(),
) -> ReconstructionResult:
    """Cyclic Landweber steps over the blocks of a Kaczmarz split

    A block whose residual is already below τδ_j is skipped, with
    δ_j = δ √(share of samples in the block). The adjoint PDE of every block
    step still runs over the whole time interval.
    """

    alpha = _prepare(y, alpha_init, scenario, ball)
    shares = [block.share(y.K, y.L, y.nt) for block in blocks]
    targets = [stop.target * np.sqrt(share) for share in shares]
    evaluators = [_evaluator(scenario, y, block) for block in blocks]
    mu_trials = [stop.initial_step] * len(blocks)
    y_norm = y.norm()

    def settled(data) -> bool:
        if stop.delta == 0 and (data - y).norm() <= RESIDUAL_FLOOR * y_norm:
            return True
        return all(restrict_channels(data - y, block).norm() <= target for block, target in zip(blocks, targets))

    clock = time.perf_counter()
    base, data = forward_state(alpha, scenario)
    full = (data - y).norm()
    history = [IterationRecord(0, alpha.copy(), full, 0.0, 1e3 * (time.perf_counter() - clock))]

    status = "max_iter"
    for sweep in range(1, stop.max_iter + 1):
        if settled(data):
            status = "converged"
            break

        clock = time.perf_counter()
        accepted = []
        for b, block in enumerate(blocks):
            residual = restrict_channels(data - y, block)
            norm = residual.norm()
            if norm <= targets[b]:
                continue
            direction = gradient(residual, base, Params.from_vector(alpha), scenario.setup, scenario.field)
            step = _line_search(alpha, direction, mu_trials[b], norm, evaluators[b], ball, stop)
            if step is None:
                logger.debug("sweep %d, block %s: no step lowers %.6e", sweep, block.label, norm)
                continue
            alpha, mu, (base, data, _, _) = step
            mu_trials[b] = stop.step_growth * mu
            accepted.append(mu)

        full = (data - y).norm()
        if not accepted:
            status = "stalled"
            logger.warning("sweep %d: no block step lowers its residual", sweep)
            break
        block_norms = [restrict_channels(data - y, block).norm() for block in blocks]
        history.append(IterationRecord(
            sweep, alpha.copy(), full, accepted[-1], 1e3 * (time.perf_counter() - clock),
            extra={"max_block_residual": max(block_norms)},
        ))
        logger.info(
            "sweep %d: |residual| = %.6e, alpha_hat = (%.8f, %.8f), %d/%d blocks stepped",
            sweep, full, alpha[0], alpha[1], len(accepted), len(blocks),
        )
    else:
        if settled(data):
            status = "converged"

    return ReconstructionResult("landweber_kaczmarz", Params.from_vector(alpha), status, history, stop.delta, stop.tau_disc)
