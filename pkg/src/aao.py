"""
All-at-once formulation: the LLG equation is kept as a residual next to the
observation equation and (m̂, α̂) are iterated jointly.

    𝔽₀(m̂, α̂)  = α̂₁ m̂_t - Δm - α̂₂ m×m̂_t - |∇m|² m - h + (m·h) m,   m = m₀ + m̂
    𝔽_kℓ(m̂, α̂) = 𝒦_kℓ m̂_t

The PDE residual is measured in W = H¹(0,T; L²)*, whose inner product is
∬ I₁[w₁]·I₁[w₂]. Adjoints with respect to the state space U are obtained by
one backward and one forward implicit heat solve.
"""

import logging
import time
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.integrate import cumulative_trapezoid
from scipy.sparse.linalg import splu

from src.exceptions import LinearSolveError, ShapeMismatchError
from src.grid import (
    FieldSeries,
    Grid,
    check_nodal,
    dirichlet_form,
    dot,
    forward_difference,
    frobenius_pairing,
    gradient,
    gradient_norm_sq,
    gram_apply,
    neumann_laplacian,
    space_time_inner,
)
from src.llg import ExternalField, Params
from src.observation import CoilSetup, Measurements, apply_K, apply_Ktilde, apply_KtildeT
from src.reduced_inverse import DomainBall, IterationRecord, ReconstructionResult, StoppingRule

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class AaoProblem:
    """Fixed data of the all-at-once system: m₀, h, the coil setup and the time grid"""

    m0: np.ndarray
    field: ExternalField
    setup: CoilSetup
    nt: int
    dt: float

    def __post_init__(self):
        m0 = check_nodal(self.m0, self.setup.grid, "initial magnetization")
        if m0.shape != (self.setup.grid.n_nodes, 3):
            raise ShapeMismatchError(f"initial magnetization has shape {m0.shape}")
        self.field.check_time_grid(self.nt, self.dt)
        object.__setattr__(self, "m0", m0)

    @property
    def grid(self) -> Grid:
        return self.setup.grid

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.nt + 1) * self.dt

    @cached_property
    def h(self) -> np.ndarray:
        return self.field.sample(self.times)

    @cached_property
    def heat(self) -> "HeatSolver":
        return HeatSolver(self.grid, self.dt)


@dataclass(frozen=True, eq=False)
class AaoState:
    m_hat: FieldSeries
    params: Params

    def __post_init__(self):
        if np.any(self.m_hat.values[0] != 0):
            raise ValueError("m_hat must vanish at t = 0")

    @property
    def alpha(self) -> np.ndarray:
        return self.params.as_array()


@dataclass(frozen=True, eq=False)
class AaoDirection:
    """Tangent direction (u, β) with u(0) = 0"""

    u: FieldSeries
    beta: np.ndarray

    def __post_init__(self):
        if np.any(self.u.values[0] != 0):
            raise ValueError("direction u must vanish at t = 0")
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).reshape(2))


@dataclass(frozen=True, eq=False)
class AaoResidual:
    pde: FieldSeries
    obs: Measurements

    def __add__(self, other: "AaoResidual") -> "AaoResidual":
        pde = FieldSeries(self.pde.grid, self.pde.dt, self.pde.values + other.pde.values)
        return AaoResidual(pde, self.obs + other.obs)

    def __sub__(self, other: "AaoResidual") -> "AaoResidual":
        pde = FieldSeries(self.pde.grid, self.pde.dt, self.pde.values - other.pde.values)
        return AaoResidual(pde, self.obs - other.obs)

    def __mul__(self, scalar: float) -> "AaoResidual":
        return AaoResidual(FieldSeries(self.pde.grid, self.pde.dt, scalar * self.pde.values), scalar * self.obs)

    __rmul__ = __mul__

    def inner(self, other: "AaoResidual") -> float:
        """W x Y inner product"""
        grid, dt = self.pde.grid, self.pde.dt
        return w_inner(self.pde.values, other.pde.values, grid, dt) + self.obs.inner(other.obs)

    def norm(self) -> float:
        return float(np.sqrt(max(self.inner(self), 0.0)))

    def pde_norm(self) -> float:
        values = self.pde.values
        return float(np.sqrt(max(w_inner(values, values, self.pde.grid, self.pde.dt), 0.0)))


class HeatSolver:
    """Implicit Euler for u_t - Δ_N u = f with one sparse LU of (I - dt Δ_N)"""

    def __init__(self, grid: Grid, dt: float):
        self.grid = grid
        self.dt = dt
        matrix = sp.identity(grid.n_nodes, format="csc") - dt * grid.laplacian_matrix.tocsc()
        try:
            self._lu = splu(matrix.tocsc())
        except RuntimeError as error:
            raise LinearSolveError(f"factorization of the heat operator failed: {error}") from error

    def _solve(self, rhs: np.ndarray, step: int) -> np.ndarray:
        try:
            out = self._lu.solve(np.ascontiguousarray(rhs))
        except RuntimeError as error:
            raise LinearSolveError(f"heat solve failed at step {step}: {error}", step=step) from error
        if not np.all(np.isfinite(out)):
            raise LinearSolveError(f"heat solve produced non-finite values at step {step}", step=step)
        return out

    def forward(self, source: np.ndarray, initial: Optional[np.ndarray] = None) -> np.ndarray:
        """z_t - Δz = source, z(0) = initial (zero by default)"""
        z = np.empty_like(source)
        z[0] = 0.0 if initial is None else initial
        for n in range(len(source) - 1):
            z[n + 1] = self._solve(z[n] + self.dt * source[n + 1], n + 1)
        return z

    def backward(self, source: np.ndarray, final: np.ndarray) -> np.ndarray:
        """-v_t - Δv = source, v(T) = final"""
        v = np.empty_like(source)
        v[-1] = final
        for n in range(len(source) - 2, -1, -1):
            v[n] = self._solve(v[n + 1] + self.dt * source[n], n)
        return v

    def auxiliary(self, f: np.ndarray, g: np.ndarray) -> np.ndarray:
        """z with (u, z)_U = ∬ u·f + ∫ u(T)·g for every u with u(0) = 0"""
        return self.forward(self.backward(f, g))


def i1_i2(w: np.ndarray, dt: float) -> Tuple[np.ndarray, np.ndarray]:
    """Time integral operators along axis 0

        I₁[w](t) = ∫₀ᵗ w - (1/T) ∫₀ᵀ (T - s) w(s) ds
        I₂[w](t) = -∫₀ᵗ (t - s) w(s) ds + (t/T) ∫₀ᵀ (T - s) w(s) ds

    I₂[w] vanishes at both ends and I₂′ = -I₁.
    """

    w = np.asarray(w, dtype=float)
    nt = w.shape[0] - 1
    if nt < 1:
        raise ShapeMismatchError("time integral operators need at least 2 samples")
    T = nt * dt
    t = (np.arange(nt + 1) * dt).reshape((nt + 1,) + (1,) * (w.ndim - 1))

    primitive = cumulative_trapezoid(w, dx=dt, axis=0, initial=0)
    moment = cumulative_trapezoid(t * w, dx=dt, axis=0, initial=0)
    # ∫₀ᵀ (T - s) w(s) ds from the same cumulative sums
    tail = T * primitive[-1] - moment[-1]

    i1 = primitive - tail / T
    i2 = -(t * primitive - moment) + (t / T) * tail
    return i1, i2


def w_inner(w1: np.ndarray, w2: np.ndarray, grid: Grid, dt: float) -> float:
    """(w₁, w₂)_W = ∬ I₁[w₁]·I₁[w₂]"""
    return space_time_inner(i1_i2(w1, dt)[0], i1_i2(w2, dt)[0], grid, dt)


def u_inner(u1: np.ndarray, u2: np.ndarray, grid: Grid, dt: float) -> float:
    """(u₁, u₂)_U = ∬ (Δu₁·Δu₂ + u₁_t·u₂_t) + ∫ ∇u₁(T):∇u₂(T)"""
    laplacian = space_time_inner(neumann_laplacian(u1, grid), neumann_laplacian(u2, grid), grid, dt)
    rates = space_time_inner(forward_difference(u1, dt), forward_difference(u2, dt), grid, dt)
    return laplacian + rates + float(dirichlet_form(u1[-1], u2[-1], grid))


@dataclass(frozen=True, eq=False)
class _StateFields:
    m: np.ndarray
    m_hat_t: np.ndarray
    laplacian: np.ndarray
    gradient: np.ndarray
    gradient_sq: np.ndarray


def _state_fields(state: AaoState, problem: AaoProblem) -> _StateFields:
    m_hat = state.m_hat
    m_hat.check_compatible(problem.grid, problem.nt, problem.dt, "m_hat")
    m = problem.m0[None, :, :] + m_hat.values
    grad = gradient(m, problem.grid)
    return _StateFields(
        m=m,
        m_hat_t=forward_difference(m_hat.values, problem.dt),
        laplacian=neumann_laplacian(m, problem.grid),
        gradient=grad,
        gradient_sq=gradient_norm_sq(grad)[..., None],
    )


def residual(state: AaoState, problem: AaoProblem) -> AaoResidual:
    """(𝔽₀, 𝔽_kℓ) at the state (m̂, α̂)"""
    fields = _state_fields(state, problem)
    a1, a2 = state.params.alpha_hat1, state.params.alpha_hat2
    m, m_hat_t, h = fields.m, fields.m_hat_t, problem.h
    pde = (
        a1 * m_hat_t
        - fields.laplacian
        - a2 * np.cross(m, m_hat_t)
        - fields.gradient_sq * m
        - h
        + dot(m, h) * m
    )
    grid, dt = problem.grid, problem.dt
    obs = apply_K(FieldSeries(grid, dt, m_hat_t), problem.setup)
    return AaoResidual(FieldSeries(grid, dt, pde), obs)


def apply_derivative(state: AaoState, direction: AaoDirection, problem: AaoProblem) -> AaoResidual:
    """𝔽′(m̂, α̂)(u, β)"""
    fields = _state_fields(state, problem)
    direction.u.check_compatible(problem.grid, problem.nt, problem.dt, "direction")
    grid, dt = problem.grid, problem.dt
    a1, a2 = state.params.alpha_hat1, state.params.alpha_hat2
    beta = direction.beta
    m, m_hat_t, h = fields.m, fields.m_hat_t, problem.h
    u = direction.u.values
    u_t = forward_difference(u, dt)

    pde = (
        beta[0] * m_hat_t
        - beta[1] * np.cross(m, m_hat_t)
        + a1 * u_t
        - neumann_laplacian(u, grid)
        - a2 * np.cross(u, m_hat_t)
        - a2 * np.cross(m, u_t)
        - 2.0 * frobenius_pairing(fields.gradient, gradient(u, grid))[..., None] * m
        - fields.gradient_sq * u
        + dot(m, h) * u
        + dot(u, h) * m
    )
    obs = apply_K(FieldSeries(grid, dt, u_t), problem.setup)
    return AaoResidual(FieldSeries(grid, dt, pde), obs)


def _pde_sources(y_w: np.ndarray, state: AaoState, problem: AaoProblem):
    """Sources f^y, g^y_T of the auxiliary problems and the α̂ block for y = I₂[y_w]"""
    fields = _state_fields(state, problem)
    grid, dt = problem.grid, problem.dt
    a1, a2 = state.params.alpha_hat1, state.params.alpha_hat2
    m, m_hat_t, h = fields.m, fields.m_hat_t, problem.h

    y_w = check_nodal(y_w, grid, "pde datum")
    y = i1_i2(y_w, dt)[1]
    y_t = forward_difference(y, dt)
    grad_y = gradient(y, grid)

    f = (
        -a1 * y_t
        - neumann_laplacian(y, grid)
        - a2 * np.cross(m_hat_t, y)
        + a2 * np.cross(y_t, m)
        + a2 * np.cross(y, m_hat_t)
        + 2.0 * dot(m, y) * fields.laplacian
        + 2.0 * gram_apply(fields.gradient, grad_y, m)
        + 2.0 * gram_apply(fields.gradient, fields.gradient, y)
        - fields.gradient_sq * y
        + dot(m, h) * y
        + dot(m, y) * h
    )
    g = a1 * y[-1] - a2 * np.cross(y[-1], m[-1])
    gamma = np.array([
        space_time_inner(m_hat_t, y, grid, dt),
        -space_time_inner(np.cross(m, m_hat_t), y, grid, dt),
    ])
    return f, g, gamma


def adjoint_pde_block(y_w: np.ndarray, state: AaoState, problem: AaoProblem) -> Tuple[FieldSeries, np.ndarray]:
    """(∂𝔽₀/∂m̂)* y_w and (∂𝔽₀/∂α̂)* y_w"""
    f, g, gamma = _pde_sources(y_w, state, problem)
    z = problem.heat.auxiliary(f, g)
    return FieldSeries(problem.grid, problem.dt, z), gamma


def adjoint_obs_block(y_obs: Measurements, problem: AaoProblem) -> FieldSeries:
    """(∂𝔽_kℓ/∂m̂)* y_obs, summed over the channels present in y_obs"""
    f = apply_Ktilde(y_obs, problem.setup).values
    g = apply_KtildeT(y_obs, problem.setup)
    return FieldSeries(problem.grid, problem.dt, problem.heat.auxiliary(f, g))


def apply_adjoint(state: AaoState, datum: AaoResidual, problem: AaoProblem) -> AaoDirection:
    """𝔽′(m̂, α̂)* (y_w, y_obs) in U x ℝ², with one pair of heat solves"""
    f, g, gamma = _pde_sources(datum.pde.values, state, problem)
    f = f + apply_Ktilde(datum.obs, problem.setup).values
    g = g + apply_KtildeT(datum.obs, problem.setup)
    z = problem.heat.auxiliary(f, g)
    return AaoDirection(FieldSeries(problem.grid, problem.dt, z), gamma)


@dataclass
class AaoReconstruction(ReconstructionResult):
    state: Optional[AaoState] = None


def _misfit(state: AaoState, y_obs: Measurements, problem: AaoProblem) -> AaoResidual:
    current = residual(state, problem)
    return AaoResidual(current.pde, current.obs - y_obs)


def norm_drift(state: AaoState, problem: AaoProblem) -> float:
    """max ||m₀ + m̂| - 1| over nodes and steps"""
    m = problem.m0[None, :, :] + state.m_hat.values
    return float(np.max(np.abs(np.linalg.norm(m, axis=-1) - 1.0)))


def aao_landweber(
    y_obs: Measurements,
    state_init: AaoState,
    problem: AaoProblem,
    ball: Optional[DomainBall] = None,
    stop: StoppingRule = StoppingRule(),
) -> AaoReconstruction:
    """Joint Landweber iteration on (m̂, α̂) with backtracking

    The discrepancy is measured on the full residual (𝔽₀, 𝔽_kℓ - y). α̂ is
    projected onto `ball` when one is given; m̂ is not renormalized, its
    deviation from unit length is logged.
    """

    state = state_init
    clock = time.perf_counter()
    misfit = _misfit(state, y_obs, problem)
    res_norm = misfit.norm()
    history = [IterationRecord(
        0, state.alpha.copy(), res_norm, 0.0, 1e3 * (time.perf_counter() - clock),
        extra={"pde_residual_W": misfit.pde_norm()},
    )]
    logger.info("iteration 0: |residual| = %.6e, |pde residual|_W = %.6e", res_norm, misfit.pde_norm())

    status = "max_iter"
    mu_trial = stop.initial_step
    for iteration in range(1, stop.max_iter + 1):
        if stop.reached(res_norm, y_obs.norm()):
            status = "converged"
            break
        clock = time.perf_counter()
        direction = apply_adjoint(state, misfit, problem)

        mu = mu_trial
        accepted = None
        for _ in range(stop.max_backtracks + 1):
            alpha = state.alpha - mu * direction.beta
            if ball is not None:
                alpha = ball.project(alpha)
            if alpha[0] > 0:
                m_hat = state.m_hat.values - mu * direction.u.values
                candidate = AaoState(FieldSeries(problem.grid, problem.dt, m_hat), Params.from_vector(alpha))
                candidate_misfit = _misfit(candidate, y_obs, problem)
                if candidate_misfit.norm() < res_norm:
                    accepted = candidate, candidate_misfit
                    break
            mu *= 0.5

        if accepted is None:
            status = "stalled"
            logger.warning("iteration %d: no step lowers the residual %.6e", iteration, res_norm)
            break
        state, misfit = accepted
        res_norm = misfit.norm()
        mu_trial = stop.step_growth * mu
        history.append(IterationRecord(
            iteration, state.alpha.copy(), res_norm, mu, 1e3 * (time.perf_counter() - clock),
            extra={"pde_residual_W": misfit.pde_norm()},
        ))
        logger.info(
            "iteration %d: |residual| = %.6e, alpha_hat = (%.8f, %.8f), mu = %.3e, norm drift %.3e",
            iteration, res_norm, state.alpha[0], state.alpha[1], mu, norm_drift(state, problem),
        )
    else:
        if stop.reached(res_norm, y_obs.norm()):
            status = "converged"

    return AaoReconstruction(
        "aao_landweber", state.params, status, history, stop.delta, stop.tau_disc, state=state,
    )
