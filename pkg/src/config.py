"""
Run configuration.

A run is described by one JSON document. Physical inputs (drive field,
concentrations, coil sensitivities, transfer functions) are named parametric
families with coefficients; see configs/desk.json for a complete example.
"""

import logging
import os
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np

from src.exceptions import ConfigurationError, DomainError
from src.grid import Grid
from src.llg import (
    AffinePeriodicField,
    ConstantField,
    ExternalField,
    FORMS,
    Params,
    check_stability,
    stationary_init,
)
from src.observation import CoilSetup, FourierTransfer, Measurements, TabulatedTransfer, TransferFunction
from src.reduced_inverse import KACZMARZ_SPLITS, DomainBall, Scenario, StoppingRule
from src.utils import read_file

logger = logging.getLogger(__name__)

MODES = ("simulate", "reconstruct-reduced", "reconstruct-kaczmarz", "reconstruct-aao", "verify")


@dataclass(frozen=True)
class GridConfig:
    nx: int = 17
    ny: int = 17
    lx: float = 4.0
    ly: float = 4.0

    def build(self) -> Grid:
        return Grid.from_extent(self.nx, self.ny, self.lx, self.ly)


@dataclass(frozen=True)
class TimeConfig:
    nt: int = 512
    T: float = 1.0

    @property
    def dt(self) -> float:
        return self.T / self.nt


@dataclass(frozen=True)
class SolverConfig:
    form: str = "llg3"
    projection: bool = True
    max_iter: int = 500
    tau_disc: float = 1.5
    initial_step: float = 1.0
    max_backtracks: int = 30
    step_growth: float = 2.0
    kaczmarz_split: str = "per-channel"
    breakpoints: Optional[Tuple[float, ...]] = None

    def stopping(self, delta: float) -> StoppingRule:
        return StoppingRule(
            max_iter=self.max_iter,
            tau_disc=self.tau_disc,
            delta=delta,
            initial_step=self.initial_step,
            max_backtracks=self.max_backtracks,
            step_growth=self.step_growth,
        )


@dataclass(frozen=True)
class NoiseModel:
    """White Gaussian noise per sample, rescaled to ‖noise‖ = δ_rel ‖clean‖"""

    relative_level: float = 0.0
    seed: int = 0

    def apply(self, clean: Measurements) -> Tuple[Measurements, float]:
        """Perturb `clean`

        Returns:
            Tuple[Measurements, float]: the noisy data and the realized level ‖noisy - clean‖
        """

        if self.relative_level == 0:
            return Measurements(clean.traces.copy(), clean.dt), 0.0
        rng = np.random.default_rng(self.seed)
        draw = Measurements(rng.standard_normal(clean.traces.shape), clean.dt)
        target = self.relative_level * clean.norm()
        noisy = clean + draw * (target / draw.norm())
        return noisy, (noisy - clean).norm()


@dataclass(frozen=True)
class RunConfig:
    grid: GridConfig
    time: TimeConfig
    params_true: Params
    params_init: Tuple[float, float]
    ball: DomainBall
    field: dict
    coils: dict
    noise: NoiseModel = NoiseModel()
    solver: SolverConfig = SolverConfig()
    initial_state: str = "approximate"
    mode: str = "simulate"
    snapshot_stride: Optional[int] = None
    raw: dict = field(default_factory=dict, repr=False, compare=False)

    def refined(self, nx: int, ny: int, nt: int) -> "RunConfig":
        """Same run on another grid and time grid"""
        return replace(self, grid=replace(self.grid, nx=nx, ny=ny), time=replace(self.time, nt=nt))

    def build_grid(self) -> Grid:
        return self.grid.build()

    def build_field(self, grid: Grid) -> ExternalField:
        return build_field(self.field, grid, self.time.T)

    def build_setup(self, grid: Grid) -> CoilSetup:
        return build_setup(self.coils, grid, self.time.T)

    def build_scenario(self) -> Scenario:
        """Forward model of the run

        A relaxed initial state is relaxed under params_init. The relaxed state
        solves the stationary equation, which does not involve α̂; the
        parameters only set the pace of the relaxation.
        """

        grid = self.build_grid()
        h = self.build_field(grid)
        relax_with = Params.from_vector(self.params_init, self.params_true.m_s)
        m0 = stationary_init(h(0.0), self.initial_state, relax_with, grid)
        return Scenario(
            grid=grid, m0=m0, field=h, setup=self.build_setup(grid),
            nt=self.time.nt, dt=self.time.dt, projection=self.solver.projection, form=self.solver.form,
        )


def thread_count() -> int:
    """Worker count from LLG_THREADS (default 1)"""
    value = os.getenv("LLG_THREADS", "1")
    try:
        count = int(value)
    except ValueError:
        raise ConfigurationError(f"LLG_THREADS must be an integer, got '{value}'")
    if count < 1:
        raise ConfigurationError(f"LLG_THREADS must be at least 1, got {count}")
    return count


def _section(data: dict, name: str, required: bool = True) -> dict:
    section = data.get(name)
    if section is None:
        if required:
            raise ConfigurationError(f"{name}: missing section")
        return {}
    if not isinstance(section, dict):
        raise ConfigurationError(f"{name}: expected an object")
    return section


def _number(section: dict, key: str, where: str, default=None, positive: bool = False, integer: bool = False):
    value = section.get(key, default)
    if value is None:
        raise ConfigurationError(f"{where}.{key}: missing")
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigurationError(f"{where}.{key}: expected a number, got {value!r}")
    if integer and int(value) != value:
        raise ConfigurationError(f"{where}.{key}: expected an integer, got {value}")
    if positive and not value > 0:
        raise ConfigurationError(f"{where}.{key}: must be positive, got {value}")
    return int(value) if integer else float(value)


def _vector(value, length: int, where: str) -> np.ndarray:
    array = np.asarray(value, dtype=float)
    if array.shape != (length,) or not np.all(np.isfinite(array)):
        raise ConfigurationError(f"{where}: expected {length} finite numbers, got {value!r}")
    return array


def build_field(spec: dict, grid: Grid, period: float) -> ExternalField:
    kind = spec.get("kind", "affine_periodic")
    if kind == "constant":
        return ConstantField(grid, _vector(spec.get("vector"), 3, "field.vector"))
    if kind == "affine_periodic":
        return AffinePeriodicField(
            grid,
            offset=_vector(spec.get("offset", [0.0, 0.0, 0.0]), 3, "field.offset"),
            slope=spec.get("gradient"),
            center=spec.get("center"),
            cos_coefficients=spec.get("cos", []),
            sin_coefficients=spec.get("sin", []),
            period=spec.get("period", period),
        )
    raise ConfigurationError(f"field.kind: unknown family '{kind}'")


def _concentration(spec: dict, grid: Grid, where: str) -> np.ndarray:
    x, y = grid.coordinates
    kind = spec.get("kind", "gaussian")
    if kind == "gaussian":
        center = _vector(spec.get("center"), 2, f"{where}.center")
        width = _number(spec, "width", where, positive=True)
        amplitude = _number(spec, "amplitude", where, default=1.0)
        return amplitude * np.exp(-((x - center[0]) ** 2 + (y - center[1]) ** 2) / (2.0 * width**2))
    if kind == "constant":
        return np.full(grid.n_nodes, _number(spec, "value", where))
    raise ConfigurationError(f"{where}.kind: unknown family '{kind}'")


def _sensitivity(spec: dict, grid: Grid, where: str) -> np.ndarray:
    x, y = grid.coordinates
    vector = _vector(spec.get("vector"), 3, f"{where}.vector")
    kind = spec.get("kind", "constant")
    if kind == "constant":
        return np.tile(vector, (grid.n_nodes, 1))
    if kind == "linear":
        profile = spec.get("offset", 0.0) + spec.get("slope_x", 0.0) * x + spec.get("slope_y", 0.0) * y
        return profile[:, None] * vector
    raise ConfigurationError(f"{where}.kind: unknown family '{kind}'")


def _transfer(spec: dict, period: float, where: str) -> TransferFunction:
    kind = spec.get("kind", "fourier")
    if kind == "fourier":
        return FourierTransfer(spec.get("cos", [0.0]), spec.get("sin", []), spec.get("period", period))
    if kind == "tabulated":
        return TabulatedTransfer(spec.get("samples", []), spec.get("period", period))
    raise ConfigurationError(f"{where}.kind: unknown family '{kind}'")


def build_setup(spec: dict, grid: Grid, period: float) -> CoilSetup:
    concentrations = spec.get("concentrations") or []
    sensitivities = spec.get("sensitivities") or []
    transfers = spec.get("transfer") or []
    if not concentrations:
        raise ConfigurationError("coils.concentrations: need at least one concentration")
    if not sensitivities:
        raise ConfigurationError("coils.sensitivities: need at least one coil")
    if len(transfers) != len(sensitivities):
        raise ConfigurationError(
            f"coils.transfer: {len(transfers)} transfer functions for {len(sensitivities)} coils"
        )
    return CoilSetup(
        grid=grid,
        concentrations=np.stack([
            _concentration(c, grid, f"coils.concentrations[{k}]") for k, c in enumerate(concentrations)
        ]),
        sensitivities=np.stack([
            _sensitivity(p, grid, f"coils.sensitivities[{l}]") for l, p in enumerate(sensitivities)
        ]),
        transfers=tuple(_transfer(a, period, f"coils.transfer[{l}]") for l, a in enumerate(transfers)),
        mu0=_number(spec, "mu0", "coils", default=1.0),
    )


def parse_config(data: dict) -> RunConfig:
    """Validate a config document and build a RunConfig

    Raises:
        ConfigurationError: naming the first offending field
    """

    grid_section = _section(data, "grid")
    grid = GridConfig(
        nx=_number(grid_section, "nx", "grid", integer=True),
        ny=_number(grid_section, "ny", "grid", integer=True),
        lx=_number(grid_section, "lx", "grid", positive=True),
        ly=_number(grid_section, "ly", "grid", positive=True),
    )
    if grid.nx < 3 or grid.ny < 3:
        raise ConfigurationError(f"grid.nx, grid.ny: need at least 3 nodes, got ({grid.nx}, {grid.ny})")

    time_section = _section(data, "time")
    time_config = TimeConfig(
        nt=_number(time_section, "nt", "time", integer=True, positive=True),
        T=_number(time_section, "T", "time", positive=True),
    )

    true_section = _section(data, "params_true")
    try:
        params_true = Params(
            _number(true_section, "alpha_hat1", "params_true"),
            _number(true_section, "alpha_hat2", "params_true"),
            _number(true_section, "m_s", "params_true", default=1.0, positive=True),
        )
    except DomainError as error:
        raise ConfigurationError(f"params_true: {error}") from error

    init_section = _section(data, "params_init", required=False) or true_section
    params_init = (
        _number(init_section, "alpha_hat1", "params_init"),
        _number(init_section, "alpha_hat2", "params_init"),
    )

    ball_section = _section(data, "domain_ball")
    try:
        ball = DomainBall(
            center=tuple(_vector(ball_section.get("center"), 2, "domain_ball.center")),
            radius=_number(ball_section, "radius", "domain_ball", positive=True),
            smallness=ball_section.get("smallness"),
            interpolation_constant=ball_section.get("interpolation_constant"),
        )
    except DomainError as error:
        raise ConfigurationError(f"domain_ball: {error}") from error
    if not ball.contains(params_init):
        raise ConfigurationError(f"params_init: {params_init} lies outside the domain ball")

    noise_section = _section(data, "noise", required=False)
    noise = NoiseModel(
        relative_level=_number(noise_section, "relative_level", "noise", default=0.0),
        seed=_number(noise_section, "seed", "noise", default=0, integer=True),
    )
    if noise.relative_level < 0:
        raise ConfigurationError("noise.relative_level: must be nonnegative")

    solver_section = _section(data, "solver", required=False)
    breakpoints = solver_section.get("breakpoints")
    solver = SolverConfig(
        form=solver_section.get("form", "llg3"),
        projection=bool(solver_section.get("projection", True)),
        max_iter=_number(solver_section, "max_iter", "solver", default=500, integer=True),
        tau_disc=_number(solver_section, "tau_disc", "solver", default=1.5, positive=True),
        initial_step=_number(solver_section, "initial_step", "solver", default=1.0, positive=True),
        max_backtracks=_number(solver_section, "max_backtracks", "solver", default=30, integer=True),
        step_growth=_number(solver_section, "step_growth", "solver", default=2.0, positive=True),
        kaczmarz_split=solver_section.get("kaczmarz_split", "per-channel"),
        breakpoints=None if breakpoints is None else tuple(float(b) for b in breakpoints),
    )
    if solver.form not in FORMS:
        raise ConfigurationError(f"solver.form: unknown form '{solver.form}', expected one of {FORMS}")
    if solver.kaczmarz_split not in KACZMARZ_SPLITS:
        raise ConfigurationError(f"solver.kaczmarz_split: unknown split '{solver.kaczmarz_split}'")

    mode = data.get("mode", "simulate")
    if mode not in MODES:
        raise ConfigurationError(f"mode: unknown mode '{mode}', expected one of {MODES}")
    if mode.startswith("reconstruct-") and solver.form != "llg3":
        raise ConfigurationError(
            f"solver.form: mode '{mode}' needs the llg3 form, the only one with a linearization, got '{solver.form}'"
        )

    initial_state = _section(data, "initial_state", required=False).get("mode", "approximate")
    if initial_state not in ("approximate", "relaxed"):
        raise ConfigurationError(f"initial_state.mode: unknown mode '{initial_state}'")

    output = _section(data, "output", required=False)
    stride = output.get("snapshot_stride")
    if stride is not None:
        stride = _number(output, "snapshot_stride", "output", integer=True, positive=True)

    config = RunConfig(
        grid=grid,
        time=time_config,
        params_true=params_true,
        params_init=params_init,
        ball=ball,
        field=_section(data, "field"),
        coils=_section(data, "coils"),
        noise=noise,
        solver=solver,
        initial_state=initial_state,
        mode=mode,
        snapshot_stride=stride,
        raw=data,
    )

    # every parameter a run can visit must satisfy the explicit bound
    lowest = min(params_true.alpha_hat1, params_init[0], ball.lower_alpha_hat1)
    check_stability(config.build_grid(), time_config.dt, lowest)

    # building the physical inputs once surfaces family errors up front
    grid_obj = config.build_grid()
    config.build_field(grid_obj)
    config.build_setup(grid_obj)
    return config


def load_config(path: str) -> RunConfig:
    """Read and validate a JSON run configuration"""
    return parse_config(read_file(path))


def refinement_levels(config: RunConfig, levels: int) -> List[RunConfig]:
    """Configs whose finest member is `config`, each coarser one halving h and doubling dt"""
    if levels < 2:
        raise ConfigurationError(f"--refine: need at least 2 levels, got {levels}")
    out = []
    for level in range(levels - 1, -1, -1):
        factor = 2**level
        if (config.grid.nx - 1) % factor or (config.grid.ny - 1) % factor or config.time.nt % factor:
            raise ConfigurationError(
                f"--refine: grid {config.grid.nx}x{config.grid.ny}, nt={config.time.nt} "
                f"cannot be coarsened {levels - 1} times"
            )
        nx = (config.grid.nx - 1) // factor + 1
        ny = (config.grid.ny - 1) // factor + 1
        if nx < 3 or ny < 3:
            raise ConfigurationError(f"--refine: coarsest grid would have fewer than 3 nodes per axis")
        out.append(config.refined(nx, ny, config.time.nt // factor))
    return out
