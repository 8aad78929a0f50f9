"""
Simulation and reconstruction runs driven by a RunConfig.

simulate writes

    <out>/clean.csv          noise-free voltages
    <out>/noisy.csv          voltages with the configured noise
    <out>/manifest.json      realized noise level, parameters, file list
    <out>/trajectory/        magnetization snapshots and trajectory.json

reconstruct reads noisy.csv and manifest.json from a simulate directory and
writes history.csv and summary.json.
"""

import logging
from pathlib import Path
from typing import Optional

import numpy as np

from src.aao import AaoProblem, AaoState, aao_landweber, norm_drift
from src.config import RunConfig
from src.exceptions import ConfigurationError
from src.grid import FieldSeries
from src.llg import solve
from src.observation import apply_K
from src.reduced_inverse import forward_state, kaczmarz_blocks, landweber, landweber_kaczmarz
from src.utils import (
    create_directory,
    read_file,
    read_measurements_csv,
    write_field_csv,
    write_history_csv,
    write_json,
    write_measurements_csv,
)

logger = logging.getLogger(__name__)

METHODS = {
    "reduced": "reconstruct-reduced",
    "kaczmarz": "reconstruct-kaczmarz",
    "aao": "reconstruct-aao",
}


def simulate(config: RunConfig, out_dir: str) -> dict:
    """Generate synthetic data for `config.params_true`

    Returns:
        dict: the manifest written to manifest.json
    """

    out = Path(out_dir)
    create_directory(out)
    scenario = config.build_scenario()
    # same call as forward_state, which additionally pins m_s = 1
    solution = solve(
        scenario.m0, config.params_true, scenario.field, scenario.nt, scenario.dt, scenario.grid,
        form=scenario.form, projection=scenario.projection,
    )
    clean = apply_K(solution.m_t, scenario.setup)
    noisy, delta = config.noise.apply(clean)
    write_measurements_csv(out / "clean.csv", clean)
    write_measurements_csv(out / "noisy.csv", noisy)
    logger.info("wrote %d x %d channels with %d samples to %s", clean.K, clean.L, clean.nt + 1, out)

    # trajectory snapshots, the final time always included
    stride = config.snapshot_stride or scenario.nt
    steps = sorted(set(range(0, scenario.nt + 1, stride)) | {scenario.nt})
    trajectory_dir = out / "trajectory"
    create_directory(trajectory_dir)
    snapshots = []
    for n in steps:
        name = f"m_{n:06d}.csv"
        write_field_csv(trajectory_dir / name, solution.m.snapshot(n), scenario.grid)
        snapshots.append({"step": n, "t": n * scenario.dt, "file": name})
    write_json(trajectory_dir / "trajectory.json", {
        "nx": scenario.grid.nx,
        "ny": scenario.grid.ny,
        "hx": scenario.grid.hx,
        "hy": scenario.grid.hy,
        "dt": scenario.dt,
        "nt": scenario.nt,
        "form": solution.form,
        "projection": solution.projection,
        "norm_deviation": solution.norm_deviation(),
        "snapshots": snapshots,
    })

    manifest = {
        "params_true": {
            "alpha_hat1": config.params_true.alpha_hat1,
            "alpha_hat2": config.params_true.alpha_hat2,
            "m_s": config.params_true.m_s,
        },
        "nt": scenario.nt,
        "dt": scenario.dt,
        "K": clean.K,
        "L": clean.L,
        "clean_norm": clean.norm(),
        "delta": delta,
        "delta_rel": config.noise.relative_level,
        "seed": config.noise.seed,
        "files": {"clean": "clean.csv", "noisy": "noisy.csv", "trajectory": "trajectory/trajectory.json"},
        "config": config.raw,
    }
    write_json(out / "manifest.json", manifest)
    logger.info("realized noise level delta = %.6e (relative %.3g)", delta, config.noise.relative_level)
    return manifest


def reconstruct(config: RunConfig, data_dir: str, out_dir: str, method: Optional[str] = None) -> dict:
    """Recover α̂ from the noisy data of a simulate run

    Args:
        config (RunConfig): run configuration
        data_dir (str): simulate output directory
        out_dir (str): directory for history.csv and summary.json
        method (str, optional): "reduced", "kaczmarz" or "aao"; defaults to config.mode

    Returns:
        dict: the summary written to summary.json
    """

    mode = METHODS[method] if method is not None else config.mode
    if mode not in METHODS.values():
        raise ConfigurationError(
            f"mode: '{mode}' is not a reconstruction mode, expected one of {tuple(METHODS.values())}"
        )
    if config.solver.form != "llg3":
        raise ConfigurationError(f"solver.form: {mode} needs the llg3 form, got '{config.solver.form}'")

    data_dir = Path(data_dir)
    manifest = read_file(data_dir / "manifest.json")
    y = read_measurements_csv(data_dir / manifest["files"]["noisy"], dt=config.time.dt)
    delta = float(manifest["delta"])

    scenario = config.build_scenario()
    stop = config.solver.stopping(delta)
    alpha_init = np.asarray(config.params_init)

    if mode == "reconstruct-reduced":
        result = landweber(y, alpha_init, scenario, config.ball, stop)
        extra = {}
    elif mode == "reconstruct-kaczmarz":
        blocks = kaczmarz_blocks(
            config.solver.kaczmarz_split, y.K, y.L, y.nt, y.dt, config.solver.breakpoints,
        )
        result = landweber_kaczmarz(y, alpha_init, scenario, config.ball, blocks, stop)
        extra = {"kaczmarz_split": config.solver.kaczmarz_split, "blocks": [block.label for block in blocks]}
    else:
        problem = AaoProblem(scenario.m0, scenario.field, scenario.setup, scenario.nt, scenario.dt)
        base, _ = forward_state(config.ball.check(alpha_init), scenario)
        m_hat = FieldSeries(scenario.grid, scenario.dt, base.m.values - scenario.m0[None])
        result = aao_landweber(y, AaoState(m_hat, base.params), problem, config.ball, stop)
        extra = {
            "pde_residual_W": result.history[-1].extra["pde_residual_W"],
            "norm_drift": norm_drift(result.state, problem),
        }

    out = Path(out_dir)
    create_directory(out)
    write_history_csv(out / "history.csv", result.history)

    truth = config.params_true.as_array()
    summary = result.summary()
    summary.update(extra)
    summary["mode"] = mode
    summary["relative_error"] = float(np.linalg.norm(result.params.as_array() - truth) / np.linalg.norm(truth))
    write_json(out / "summary.json", summary)
    logger.info(
        "%s finished with status %s after %d iterations, alpha_hat = (%.8f, %.8f)",
        mode, result.status, result.iterations, result.params.alpha_hat1, result.params.alpha_hat2,
    )
    return summary
