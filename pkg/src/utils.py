import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.exceptions import ShapeMismatchError
from src.grid import Grid
from src.observation import Measurements

# 17 significant digits, enough for an exact float64 round trip
FLOAT_FORMAT = "%.16e"


def read_file(path: str, supported_formats: str = ".json") -> dict:
    """Read a file and return its content

    Args:
        path (str): the path to the file to read
        supported_formats (str, optional): the supported file formats. Defaults to ".json".

    Returns:
        dict: the json content of the file

    Raises:
        FileNotFoundError: if the file does not exist
        ValueError: if the file format is not supported
    """

    path = Path(path)

    # check if the file exists and is a file
    if not path.exists() or not path.is_file():
        raise FileNotFoundError(f"File {path} not found")

    # check if the file format is supported
    if path.suffix not in supported_formats:
        raise ValueError(f"File format {path.suffix} not supported")

    with path.open("r", encoding="utf-8") as file:
        file_content = json.load(file)

    return file_content


def write_json(path: str, content: dict) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as file:
        json.dump(content, file, indent=2, sort_keys=True)
        file.write("\n")


def create_directory(path: str) -> None:
    """Create a directory if it does not exist

    Args:
        path (str): the path to the directory to create
    """

    path = Path(path)

    if not path.exists():
        path.mkdir(parents=True, exist_ok=True)


def _read_table(path: str) -> Tuple[List[str], np.ndarray]:
    path = Path(path)

    # check if the file exists and is a file
    if not path.exists() or not path.is_file():
        raise FileNotFoundError(f"File {path} not found")
    if path.suffix != ".csv":
        raise ValueError(f"File format {path.suffix} not supported")

    with path.open("r", encoding="utf-8") as file:
        header = file.readline().strip().split(",")
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, encoding="utf-8")
    if rows.shape[1] != len(header):
        raise ValueError(f"{path}: {rows.shape[1]} columns but {len(header)} header names")
    return header, rows


def _write_table(path: str, header: Sequence[str], rows: np.ndarray, fmt=FLOAT_FORMAT) -> None:
    np.savetxt(path, rows, fmt=fmt, delimiter=",", header=",".join(header), comments="", encoding="utf-8")


def write_field_csv(path: str, values: np.ndarray, grid: Grid) -> None:
    """Write one nodal snapshot as rows i,j,x,y,v0,v1,v2"""

    values = np.asarray(values, dtype=float)
    if values.shape != (grid.n_nodes, 3):
        raise ShapeMismatchError(f"snapshot has shape {values.shape}, grid has {grid.n_nodes} nodes")
    flat = np.arange(grid.n_nodes)
    x, y = grid.coordinates
    columns = [flat // grid.ny, flat % grid.ny, x, y, values[:, 0], values[:, 1], values[:, 2]]
    fmt = ["%d", "%d"] + [FLOAT_FORMAT] * 5
    _write_table(path, ["i", "j", "x", "y", "v0", "v1", "v2"], np.column_stack(columns), fmt=fmt)


def read_field_csv(path: str, grid: Grid) -> np.ndarray:
    """Read a snapshot written by `write_field_csv` back into an (N, 3) array"""

    _, rows = _read_table(path)
    if len(rows) != grid.n_nodes:
        raise ShapeMismatchError(f"{path}: {len(rows)} nodes, grid has {grid.n_nodes}")
    values = np.empty((grid.n_nodes, 3))
    flat = rows[:, 0].astype(int) * grid.ny + rows[:, 1].astype(int)
    values[flat] = rows[:, 4:7]
    return values


def write_measurements_csv(path: str, data: Measurements) -> None:
    """Write voltage traces as columns t,v_0_0,v_0_1,... (one row per sample)"""

    header = ["t"] + [f"v_{k}_{l}" for k in range(data.K) for l in range(data.L)]
    columns = data.traces.reshape(data.K * data.L, data.nt + 1).T
    _write_table(path, header, np.column_stack([data.times, columns]))


def read_measurements_csv(path: str, dt: Optional[float] = None) -> Measurements:
    """Read traces written by `write_measurements_csv`

    Args:
        path (str): csv file
        dt (float, optional): time step; inferred from the t column when omitted

    Returns:
        Measurements: the traces
    """

    header, rows = _read_table(path)
    if header[0] != "t" or len(header) < 2:
        raise ValueError(f"{path}: expected a t column followed by v_k_l columns")
    channels = [tuple(int(part) for part in name.split("_")[1:]) for name in header[1:]]
    K = max(k for k, _ in channels) + 1
    L = max(l for _, l in channels) + 1
    if len(channels) != K * L:
        raise ShapeMismatchError(f"{path}: {len(channels)} channels do not fill a {K}x{L} setup")

    traces = np.empty((K, L, len(rows)))
    for column, (k, l) in enumerate(channels, start=1):
        traces[k, l] = rows[:, column]
    if dt is None:
        dt = rows[-1, 0] / (len(rows) - 1)
    return Measurements(traces, dt)


def write_history_csv(path: str, history) -> None:
    """One row per accepted iteration: iteration, α̂, residual, μ, wallclock and extras"""

    extras: List[str] = sorted({key for record in history for key in record.extra})
    header = ["iteration", "alpha_hat1", "alpha_hat2", "residual", "mu", "wallclock_ms"] + extras
    rows = np.array([
        [record.iteration, record.alpha[0], record.alpha[1], record.residual, record.mu, record.wallclock_ms]
        + [record.extra.get(key, np.nan) for key in extras]
        for record in history
    ])
    fmt = ["%d"] + [FLOAT_FORMAT] * (len(header) - 1)
    _write_table(path, header, rows.reshape(len(history), len(header)), fmt=fmt)


def read_history_csv(path: str) -> List[Dict[str, float]]:
    header, rows = _read_table(path)
    records = []
    for row in rows:
        record = dict(zip(header, row.tolist()))
        record["iteration"] = int(record["iteration"])
        records.append(record)
    return records
