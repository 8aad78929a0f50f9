import json

import numpy as np
import pytest

from src.exceptions import ShapeMismatchError
from src.grid import Grid
from src.observation import Measurements
from src.reduced_inverse import IterationRecord
from src.utils import (
    create_directory,
    read_field_csv,
    read_file,
    read_history_csv,
    read_measurements_csv,
    write_field_csv,
    write_history_csv,
    write_json,
    write_measurements_csv,
)


def test_read_file_checks_path_and_format(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_file(tmp_path / "missing.json")
    other = tmp_path / "config.yaml"
    other.write_text("grid: {}", encoding="utf-8")
    with pytest.raises(ValueError):
        read_file(other)


def test_write_json_is_sorted(tmp_path):
    path = tmp_path / "summary.json"
    write_json(path, {"b": 1, "a": [1.5, 2.0]})
    text = path.read_text(encoding="utf-8")
    assert text.index('"a"') < text.index('"b"')
    assert json.loads(text) == read_file(path)


def test_create_directory_is_idempotent(tmp_path):
    target = tmp_path / "runs" / "desk"
    create_directory(target)
    create_directory(target)
    assert target.is_dir()


def test_field_csv_is_exact(tmp_path, rng):
    grid = Grid.from_extent(5, 4, 2.0, 1.5)
    values = rng.standard_normal((grid.n_nodes, 3))
    path = tmp_path / "m.csv"
    write_field_csv(path, values, grid)
    assert path.read_text(encoding="utf-8").splitlines()[0] == "i,j,x,y,v0,v1,v2"
    np.testing.assert_array_equal(read_field_csv(path, grid), values)
    with pytest.raises(ShapeMismatchError):
        read_field_csv(path, Grid.from_extent(3, 3, 1.0, 1.0))


def test_measurements_csv_is_exact(tmp_path, rng):
    data = Measurements(rng.standard_normal((2, 3, 17)), 1 / 16)
    path = tmp_path / "clean.csv"
    write_measurements_csv(path, data)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "t,v_0_0,v_0_1,v_0_2,v_1_0,v_1_1,v_1_2"
    assert len(lines) == 18

    back = read_measurements_csv(path, dt=data.dt)
    np.testing.assert_array_equal(back.traces, data.traces)
    assert np.isclose(read_measurements_csv(path).dt, data.dt, rtol=1e-14)


def test_measurements_csv_needs_time_column(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("v_0_0,v_0_1\n1.0,2.0\n3.0,4.0\n", encoding="utf-8")
    with pytest.raises(ValueError):
        read_measurements_csv(path)


def test_history_csv(tmp_path):
    history = [
        IterationRecord(0, np.array([1.6, 0.8]), 1.0, 0.0, 3.5),
        IterationRecord(1, np.array([1.7, 0.7]), 0.5, 0.25, 4.0, extra={"max_block_residual": 0.4}),
    ]
    path = tmp_path / "history.csv"
    write_history_csv(path, history)
    records = read_history_csv(path)
    assert [r["iteration"] for r in records] == [0, 1]
    assert records[1]["alpha_hat1"] == 1.7 and records[1]["mu"] == 0.25
    assert np.isnan(records[0]["max_block_residual"])
    assert records[1]["max_block_residual"] == 0.4
