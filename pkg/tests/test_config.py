import copy
from pathlib import Path

import numpy as np
import pytest

from src.config import NoiseModel, load_config, parse_config, refinement_levels, thread_count
from src.exceptions import ConfigurationError
from src.observation import Measurements

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def test_desk_config_loads():
    config = load_config(CONFIG_DIR / "desk.json")
    assert (config.grid.nx, config.grid.ny, config.time.nt) == (17, 17, 512)
    assert np.allclose(config.params_true.as_array(), [2.0, 0.5])
    assert config.params_init == (1.5, 0.0)
    assert config.ball.center == (2.0, 0.0)
    assert np.isclose(config.ball.lower_alpha_hat1, 0.5)
    assert config.ball.contains(config.params_true.as_array())
    setup = config.build_setup(config.build_grid())
    assert (setup.K, setup.L) == (2, 2)


def test_verify_config_loads():
    config = load_config(CONFIG_DIR / "verify.json")
    assert config.mode == "verify"


def test_params_init_defaults_to_truth(small_document):
    del small_document["params_init"]
    assert parse_config(small_document).params_init == (2.0, 0.5)


@pytest.mark.parametrize(
    "edit, where",
    [
        (lambda d: d.pop("grid"), "grid"),
        (lambda d: d["grid"].update(nx=2), "grid.nx"),
        (lambda d: d["time"].update(nt=0), "time.nt"),
        (lambda d: d["field"].update(kind="dipole"), "field.kind"),
        (lambda d: d["coils"]["concentrations"][1].update(kind="disk"), "coils.concentrations[1].kind"),
        (lambda d: d["coils"]["transfer"].pop(), "coils.transfer"),
        (lambda d: d["solver"].update(kaczmarz_split="random"), "solver.kaczmarz_split"),
        (lambda d: d["solver"].update(form="llg2"), "solver.form"),
        (lambda d: d["solver"].update(form="llg1"), "solver.form"),
        (lambda d: d.update(mode="fit"), "mode"),
        (lambda d: d["params_init"].update(alpha_hat1=4.0, alpha_hat2=3.0), "params_init"),
        (lambda d: d["domain_ball"].update(radius=2.5), "domain_ball"),
        (lambda d: d["params_true"].update(alpha_hat1="two"), "params_true.alpha_hat1"),
    ],
)
def test_invalid_documents_name_the_field(small_document, edit, where):
    document = copy.deepcopy(small_document)
    edit(document)
    with pytest.raises(ConfigurationError) as info:
        parse_config(document)
    assert where in str(info.value)


def test_stability_violation_is_rejected(small_document):
    # h = 0.25 needs dt <= 0.5 / 128 for the lowest alpha_hat1 in the ball
    small_document["grid"].update(nx=17, ny=17)
    with pytest.raises(ConfigurationError) as info:
        parse_config(small_document)
    assert "stability" in str(info.value)


def test_noise_free_copy_is_exact():
    clean = Measurements(np.linspace(0.0, 1.0, 12).reshape(1, 2, 6), 0.2)
    noisy, delta = NoiseModel(0.0, seed=1).apply(clean)
    assert delta == 0.0
    np.testing.assert_array_equal(noisy.traces, clean.traces)
    assert noisy.traces is not clean.traces


def test_noise_is_seeded_and_scaled():
    clean = Measurements(np.sin(np.linspace(0.0, 3.0, 2 * 2 * 33)).reshape(2, 2, 33), 1 / 32)
    first, delta = NoiseModel(0.05, seed=11).apply(clean)
    second, _ = NoiseModel(0.05, seed=11).apply(clean)
    other, _ = NoiseModel(0.05, seed=12).apply(clean)
    np.testing.assert_array_equal(first.traces, second.traces)
    assert not np.array_equal(first.traces, other.traces)
    assert np.isclose(delta, 0.05 * clean.norm(), rtol=1e-12)


def test_thread_count(monkeypatch):
    monkeypatch.delenv("LLG_THREADS", raising=False)
    assert thread_count() == 1
    monkeypatch.setenv("LLG_THREADS", "4")
    assert thread_count() == 4
    for value in ("0", "many"):
        monkeypatch.setenv("LLG_THREADS", value)
        with pytest.raises(ConfigurationError):
            thread_count()


def test_refinement_levels(small_config):
    levels = refinement_levels(small_config, 3)
    assert [(c.grid.nx, c.time.nt) for c in levels] == [(3, 16), (5, 32), (9, 64)]
    assert np.isclose(levels[0].time.dt, 4 * small_config.time.dt)
    with pytest.raises(ConfigurationError):
        refinement_levels(small_config, 1)
    with pytest.raises(ConfigurationError):
        refinement_levels(small_config, 4)


def test_simulation_may_use_llg1(small_document):
    small_document["mode"] = "simulate"
    small_document["solver"]["form"] = "llg1"
    assert parse_config(small_document).build_scenario().form == "llg1"


def test_relaxed_initial_state_does_not_use_the_true_parameters(small_document):
    small_document["initial_state"] = {"mode": "relaxed"}
    first = parse_config(small_document).build_scenario().m0
    small_document["params_true"].update(alpha_hat1=1.0, alpha_hat2=0.0)
    second = parse_config(small_document).build_scenario().m0
    np.testing.assert_array_equal(first, second)
