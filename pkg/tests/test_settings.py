"""Settings from the environment and experiment-file validation."""

import json

import pytest

from extrapinn.config.settings import ExperimentConfig, Settings
from extrapinn.errors import ConfigError
from extrapinn.models.domain import ActivationFamily, EquationId, TLMethod

from .conftest import tiny_config_dict


class TestSettings:
    def test_defaults(self, monkeypatch):
        monkeypatch.delenv("EXTRAPINN_WORKERS", raising=False)
        settings = Settings.load()
        assert settings.workers == 1
        assert settings.output_dir == "./runs"

    def test_environment_overrides(self, monkeypatch):
        monkeypatch.setenv("EXTRAPINN_WORKERS", "4")
        monkeypatch.setenv("EXTRAPINN_DEBUG", "true")
        settings = Settings.load()
        assert settings.workers == 4
        assert settings.debug is True

    def test_env_file(self, tmp_path, monkeypatch):
        monkeypatch.delenv("EXTRAPINN_TORCH_THREADS", raising=False)
        env = tmp_path / "local.env"
        env.write_text("EXTRAPINN_TORCH_THREADS=3\nEXTRAPINN_REFERENCE_DIR=/tmp/grids\n")
        settings = Settings.load(str(env))
        assert settings.torch_threads == 3
        assert settings.reference_dir == "/tmp/grids"

    def test_ensure_directories(self, tmp_path):
        settings = Settings(output_dir=str(tmp_path / "runs"), reference_dir=str(tmp_path / "ref"))
        settings.ensure_directories()
        assert (tmp_path / "runs").is_dir() and (tmp_path / "ref").is_dir()


class TestEquationDefaults:
    @pytest.mark.parametrize(
        "equation,lr,eval_nx,dt",
        [("ac", 5e-3, 400, 0.005), ("kdv", 5e-2, 500, 0.005), ("burgers", 5e-2, 600, 0.01)],
    )
    def test_resolved_per_equation(self, equation, lr, eval_nx, dt):
        config = ExperimentConfig.from_dict({"equation": equation})
        assert config.transfer.learning_rate == lr
        assert config.reference.eval_nx == eval_nx
        assert config.reference.dt == dt

    def test_architecture_and_split_defaults(self):
        config = ExperimentConfig.from_dict({})
        assert (config.network.hidden_layers, config.network.width) == (6, 32)
        assert (config.split.t_train, config.split.t_val, config.split.t_test) == (0.5, 0.8, 1.0)
        assert config.seeds == list(range(10))
        assert config.transfer.method == TLMethod.L2
        assert config.transfer.lam == 0.01

    def test_kdv_boundary_horizons(self):
        config = ExperimentConfig.from_dict({"equation": "kdv"})
        assert config.sampling.boundary_t_max_initial == 0.5
        assert config.sampling.boundary_t_max_transfer == 0.8

    def test_explicit_values_win(self):
        config = ExperimentConfig.from_dict(
            {"equation": "kdv", "transfer": {"learning_rate": 0.2, "method": "ewc"}, "reference": {"eval_nx": 64}}
        )
        assert config.transfer.learning_rate == 0.2
        assert config.transfer.lam == 0.001
        assert config.reference.eval_nx == 64

    def test_abu_candidates_default_per_equation(self):
        config = ExperimentConfig.from_dict({"equation": "burgers", "activation": {"family": "abu"}})
        assert config.candidates == ("tanh", "gelu", "sigmoid", "sin")
        assert config.activation.n == 4

    def test_default_terms(self):
        assert ExperimentConfig.from_dict({"activation": {"family": "lctanh"}}).activation.n == 3
        assert ExperimentConfig.from_dict({"activation": {"family": "lc_x_sin_sq"}}).activation.n == 2
        assert ExperimentConfig.from_dict({}).activation.family == ActivationFamily.TANH


class TestProfiles:
    def test_desk_profile_fills_unset_keys(self):
        config = ExperimentConfig.from_dict({"profile": "desk"})
        assert config.sampling.n_collocation == 2000
        assert config.lbfgs.max_iter == 1500
        assert config.early_stopping.patience == 8

    def test_desk_profile_keeps_explicit_keys(self):
        config = ExperimentConfig.from_dict({"profile": "desk", "lbfgs": {"max_iter": 40}})
        assert config.lbfgs.max_iter == 40
        assert config.sampling.n_collocation == 2000


class TestValidation:
    @pytest.mark.parametrize(
        "data",
        [
            {"equation": "heat"},
            {"split": {"t_train": 0.8, "t_val": 0.5}},
            {"split": {"t_test": 1.5, "t_val": 1.2}},
            {"transfer": {"k": 100, "pool_size": 50}},
            {"transfer": {"lam": -1.0}},
            {"lbfgs": {"c1": 0.9, "c2": 0.1}},
            {"seeds": []},
            {"seeds": [1, 1]},
            {"unknown_key": 1},
            {"activation": {"family": "abu", "n": 4, "candidates": ["tanh", "gelu", "sin"]}},
            {"activation": {"family": "abu", "candidates": ["tanh", "relu", "sin"]}},
            {"activation": {"family": "lctanh", "candidates": ["tanh"]}},
            {"activation": {"family": "tanh", "n": 2}},
            {"reference": {"nx_internal": 32}},
            {"equation": "burgers", "reference": {"nx_internal": 128}},
        ],
    )
    def test_invalid_configuration(self, data):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(data)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            ExperimentConfig.load(str(tmp_path / "absent.json"))

    def test_invalid_file(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"network": {"width": 0}}))
        with pytest.raises(ConfigError):
            ExperimentConfig.load(str(path))


def test_save_and_load(tmp_path):
    config = ExperimentConfig.from_dict(tiny_config_dict(equation="kdv"))
    path = tmp_path / "config.json"
    config.save(path)
    loaded = ExperimentConfig.load(str(path))
    assert loaded.model_dump() == config.model_dump()
    assert loaded.equation == EquationId.KDV


def test_reference_path(tmp_path):
    config = ExperimentConfig.from_dict({"equation": "burgers"})
    assert config.reference_path(str(tmp_path)) == tmp_path / "burgers.grid"
    pinned = ExperimentConfig.from_dict({"reference": {"path": "grids/b.grid"}})
    assert str(pinned.reference_path(str(tmp_path))) == "grids/b.grid"


def test_burgers_solver_grid_floor():
    burgers = ExperimentConfig.from_dict({"equation": "burgers", "reference": {"nx_internal": 316}})
    assert burgers.reference.nx_internal == 316
    allen_cahn = ExperimentConfig.from_dict({"equation": "ac", "reference": {"nx_internal": 128}})
    assert allen_cahn.reference.nx_internal == 128
