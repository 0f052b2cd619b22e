"""Shared fixtures: tiny networks, synthetic reference grids and a fast experiment config."""

import numpy as np
import pytest
import torch

from extrapinn.config.settings import ExperimentConfig
from extrapinn.core.network import init_model
from extrapinn.models.domain import ActivationFamily, EquationId, ReferenceGrid

FAMILY_CASES = [
    (ActivationFamily.TANH, 1, None),
    (ActivationFamily.X_PLUS_SIN_SQ, 1, None),
    (ActivationFamily.ABU, 3, ("tanh", "gelu", "sigmoid")),
    (ActivationFamily.ABU, 4, ("sin", "elu", "softplus", "swish")),
    (ActivationFamily.LCTANH, 3, None),
    (ActivationFamily.LCSIN, 3, None),
    (ActivationFamily.LC_X_SIN_SQ, 2, None),
]


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow reproduction tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running reproduction and convergence checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def perturbed(model, seed: int, scale: float = 0.3):
    """Same model with every coefficient of the adaptive activation jittered."""
    generator = torch.Generator().manual_seed(seed)
    values = model.params.values.clone()
    af = model.params.layout.af.slice
    values[af] = values[af] + scale * (torch.rand(values[af].numel(), generator=generator, dtype=torch.float64) - 0.5)
    return model.with_params(model.params.with_values(values))


@pytest.fixture
def small_model():
    """Factory for a 2x8 network with a jittered activation."""

    def make(equation=EquationId.AC, family=ActivationFamily.LCTANH, n=3, seed=0, candidates=None):
        model = init_model(equation, family, n, seed, candidates, hidden_layers=2, width=8)
        return perturbed(model, seed + 100)

    return make


def synthetic_grid(equation=EquationId.AC, nx=41, dt=0.05) -> ReferenceGrid:
    """Smooth non-zero field on a uniform grid; not a PDE solution."""
    x = np.linspace(-1.0, 1.0, nx)
    t = np.linspace(0.0, 1.0, int(round(1.0 / dt)) + 1)
    tt, xx = np.meshgrid(t, x, indexing="ij")
    u = xx**2 * np.cos(np.pi * xx) * np.exp(-tt) - 0.5 * tt
    return ReferenceGrid(equation=EquationId(equation), x=x, t=t, u=u)


@pytest.fixture
def reference_grid():
    return synthetic_grid()


def tiny_config_dict(**overrides):
    data = {
        "name": "tiny",
        "equation": "ac",
        "activation": {"family": "lctanh", "n": 2},
        "network": {"hidden_layers": 2, "width": 8},
        "sampling": {"n_collocation": 64, "n_boundary": 16},
        "lbfgs": {"max_iter": 15, "history_size": 10},
        "early_stopping": {"check_interval": 5, "patience": 2},
        "transfer": {"epochs": 5, "k": 8, "pool_size": 64, "fisher_points": 8},
        "seeds": [0, 1],
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key] = {**data[key], **value}
        else:
            data[key] = value
    return data


@pytest.fixture
def tiny_config():
    return ExperimentConfig.from_dict(tiny_config_dict())
