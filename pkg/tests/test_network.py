"""Network initialisation, parameter layout and the hard-constraint transforms."""

import math

import numpy as np
import pytest
import torch

from extrapinn.core.network import (
    Ansatz,
    ansatz_u,
    evaluate_u,
    evaluate_v,
    hidden_activations,
    init_model,
    init_xavier,
    predict,
)
from extrapinn.core.activations import init_activation
from extrapinn.models.domain import DTYPE, ActivationFamily, EquationId, ParamLayout

from .conftest import perturbed

H = 1e-5


def _random_model(equation, seed):
    model = init_model(equation, ActivationFamily.LCTANH, 3, seed, hidden_layers=3, width=12)
    generator = torch.Generator().manual_seed(seed)
    values = model.params.values + 0.5 * torch.randn(model.params.layout.total, generator=generator, dtype=DTYPE)
    return model.with_params(model.params.with_values(values))


class TestLayout:
    def test_default_architecture_sizes(self):
        layout = ParamLayout.build(6, 32, 9)
        assert layout.widths == (2, 32, 32, 32, 32, 32, 32, 1)
        assert layout.layer_count == 7
        assert layout.hidden_layers == 6
        expected = (2 * 32 + 32) + 5 * (32 * 32 + 32) + (32 + 1) + 9
        assert layout.total == expected

    def test_final_layer_mask(self):
        layout = ParamLayout.build(6, 32, 9)
        mask = layout.final_layer_mask()
        assert int(mask.sum()) == 32 + 1 + 9
        assert bool(mask[layout.af.slice].all())
        assert not bool(mask[layout.weight(5).slice].any())

    def test_segments_are_contiguous(self):
        layout = ParamLayout.build(3, 5, 4)
        offset = 0
        for segment in layout.segments:
            assert segment.offset == offset
            offset += segment.size
        assert offset == layout.total


class TestInit:
    def test_xavier_bounds_and_zero_biases(self):
        params = init_xavier(init_activation(ActivationFamily.TANH), seed=3, hidden_layers=4, width=16)
        layout = params.layout
        for layer in range(layout.layer_count):
            fan_in, fan_out = layout.widths[layer], layout.widths[layer + 1]
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            assert float(params.weight(layer).abs().max()) <= bound
            assert float(params.bias(layer).abs().max()) == 0.0

    def test_same_seed_same_parameters(self):
        first = init_model(EquationId.AC, ActivationFamily.LCSIN, 3, 5)
        second = init_model(EquationId.AC, ActivationFamily.LCSIN, 3, 5)
        other = init_model(EquationId.AC, ActivationFamily.LCSIN, 3, 6)
        assert torch.equal(first.params.values, second.params.values)
        assert not torch.equal(first.params.values, other.params.values)

    def test_activation_coefficients_live_in_the_parameter_vector(self):
        model = init_model(EquationId.KDV, ActivationFamily.LC_X_SIN_SQ, 2, 0)
        assert torch.equal(model.params.af_coeffs(), model.activation.coeffs)

    def test_only_the_last_hidden_layer_is_adaptive(self, small_model):
        model = small_model(family=ActivationFamily.LCSIN)
        acts = hidden_activations(model)
        assert [a.family for a in acts] == [ActivationFamily.TANH, ActivationFamily.LCSIN]


class TestHardConstraints:
    @pytest.mark.parametrize("seed", range(25))
    def test_allen_cahn(self, seed):
        model = _random_model(EquationId.AC, seed)
        x = torch.linspace(-1.0, 1.0, 41, dtype=DTYPE)
        u0 = evaluate_u(model, torch.zeros_like(x), x).u
        assert float((u0 - x**2 * torch.cos(math.pi * x)).abs().max()) < 1e-12
        t = torch.linspace(0.0, 1.0, 21, dtype=DTYPE)
        for edge in (-1.0, 1.0):
            u_edge = evaluate_u(model, t, torch.full_like(t, edge)).u
            assert float((u_edge + 1.0).abs().max()) < 1e-12

    @pytest.mark.parametrize("seed", range(25))
    def test_burgers(self, seed):
        model = _random_model(EquationId.BURGERS, seed)
        x = torch.linspace(-1.0, 1.0, 41, dtype=DTYPE)
        u0 = evaluate_u(model, torch.zeros_like(x), x).u
        assert float((u0 + torch.sin(math.pi * x)).abs().max()) < 1e-12
        t = torch.linspace(0.0, 1.0, 21, dtype=DTYPE)
        for edge in (-1.0, 1.0):
            assert float(evaluate_u(model, t, torch.full_like(t, edge)).u.abs().max()) < 1e-12

    @pytest.mark.parametrize("seed", range(25))
    def test_kdv_initial_condition(self, seed):
        model = _random_model(EquationId.KDV, seed)
        x = torch.linspace(-1.0, 1.0, 41, dtype=DTYPE)
        u0 = evaluate_u(model, torch.zeros_like(x), x).u
        assert float((u0 - torch.cos(math.pi * x)).abs().max()) < 1e-12

    @pytest.mark.parametrize("equation", list(EquationId))
    def test_thousand_random_parameter_vectors(self, equation):
        model = init_model(equation, ActivationFamily.LCTANH, 3, 0, hidden_layers=2, width=8)
        generator = torch.Generator().manual_seed(11)
        total = model.params.layout.total
        exact_initial = {
            EquationId.AC: lambda x: x**2 * torch.cos(math.pi * x),
            EquationId.KDV: lambda x: torch.cos(math.pi * x),
            EquationId.BURGERS: lambda x: -torch.sin(math.pi * x),
        }[equation]
        edges = torch.tensor([-1.0, 1.0], dtype=DTYPE)
        for _ in range(1000):
            values = torch.randn(total, generator=generator, dtype=DTYPE)
            sample = model.with_params(model.params.with_values(values))
            x = 2 * torch.rand(4, generator=generator, dtype=DTYPE) - 1
            t = torch.rand(2, generator=generator, dtype=DTYPE)
            times = torch.cat([torch.zeros(4, dtype=DTYPE), t.repeat(2)])
            u = evaluate_u(sample, times, torch.cat([x, edges.repeat_interleave(2)])).u
            assert float((u[:4] - exact_initial(x)).abs().max()) < 1e-12
            if equation == EquationId.AC:
                assert float((u[4:] + 1.0).abs().max()) < 1e-12
            elif equation == EquationId.BURGERS:
                assert float(u[4:].abs().max()) < 1e-12


@pytest.mark.parametrize("equation", list(EquationId))
def test_ansatz_partials_match_central_differences(equation, small_model):
    model = small_model(equation=equation)
    generator = torch.Generator().manual_seed(2)
    t = torch.rand(15, generator=generator, dtype=DTYPE)
    x = 2 * torch.rand(15, generator=generator, dtype=DTYPE) - 1
    u = evaluate_u(model, t, x, t_order=1, x_order=3)

    def field(tt, xx, x_order=0):
        return evaluate_u(model, tt, xx, t_order=0, x_order=x_order)

    assert torch.allclose(u.du_dt, (field(t + H, x).u - field(t - H, x).u) / (2 * H), rtol=1e-6, atol=1e-7)
    assert torch.allclose(u.du_dx, (field(t, x + H).u - field(t, x - H).u) / (2 * H), rtol=1e-6, atol=1e-7)
    fd_xx = (field(t, x + H, 1).du_dx - field(t, x - H, 1).du_dx) / (2 * H)
    assert torch.allclose(u.d2u_dx2, fd_xx, rtol=1e-6, atol=1e-6)
    fd_xxx = (field(t, x + H, 2).d2u_dx2 - field(t, x - H, 2).d2u_dx2) / (2 * H)
    assert torch.allclose(u.d3u_dx3, fd_xxx, rtol=1e-6, atol=1e-6)


def test_ansatz_keeps_the_orders_of_v(small_model):
    model = small_model()
    t, x = [0.2, 0.6], [0.1, -0.3]
    v = evaluate_v(model, t, x, t_order=0, x_order=1)
    u = ansatz_u(Ansatz(EquationId.AC), v, t, x)
    assert u.du_dt is None and u.du_dx is not None and u.d2u_dx2 is None


def test_predict_matches_evaluate_and_keeps_shape(small_model):
    model = small_model()
    tt, xx = np.meshgrid(np.linspace(0, 1, 7), np.linspace(-1, 1, 9), indexing="ij")
    values = predict(model, tt, xx, chunk=10)
    assert values.shape == (7, 9)
    direct = evaluate_u(model, torch.as_tensor(tt.ravel()), torch.as_tensor(xx.ravel())).u.detach().numpy()
    np.testing.assert_allclose(values.ravel(), direct, rtol=0, atol=1e-14)


def test_final_activation_reads_the_given_values():
    model = perturbed(init_model(EquationId.AC, ActivationFamily.LCTANH, 2, 0, hidden_layers=2, width=4), 1)
    values = model.params.values.clone()
    values[model.params.layout.af.slice] = 0.5
    spec = model.final_activation(values)
    assert torch.equal(spec.coeffs, torch.full((6,), 0.5, dtype=DTYPE))
