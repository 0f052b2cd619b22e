"""Tests for the activation families and their analytic derivatives."""

import math

import pytest
import torch

from extrapinn.core.activations import (
    CANDIDATES,
    apply,
    apply_derivs,
    candidate_derivs,
    gate_weights,
    init_activation,
)
from extrapinn.errors import ContractError, EvaluationError
from extrapinn.models.domain import DTYPE, ActivationFamily, ActivationSpec

from .conftest import FAMILY_CASES

H = 1e-5


def _grid(lo=-2.0, hi=2.0, n=41):
    z = torch.linspace(lo, hi, n, dtype=DTYPE)
    # keep clear of the ELU kink at zero
    return z[z.abs() > 0.05]


def _random_spec(family, n, candidates, seed):
    spec = init_activation(family, n, seed, candidates)
    generator = torch.Generator().manual_seed(seed)
    jitter = 0.4 * (torch.rand(spec.coeff_count, generator=generator, dtype=DTYPE) - 0.5)
    return spec.with_coeffs(spec.coeffs + jitter)


class TestGate:
    def test_sums_to_one(self):
        gate = gate_weights([0.3, -1.2, 2.0, 0.0])
        assert float(gate.sum()) == pytest.approx(1.0, abs=1e-15)
        assert bool((gate > 0).all())

    def test_large_logits_stay_finite(self):
        gate = gate_weights([1000.0, 0.0, -1000.0])
        assert bool(torch.isfinite(gate).all())
        assert float(gate[0]) == pytest.approx(1.0)

    def test_non_finite_logit(self):
        with pytest.raises(EvaluationError):
            gate_weights([0.0, float("nan"), 1.0])


@pytest.mark.parametrize("name", sorted(CANDIDATES))
def test_candidate_derivatives_match_central_differences(name):
    z = _grid()
    derivs = candidate_derivs(name, z, 3)
    assert len(derivs) == 4
    for k in range(1, 4):
        lower_plus = candidate_derivs(name, z + H, k - 1)[k - 1]
        lower_minus = candidate_derivs(name, z - H, k - 1)[k - 1]
        fd = (lower_plus - lower_minus) / (2 * H)
        assert torch.allclose(derivs[k], fd, rtol=1e-6, atol=1e-6), f"{name} order {k}"


def test_unknown_candidate():
    with pytest.raises(ContractError):
        candidate_derivs("relu", 0.0)


@pytest.mark.parametrize("family,n,candidates", FAMILY_CASES)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_family_derivatives_match_central_differences(family, n, candidates, seed):
    spec = _random_spec(family, n, candidates, seed)
    z = _grid()
    derivs = apply_derivs(spec, z, 3)
    for k in range(1, 4):
        fd = (apply_derivs(spec, z + H, k - 1)[k - 1] - apply_derivs(spec, z - H, k - 1)[k - 1]) / (2 * H)
        assert torch.allclose(derivs[k], fd, rtol=1e-6, atol=1e-6), f"{family.value} order {k}"


def test_apply_is_order_zero():
    spec = _random_spec(ActivationFamily.LCSIN, 3, None, 4)
    z = _grid()
    assert torch.equal(apply(spec, z), apply_derivs(spec, z, 0)[0])


def test_order_above_three_rejected():
    with pytest.raises(ContractError):
        apply_derivs(init_activation(ActivationFamily.TANH), 0.0, 4)


def test_x_plus_sin_sq_values():
    spec = init_activation(ActivationFamily.X_PLUS_SIN_SQ)
    value, slope = apply_derivs(spec, torch.tensor([0.0, math.pi / 2], dtype=DTYPE), 1)
    assert torch.allclose(value, torch.tensor([0.0, math.pi / 2 + 1], dtype=DTYPE))
    assert torch.allclose(slope, torch.tensor([1.0, 1.0], dtype=DTYPE))


class TestInitialisation:
    def test_abu_starts_with_uniform_gate_and_unit_slopes(self):
        spec = init_activation(ActivationFamily.ABU, 3, 0, ("tanh", "gelu", "sigmoid"))
        alpha, beta = spec.groups()
        assert torch.allclose(gate_weights(alpha), torch.full((3,), 1 / 3, dtype=DTYPE))
        assert torch.equal(beta, torch.ones(3, dtype=DTYPE))
        z = _grid()
        expected = sum(candidate_derivs(name, z)[0] for name in ("tanh", "gelu", "sigmoid")) / 3
        assert torch.allclose(apply(spec, z), expected)

    @pytest.mark.parametrize("family", [ActivationFamily.LCTANH, ActivationFamily.LCSIN])
    def test_linear_combination_starts_near_parent(self, family):
        spec = init_activation(family, 3, 7)
        w, a, b = spec.groups()
        assert torch.allclose(w.sum(), torch.tensor(1.0, dtype=DTYPE))
        assert torch.equal(a, torch.ones(3, dtype=DTYPE))
        assert bool((b.abs() <= 0.1).all())
        parent = torch.tanh if family == ActivationFamily.LCTANH else torch.sin
        z = _grid()
        # both parents are 1-Lipschitz, so the blend deviates by at most mean |b_i|
        assert float((apply(spec, z) - parent(z)).abs().max()) <= float(b.abs().mean()) + 1e-12

    def test_seeded_shifts_are_reproducible(self):
        first = init_activation(ActivationFamily.LC_X_SIN_SQ, 2, 11)
        second = init_activation(ActivationFamily.LC_X_SIN_SQ, 2, 11)
        other = init_activation(ActivationFamily.LC_X_SIN_SQ, 2, 12)
        assert torch.equal(first.coeffs, second.coeffs)
        assert not torch.equal(first.coeffs, other.coeffs)


class TestSpecValidation:
    def test_wrong_coefficient_count(self):
        with pytest.raises(ContractError):
            ActivationSpec(ActivationFamily.LCTANH, 2, torch.zeros(5, dtype=DTYPE))

    def test_abu_needs_distinct_known_candidates(self):
        with pytest.raises(ContractError):
            ActivationSpec(ActivationFamily.ABU, 3, torch.zeros(6, dtype=DTYPE), ("tanh", "tanh", "sin"))
        with pytest.raises(ContractError):
            ActivationSpec(ActivationFamily.ABU, 3, torch.zeros(6, dtype=DTYPE), ("tanh", "relu", "sin"))

    def test_abu_candidate_count_bounds(self):
        with pytest.raises(ContractError):
            ActivationSpec(ActivationFamily.ABU, 2, torch.zeros(4, dtype=DTYPE), ("tanh", "sin"))

    def test_tanh_has_one_term(self):
        with pytest.raises(ContractError):
            ActivationSpec(ActivationFamily.TANH, 2, torch.zeros(0, dtype=DTYPE))

    def test_dict_round_trip(self):
        spec = _random_spec(ActivationFamily.ABU, 3, ("tanh", "gelu", "sin"), 3)
        restored = ActivationSpec.from_dict(spec.to_dict())
        assert restored.candidates == spec.candidates
        assert torch.equal(restored.coeffs, spec.coeffs)
