"""Residual operators, the loss reduction and collocation sampling."""

import pytest
import torch

from extrapinn.core.network import evaluate_u, evaluate_v, hidden_activations, init_model
from extrapinn.core.pde import (
    get_problem,
    make_loss,
    model_residual,
    pairwise_sum,
    pde_loss,
    residual_from_u,
    residual_from_v,
    sample_boundary_times,
    sample_collocation,
    sample_pool,
    stable_mean_square,
)
from extrapinn.errors import ContractError, EvaluationError
from extrapinn.models.domain import DTYPE, CollocationSet, DerivBundle, EquationId, Region

from .conftest import FAMILY_CASES, perturbed


def _points(seed, n=40):
    generator = torch.Generator().manual_seed(seed)
    return torch.rand(n, generator=generator, dtype=DTYPE), 2 * torch.rand(n, generator=generator, dtype=DTYPE) - 1


@pytest.mark.parametrize("equation", list(EquationId))
def test_transformed_residual_equals_original_equation(equation, small_model):
    model = small_model(equation=equation)
    problem = get_problem(equation)
    t, x = _points(4)
    from_v = model_residual(problem, model, t, x)
    u = evaluate_u(model, t, x, t_order=1, x_order=problem.x_order)
    from_u = residual_from_u(problem, u)
    assert float((from_v - from_u).abs().max()) < 1e-10


@pytest.mark.parametrize("equation", list(EquationId))
def test_residual_forms_agree_on_many_random_draws(equation):
    problem = get_problem(equation)
    for draw in range(50):
        family, n, candidates = FAMILY_CASES[draw % len(FAMILY_CASES)]
        model = perturbed(init_model(equation, family, n, draw, candidates, hidden_layers=2, width=8), draw)
        t, x = _points(draw + 500, n=10)
        from_v = model_residual(problem, model, t, x)
        from_u = residual_from_u(problem, evaluate_u(model, t, x, t_order=1, x_order=problem.x_order))
        scale = torch.clamp(from_u.abs(), min=1.0)
        assert float(((from_v - from_u).abs() / scale).max()) < 1e-10, f"draw {draw}"


def test_problem_table():
    assert get_problem(EquationId.AC).x_order == 2
    assert get_problem(EquationId.KDV).x_order == 3
    assert get_problem(EquationId.KDV).needs_boundary_loss
    assert not get_problem(EquationId.BURGERS).needs_boundary_loss
    assert get_problem("burgers").coefficients["nu"] == pytest.approx(0.01 / 3.141592653589793)


def test_residual_needs_enough_derivative_orders(small_model):
    model = small_model(equation=EquationId.KDV)
    v = evaluate_v(model, [0.3], [0.1], t_order=1, x_order=2)
    with pytest.raises(ContractError):
        residual_from_v(get_problem(EquationId.KDV), v, [0.3], [0.1])


def test_non_finite_residual_names_the_term():
    problem = get_problem(EquationId.AC)
    one = torch.ones(3, dtype=DTYPE)
    bundle = DerivBundle(
        u=0.1 * one,
        du_dt=torch.tensor([0.0, float("inf"), 0.0], dtype=DTYPE),
        du_dx=0.1 * one,
        d2u_dx2=0.1 * one,
    )
    t = torch.tensor([0.2, 0.4, 0.6], dtype=DTYPE)
    x = torch.tensor([0.1, 0.2, 0.3], dtype=DTYPE)
    with pytest.raises(EvaluationError) as info:
        residual_from_v(problem, bundle, t, x)
    assert info.value.term == "time"
    assert info.value.point == pytest.approx((0.4, 0.2))


class TestReduction:
    def test_mean_square_ignores_ordering(self):
        generator = torch.Generator().manual_seed(0)
        values = torch.randn(1001, generator=generator, dtype=DTYPE) * torch.logspace(-8, 8, 1001, dtype=DTYPE)
        reference = stable_mean_square(values)
        for seed in range(5):
            perm = torch.randperm(values.numel(), generator=torch.Generator().manual_seed(seed))
            assert torch.equal(stable_mean_square(values[perm]), reference)

    def test_pairwise_sum(self):
        assert float(pairwise_sum(torch.arange(1, 8, dtype=DTYPE))) == 28.0
        assert float(pairwise_sum(torch.tensor([2.5], dtype=DTYPE))) == 2.5
        assert float(pairwise_sum(torch.zeros(0, dtype=DTYPE))) == 0.0

    def test_mean_square_value(self):
        values = torch.tensor([1.0, -2.0, 3.0], dtype=DTYPE)
        assert float(stable_mean_square(values)) == pytest.approx(14.0 / 3.0)


class TestLoss:
    def test_empty_collocation_set(self, small_model):
        model = small_model()
        empty = CollocationSet(t=torch.zeros(0, dtype=DTYPE), x=torch.zeros(0, dtype=DTYPE), region=Region.TRAIN)
        with pytest.raises(ContractError):
            pde_loss(get_problem(EquationId.AC), model.params, hidden_activations(model), empty)

    def test_kdv_needs_boundary_times(self, small_model):
        model = small_model(equation=EquationId.KDV)
        t, x = _points(1, n=8)
        colloc = CollocationSet(t=t, x=x, region=Region.TRAIN)
        problem = get_problem(EquationId.KDV)
        with pytest.raises(ContractError):
            pde_loss(problem, model.params, hidden_activations(model), colloc)
        with_boundary = pde_loss(
            problem, model.params, hidden_activations(model), colloc, torch.linspace(0, 0.5, 4, dtype=DTYPE)
        )
        assert float(with_boundary) > float(
            stable_mean_square(model_residual(problem, model, colloc.t, colloc.x))
        )

    def test_loss_is_the_mean_squared_residual(self, small_model):
        model = small_model(equation=EquationId.BURGERS)
        t, x = _points(2, n=16)
        problem = get_problem(EquationId.BURGERS)
        loss = make_loss(problem, model, CollocationSet(t=t, x=x, region=Region.TRAIN))
        expected = model_residual(problem, model, t, x).pow(2).mean()
        assert float(loss(model.params)) == pytest.approx(float(expected), rel=1e-12)


class TestSampling:
    def test_training_points_stay_in_the_training_interval(self):
        colloc = sample_collocation(500, 0.0, 0.5, Region.TRAIN, torch.Generator().manual_seed(0))
        assert len(colloc) == 500
        assert float(colloc.t.min()) >= 0.0 and float(colloc.t.max()) < 0.5
        assert float(colloc.x.abs().max()) <= 1.0
        colloc.check_region(0.5, 0.8)

    def test_validation_points_never_touch_the_training_interval(self):
        colloc = sample_collocation(500, 0.5, 0.8, Region.VALIDATION, torch.Generator().manual_seed(0))
        assert float(colloc.t.min()) > 0.5 and float(colloc.t.max()) <= 0.8
        colloc.check_region(0.5, 0.8)

    def test_same_generator_seed_same_points(self):
        first = sample_collocation(20, 0.0, 0.5, Region.TRAIN, torch.Generator().manual_seed(3))
        second = sample_collocation(20, 0.0, 0.5, Region.TRAIN, torch.Generator().manual_seed(3))
        assert torch.equal(first.t, second.t) and torch.equal(first.x, second.x)

    def test_region_check_rejects_mislabelled_points(self):
        colloc = CollocationSet(
            t=torch.tensor([0.1, 0.6], dtype=DTYPE), x=torch.zeros(2, dtype=DTYPE), region=Region.TRAIN
        )
        with pytest.raises(ContractError):
            colloc.check_region(0.5, 0.8)

    @pytest.mark.parametrize("region", [Region.TRAIN, Region.VALIDATION])
    def test_reversed_interval_fails_the_region_check(self, region):
        with pytest.raises(ContractError):
            sample_collocation(50, 0.8, 0.5, region, torch.Generator().manual_seed(0))

    def test_points_outside_the_domain_are_rejected(self):
        with pytest.raises(ContractError):
            CollocationSet(t=torch.tensor([1.5], dtype=DTYPE), x=torch.zeros(1, dtype=DTYPE), region=Region.TRAIN)

    def test_validation_only_pool(self):
        pool = sample_pool(100, 0.5, 0.8, 0.0, torch.Generator().manual_seed(1))
        assert pool.region == Region.VALIDATION and len(pool) == 100
        pool.check_region(0.5, 0.8)

    def test_mixed_pool(self):
        pool = sample_pool(100, 0.5, 0.8, 0.25, torch.Generator().manual_seed(1))
        assert pool.region == Region.MIXED and len(pool) == 100
        assert int((pool.t <= 0.5).sum()) == 25
        pool.check_region(0.5, 0.8)

    def test_boundary_times(self):
        ts = sample_boundary_times(50, 0.5, torch.Generator().manual_seed(0))
        assert ts.shape == (50,) and float(ts.max()) <= 0.5 and float(ts.min()) >= 0.0
