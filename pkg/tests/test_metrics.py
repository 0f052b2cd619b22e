"""Relative error metrics, region bookkeeping and training diagnostics."""

import math

import numpy as np
import pytest
import torch

from extrapinn.config.settings import SplitSpec
from extrapinn.core.pde import get_problem, make_loss
from extrapinn.errors import ContractError
from extrapinn.models.domain import DTYPE, CollocationSet, EquationId, ReferenceGrid, Region
from extrapinn.models.results import RegionReport, RunReport, TLEffectReport, TraceRow, TrainingTrace
from extrapinn.services import metrics

from .conftest import synthetic_grid

SPLIT = SplitSpec()


def _field(t, x):
    return x**2 * np.cos(np.pi * x) * np.exp(-t) - 0.5 * t


class TestRelativeErrors:
    def test_exact_prediction(self, reference_grid):
        for region in metrics.REPORT_REGIONS:
            assert metrics.rel_l2(_field, reference_grid, region, SPLIT) == 0.0
            assert metrics.rel_mae(_field, reference_grid, region, SPLIT) == 0.0

    def test_zero_prediction(self, reference_grid):
        zero = lambda t, x: np.zeros_like(t)  # noqa: E731
        assert metrics.rel_l2(zero, reference_grid, Region.EXTRAPOLATION) == pytest.approx(1.0)
        assert metrics.rel_mae(zero, reference_grid, Region.EXTRAPOLATION) == pytest.approx(1.0)

    def test_doubled_prediction(self, reference_grid):
        double = lambda t, x: 2 * _field(t, x)  # noqa: E731
        assert metrics.rel_mae(double, reference_grid, Region.TRAIN) == pytest.approx(1.0)
        assert metrics.rel_l2(double, reference_grid, Region.TRAIN) == pytest.approx(1.0)

    def test_constant_offset(self, reference_grid):
        offset = lambda t, x: _field(t, x) + 0.01  # noqa: E731
        rows = metrics.region_rows(reference_grid, Region.VALIDATION, SPLIT)
        ref = reference_grid.u[rows]
        expected_l2 = 0.01 * math.sqrt(ref.size) / np.linalg.norm(ref)
        expected_mae = 0.01 * ref.size / np.abs(ref).sum()
        assert metrics.rel_l2(offset, reference_grid, Region.VALIDATION) == pytest.approx(expected_l2, rel=1e-9)
        assert metrics.rel_mae(offset, reference_grid, Region.VALIDATION) == pytest.approx(expected_mae, rel=1e-9)

    def test_scaling_both_fields_leaves_errors_unchanged(self, reference_grid):
        offset = lambda t, x: _field(t, x) + 0.05  # noqa: E731
        scaled_grid = ReferenceGrid(
            equation=reference_grid.equation, x=reference_grid.x, t=reference_grid.t, u=3.0 * reference_grid.u
        )
        scaled = lambda t, x: 3.0 * offset(t, x)  # noqa: E731
        base = metrics.rel_l2(offset, reference_grid, Region.SEEN)
        assert metrics.rel_l2(scaled, scaled_grid, Region.SEEN) == pytest.approx(base, rel=1e-12)

    def test_zero_reference(self):
        grid = synthetic_grid()
        zero_grid = ReferenceGrid(equation=grid.equation, x=grid.x, t=grid.t, u=np.zeros_like(grid.u))
        with pytest.raises(ContractError):
            metrics.rel_l2(_field, zero_grid, Region.TRAIN)
        with pytest.raises(ContractError):
            metrics.rel_mae(_field, zero_grid, Region.TRAIN)


class TestRegions:
    def test_allen_cahn_evaluation_grid(self):
        grid = synthetic_grid(nx=400, dt=0.005)
        counts = {
            region: metrics.region_rows(grid, region, SPLIT).size
            for region in (Region.TRAIN, Region.VALIDATION, Region.EXTRAPOLATION, Region.SEEN)
        }
        assert counts == {Region.TRAIN: 101, Region.VALIDATION: 60, Region.EXTRAPOLATION: 40, Region.SEEN: 161}
        report = metrics.region_report(_field, grid, Region.EXTRAPOLATION, SPLIT)
        assert report.points == 16000

    def test_validation_and_extrapolation_are_disjoint(self, reference_grid):
        val = set(metrics.region_rows(reference_grid, Region.VALIDATION, SPLIT))
        ext = set(metrics.region_rows(reference_grid, Region.EXTRAPOLATION, SPLIT))
        train = set(metrics.region_rows(reference_grid, Region.TRAIN, SPLIT))
        assert not val & ext and not train & val

    def test_mixed_region_has_no_grid(self, reference_grid):
        with pytest.raises(ContractError):
            metrics.region_rows(reference_grid, Region.MIXED, SPLIT)

    def test_evaluate_regions_keys(self, reference_grid):
        reports = metrics.evaluate_regions(_field, reference_grid, SPLIT)
        assert set(reports) == {"train", "validation", "extrapolation", "seen"}
        assert all(r.rel_l2 == 0.0 for r in reports.values())


def test_model_against_itself_has_no_tl_effect(small_model, reference_grid):
    model = small_model()
    effect = metrics.tl_effect(model, model, reference_grid, SPLIT)
    assert effect.as_row() == [0.0, 0.0, 0.0, 0.0]


def test_model_sampler_keeps_the_grid_shape(small_model):
    sampler = metrics.model_sampler(small_model())
    tt, xx = np.meshgrid(np.linspace(0, 1, 4), np.linspace(-1, 1, 6), indexing="ij")
    assert sampler(tt, xx).shape == (4, 6)


class TestGradNormProfile:
    def _points(self):
        generator = torch.Generator().manual_seed(0)
        t = torch.rand(20, generator=generator, dtype=DTYPE) * 0.5
        x = 2 * torch.rand(20, generator=generator, dtype=DTYPE) - 1
        return CollocationSet(t=t, x=x, region=Region.TRAIN)

    def test_one_entry_per_layer(self, small_model):
        model = small_model()
        profile = metrics.grad_norm_profile(get_problem(EquationId.AC), model, self._points())
        assert [entry.layer for entry in profile] == [1, 2, 3]
        for entry in profile:
            assert not entry.flagged
            assert entry.value == pytest.approx(math.log(entry.weight_norm) + math.log(entry.bias_norm))

    def test_blocked_layer_is_flagged(self, small_model):
        model = small_model()
        values = model.params.values.clone()
        values[model.params.layout.weight(1).slice] = 0.0
        blocked = model.with_params(model.params.with_values(values))
        profile = metrics.grad_norm_profile(get_problem(EquationId.AC), blocked, self._points())
        assert profile[0].flagged and profile[0].weight_norm == 0.0
        assert not profile[1].flagged and not profile[2].flagged

    def test_norms_match_finite_difference_gradients(self, small_model):
        model = small_model()
        problem = get_problem(EquationId.AC)
        points = self._points()
        loss = make_loss(problem, model, points)
        profile = metrics.grad_norm_profile(problem, model, points)
        layout = model.params.layout
        eps = 1e-6

        def fd_norm(segment):
            entries = []
            for i in range(segment.offset, segment.offset + segment.size):
                plus = model.params.values.clone()
                minus = model.params.values.clone()
                plus[i] += eps
                minus[i] -= eps
                up = float(loss(model.params.with_values(plus)))
                down = float(loss(model.params.with_values(minus)))
                entries.append((up - down) / (2 * eps))
            return math.sqrt(sum(e * e for e in entries))

        for entry in profile:
            assert entry.weight_norm == pytest.approx(fd_norm(layout.weight(entry.layer - 1)), rel=1e-5)
            assert entry.bias_norm == pytest.approx(fd_norm(layout.bias(entry.layer - 1)), rel=1e-5)


def _trace(losses, vals=None):
    trace = TrainingTrace(phase="initial")
    for i, loss in enumerate(losses, start=1):
        trace.append(TraceRow("initial", i, loss, 1.0, val_l2=vals[i - 1] if vals else None))
    return trace


class TestDiagnostics:
    def test_epochs_to_threshold(self):
        trace = _trace([1.0 if i < 42 else 1e-6 for i in range(1, 60)])
        assert metrics.epochs_to_threshold(trace, 1e-5) == 42
        assert metrics.epochs_to_threshold(_trace([1.0, 0.5]), 1e-5) is None

    def test_empty_trace(self):
        with pytest.raises(ContractError):
            metrics.epochs_to_threshold(TrainingTrace(phase="initial"), 1e-5)
        with pytest.raises(ContractError):
            metrics.validation_upturn(TrainingTrace(phase="initial"))

    def test_validation_upturn(self):
        vals = [0.5, 0.4, 0.3, 0.35, 0.4, 0.45, 0.5]
        trace = _trace([1.0] * len(vals), vals)
        assert metrics.validation_upturn(trace, patience=3) == 3
        assert metrics.validation_upturn(_trace([1.0] * 4, [0.4, 0.3, 0.2, 0.1]), patience=3) is None

    def test_epoch_diagnostics(self):
        diagnostics = metrics.epoch_diagnostics(_trace([1e-3, 1e-6]), threshold=1e-5)
        assert diagnostics.epochs_to_threshold == 2
        assert diagnostics.validation_upturn is None


def _report(seed, seen, extrap, seen_after, extrap_after):
    def regions(s, e):
        return {
            "seen": RegionReport("seen", s, s, 10),
            "extrapolation": RegionReport("extrapolation", e, e, 10),
        }

    before, after = regions(seen, extrap), regions(seen_after, extrap_after)
    return RunReport(
        run_id=f"x/seed_{seed}",
        equation="ac",
        activation="lctanh",
        tl_method="l2",
        seed=seed,
        regions=before,
        regions_after_tl=after,
        tl_effect=TLEffectReport.from_errors(
            before["seen"], after["seen"], before["extrapolation"], after["extrapolation"]
        ),
    )


def test_summarize_runs_reports_both_tl_effect_conventions():
    reports = [_report(0, 0.1, 0.4, 0.12, 0.2), _report(1, 0.3, 0.8, 0.3, 0.6)]
    summary = metrics.summarize_runs(reports)
    seen = summary["regions"]["seen"]["rel_l2"]
    assert seen["mean"] == pytest.approx(0.2)
    assert seen["std"] == pytest.approx(math.sqrt(0.02))
    assert seen["n"] == 2
    per_seed = summary["tl_effect_per_seed_mean"]
    of_means = summary["tl_effect_of_means"]
    assert per_seed["forgetting_l2"] == pytest.approx(10.0)
    assert of_means["forgetting_l2"] == pytest.approx(5.0)
    assert per_seed["reduction_l2"] == pytest.approx(37.5)
    assert of_means["reduction_l2"] == pytest.approx(100 / 3)
    assert summary["seeds"] == [0, 1]


def test_summarize_without_reports():
    with pytest.raises(ContractError):
        metrics.summarize_runs([])
