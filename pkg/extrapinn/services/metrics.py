"""Error metrics, TL-effect reports and training diagnostics."""

import math
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from ..config.settings import SplitSpec
from ..core.autodiff import value_and_gradient
from ..core.network import predict
from ..core.pde import PDEProblem, make_loss
from ..errors import ContractError
from ..models.domain import CollocationSet, PinnModel, ReferenceGrid, Region
from ..models.results import (
    EpochDiagnostics,
    LayerGradNorm,
    RegionReport,
    RunReport,
    TLEffectReport,
    TrainingTrace,
    percent_increase,
)

FieldSampler = Callable[[np.ndarray, np.ndarray], np.ndarray]

REPORT_REGIONS = (Region.TRAIN, Region.VALIDATION, Region.EXTRAPOLATION, Region.SEEN)


def model_sampler(model: PinnModel) -> FieldSampler:
    """Field sampler evaluating the constrained network output."""
    return lambda t, x: predict(model, t, x)


def region_rows(grid: ReferenceGrid, region: Region, split: SplitSpec) -> np.ndarray:
    """Time-row indices of ``region`` on the reference grid."""
    region = Region(region)
    if region == Region.TRAIN:
        return grid.rows_between(0.0, split.t_train, include_lo=True)
    if region == Region.VALIDATION:
        return grid.rows_between(split.t_train, split.t_val)
    if region == Region.EXTRAPOLATION:
        return grid.rows_between(split.t_val, split.t_test)
    if region == Region.SEEN:
        return grid.rows_between(0.0, split.t_val, include_lo=True)
    raise ContractError(f"no evaluation grid for region {region.value}")


def _region_values(pred: FieldSampler, ref: ReferenceGrid, region: Region, split: SplitSpec):
    rows = region_rows(ref, region, split)
    if rows.size == 0:
        raise ContractError(f"region {Region(region).value} has no rows on the reference grid")
    tt, xx = np.meshgrid(ref.t[rows], ref.x, indexing="ij")
    return np.asarray(pred(tt, xx)).reshape(tt.shape), ref.u[rows]


def _ratio(numerator: float, denominator: float, name: str) -> float:
    if denominator == 0:
        raise ContractError(f"{name} is undefined for an identically zero reference")
    return numerator / denominator


def rel_l2(pred: FieldSampler, ref: ReferenceGrid, region: Region, split: Optional[SplitSpec] = None) -> float:
    """Relative L2 error over the region's space-time grid."""
    u_pred, u_ref = _region_values(pred, ref, region, split or SplitSpec())
    return _ratio(
        math.sqrt(float(np.sum((u_pred - u_ref) ** 2))), math.sqrt(float(np.sum(u_ref**2))), "relative L2"
    )


def rel_mae(pred: FieldSampler, ref: ReferenceGrid, region: Region, split: Optional[SplitSpec] = None) -> float:
    """Relative mean absolute error ``sum|pred - ref| / sum|ref|``."""
    u_pred, u_ref = _region_values(pred, ref, region, split or SplitSpec())
    return _ratio(float(np.sum(np.abs(u_pred - u_ref))), float(np.sum(np.abs(u_ref))), "relative MAE")


def region_report(pred: FieldSampler, ref: ReferenceGrid, region: Region, split: SplitSpec) -> RegionReport:
    u_pred, u_ref = _region_values(pred, ref, region, split)
    diff = u_pred - u_ref
    return RegionReport(
        region=Region(region).value,
        rel_l2=_ratio(math.sqrt(float(np.sum(diff**2))), math.sqrt(float(np.sum(u_ref**2))), "relative L2"),
        rel_mae=_ratio(float(np.sum(np.abs(diff))), float(np.sum(np.abs(u_ref))), "relative MAE"),
        points=int(u_ref.size),
    )


def evaluate_regions(pred: FieldSampler, ref: ReferenceGrid, split: SplitSpec) -> Dict[str, RegionReport]:
    """Reports for the train, validation, extrapolation and seen ([0, T_val]) regions."""
    return {region.value: region_report(pred, ref, region, split) for region in REPORT_REGIONS}


def tl_effect(before: PinnModel, after: PinnModel, ref: ReferenceGrid, split: Optional[SplitSpec] = None) -> TLEffectReport:
    """Forgetting on [0, T_val] and extrapolation improvement caused by transfer learning."""
    if before.params.layout != after.params.layout:
        raise ContractError("models compared by tl_effect must share an architecture")
    split = split or SplitSpec()
    pred_before, pred_after = model_sampler(before), model_sampler(after)
    return TLEffectReport.from_errors(
        region_report(pred_before, ref, Region.SEEN, split),
        region_report(pred_after, ref, Region.SEEN, split),
        region_report(pred_before, ref, Region.EXTRAPOLATION, split),
        region_report(pred_after, ref, Region.EXTRAPOLATION, split),
    )


def grad_norm_profile(
    problem: PDEProblem,
    model: PinnModel,
    points: CollocationSet,
    boundary_ts: Optional[torch.Tensor] = None,
) -> List[LayerGradNorm]:
    """Per linear layer ``log ||dL/dW|| + log ||dL/db||`` of the PDE loss.

    Layers with a zero weight or bias gradient are flagged (value ``None``).
    """
    params = model.params.with_mask(model.params.layout.full_mask())
    _, grad = value_and_gradient(make_loss(problem, model, points, boundary_ts), params)
    layout = params.layout
    profile = []
    for layer in range(layout.layer_count):
        w_norm = float(torch.linalg.vector_norm(grad.values[layout.weight(layer).slice]))
        b_norm = float(torch.linalg.vector_norm(grad.values[layout.bias(layer).slice]))
        value = math.log(w_norm) + math.log(b_norm) if w_norm > 0 and b_norm > 0 else None
        profile.append(LayerGradNorm(layer=layer + 1, weight_norm=w_norm, bias_norm=b_norm, value=value))
    return profile


def epochs_to_threshold(trace: TrainingTrace, threshold: float) -> Optional[int]:
    """First iteration whose training loss is at or below ``threshold``."""
    if not len(trace):
        raise ContractError("trace is empty")
    for row in trace.rows:
        if row.loss <= threshold:
            return row.iteration
    return None


def validation_upturn(trace: TrainingTrace, patience: int = 3) -> Optional[int]:
    """Iteration after which the validation error rises for ``patience`` consecutive checks."""
    if not len(trace):
        raise ContractError("trace is empty")
    checks = trace.validation_points()
    for i in range(len(checks) - patience):
        window = checks[i : i + patience + 1]
        if all(later.val_l2 > earlier.val_l2 for earlier, later in zip(window, window[1:])):
            return checks[i].iteration
    return None


def epoch_diagnostics(trace: TrainingTrace, threshold: float = 1e-5, patience: int = 3) -> EpochDiagnostics:
    return EpochDiagnostics(
        loss_threshold=threshold,
        epochs_to_threshold=epochs_to_threshold(trace, threshold),
        validation_upturn=validation_upturn(trace, patience),
    )


def _mean_std(values: Sequence[float]) -> Dict[str, float]:
    arr = np.asarray(values, dtype=float)
    return {"mean": float(arr.mean()), "std": float(arr.std(ddof=1)) if arr.size > 1 else 0.0, "n": int(arr.size)}


def summarize_runs(reports: Sequence[RunReport]) -> Dict[str, object]:
    """Seed statistics of a set of runs of one configuration.

    TL effects are given both as the mean of per-seed percentages and as
    percentages formed from the seed-averaged errors.
    """
    if not reports:
        raise ContractError("no run reports to summarise")
    summary: Dict[str, object] = {
        "equation": reports[0].equation,
        "activation": reports[0].activation,
        "tl_method": reports[0].tl_method,
        "seeds": [r.seed for r in reports],
    }
    for key in ("regions", "regions_after_tl"):
        regions = {}
        for name in reports[0].regions if key == "regions" else reports[0].regions_after_tl:
            rows = [getattr(r, key)[name] for r in reports if name in getattr(r, key)]
            regions[name] = {
                "rel_l2": _mean_std([row.rel_l2 for row in rows]),
                "rel_mae": _mean_std([row.rel_mae for row in rows]),
            }
        summary[key] = regions
    effects = [r.tl_effect for r in reports if r.tl_effect is not None]
    if effects:
        per_seed = np.mean([e.as_row() for e in effects], axis=0)
        summary["tl_effect_per_seed_mean"] = dict(
            zip(("forgetting_l2", "forgetting_mae", "reduction_l2", "reduction_mae"), map(float, per_seed))
        )
        before, after = summary["regions"], summary["regions_after_tl"]

        def avg(regions: Dict, region: str, metric: str) -> float:
            return regions[region][metric]["mean"]

        summary["tl_effect_of_means"] = {
            "forgetting_l2": percent_increase(avg(before, "seen", "rel_l2"), avg(after, "seen", "rel_l2")),
            "forgetting_mae": percent_increase(avg(before, "seen", "rel_mae"), avg(after, "seen", "rel_mae")),
            "reduction_l2": percent_increase(
                avg(after, "extrapolation", "rel_l2"),
                avg(before, "extrapolation", "rel_l2"),
                base=avg(before, "extrapolation", "rel_l2"),
            ),
            "reduction_mae": percent_increase(
                avg(after, "extrapolation", "rel_mae"),
                avg(before, "extrapolation", "rel_mae"),
                base=avg(before, "extrapolation", "rel_mae"),
            ),
        }
    return summary
