"""Initial training and transfer-learning phases for one seeded run."""

import time
from typing import Callable, Optional, Tuple

import torch
from loguru import logger

from ..config.settings import ExperimentConfig, TLConfig
from ..core.autodiff import value_and_gradient
from ..core.network import init_model
from ..core.optim import (
    AdamState,
    CallbackDecision,
    EarlyStopState,
    StopDecision,
    adam_step,
    early_stop_update,
    lbfgs_minimize,
)
from ..core.pde import (
    PDEProblem,
    get_problem,
    make_loss,
    model_residual,
    sample_boundary_times,
    sample_collocation,
    sample_pool,
)
from ..errors import ContractError, DivergenceError, EvaluationError, GradientError, InvariantViolation
from ..models.domain import (
    CollocationSet,
    FisherDiag,
    L2Mode,
    ParamVector,
    PinnModel,
    ReferenceGrid,
    Region,
    TLMethod,
)
from ..models.results import RunReport, TraceRow, TrainingTrace
from . import metrics
from .storage import (
    RunStore,
    load_model,
    load_report,
    save_model,
    save_report,
    write_points_csv,
    write_trace_csv,
)

# Independent random streams per seed.
STREAM_COLLOCATION = 1
STREAM_BOUNDARY = 2
STREAM_POOL = 3
STREAM_TL_BOUNDARY = 4
STREAM_FISHER = 5

ABORTED = "aborted"


def generator(seed: int, stream: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed * 1009 + stream)


def select_high_loss_points(
    problem: PDEProblem,
    model: PinnModel,
    pool_size: int,
    k: int,
    t_train: float,
    t_val: float,
    seed: int,
    train_fraction: float = 0.0,
) -> Tuple[CollocationSet, torch.Tensor]:
    """The ``k`` pool points with the largest squared residual.

    The pool is drawn uniformly (validation interval, optionally mixed with the
    training interval). Ties keep the earlier sample first. Returns the
    selected points and their squared residuals in descending order.
    """
    if k > pool_size:
        raise ContractError(f"cannot select {k} points from a pool of {pool_size}")
    pool = sample_pool(pool_size, t_train, t_val, train_fraction, generator(seed, STREAM_POOL))
    with torch.no_grad():
        residual_sq = model_residual(problem, model, pool.t, pool.x) ** 2
    order = torch.sort(residual_sq, descending=True, stable=True).indices[:k]
    return pool.subset(order), residual_sq[order]


def fisher_diag(
    problem: PDEProblem,
    model: PinnModel,
    old_points: CollocationSet,
    mask: Optional[torch.Tensor] = None,
) -> FisherDiag:
    """Mean over points of the squared gradient of the squared residual."""
    if not len(old_points):
        raise ContractError("Fisher estimate needs at least one point")
    mask = model.params.layout.final_layer_mask() if mask is None else mask
    params = model.params.with_mask(mask)
    total = torch.zeros(params.trainable_count, dtype=torch.float64)
    for i in range(len(old_points)):
        t, x = old_points.t[i : i + 1], old_points.x[i : i + 1]

        def point_loss(p: ParamVector) -> torch.Tensor:
            return (model_residual(problem, model, t, x, p) ** 2).sum()

        _, grad = value_and_gradient(point_loss, params)
        total += grad.values**2
    return FisherDiag(values=total / len(old_points))


def tl_regularizer(
    cfg: TLConfig, anchor: torch.Tensor, fisher: Optional[FisherDiag]
) -> Optional[Callable[[torch.Tensor], torch.Tensor]]:
    """Penalty on the trainable entries, or None when it vanishes identically."""
    lam = cfg.lam or 0.0
    if cfg.method == TLMethod.VANILLA or lam == 0.0:
        return None
    if cfg.method == TLMethod.L2:
        if cfg.l2_mode == L2Mode.MAGNITUDE:
            return lambda theta: lam * (theta * theta).sum()
        return lambda theta: lam * ((theta - anchor) ** 2).sum()
    if fisher is None:
        raise ContractError("EWC needs a Fisher estimate")
    return lambda theta: (lam / 2) * (fisher.values * (theta - anchor) ** 2).sum()


def check_freeze(before: ParamVector, after: ParamVector, mask: torch.Tensor) -> bool:
    """True when every entry outside ``mask`` is bit-identical."""
    frozen = ~mask
    return bool(torch.equal(before.values.detach()[frozen], after.values.detach()[frozen]))


def transfer_train(
    problem: PDEProblem,
    model: PinnModel,
    points: CollocationSet,
    cfg: TLConfig,
    fisher: Optional[FisherDiag] = None,
    boundary_ts: Optional[torch.Tensor] = None,
) -> Tuple[PinnModel, TrainingTrace]:
    """Retrain the output layer and activation coefficients with Adam.

    A non-finite loss aborts the phase and returns the input model with the
    trace flagged.
    """
    if not len(points):
        raise ContractError("transfer learning needs at least one point")
    mask = model.params.layout.final_layer_mask()
    params = model.params.with_mask(mask)
    anchor = params.trainable_values().detach().clone()
    base_loss = make_loss(problem, model, points, boundary_ts)
    penalty = tl_regularizer(cfg, anchor, fisher)

    def loss(p: ParamVector) -> torch.Tensor:
        value = base_loss(p)
        if penalty is not None:
            value = value + penalty(p.values[p.mask])
        return value

    state = AdamState.create(params.trainable_count, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    trace = TrainingTrace(phase="transfer")
    for epoch in range(1, cfg.epochs + 1):
        try:
            value, grad = value_and_gradient(loss, params)
        except (GradientError, EvaluationError) as e:
            logger.error(f"Transfer learning aborted at epoch {epoch}: {e}")
            loss_value = getattr(e, "loss_value", float("nan"))
            trace.append(TraceRow("transfer", epoch, loss_value, float("nan"), flag=ABORTED))
            return model, trace
        trace.append(TraceRow("transfer", epoch, value, grad.norm()))
        state, params = adam_step(state, params, grad)

    if not check_freeze(model.params, params, mask):
        raise InvariantViolation("transfer learning modified frozen parameters")
    return model.with_params(params.with_mask(model.params.mask)), trace


class PinnTrainer:
    """Runs both training phases of one experiment configuration."""

    def __init__(self, config: ExperimentConfig, reference: ReferenceGrid):
        if reference.equation != config.equation:
            raise ContractError(
                f"reference grid is for {reference.equation.value}, config for {config.equation.value}"
            )
        self.config = config
        self.reference = reference
        self.problem = get_problem(config.equation)

    def _validation_l2(self, model: PinnModel) -> float:
        return metrics.rel_l2(metrics.model_sampler(model), self.reference, Region.VALIDATION, self.config.split)

    def train_initial(self, seed: int) -> Tuple[PinnModel, TrainingTrace]:
        """L-BFGS on the training interval with early stopping on validation L2."""
        cfg = self.config
        act = cfg.activation
        model = init_model(
            cfg.equation, act.family, act.n, seed, act.candidates, cfg.network.hidden_layers, cfg.network.width
        )
        colloc = sample_collocation(
            cfg.sampling.n_collocation, 0.0, cfg.split.t_train, Region.TRAIN, generator(seed, STREAM_COLLOCATION)
        )
        boundary_ts = None
        if self.problem.needs_boundary_loss:
            boundary_ts = sample_boundary_times(
                cfg.sampling.n_boundary, cfg.sampling.boundary_t_max_initial, generator(seed, STREAM_BOUNDARY)
            )
        early = EarlyStopState(patience=cfg.early_stopping.patience, check_interval=cfg.early_stopping.check_interval)
        early_stop_update(early, 0, self._validation_l2(model), model.params)
        partial = TrainingTrace(phase="initial")

        def on_iteration(iteration: int, params: ParamVector, loss: float, grad_norm: float):
            if not early.due(iteration):
                partial.append(TraceRow("initial", iteration, loss, grad_norm))
                return None
            val = self._validation_l2(model.with_params(params))
            decision = early_stop_update(early, iteration, val, params)
            partial.append(TraceRow("initial", iteration, loss, grad_norm, val_l2=val))
            logger.debug(f"[seed {seed}] iter {iteration}: loss={loss:.3e} |g|={grad_norm:.3e} val_l2={val:.4e}")
            return CallbackDecision(stop=decision == StopDecision.STOP, val_l2=val)

        loss = make_loss(self.problem, model, colloc, boundary_ts)
        logger.info(
            f"[seed {seed}] Initial training: {len(colloc)} points, {model.params.layout.total} parameters"
        )
        try:
            final, trace = lbfgs_minimize(loss, model.params, None, cfg.lbfgs, on_iteration, phase="initial")
        except (GradientError, EvaluationError) as e:
            logger.error(f"[seed {seed}] Initial training diverged after {len(partial)} iterations: {e}")
            raise DivergenceError(f"initial training diverged for seed {seed}: {e}", trace=partial) from e

        # The last iterate is a candidate even when no scheduled check landed on it.
        last_row = trace.rows[-1] if trace.rows else None
        last_iteration = last_row.iteration if last_row else 0
        if early.history[-1][0] != last_iteration:
            val = self._validation_l2(model.with_params(final))
            early_stop_update(early, last_iteration, val, final)
            if last_row is not None and last_row.val_l2 is None:
                last_row.val_l2 = val
        trace.best_iteration = early.best_epoch
        best = early.best_params.with_mask(model.params.mask)
        logger.info(
            f"[seed {seed}] Initial training finished after {len(trace)} iterations; "
            f"best validation L2 {early.best_val:.4e} at iteration {early.best_epoch}"
        )
        return model.with_params(best), trace

    def run_initial(self, seed: int, store: RunStore) -> RunReport:
        """Phase 1 for one seed, writing model, trace and report to ``store``."""
        store.ensure()
        started = time.perf_counter()
        model, trace = self.train_initial(seed)
        elapsed = time.perf_counter() - started
        save_model(model, store.path(RunStore.MODEL_INITIAL))
        write_trace_csv(trace, store.path(RunStore.TRACE_INITIAL))
        report = RunReport(
            run_id=f"{self.config.name}/seed_{seed}",
            equation=self.config.equation.value,
            activation=model.activation.label,
            tl_method=None,
            seed=seed,
            regions=metrics.evaluate_regions(metrics.model_sampler(model), self.reference, self.config.split),
            diagnostics=metrics.epoch_diagnostics(trace, patience=self.config.early_stopping.patience),
            timings={"initial_seconds": elapsed},
            activation_coeffs=model.final_activation().coeffs.tolist(),
        )
        save_report(report, store.path(RunStore.REPORT))
        return report

    def run_transfer(self, seed: int, source: RunStore, store: RunStore) -> RunReport:
        """Phase 2 for one seed, starting from the phase-1 checkpoint in ``source``."""
        cfg = self.config
        tl = cfg.transfer
        store.ensure()
        before = load_model(source.path(RunStore.MODEL_INITIAL))
        if before.equation != cfg.equation:
            raise ContractError(f"checkpoint in {source.root} is for {before.equation.value}")
        started = time.perf_counter()
        points, residual_sq = select_high_loss_points(
            self.problem, before, tl.pool_size, tl.k, cfg.split.t_train, cfg.split.t_val, seed, tl.train_fraction
        )
        write_points_csv(points, residual_sq, store.path(RunStore.SELECTED_POINTS))

        fisher = None
        if tl.method == TLMethod.EWC:
            old_points = sample_collocation(
                tl.fisher_points, 0.0, cfg.split.t_train, Region.TRAIN, generator(seed, STREAM_FISHER)
            )
            fisher = fisher_diag(self.problem, before, old_points)
        boundary_ts = None
        if self.problem.needs_boundary_loss:
            boundary_ts = sample_boundary_times(
                cfg.sampling.n_boundary, cfg.sampling.boundary_t_max_transfer, generator(seed, STREAM_TL_BOUNDARY)
            )
        logger.info(f"[seed {seed}] Transfer learning ({tl.method.value}) on {len(points)} points")
        after, trace = transfer_train(self.problem, before, points, tl, fisher, boundary_ts)
        elapsed = time.perf_counter() - started

        save_model(after, store.path(RunStore.MODEL_TRANSFER))
        write_trace_csv(trace, store.path(RunStore.TRACE_TRANSFER))
        split = cfg.split
        regions_before = metrics.evaluate_regions(metrics.model_sampler(before), self.reference, split)
        regions_after = metrics.evaluate_regions(metrics.model_sampler(after), self.reference, split)
        timings = {"transfer_seconds": elapsed}
        initial_report = source.path(RunStore.REPORT)
        previous = None
        if initial_report.exists():
            previous = load_report(initial_report)
            timings = {**previous.timings, **timings}
        report = RunReport(
            run_id=f"{cfg.name}/seed_{seed}",
            equation=cfg.equation.value,
            activation=before.activation.label,
            tl_method=tl.method.value,
            seed=seed,
            regions=regions_before,
            regions_after_tl=regions_after,
            tl_effect=metrics.tl_effect(before, after, self.reference, split),
            diagnostics=previous.diagnostics if previous else None,
            timings=timings,
            freeze_ok=check_freeze(before.params, after.params, before.params.layout.final_layer_mask()),
            activation_coeffs=after.final_activation().coeffs.tolist(),
        )
        if ABORTED in trace.flags:
            logger.warning(f"[seed {seed}] Transfer learning aborted; keeping the phase-1 model")
        save_report(report, store.path(RunStore.REPORT))
        return report
