"""L-BFGS with a strong Wolfe line search, Adam, and early stopping.

The L-BFGS iteration and its line search follow the torch/optim formulation
(cubic interpolation bracketing and zoom) on a flat float64 vector. Wrappers
bind the flat optimizer to the masked entries of a ParamVector.
"""

import math
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Deque, List, Optional, Tuple

import torch
from loguru import logger

from ..config.settings import LBFGSConfig
from ..errors import ContractError, EvaluationError, GradientError
from ..models.domain import GradientVector, ParamVector
from ..models.results import TraceRow, TrainingTrace
from .autodiff import LossFn, value_and_gradient

Objective = Callable[[torch.Tensor], Tuple[float, torch.Tensor]]

LINE_SEARCH_FAILED = "line_search_failed"
EARLY_STOP = "early_stop"


@dataclass
class CallbackDecision:
    """What an iteration callback reports back to the optimizer."""

    stop: bool = False
    val_l2: Optional[float] = None


FlatCallback = Callable[[int, torch.Tensor, float, float], Optional[CallbackDecision]]


def _cubic_interpolate(
    x1: float, f1: float, g1: float, x2: float, f2: float, g2: float,
    bounds: Optional[Tuple[float, float]] = None,
) -> float:
    """Minimiser of the cubic through two points with slopes, clamped to bounds."""
    if bounds is not None:
        xmin_bound, xmax_bound = bounds
    else:
        xmin_bound, xmax_bound = (x1, x2) if x1 <= x2 else (x2, x1)
    if not all(math.isfinite(v) for v in (x1, f1, g1, x2, f2, g2)) or x1 == x2:
        return (xmin_bound + xmax_bound) / 2.0
    d1 = g1 + g2 - 3 * (f1 - f2) / (x1 - x2)
    d2_square = d1 * d1 - g1 * g2
    if d2_square >= 0:
        d2 = math.sqrt(d2_square)
        if x1 <= x2:
            denom = g2 - g1 + 2 * d2
            min_pos = x2 - (x2 - x1) * ((g2 + d2 - d1) / denom) if denom else x2
        else:
            denom = g1 - g2 + 2 * d2
            min_pos = x1 - (x1 - x2) * ((g1 + d2 - d1) / denom) if denom else x1
        if not math.isfinite(min_pos):
            return (xmin_bound + xmax_bound) / 2.0
        return min(max(min_pos, xmin_bound), xmax_bound)
    return (xmin_bound + xmax_bound) / 2.0


def _strong_wolfe(
    obj: Objective,
    x: torch.Tensor,
    t: float,
    d: torch.Tensor,
    f: float,
    g: torch.Tensor,
    gtd: float,
    c1: float,
    c2: float,
    tolerance_change: float,
    max_ls: int,
) -> Tuple[float, torch.Tensor, float, int]:
    """Step length satisfying the strong Wolfe conditions along ``d``.

    Returns the loss and gradient at the chosen step, the step, and the number
    of objective evaluations.
    """
    d_norm = float(d.abs().max())
    f_new, g_new = obj(x + t * d)
    ls_func_evals = 1
    gtd_new = float(g_new.dot(d))

    t_prev, f_prev, g_prev, gtd_prev = 0.0, f, g, gtd
    done = False
    ls_iter = 0
    bracket: List[float] = []
    bracket_f: List[float] = []
    bracket_g: List[torch.Tensor] = []
    bracket_gtd: List[float] = []
    while ls_iter < max_ls:
        if f_new > f + c1 * t * gtd or (ls_iter > 1 and f_new >= f_prev):
            bracket, bracket_f = [t_prev, t], [f_prev, f_new]
            bracket_g, bracket_gtd = [g_prev, g_new], [gtd_prev, gtd_new]
            break
        if abs(gtd_new) <= -c2 * gtd:
            bracket, bracket_f, bracket_g = [t], [f_new], [g_new]
            done = True
            break
        if gtd_new >= 0:
            bracket, bracket_f = [t_prev, t], [f_prev, f_new]
            bracket_g, bracket_gtd = [g_prev, g_new], [gtd_prev, gtd_new]
            break

        # extrapolate
        min_step = t + 0.01 * (t - t_prev)
        max_step = t * 10
        tmp = t
        t = _cubic_interpolate(t_prev, f_prev, gtd_prev, t, f_new, gtd_new, bounds=(min_step, max_step))
        t_prev, f_prev, g_prev, gtd_prev = tmp, f_new, g_new, gtd_new
        f_new, g_new = obj(x + t * d)
        ls_func_evals += 1
        gtd_new = float(g_new.dot(d))
        ls_iter += 1

    if ls_iter == max_ls:
        bracket, bracket_f = [0.0, t], [f, f_new]
        bracket_g, bracket_gtd = [g, g_new], [gtd, gtd_new]

    # zoom
    insuf_progress = False
    low_pos, high_pos = (0, 1) if bracket_f[0] <= bracket_f[-1] else (1, 0)
    while not done and ls_iter < max_ls:
        if abs(bracket[1] - bracket[0]) * d_norm < tolerance_change:
            break
        t = _cubic_interpolate(
            bracket[0], bracket_f[0], bracket_gtd[0], bracket[1], bracket_f[1], bracket_gtd[1]
        )
        eps = 0.1 * (max(bracket) - min(bracket))
        if min(max(bracket) - t, t - min(bracket)) < eps:
            if insuf_progress or t >= max(bracket) or t <= min(bracket):
                if abs(t - max(bracket)) < abs(t - min(bracket)):
                    t = max(bracket) - eps
                else:
                    t = min(bracket) + eps
                insuf_progress = False
            else:
                insuf_progress = True
        else:
            insuf_progress = False

        f_new, g_new = obj(x + t * d)
        ls_func_evals += 1
        gtd_new = float(g_new.dot(d))
        ls_iter += 1

        if f_new > f + c1 * t * gtd or f_new >= bracket_f[low_pos]:
            bracket[high_pos], bracket_f[high_pos] = t, f_new
            bracket_g[high_pos], bracket_gtd[high_pos] = g_new, gtd_new
            low_pos, high_pos = (0, 1) if bracket_f[0] <= bracket_f[1] else (1, 0)
        else:
            if abs(gtd_new) <= -c2 * gtd:
                done = True
            elif gtd_new * (bracket[high_pos] - bracket[low_pos]) >= 0:
                bracket[high_pos], bracket_f[high_pos] = bracket[low_pos], bracket_f[low_pos]
                bracket_g[high_pos], bracket_gtd[high_pos] = bracket_g[low_pos], bracket_gtd[low_pos]
            bracket[low_pos], bracket_f[low_pos] = t, f_new
            bracket_g[low_pos], bracket_gtd[low_pos] = g_new, gtd_new

    if len(bracket) == 1:
        low_pos = 0
    return bracket_f[low_pos], bracket_g[low_pos], bracket[low_pos], ls_func_evals


def _safe(obj: Objective) -> Objective:
    """Treat a non-finite trial point as an infinitely bad one."""

    def wrapped(x: torch.Tensor) -> Tuple[float, torch.Tensor]:
        try:
            return obj(x)
        except (GradientError, EvaluationError):
            return math.inf, torch.zeros_like(x)

    return wrapped


def minimize_lbfgs(
    obj: Objective,
    x0: torch.Tensor,
    cfg: LBFGSConfig,
    callback: Optional[FlatCallback] = None,
    phase: str = "initial",
) -> Tuple[torch.Tensor, TrainingTrace]:
    """Minimise ``obj`` over a flat vector.

    Accepted losses never increase. Iteration stops on the gradient tolerance,
    lack of progress, ``cfg.max_iter``, a line-search failure (flagged in the
    trace) or a callback asking to stop. The best iterate is returned.
    """
    trace = TrainingTrace(phase=phase)
    x = x0.detach().clone()
    loss, g = obj(x)
    grad_norm = float(torch.linalg.vector_norm(g))
    if g.numel() == 0 or float(g.abs().max()) <= cfg.grad_tol:
        trace.append(TraceRow(phase, 0, loss, grad_norm, flag="converged"))
        return x, trace

    line_search = _safe(obj)
    old_s: Deque[torch.Tensor] = deque(maxlen=cfg.history_size)
    old_y: Deque[torch.Tensor] = deque(maxlen=cfg.history_size)
    rho: Deque[float] = deque(maxlen=cfg.history_size)
    h_diag = 1.0
    d = -g
    t = 0.0
    prev_g = g
    best_x, best_loss = x.clone(), loss

    for iteration in range(1, cfg.max_iter + 1):
        if iteration > 1:
            y = g - prev_g
            s = d * t
            ys = float(y.dot(s))
            if ys > 1e-10:
                old_y.append(y)
                old_s.append(s)
                rho.append(1.0 / ys)
                h_diag = ys / float(y.dot(y))
            # two-loop recursion
            q = -g
            alphas = [0.0] * len(old_s)
            for i in range(len(old_s) - 1, -1, -1):
                alphas[i] = float(old_s[i].dot(q)) * rho[i]
                q = q - alphas[i] * old_y[i]
            r = q * h_diag
            for i in range(len(old_s)):
                beta = float(old_y[i].dot(r)) * rho[i]
                r = r + (alphas[i] - beta) * old_s[i]
            d = r

        prev_g = g
        prev_loss = loss
        t = min(1.0, 1.0 / float(g.abs().sum())) if iteration == 1 else 1.0
        gtd = float(g.dot(d))
        if gtd > -cfg.tolerance_change:
            trace.append(TraceRow(phase, iteration, loss, grad_norm, flag="no_descent"))
            break

        loss_new, g_new, t, _ = _strong_wolfe(
            line_search, x, t, d, loss, g, gtd, cfg.c1, cfg.c2, cfg.tolerance_change, cfg.max_ls
        )
        if not math.isfinite(loss_new) or loss_new >= loss or t == 0.0:
            logger.warning(f"Line search failed at iteration {iteration} (loss {loss:.6e})")
            trace.append(TraceRow(phase, iteration, loss, grad_norm, flag=LINE_SEARCH_FAILED))
            break

        x = x + t * d
        loss, g = loss_new, g_new
        grad_norm = float(torch.linalg.vector_norm(g))
        if loss < best_loss:
            best_x, best_loss = x.clone(), loss

        decision = callback(iteration, x, loss, grad_norm) if callback else None
        row = TraceRow(phase, iteration, loss, grad_norm, val_l2=decision.val_l2 if decision else None)
        trace.append(row)
        if decision is not None and decision.stop:
            row.flag = EARLY_STOP
            trace.stopped_early = True
            break
        if float(g.abs().max()) <= cfg.grad_tol:
            row.flag = "converged"
            break
        if float((d * t).abs().max()) <= cfg.tolerance_change or abs(loss - prev_loss) < cfg.tolerance_change:
            row.flag = "stalled"
            break

    return best_x, trace


def lbfgs_minimize(
    loss_fn: LossFn,
    params: ParamVector,
    mask: Optional[torch.Tensor],
    cfg: LBFGSConfig,
    callback: Optional[Callable[[int, ParamVector, float, float], Optional[CallbackDecision]]] = None,
    phase: str = "initial",
) -> Tuple[ParamVector, TrainingTrace]:
    """L-BFGS over the entries of ``params`` selected by ``mask``."""
    masked = params.with_mask(params.mask if mask is None else mask)

    def obj(x: torch.Tensor) -> Tuple[float, torch.Tensor]:
        value, grad = value_and_gradient(loss_fn, masked.with_trainable(x))
        return value, grad.values

    flat_callback = None
    if callback is not None:

        def flat_callback(iteration: int, x: torch.Tensor, loss: float, grad_norm: float):
            return callback(iteration, masked.with_trainable(x), loss, grad_norm)

    best, trace = minimize_lbfgs(obj, masked.trainable_values().detach(), cfg, flat_callback, phase)
    return masked.with_trainable(best).with_mask(params.mask), trace


@dataclass
class AdamState:
    """Moment estimates of the trainable entries."""

    m: torch.Tensor
    v: torch.Tensor
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def create(cls, size: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        zeros = torch.zeros(size, dtype=torch.float64)
        return cls(m=zeros, v=zeros.clone(), lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state: AdamState, params: ParamVector, grad: GradientVector) -> Tuple[AdamState, ParamVector]:
    """One bias-corrected Adam update of the masked-in entries."""
    g = grad.values
    if g.numel() != state.m.numel() or g.numel() != params.trainable_count:
        raise ContractError(
            f"Adam state has {state.m.numel()} entries, gradient {g.numel()}, "
            f"trainable parameters {params.trainable_count}"
        )
    step = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * g
    v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = m / (1 - state.beta1**step)
    v_hat = v / (1 - state.beta2**step)
    theta = params.trainable_values().detach() - state.lr * m_hat / (torch.sqrt(v_hat) + state.eps)
    return replace(state, m=m, v=v, step=step), params.with_trainable(theta)


class StopDecision(str, Enum):
    CONTINUE = "continue"
    STOP = "stop"


@dataclass
class EarlyStopState:
    """Best validation error seen so far and the parameters that achieved it."""

    patience: int
    check_interval: int
    best_val: float = math.inf
    best_params: Optional[ParamVector] = None
    best_epoch: Optional[int] = None
    since_improvement: int = 0
    history: List[Tuple[int, float]] = field(default_factory=list)

    def due(self, epoch: int) -> bool:
        return epoch % self.check_interval == 0


def early_stop_update(state: EarlyStopState, epoch: int, val_l2: float, params: ParamVector) -> StopDecision:
    """Record a validation check; snapshot on improvement, stop after ``patience`` misses."""
    if not math.isfinite(val_l2):
        raise ContractError(f"validation error must be finite, got {val_l2}")
    state.history.append((epoch, val_l2))
    if val_l2 < state.best_val:
        state.best_val = val_l2
        state.best_params = params.clone()
        state.best_epoch = epoch
        state.since_improvement = 0
        return StopDecision.CONTINUE
    state.since_improvement += 1
    if state.since_improvement >= state.patience:
        return StopDecision.STOP
    return StopDecision.CONTINUE
