"""Exact network derivatives and parameter gradients.

The network is evaluated on truncated Taylor jets in (t, x): every layer
carries its activations together with their first time derivative and up to
three spatial derivatives, combined by the chain rule with the analytic
activation derivatives. Parameter gradients are taken by torch reverse mode
over that jet computation, so derivative terms inside a residual are
differentiated exactly.
"""

from typing import Callable, List, Optional, Sequence, Tuple, Union

import torch
from loguru import logger

from ..errors import ContractError, EvaluationError, GradientError
from ..models.domain import DTYPE, ActivationSpec, DerivBundle, GradientVector, ParamVector
from .activations import apply_derivs

Points = Union[float, Sequence[float], torch.Tensor]

# A jet entry of None is an identically zero derivative.
Jet = List[Optional[torch.Tensor]]


def as_points(values: Points) -> torch.Tensor:
    """Coerce scalars and sequences to a 1-D float64 tensor."""
    if isinstance(values, torch.Tensor):
        return values.to(DTYPE).reshape(-1)
    return torch.as_tensor(values, dtype=DTYPE).reshape(-1)


def _check_finite(params: ParamVector, t: torch.Tensor, x: torch.Tensor) -> None:
    if not bool(torch.isfinite(t).all() and torch.isfinite(x).all()):
        raise EvaluationError("non-finite evaluation point", layer="input")
    values = params.values.detach()
    if bool(torch.isfinite(values).all()):
        return
    for segment in params.layout.segments:
        if not bool(torch.isfinite(values[segment.slice]).all()):
            raise EvaluationError("non-finite parameter", layer=segment.name)


def _linear(jet: Jet, weight: torch.Tensor, bias: torch.Tensor) -> Jet:
    out: Jet = [jet[0] @ weight.T + bias]
    out += [None if d is None else d @ weight.T for d in jet[1:]]
    return out


def _activate(spec: ActivationSpec, jet: Jet, order: int) -> Jet:
    """Push a pre-activation jet (z, z_t, z_x, z_xx, z_xxx) through ``spec``."""
    z, z_t, z_x, z_xx, z_xxx = jet
    s = apply_derivs(spec, z, order)
    h_t = None if z_t is None else s[1] * z_t
    h_x = h_xx = h_xxx = None
    if z_x is not None:
        h_x = s[1] * z_x
        if order >= 2:
            h_xx = s[2] * z_x * z_x
            if z_xx is not None:
                h_xx = h_xx + s[1] * z_xx
        if order >= 3:
            h_xxx = s[3] * z_x * z_x * z_x
            if z_xx is not None:
                h_xxx = h_xxx + 3 * s[2] * z_x * z_xx
            if z_xxx is not None:
                h_xxx = h_xxx + s[1] * z_xxx
    return [s[0], h_t, h_x, h_xx, h_xxx]


def eval_with_derivatives(
    params: ParamVector,
    acts: Sequence[ActivationSpec],
    t: Points,
    x: Points,
    t_order: int = 1,
    x_order: int = 2,
) -> DerivBundle:
    """Network output and its exact partials at a batch of points.

    ``acts`` holds one activation per hidden layer. The returned bundle has
    exactly the requested orders present.
    """
    if t_order not in (0, 1) or not 0 <= x_order <= 3:
        raise ContractError(f"unsupported derivative orders t={t_order}, x={x_order}")
    layout = params.layout
    if len(acts) != layout.hidden_layers:
        raise ContractError(
            f"{len(acts)} activations given for {layout.hidden_layers} hidden layers"
        )
    t, x = as_points(t), as_points(x)
    if t.shape != x.shape:
        raise ContractError("t and x must have the same number of points")
    _check_finite(params, t, x)

    batch = t.numel()
    ones = torch.ones(batch, 1, dtype=DTYPE)
    zeros = torch.zeros(batch, 1, dtype=DTYPE)
    jet: Jet = [
        torch.stack([t, x], dim=1),
        torch.cat([ones, zeros], dim=1) if t_order else None,
        torch.cat([zeros, ones], dim=1) if x_order else None,
        None,
        None,
    ]
    order = max(t_order, x_order)
    for layer, spec in enumerate(acts):
        jet = _linear(jet, params.weight(layer), params.bias(layer))
        jet = _activate(spec, jet, order)
    last = layout.layer_count - 1
    jet = _linear(jet, params.weight(last), params.bias(last))

    def column(entry: Optional[torch.Tensor]) -> torch.Tensor:
        if entry is None:
            return torch.zeros(batch, dtype=DTYPE)
        return entry[:, 0]

    return DerivBundle(
        u=column(jet[0]),
        du_dt=column(jet[1]) if t_order else None,
        du_dx=column(jet[2]) if x_order >= 1 else None,
        d2u_dx2=column(jet[3]) if x_order >= 2 else None,
        d3u_dx3=column(jet[4]) if x_order >= 3 else None,
    )


LossFn = Callable[[ParamVector], torch.Tensor]


def value_and_gradient(
    loss: LossFn, params: ParamVector, mask: Optional[torch.Tensor] = None
) -> Tuple[float, GradientVector]:
    """Loss value and its gradient with respect to the masked-in parameters.

    ``loss`` receives a ParamVector whose trainable entries are tracked by
    autograd; masked-out entries are constants.
    """
    mask = params.mask if mask is None else mask
    base = params.values.detach()
    trainable = base[mask].clone().requires_grad_(True)
    values = base.clone()
    values[mask] = trainable
    value = loss(ParamVector(values=values, layout=params.layout, mask=mask))
    if value.dim() != 0:
        raise ContractError("loss must be a scalar")
    loss_value = float(value.detach())
    if not torch.isfinite(value.detach()):
        logger.error(f"Loss evaluated to {loss_value} over {trainable.numel()} trainable parameters")
        raise GradientError("non-finite loss", loss_value)
    if not value.requires_grad:
        return loss_value, GradientVector(torch.zeros_like(trainable.detach()))
    (grad,) = torch.autograd.grad(value, trainable, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(trainable)
    return loss_value, GradientVector(grad.detach())


def loss_gradient(
    loss: LossFn, params: ParamVector, mask: Optional[torch.Tensor] = None
) -> GradientVector:
    """Gradient of ``loss`` restricted to the trainable entries of ``mask``."""
    return value_and_gradient(loss, params, mask)[1]
