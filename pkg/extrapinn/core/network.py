"""Fully connected surrogate v(t, x) and the hard-constraint transforms.

Hidden layers use tanh except the last one, which carries the experiment's
adaptive activation. The output head is linear. The solution is recovered as
``u = A(x) + B(t, x) * v`` with A and B chosen per equation so the initial
condition (and, for Allen-Cahn and Burgers, the boundary values) hold for any
network output.
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import torch

from ..models.domain import (
    DTYPE,
    ActivationFamily,
    ActivationSpec,
    DerivBundle,
    EquationId,
    ParamLayout,
    ParamVector,
    PinnModel,
)
from .activations import init_activation
from .autodiff import Points, as_points, eval_with_derivatives

PI = math.pi

TANH = ActivationSpec(ActivationFamily.TANH, 1, torch.zeros(0, dtype=DTYPE))


def init_xavier(
    activation: ActivationSpec, seed: int, hidden_layers: int = 6, width: int = 32
) -> ParamVector:
    """Xavier-uniform weights, zero biases, activation coefficients appended."""
    layout = ParamLayout.build(hidden_layers, width, activation.coeff_count)
    generator = torch.Generator().manual_seed(seed)
    values = torch.zeros(layout.total, dtype=DTYPE)
    for layer in range(layout.layer_count):
        fan_in, fan_out = layout.widths[layer], layout.widths[layer + 1]
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        segment = layout.weight(layer)
        sample = torch.rand(segment.size, generator=generator, dtype=DTYPE)
        values[segment.slice] = (2 * sample - 1) * bound
    values[layout.af.slice] = activation.coeffs.detach()
    return ParamVector(values=values, layout=layout, mask=layout.full_mask())


def init_model(
    equation: EquationId,
    family: ActivationFamily,
    n: int,
    seed: int,
    candidates: Optional[Sequence[str]] = None,
    hidden_layers: int = 6,
    width: int = 32,
) -> PinnModel:
    """A freshly initialised model for ``equation``."""
    activation = init_activation(family, n, seed, candidates)
    params = init_xavier(activation, seed, hidden_layers, width)
    return PinnModel(equation=EquationId(equation), params=params, activation=activation, seed=seed)


def hidden_activations(model: PinnModel, params: Optional[ParamVector] = None) -> List[ActivationSpec]:
    """Per-hidden-layer activations, the last one reading its coefficients from ``params``."""
    params = model.params if params is None else params
    hidden = params.layout.hidden_layers
    return [TANH] * (hidden - 1) + [model.final_activation(params.values)]


def forward_v(
    params: ParamVector,
    acts: Sequence[ActivationSpec],
    t: Points,
    x: Points,
    t_order: int = 1,
    x_order: int = 2,
) -> DerivBundle:
    """Network output v and its requested partials."""
    return eval_with_derivatives(params, acts, t, x, t_order, x_order)


def evaluate_v(
    model: PinnModel,
    t: Points,
    x: Points,
    t_order: int = 1,
    x_order: int = 2,
    params: Optional[ParamVector] = None,
) -> DerivBundle:
    params = model.params if params is None else params
    return forward_v(params, hidden_activations(model, params), t, x, t_order, x_order)


@dataclass(frozen=True)
class Ansatz:
    """Hard-constraint transform ``u = A(x) + B(t, x) v`` of one equation."""

    equation: EquationId

    def a_jet(self, x: torch.Tensor) -> List[torch.Tensor]:
        """A and its first three x-derivatives (A does not depend on t)."""
        c, s = torch.cos(PI * x), torch.sin(PI * x)
        if self.equation == EquationId.AC:
            x2 = x * x
            return [
                x2 * c,
                2 * x * c - PI * x2 * s,
                2 * c - 4 * PI * x * s - PI**2 * x2 * c,
                -6 * PI * s - 6 * PI**2 * x * c + PI**3 * x2 * s,
            ]
        if self.equation == EquationId.BURGERS:
            return [-s, -PI * c, PI**2 * s, PI**3 * c]
        return [c, -PI * s, -(PI**2) * c, PI**3 * s]

    def b_jet(self, t: torch.Tensor, x: torch.Tensor) -> List[torch.Tensor]:
        """B, B_t, B_x, B_xx, B_xxx."""
        zero = torch.zeros_like(x)
        if self.equation == EquationId.KDV:
            return [t, torch.ones_like(t), zero, zero, zero]
        one_minus_x2 = 1 - x * x
        return [t * one_minus_x2, one_minus_x2, -2 * x * t, -2 * t, zero]


def ansatz_u(ansatz: Ansatz, v: DerivBundle, t: Points, x: Points) -> DerivBundle:
    """u and its partials from the partials of v by the product rule.

    The bundle returned has the same orders as ``v``.
    """
    t, x = as_points(t), as_points(x)
    a = ansatz.a_jet(x)
    b, b_t, b_x, b_xx, b_xxx = ansatz.b_jet(t, x)
    u = a[0] + b * v.u
    u_t = None if v.du_dt is None else b_t * v.u + b * v.du_dt
    u_x = u_xx = u_xxx = None
    if v.x_order >= 1:
        u_x = a[1] + b_x * v.u + b * v.du_dx
    if v.x_order >= 2:
        u_xx = a[2] + b_xx * v.u + 2 * b_x * v.du_dx + b * v.d2u_dx2
    if v.x_order >= 3:
        u_xxx = a[3] + b_xxx * v.u + 3 * b_xx * v.du_dx + 3 * b_x * v.d2u_dx2 + b * v.d3u_dx3
    return DerivBundle(u=u, du_dt=u_t, du_dx=u_x, d2u_dx2=u_xx, d3u_dx3=u_xxx)


def evaluate_u(
    model: PinnModel,
    t: Points,
    x: Points,
    t_order: int = 0,
    x_order: int = 0,
    params: Optional[ParamVector] = None,
) -> DerivBundle:
    """The constrained solution u of ``model`` and its requested partials."""
    v = evaluate_v(model, t, x, t_order, x_order, params)
    return ansatz_u(Ansatz(model.equation), v, t, x)


def predict(model: PinnModel, t: np.ndarray, x: np.ndarray, chunk: int = 50_000) -> np.ndarray:
    """u at arbitrary points as a numpy array, evaluated without autograd."""
    t_flat = torch.as_tensor(np.ravel(t), dtype=DTYPE)
    x_flat = torch.as_tensor(np.ravel(x), dtype=DTYPE)
    out = []
    with torch.no_grad():
        for start in range(0, t_flat.numel(), chunk):
            sl = slice(start, start + chunk)
            out.append(evaluate_u(model, t_flat[sl], x_flat[sl]).u)
    values = torch.cat(out) if out else torch.zeros(0, dtype=DTYPE)
    return values.numpy().reshape(np.shape(t))
