"""Activation families for the final hidden layer.

All functions operate on float64 torch tensors of any shape. Derivatives are
analytic and written with torch primitives, so gradients with respect to the
learnable coefficients flow through them.
"""

import math
from typing import Callable, Dict, List, Optional, Sequence, Union

import torch

from ..errors import ContractError, EvaluationError
from ..models.domain import DTYPE, ActivationFamily, ActivationSpec

Number = Union[float, torch.Tensor]

_INV_SQRT_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _as_tensor(z: Number) -> torch.Tensor:
    if isinstance(z, torch.Tensor):
        return z
    return torch.as_tensor(z, dtype=DTYPE)


def gate_weights(alpha: Union[Sequence[float], torch.Tensor]) -> torch.Tensor:
    """Softmax gate of the ABU blend."""
    if not isinstance(alpha, torch.Tensor):
        alpha = torch.tensor(list(alpha), dtype=DTYPE)
    if alpha.numel() < 1:
        raise ContractError("gate needs at least one logit")
    if not bool(torch.isfinite(alpha).all()):
        raise EvaluationError("non-finite gate logits", term="gate")
    # torch.softmax subtracts the maximum before exponentiating.
    return torch.softmax(alpha, dim=0)


def _tanh(z: torch.Tensor, order: int) -> List[torch.Tensor]:
    t = torch.tanh(z)
    sech2 = 1 - t * t
    return [t, sech2, -2 * t * sech2, sech2 * (6 * t * t - 2)][: order + 1]


def _sigmoid(z: torch.Tensor, order: int) -> List[torch.Tensor]:
    s = torch.sigmoid(z)
    ds = s * (1 - s)
    return [s, ds, ds * (1 - 2 * s), ds * (1 - 6 * s + 6 * s * s)][: order + 1]


def _softplus(z: torch.Tensor, order: int) -> List[torch.Tensor]:
    # logaddexp(z, 0) = ln(1 + e^z) without overflow
    value = torch.logaddexp(z, torch.zeros_like(z))
    return ([value] + _sigmoid(z, 2))[: order + 1]


def _swish(z: torch.Tensor, order: int) -> List[torch.Tensor]:
    s = _sigmoid(z, 3)
    out = [z * s[0]]
    for k in range(1, order + 1):
        out.append(z * s[k] + k * s[k - 1])
    return out


def _gelu(z: torch.Tensor, order: int) -> List[torch.Tensor]:
    cdf = 0.5 * (1 + torch.erf(z * _INV_SQRT_2))
    pdf = torch.exp(-0.5 * z * z) * _INV_SQRT_2PI
    return [z * cdf, cdf + z * pdf, (2 - z * z) * pdf, (z * z * z - 4 * z) * pdf][: order + 1]


def _elu(z: torch.Tensor, order: int) -> List[torch.Tensor]:
    positive = z > 0
    em = torch.exp(torch.clamp(z, max=0.0))
    one = torch.ones_like(z)
    zero = torch.zeros_like(z)
    out = [torch.where(positive, z, em - 1), torch.where(positive, one, em)]
    out += [torch.where(positive, zero, em)] * 2
    return out[: order + 1]


def _sin(z: torch.Tensor, order: int) -> List[torch.Tensor]:
    s, c = torch.sin(z), torch.cos(z)
    return [s, c, -s, -c][: order + 1]


def _exp(z: torch.Tensor, order: int) -> List[torch.Tensor]:
    return [torch.exp(z)] * (order + 1)


CANDIDATES: Dict[str, Callable[[torch.Tensor, int], List[torch.Tensor]]] = {
    "gelu": _gelu,
    "elu": _elu,
    "sigmoid": _sigmoid,
    "tanh": _tanh,
    "sin": _sin,
    "exp": _exp,
    "softplus": _softplus,
    "swish": _swish,
}


def candidate_derivs(name: str, z: Number, order: int = 0) -> List[torch.Tensor]:
    """A named ABU candidate and its derivatives up to ``order``."""
    if name not in CANDIDATES:
        raise ContractError(f"unknown candidate activation {name!r}")
    return CANDIDATES[name](_as_tensor(z), order)


def _x_plus_sin_sq(z: torch.Tensor, order: int) -> List[torch.Tensor]:
    s2 = torch.sin(2 * z)
    return [z + torch.sin(z) ** 2, 1 + s2, 2 * torch.cos(2 * z), -4 * s2][: order + 1]


def _blend(terms: List[List[torch.Tensor]], order: int) -> List[torch.Tensor]:
    return [sum(term[k] for term in terms) for k in range(order + 1)]


def _abu(spec: ActivationSpec, z: torch.Tensor, order: int) -> List[torch.Tensor]:
    alpha, beta = spec.groups()
    gate = gate_weights(alpha)
    terms = []
    for i, name in enumerate(spec.candidates):
        derivs = CANDIDATES[name](beta[i] * z, order)
        terms.append([gate[i] * beta[i] ** k * derivs[k] for k in range(order + 1)])
    return _blend(terms, order)


def _linear_combination(
    parent: Callable[[torch.Tensor, int], List[torch.Tensor]],
    spec: ActivationSpec,
    z: torch.Tensor,
    order: int,
) -> List[torch.Tensor]:
    w, a, b = spec.groups()
    terms = []
    for i in range(spec.n):
        derivs = parent(a[i] * z + b[i], order)
        terms.append([w[i] * a[i] ** k * derivs[k] for k in range(order + 1)])
    return _blend(terms, order)


def _lc_x_sin_sq(spec: ActivationSpec, z: torch.Tensor, order: int) -> List[torch.Tensor]:
    a, b, c, d = spec.groups()
    terms = []
    for i in range(spec.n):
        arg = c[i] * z + d[i]
        s2 = torch.sin(2 * arg)
        term = [
            a[i] * z + b[i] * torch.sin(arg) ** 2,
            a[i] + b[i] * c[i] * s2,
            2 * b[i] * c[i] ** 2 * torch.cos(2 * arg),
            -4 * b[i] * c[i] ** 3 * s2,
        ]
        terms.append(term[: order + 1])
    return _blend(terms, order)


def apply_derivs(spec: ActivationSpec, z: Number, order: int) -> List[torch.Tensor]:
    """The activation and its derivatives at ``z``, orders ``0..order``."""
    if not 0 <= order <= 3:
        raise ContractError(f"activation derivatives are available up to order 3, got {order}")
    z = _as_tensor(z)
    family = spec.family
    if family == ActivationFamily.TANH:
        return _tanh(z, order)
    if family == ActivationFamily.X_PLUS_SIN_SQ:
        return _x_plus_sin_sq(z, order)
    if family == ActivationFamily.ABU:
        return _abu(spec, z, order)
    if family == ActivationFamily.LCTANH:
        return _linear_combination(_tanh, spec, z, order)
    if family == ActivationFamily.LCSIN:
        return _linear_combination(_sin, spec, z, order)
    return _lc_x_sin_sq(spec, z, order)


def apply(spec: ActivationSpec, z: Number) -> torch.Tensor:
    """Evaluate the activation at ``z``."""
    return apply_derivs(spec, z, 0)[0]


def init_activation(
    family: ActivationFamily,
    n: int = 1,
    seed: int = 0,
    candidates: Optional[Sequence[str]] = None,
) -> ActivationSpec:
    """Initial coefficients that keep the blend close to its single-term parent.

    Shifts are drawn uniformly from [-0.1, 0.1] with a generator seeded by
    ``seed``; every other coefficient is deterministic.
    """
    family = ActivationFamily(family)
    generator = torch.Generator().manual_seed(seed)

    def shifts() -> torch.Tensor:
        return torch.rand(n, generator=generator, dtype=DTYPE) * 0.2 - 0.1

    ones = torch.ones(n, dtype=DTYPE)
    if family in (ActivationFamily.TANH, ActivationFamily.X_PLUS_SIN_SQ):
        coeffs = torch.zeros(0, dtype=DTYPE)
    elif family == ActivationFamily.ABU:
        coeffs = torch.cat([torch.zeros(n, dtype=DTYPE), ones])
        return ActivationSpec(family, n, coeffs, tuple(candidates or ()))
    elif family in (ActivationFamily.LCTANH, ActivationFamily.LCSIN):
        coeffs = torch.cat([ones / n, ones, shifts()])
    else:
        coeffs = torch.cat([ones / n, ones / n, ones, shifts()])
    return ActivationSpec(family, n, coeffs)
