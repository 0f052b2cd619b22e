"""Residual operators, the training loss and collocation sampling.

Residuals are computed from the network output v directly (the transformed
equations obtained by substituting the hard-constraint ansatz). The plain
u-form operators are kept alongside for cross-checking.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import torch

from ..errors import ContractError, EvaluationError
from ..models.domain import (
    DTYPE,
    ActivationSpec,
    CollocationSet,
    DerivBundle,
    EquationId,
    ParamVector,
    PinnModel,
    Region,
)
from .autodiff import Points, as_points
from .network import Ansatz, forward_v, hidden_activations

PI = math.pi


@dataclass(frozen=True)
class PDEProblem:
    """One benchmark equation on [-1, 1] x [0, T]."""

    id: EquationId
    coefficients: Dict[str, float]
    t_order: int
    x_order: int
    needs_boundary_loss: bool
    x_range: Tuple[float, float] = (-1.0, 1.0)
    t_end: float = 1.0
    ansatz: Ansatz = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "ansatz", Ansatz(self.id))


PROBLEMS: Dict[EquationId, PDEProblem] = {
    # u_t - eps u_xx + 5 u^3 - 5 u = 0, u(0, x) = x^2 cos(pi x), u(t, +-1) = -1
    EquationId.AC: PDEProblem(
        EquationId.AC, {"eps": 0.0001, "cubic": 5.0, "linear": 5.0}, 1, 2, False
    ),
    # u_t + u u_x + 0.0025 u_xxx = 0, u(0, x) = cos(pi x), periodic in x
    EquationId.KDV: PDEProblem(EquationId.KDV, {"delta": 0.0025}, 1, 3, True),
    # u_t + u u_x - (0.01 / pi) u_xx = 0, u(0, x) = -sin(pi x), u(t, +-1) = 0
    EquationId.BURGERS: PDEProblem(EquationId.BURGERS, {"nu": 0.01 / PI}, 1, 2, False),
}


def get_problem(equation: EquationId) -> PDEProblem:
    return PROBLEMS[EquationId(equation)]


def _v_terms(problem: PDEProblem, v: DerivBundle, t: torch.Tensor, x: torch.Tensor) -> Dict[str, torch.Tensor]:
    """Named terms of the transformed equation for v; they sum to the residual."""
    v.require(problem.t_order, problem.x_order)
    c, s = torch.cos(PI * x), torch.sin(PI * x)
    if problem.id == EquationId.AC:
        k = problem.coefficients
        w = 1 - x * x
        x2 = x * x
        u = x2 * c + t * w * v.u
        return {
            "time": w * v.u + t * w * v.du_dt,
            "diffusion": -k["eps"]
            * (
                2 * c
                - 4 * PI * x * s
                - PI**2 * x2 * c
                + t * (-2 * v.u - 4 * x * v.du_dx + w * v.d2u_dx2)
            ),
            "reaction": k["cubic"] * u**3 - k["linear"] * u,
        }
    if problem.id == EquationId.KDV:
        delta = problem.coefficients["delta"]
        return {
            "time": v.u + t * v.du_dt,
            "advection": (c + t * v.u) * (-PI * s + t * v.du_dx),
            "dispersion": delta * (PI**3 * s + t * v.d3u_dx3),
        }
    nu = problem.coefficients["nu"]
    w = 1 - x * x
    return {
        "time": w * v.u + t * w * v.du_dt,
        "advection": (-s + t * w * v.u) * (-PI * c - 2 * x * t * v.u + t * w * v.du_dx),
        "diffusion": -nu * (PI**2 * s - 2 * t * v.u - 4 * x * t * v.du_dx + t * w * v.d2u_dx2),
    }


def residual_from_v(problem: PDEProblem, v: DerivBundle, t: Points, x: Points) -> torch.Tensor:
    """Residual of the transformed equation given the partials of v."""
    t, x = as_points(t), as_points(x)
    terms = _v_terms(problem, v, t, x)
    total = sum(terms.values())
    if not bool(torch.isfinite(total.detach()).all()):
        bad = int(torch.nonzero(~torch.isfinite(total.detach()))[0, 0])
        term = next(
            (name for name, value in terms.items() if not bool(torch.isfinite(value.detach()[bad]))),
            None,
        )
        raise EvaluationError(
            f"non-finite {problem.id.value} residual", point=(float(t[bad]), float(x[bad])), term=term
        )
    return total


def residual_from_u(problem: PDEProblem, u: DerivBundle) -> torch.Tensor:
    """Residual ``u_t + N(u)`` of the original equation from the partials of u."""
    u.require(problem.t_order, problem.x_order)
    k = problem.coefficients
    if problem.id == EquationId.AC:
        return u.du_dt - k["eps"] * u.d2u_dx2 + k["cubic"] * u.u**3 - k["linear"] * u.u
    if problem.id == EquationId.KDV:
        return u.du_dt + u.u * u.du_dx + k["delta"] * u.d3u_dx3
    return u.du_dt + u.u * u.du_dx - k["nu"] * u.d2u_dx2


def residual(
    problem: PDEProblem,
    params: ParamVector,
    acts: Sequence[ActivationSpec],
    t: Points,
    x: Points,
) -> torch.Tensor:
    """Residual of the network at a batch of points."""
    v = forward_v(params, acts, t, x, problem.t_order, problem.x_order)
    return residual_from_v(problem, v, t, x)


def model_residual(
    problem: PDEProblem, model: PinnModel, t: Points, x: Points, params: Optional[ParamVector] = None
) -> torch.Tensor:
    params = model.params if params is None else params
    return residual(problem, params, hidden_activations(model, params), t, x)


def boundary_residual_kdv(
    params: ParamVector, acts: Sequence[ActivationSpec], t: Points
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Periodicity mismatch ``(v(t,-1) - v(t,1), v_x(t,-1) - v_x(t,1))``."""
    t = as_points(t)
    n = t.numel()
    ts = torch.cat([t, t])
    xs = torch.cat([-torch.ones(n, dtype=DTYPE), torch.ones(n, dtype=DTYPE)])
    v = forward_v(params, acts, ts, xs, t_order=0, x_order=1)
    return v.u[:n] - v.u[n:], v.du_dx[:n] - v.du_dx[n:]


def pairwise_sum(values: torch.Tensor) -> torch.Tensor:
    """Tree reduction of a 1-D tensor."""
    while values.numel() > 1:
        if values.numel() % 2:
            values = torch.cat([values, torch.zeros(1, dtype=values.dtype)])
        values = values[0::2] + values[1::2]
    return values.reshape(()) if values.numel() else torch.zeros((), dtype=DTYPE)


def stable_mean_square(values: torch.Tensor) -> torch.Tensor:
    """Mean of squares, independent of the ordering of ``values``."""
    squares, _ = torch.sort(values * values)
    return pairwise_sum(squares) / values.numel()


def pde_loss(
    problem: PDEProblem,
    params: ParamVector,
    acts: Sequence[ActivationSpec],
    colloc: CollocationSet,
    boundary_ts: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Mean squared residual, plus the KdV periodicity terms with weight 1."""
    if not len(colloc):
        raise ContractError("collocation set is empty")
    loss = stable_mean_square(residual(problem, params, acts, colloc.t, colloc.x))
    if problem.needs_boundary_loss:
        if boundary_ts is None or boundary_ts.numel() == 0:
            raise ContractError(f"{problem.id.value} needs boundary times for its loss")
        d0, d1 = boundary_residual_kdv(params, acts, boundary_ts)
        loss = loss + stable_mean_square(d0) + stable_mean_square(d1)
    return loss


LossFn = Callable[[ParamVector], torch.Tensor]


def make_loss(
    problem: PDEProblem,
    model: PinnModel,
    colloc: CollocationSet,
    boundary_ts: Optional[torch.Tensor] = None,
) -> LossFn:
    """Loss closure over a parameter vector for the optimizers."""

    def loss(params: ParamVector) -> torch.Tensor:
        return pde_loss(problem, params, hidden_activations(model, params), colloc, boundary_ts)

    return loss


def uniform(n: int, lo: float, hi: float, generator: torch.Generator) -> torch.Tensor:
    return lo + (hi - lo) * torch.rand(n, generator=generator, dtype=DTYPE)


def sample_collocation(
    n: int,
    t_lo: float,
    t_hi: float,
    region: Region,
    generator: torch.Generator,
) -> CollocationSet:
    """Uniform points with x in [-1, 1].

    Training points take t in [t_lo, t_hi); validation points take t in
    (t_lo, t_hi] so they never touch the training interval.
    """
    u = torch.rand(n, generator=generator, dtype=DTYPE)
    if region == Region.TRAIN:
        t = t_lo + (t_hi - t_lo) * u
    else:
        t = t_hi - (t_hi - t_lo) * u
    x = uniform(n, -1.0, 1.0, generator)
    points = CollocationSet(t=t, x=x, region=region)
    if region == Region.TRAIN:
        points.check_region(t_hi, 1.0)
    else:
        points.check_region(t_lo, t_hi)
    return points


def sample_pool(
    pool_size: int,
    t_train: float,
    t_val: float,
    train_fraction: float,
    generator: torch.Generator,
) -> CollocationSet:
    """Candidate pool for high-residual selection.

    ``train_fraction`` of the pool is drawn from the training interval, the
    rest from the validation interval.
    """
    n_train = int(round(pool_size * train_fraction))
    val = sample_collocation(pool_size - n_train, t_train, t_val, Region.VALIDATION, generator)
    if n_train == 0:
        return val
    train = sample_collocation(n_train, 0.0, t_train, Region.TRAIN, generator)
    pool = CollocationSet(
        t=torch.cat([train.t, val.t]), x=torch.cat([train.x, val.x]), region=Region.MIXED
    )
    pool.check_region(t_train, t_val)
    return pool


def sample_boundary_times(n: int, t_max: float, generator: torch.Generator) -> torch.Tensor:
    return uniform(n, 0.0, t_max, generator)
