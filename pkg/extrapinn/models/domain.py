"""Domain types shared by the numerical core and the services."""

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch

from ..errors import ContractError

DTYPE = torch.float64


class EquationId(str, Enum):
    """The three benchmark equations."""

    AC = "ac"
    KDV = "kdv"
    BURGERS = "burgers"


# Smallest solver grid per equation. Burgers keeps the cell Peclet number
# max|u| h / nu at or below 2 (nu = 0.01/pi, max|u| = 1, h = 2 / (nx - 1)).
MIN_REFERENCE_NX: Dict[EquationId, int] = {
    EquationId.AC: 64,
    EquationId.KDV: 64,
    EquationId.BURGERS: 316,
}


class ActivationFamily(str, Enum):
    """Activation families available for the final hidden layer."""

    TANH = "tanh"
    X_PLUS_SIN_SQ = "x_plus_sin_sq"
    ABU = "abu"
    LCTANH = "lctanh"
    LCSIN = "lcsin"
    LC_X_SIN_SQ = "lc_x_sin_sq"


class TLMethod(str, Enum):
    VANILLA = "vanilla"
    L2 = "l2"
    EWC = "ewc"


class L2Mode(str, Enum):
    MAGNITUDE = "magnitude"
    DEVIATION = "deviation"


class Region(str, Enum):
    """Named time intervals of the space-time domain."""

    TRAIN = "train"
    VALIDATION = "validation"
    MIXED = "mixed"
    EXTRAPOLATION = "extrapolation"
    SEEN = "seen"


CANDIDATE_NAMES: Tuple[str, ...] = (
    "gelu",
    "elu",
    "sigmoid",
    "tanh",
    "sin",
    "exp",
    "softplus",
    "swish",
)

# Learnable coefficients per term of each family.
COEFFS_PER_TERM: Dict[ActivationFamily, int] = {
    ActivationFamily.TANH: 0,
    ActivationFamily.X_PLUS_SIN_SQ: 0,
    ActivationFamily.ABU: 2,
    ActivationFamily.LCTANH: 3,
    ActivationFamily.LCSIN: 3,
    ActivationFamily.LC_X_SIN_SQ: 4,
}

FAMILY_LABELS: Dict[ActivationFamily, str] = {
    ActivationFamily.TANH: "tanh",
    ActivationFamily.X_PLUS_SIN_SQ: "x+sin^2(x)",
    ActivationFamily.ABU: "ABU-PINN",
    ActivationFamily.LCTANH: "lctanh",
    ActivationFamily.LCSIN: "lcsin",
    ActivationFamily.LC_X_SIN_SQ: "lc(x+sin^2(x))",
}


@dataclass(frozen=True)
class ActivationSpec:
    """An activation family together with its learnable coefficients.

    Coefficients are stored family-major: ABU keeps all gate logits ``alpha``
    followed by all slopes ``beta``; LCTanh/LCSin keep ``w``, ``a``, ``b``;
    LCXSinSq keeps ``a``, ``b``, ``c``, ``d``. The tensor may be a view into a
    parameter vector so gradients flow through it.
    """

    family: ActivationFamily
    n: int
    coeffs: torch.Tensor
    candidates: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.n < 1:
            raise ContractError(f"activation needs n >= 1, got {self.n}")
        if self.family in (ActivationFamily.TANH, ActivationFamily.X_PLUS_SIN_SQ) and self.n != 1:
            raise ContractError(f"{self.family.value} has exactly one term")
        expected = COEFFS_PER_TERM[self.family] * self.n
        if self.coeffs.numel() != expected:
            raise ContractError(
                f"{self.family.value} with n={self.n} needs {expected} coefficients, "
                f"got {self.coeffs.numel()}"
            )
        if self.family == ActivationFamily.ABU:
            if not 3 <= self.n <= 6:
                raise ContractError(f"ABU blends 3 to 6 candidates, got {self.n}")
            if len(self.candidates) != self.n or len(set(self.candidates)) != self.n:
                raise ContractError(f"ABU needs {self.n} distinct candidates, got {self.candidates}")
            unknown = [c for c in self.candidates if c not in CANDIDATE_NAMES]
            if unknown:
                raise ContractError(f"Unknown ABU candidates: {unknown}")
        elif self.candidates:
            raise ContractError("only ABU takes candidate activations")

    @property
    def label(self) -> str:
        return FAMILY_LABELS[self.family]

    @property
    def coeff_count(self) -> int:
        return self.coeffs.numel()

    def groups(self) -> List[torch.Tensor]:
        """Split the coefficients into their per-kind groups of length n."""
        per_term = COEFFS_PER_TERM[self.family]
        return [self.coeffs[i * self.n : (i + 1) * self.n] for i in range(per_term)]

    def with_coeffs(self, coeffs: torch.Tensor) -> "ActivationSpec":
        return replace(self, coeffs=coeffs)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "family": self.family.value,
            "n": self.n,
            "coeffs": [float(c) for c in self.coeffs.detach().reshape(-1)],
            "candidates": list(self.candidates),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ActivationSpec":
        return cls(
            family=ActivationFamily(data["family"]),
            n=int(data["n"]),
            coeffs=torch.tensor(data["coeffs"], dtype=DTYPE),
            candidates=tuple(data.get("candidates", ())),
        )


@dataclass
class DerivBundle:
    """A field value and the partial derivatives requested of it.

    Entries are batched tensors aligned with the evaluation points. Only the
    requested orders are present; the rest stay ``None``.
    """

    u: torch.Tensor
    du_dt: Optional[torch.Tensor] = None
    du_dx: Optional[torch.Tensor] = None
    d2u_dx2: Optional[torch.Tensor] = None
    d3u_dx3: Optional[torch.Tensor] = None

    @property
    def t_order(self) -> int:
        return 1 if self.du_dt is not None else 0

    @property
    def x_order(self) -> int:
        order = 0
        for entry in (self.du_dx, self.d2u_dx2, self.d3u_dx3):
            if entry is None:
                break
            order += 1
        return order

    def require(self, t_order: int, x_order: int) -> None:
        """Raise if fewer derivative orders are present than needed."""
        if self.t_order < t_order or self.x_order < x_order:
            raise ContractError(
                f"derivative bundle carries (t={self.t_order}, x={self.x_order}), "
                f"needs (t={t_order}, x={x_order})"
            )


@dataclass
class GradientVector:
    """Loss sensitivities for the trainable entries of a ParamVector, in order."""

    values: torch.Tensor

    def __len__(self) -> int:
        return self.values.numel()

    def norm(self) -> float:
        return float(torch.linalg.vector_norm(self.values))


@dataclass(frozen=True)
class Segment:
    """A named contiguous slice of the flat parameter vector."""

    name: str
    offset: int
    shape: Tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 0

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.size)


@dataclass(frozen=True)
class ParamLayout:
    """Offsets of every weight matrix, bias vector and the activation segment.

    Linear layer ``i`` maps ``widths[i]`` inputs to ``widths[i + 1]`` outputs.
    The activation coefficients of the final hidden layer come last.
    """

    widths: Tuple[int, ...]
    af_size: int
    segments: Tuple[Segment, ...]

    @classmethod
    def build(cls, hidden_layers: int, width: int, af_size: int) -> "ParamLayout":
        widths = (2,) + (width,) * hidden_layers + (1,)
        segments: List[Segment] = []
        offset = 0
        for i in range(len(widths) - 1):
            weight = Segment(f"W{i + 1}", offset, (widths[i + 1], widths[i]))
            offset += weight.size
            bias = Segment(f"b{i + 1}", offset, (widths[i + 1],))
            offset += bias.size
            segments.extend([weight, bias])
        segments.append(Segment("af", offset, (af_size,)))
        return cls(widths=widths, af_size=af_size, segments=tuple(segments))

    @property
    def layer_count(self) -> int:
        """Number of linear layers, output head included."""
        return len(self.widths) - 1

    @property
    def hidden_layers(self) -> int:
        return len(self.widths) - 2

    @property
    def total(self) -> int:
        last = self.segments[-1]
        return last.offset + last.size

    def weight(self, layer: int) -> Segment:
        return self.segments[2 * layer]

    def bias(self, layer: int) -> Segment:
        return self.segments[2 * layer + 1]

    @property
    def af(self) -> Segment:
        return self.segments[-1]

    def full_mask(self) -> torch.Tensor:
        return torch.ones(self.total, dtype=torch.bool)

    def final_layer_mask(self) -> torch.Tensor:
        """Output head weights and bias plus the activation coefficients."""
        mask = torch.zeros(self.total, dtype=torch.bool)
        last = self.layer_count - 1
        mask[self.weight(last).slice] = True
        mask[self.bias(last).slice] = True
        mask[self.af.slice] = True
        return mask

    def to_dict(self) -> Dict[str, Any]:
        return {"widths": list(self.widths), "af_size": self.af_size}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ParamLayout":
        widths = tuple(int(w) for w in data["widths"])
        return cls.build(len(widths) - 2, widths[1], int(data["af_size"]))


@dataclass
class ParamVector:
    """Flat float64 parameter store with its layout and trainable mask."""

    values: torch.Tensor
    layout: ParamLayout
    mask: torch.Tensor

    def __post_init__(self):
        if self.values.dim() != 1 or self.values.numel() != self.layout.total:
            raise ContractError(
                f"parameter vector has {self.values.numel()} entries, layout needs {self.layout.total}"
            )
        if self.mask.shape != self.values.shape or self.mask.dtype != torch.bool:
            raise ContractError("trainable mask must be a boolean vector matching the parameters")

    def weight(self, layer: int) -> torch.Tensor:
        seg = self.layout.weight(layer)
        return self.values[seg.slice].view(seg.shape)

    def bias(self, layer: int) -> torch.Tensor:
        return self.values[self.layout.bias(layer).slice]

    def af_coeffs(self) -> torch.Tensor:
        return self.values[self.layout.af.slice]

    @property
    def trainable_count(self) -> int:
        return int(self.mask.sum())

    def trainable_values(self) -> torch.Tensor:
        return self.values[self.mask]

    def with_values(self, values: torch.Tensor) -> "ParamVector":
        return ParamVector(values=values, layout=self.layout, mask=self.mask)

    def with_trainable(self, trainable: torch.Tensor) -> "ParamVector":
        """Copy with the masked-in entries replaced by ``trainable``."""
        values = self.values.detach().clone()
        values[self.mask] = trainable.detach()
        return self.with_values(values)

    def with_mask(self, mask: torch.Tensor) -> "ParamVector":
        return ParamVector(values=self.values, layout=self.layout, mask=mask)

    def clone(self) -> "ParamVector":
        return ParamVector(
            values=self.values.detach().clone(), layout=self.layout, mask=self.mask.clone()
        )


@dataclass
class CollocationSet:
    """Space-time points where the residual is enforced."""

    t: torch.Tensor
    x: torch.Tensor
    region: Region

    def __post_init__(self):
        if self.t.shape != self.x.shape or self.t.dim() != 1:
            raise ContractError("collocation t and x must be matching 1-D tensors")
        if len(self) and (
            bool((self.t < 0).any())
            or bool((self.t > 1).any())
            or bool((self.x.abs() > 1).any())
        ):
            raise ContractError("collocation points must lie inside [0, 1] x [-1, 1]")

    def __len__(self) -> int:
        return self.t.numel()

    def check_region(self, t_train: float, t_val: float) -> None:
        """Verify the region tag against the point times."""
        if not len(self):
            return
        if self.region == Region.TRAIN and bool((self.t > t_train).any()):
            raise ContractError(f"training points must satisfy t <= {t_train}")
        if self.region == Region.VALIDATION and (
            bool((self.t <= t_train).any()) or bool((self.t > t_val).any())
        ):
            raise ContractError(f"validation points must satisfy {t_train} < t <= {t_val}")
        if self.region == Region.MIXED and bool((self.t > t_val).any()):
            raise ContractError(f"mixed points must satisfy t <= {t_val}")

    def subset(self, index: torch.Tensor) -> "CollocationSet":
        return CollocationSet(t=self.t[index], x=self.x[index], region=self.region)


@dataclass
class FisherDiag:
    """Diagonal Fisher importance, one entry per trainable parameter."""

    values: torch.Tensor

    def __post_init__(self):
        if bool((self.values < 0).any()):
            raise ContractError("Fisher importance must be non-negative")

    def __len__(self) -> int:
        return self.values.numel()


@dataclass
class PinnModel:
    """A trained or initialised surrogate network for one equation."""

    equation: EquationId
    params: ParamVector
    activation: ActivationSpec
    seed: int
    metadata: Dict[str, Any] = field(default_factory=dict)

    def final_activation(self, values: Optional[torch.Tensor] = None) -> ActivationSpec:
        """The adaptive activation with coefficients read from ``values``."""
        source = self.params.values if values is None else values
        return self.activation.with_coeffs(source[self.params.layout.af.slice])

    def with_params(self, params: ParamVector) -> "PinnModel":
        return PinnModel(
            equation=self.equation,
            params=params,
            activation=self.activation,
            seed=self.seed,
            metadata=dict(self.metadata),
        )


@dataclass
class Trajectory:
    """States of an integrated ODE system at the requested output times."""

    t: np.ndarray
    y: np.ndarray
    n_steps: int = 0
    n_rejected: int = 0
    nfev: int = 0
    njev: int = 0
    nlu: int = 0


@dataclass
class ReferenceGrid:
    """Dense reference solution ``u[t_index, x_index]``."""

    equation: EquationId
    x: np.ndarray
    t: np.ndarray
    u: np.ndarray
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.u.shape != (self.t.size, self.x.size):
            raise ContractError(
                f"reference array shape {self.u.shape} does not match grid ({self.t.size}, {self.x.size})"
            )
        if not np.isfinite(self.u).all():
            raise ContractError("reference grid contains non-finite values")

    @property
    def nx(self) -> int:
        return self.x.size

    @property
    def nt(self) -> int:
        return self.t.size

    def rows_between(self, lo: float, hi: float, include_lo: bool = False) -> np.ndarray:
        """Indices of the time rows in ``(lo, hi]`` (or ``[lo, hi]``)."""
        tol = 1e-9
        above = self.t >= lo - tol if include_lo else self.t > lo + tol
        return np.nonzero(above & (self.t <= hi + tol))[0]
