"""Result models produced by training, evaluation and timing runs."""

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

from ..errors import ContractError


@dataclass
class TraceRow:
    """One optimizer iteration (L-BFGS) or epoch (Adam)."""
    phase: str  # initial | transfer
    iteration: int
    loss: float
    grad_norm: float
    val_l2: Optional[float] = None
    flag: str = ""


@dataclass
class TrainingTrace:
    """Ordered trace rows of one training phase."""
    phase: str
    rows: List[TraceRow] = field(default_factory=list)
    stopped_early: bool = False
    best_iteration: Optional[int] = None

    def append(self, row: TraceRow) -> None:
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def losses(self) -> List[float]:
        return [row.loss for row in self.rows]

    @property
    def flags(self) -> List[str]:
        return [row.flag for row in self.rows if row.flag]

    def validation_points(self) -> List[TraceRow]:
        """Rows at which the validation error was checked."""
        return [row for row in self.rows if row.val_l2 is not None]


@dataclass
class RegionReport:
    """Relative errors of a model on one region of the evaluation grid."""
    region: str
    rel_l2: float
    rel_mae: float
    points: int

    def __post_init__(self):
        if self.rel_l2 < 0 or self.rel_mae < 0:
            raise ContractError(f"relative errors must be non-negative on {self.region}")


@dataclass
class TLEffectReport:
    """Percent change in error caused by the transfer-learning phase."""
    forgetting_l2: float
    forgetting_mae: float
    reduction_l2: float
    reduction_mae: float

    @classmethod
    def from_errors(
        cls,
        seen_before: RegionReport,
        seen_after: RegionReport,
        extrap_before: RegionReport,
        extrap_after: RegionReport,
    ) -> "TLEffectReport":
        return cls(
            forgetting_l2=percent_increase(seen_before.rel_l2, seen_after.rel_l2),
            forgetting_mae=percent_increase(seen_before.rel_mae, seen_after.rel_mae),
            reduction_l2=percent_increase(extrap_after.rel_l2, extrap_before.rel_l2, base=extrap_before.rel_l2),
            reduction_mae=percent_increase(extrap_after.rel_mae, extrap_before.rel_mae, base=extrap_before.rel_mae),
        )

    def as_row(self) -> List[float]:
        return [self.forgetting_l2, self.forgetting_mae, self.reduction_l2, self.reduction_mae]


def percent_increase(before: float, after: float, base: Optional[float] = None) -> float:
    """``100 * (after - before) / base``; base defaults to ``before``."""
    base = before if base is None else base
    if base == 0:
        return 0.0 if after == before else float("inf")
    return 100.0 * (after - before) / base


@dataclass
class LayerGradNorm:
    """Gradient norms of one linear layer; ``value`` is absent when a norm is zero."""
    layer: int
    weight_norm: float
    bias_norm: float
    value: Optional[float]

    @property
    def flagged(self) -> bool:
        return self.value is None


@dataclass
class EpochDiagnostics:
    """Convergence markers extracted from an initial-training trace."""
    loss_threshold: float
    epochs_to_threshold: Optional[int]
    validation_upturn: Optional[int]


@dataclass
class RunReport:
    """Everything a single seeded run reports."""
    run_id: str
    equation: str
    activation: str
    tl_method: Optional[str]
    seed: int
    regions: Dict[str, RegionReport]
    regions_after_tl: Dict[str, RegionReport] = field(default_factory=dict)
    tl_effect: Optional[TLEffectReport] = None
    diagnostics: Optional[EpochDiagnostics] = None
    timings: Dict[str, float] = field(default_factory=dict)
    freeze_ok: Optional[bool] = None
    activation_coeffs: List[float] = field(default_factory=list)

    @property
    def has_transfer(self) -> bool:
        return bool(self.regions_after_tl)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunReport":
        data = dict(data)
        data["regions"] = {k: RegionReport(**v) for k, v in data.get("regions", {}).items()}
        data["regions_after_tl"] = {
            k: RegionReport(**v) for k, v in data.get("regions_after_tl", {}).items()
        }
        if data.get("tl_effect"):
            data["tl_effect"] = TLEffectReport(**data["tl_effect"])
        if data.get("diagnostics"):
            data["diagnostics"] = EpochDiagnostics(**data["diagnostics"])
        return cls(**data)


@dataclass
class TimingRow:
    activation: str
    with_tl: bool
    minutes: float


@dataclass
class TimingReport:
    """Wall-clock training times in the four-row layout."""
    equation: str
    hardware: str
    rows: List[TimingRow] = field(default_factory=list)

    def minutes(self, activation: str, with_tl: bool) -> Optional[float]:
        for row in self.rows:
            if row.activation == activation and row.with_tl == with_tl:
                return row.minutes
        return None
