"""Configuration settings for extrapinn.

``Settings`` carries process-level knobs read from the environment.
``ExperimentConfig`` is the experiment file: every hyperparameter of a run has
a named key, missing keys are defaulted and equation-dependent defaults are
resolved once the file has been parsed.
"""

from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from ..errors import ConfigError
from ..models.domain import (
    CANDIDATE_NAMES,
    MIN_REFERENCE_NX,
    ActivationFamily,
    EquationId,
    L2Mode,
    TLMethod,
)


class Settings(BaseSettings):
    """Main application settings."""

    model_config = SettingsConfigDict(
        env_prefix="EXTRAPINN_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    # Application settings
    debug: bool = False
    log_level: str = "INFO"

    # Output settings
    output_dir: str = "./runs"
    reference_dir: str = "./reference"

    # Parallelism
    workers: int = Field(default=1, ge=1)
    torch_threads: int = Field(default=1, ge=1)

    @classmethod
    def load(cls, config_file: Optional[str] = None) -> "Settings":
        """Load settings from an env file or the environment."""
        if config_file and Path(config_file).exists():
            return cls(_env_file=config_file)
        return cls()

    def ensure_directories(self) -> None:
        """Ensure required directories exist."""
        Path(self.output_dir).mkdir(parents=True, exist_ok=True)
        Path(self.reference_dir).mkdir(parents=True, exist_ok=True)


# Per-equation defaults: TL learning rate, evaluation grid and ABU preset.
EQUATION_DEFAULTS: Dict[EquationId, Dict[str, Any]] = {
    EquationId.AC: {
        "tl_learning_rate": 5e-3,
        "eval_nx": 400,
        "dt": 0.005,
        "abu_candidates": ("tanh", "gelu", "sigmoid"),
        "slice_times": (0.82, 0.99),
    },
    EquationId.KDV: {
        "tl_learning_rate": 5e-2,
        "eval_nx": 500,
        "dt": 0.005,
        "abu_candidates": ("tanh", "gelu", "sin"),
        "slice_times": (0.82, 0.99),
    },
    EquationId.BURGERS: {
        "tl_learning_rate": 5e-2,
        "eval_nx": 600,
        "dt": 0.01,
        "abu_candidates": ("tanh", "gelu", "sigmoid", "sin"),
        "slice_times": (0.81, 0.98),
    },
}

DEFAULT_TERMS: Dict[ActivationFamily, int] = {
    ActivationFamily.TANH: 1,
    ActivationFamily.X_PLUS_SIN_SQ: 1,
    ActivationFamily.LCTANH: 3,
    ActivationFamily.LCSIN: 3,
    ActivationFamily.LC_X_SIN_SQ: 2,
}

TL_LAMBDA_DEFAULTS: Dict[TLMethod, float] = {
    TLMethod.VANILLA: 0.0,
    TLMethod.L2: 0.01,
    TLMethod.EWC: 0.001,
}

DESK_PROFILE: Dict[str, Dict[str, Any]] = {
    "sampling": {"n_collocation": 2000},
    "lbfgs": {"max_iter": 1500},
    "early_stopping": {"patience": 8},
}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class NetworkConfig(_Section):
    hidden_layers: int = Field(default=6, ge=1)
    width: int = Field(default=32, ge=1)


class ActivationConfig(_Section):
    family: ActivationFamily = ActivationFamily.TANH
    n: Optional[int] = Field(default=None, ge=1)
    candidates: Optional[List[str]] = None


class SplitSpec(_Section):
    t_train: float = 0.5
    t_val: float = 0.8
    t_test: float = 1.0

    @model_validator(mode="after")
    def _ordered(self) -> "SplitSpec":
        if not 0 < self.t_train < self.t_val < self.t_test:
            raise ValueError("split needs 0 < t_train < t_val < t_test")
        if self.t_test > 1.0:
            raise ValueError("t_test cannot exceed the time horizon 1.0")
        return self


class SamplingConfig(_Section):
    n_collocation: int = Field(default=8000, ge=1)
    n_boundary: int = Field(default=200, ge=1)
    # KdV boundary-time horizons; None means t_train for phase 1, t_val for TL.
    boundary_t_max_initial: Optional[float] = None
    boundary_t_max_transfer: Optional[float] = None


class LBFGSConfig(_Section):
    history_size: int = Field(default=50, ge=1)
    max_iter: int = Field(default=5000, ge=1)
    grad_tol: float = Field(default=1e-9, ge=0)
    tolerance_change: float = Field(default=1e-12, ge=0)
    c1: float = 1e-4
    c2: float = 0.9
    max_ls: int = Field(default=25, ge=1)

    @model_validator(mode="after")
    def _wolfe(self) -> "LBFGSConfig":
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("strong Wolfe constants need 0 < c1 < c2 < 1")
        return self


class EarlyStopConfig(_Section):
    check_interval: int = Field(default=10, ge=1)
    patience: int = Field(default=15, ge=1)


class TLConfig(_Section):
    method: TLMethod = TLMethod.L2
    epochs: int = Field(default=150, ge=1)
    learning_rate: Optional[float] = Field(default=None, gt=0)
    k: int = Field(default=80, ge=1)
    pool_size: int = Field(default=4000, ge=1)
    # Share of the pool drawn from the training interval; 0 keeps it validation-only.
    train_fraction: float = Field(default=0.0, ge=0.0, le=1.0)
    lam: Optional[float] = None
    l2_mode: L2Mode = L2Mode.MAGNITUDE
    fisher_points: int = Field(default=1000, ge=1)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @model_validator(mode="after")
    def _bounds(self) -> "TLConfig":
        if self.k > self.pool_size:
            raise ValueError(f"k={self.k} exceeds pool_size={self.pool_size}")
        if self.lam is not None and self.lam < 0:
            raise ValueError("lam must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        return self


class ReferenceConfig(_Section):
    nx_internal: int = Field(default=1024, ge=64)
    eval_nx: Optional[int] = Field(default=None, ge=2)
    dt: Optional[float] = Field(default=None, gt=0)
    rtol: float = Field(default=1e-6, gt=0)
    atol: float = Field(default=1e-8, gt=0)
    path: Optional[str] = None


class ExperimentConfig(_Section):
    """A complete, validated experiment description."""

    name: str = "experiment"
    profile: Literal["full", "desk"] = "full"
    equation: EquationId = EquationId.AC
    activation: ActivationConfig = Field(default_factory=ActivationConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    split: SplitSpec = Field(default_factory=SplitSpec)
    sampling: SamplingConfig = Field(default_factory=SamplingConfig)
    lbfgs: LBFGSConfig = Field(default_factory=LBFGSConfig)
    early_stopping: EarlyStopConfig = Field(default_factory=EarlyStopConfig)
    transfer: TLConfig = Field(default_factory=TLConfig)
    reference: ReferenceConfig = Field(default_factory=ReferenceConfig)
    seeds: List[int] = Field(default_factory=lambda: list(range(10)))
    output_dir: str = "./runs"

    @model_validator(mode="after")
    def _resolve(self) -> "ExperimentConfig":
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if self.profile == "desk":
            self._apply_profile(DESK_PROFILE)
        self._resolve_activation()
        minimum_nx = MIN_REFERENCE_NX[self.equation]
        if self.reference.nx_internal < minimum_nx:
            raise ValueError(
                f"{self.equation.value} reference grids need nx_internal >= {minimum_nx}, "
                f"got {self.reference.nx_internal}"
            )

        defaults = EQUATION_DEFAULTS[self.equation]
        if self.transfer.learning_rate is None:
            self.transfer.learning_rate = defaults["tl_learning_rate"]
        if self.transfer.lam is None:
            self.transfer.lam = TL_LAMBDA_DEFAULTS[self.transfer.method]
        if self.reference.eval_nx is None:
            self.reference.eval_nx = defaults["eval_nx"]
        if self.reference.dt is None:
            self.reference.dt = defaults["dt"]
        if self.sampling.boundary_t_max_initial is None:
            self.sampling.boundary_t_max_initial = self.split.t_train
        if self.sampling.boundary_t_max_transfer is None:
            self.sampling.boundary_t_max_transfer = self.split.t_val
        return self

    def _apply_profile(self, profile: Dict[str, Dict[str, Any]]) -> None:
        """Override section keys the file did not set explicitly."""
        for section_name, overrides in profile.items():
            section = getattr(self, section_name)
            for key, value in overrides.items():
                if key not in section.model_fields_set:
                    setattr(section, key, value)

    def _resolve_activation(self) -> None:
        act = self.activation
        if act.family == ActivationFamily.ABU:
            if act.candidates is None:
                act.candidates = list(EQUATION_DEFAULTS[self.equation]["abu_candidates"])
            unknown = [c for c in act.candidates if c not in CANDIDATE_NAMES]
            if unknown:
                raise ValueError(f"unknown ABU candidates {unknown}; choose from {CANDIDATE_NAMES}")
            if len(set(act.candidates)) != len(act.candidates):
                raise ValueError("ABU candidates must be distinct")
            if not 3 <= len(act.candidates) <= 6:
                raise ValueError("ABU blends between three and six candidates")
            if act.n is None:
                act.n = len(act.candidates)
            if act.n != len(act.candidates):
                raise ValueError(f"ABU n={act.n} does not match {len(act.candidates)} candidates")
            return
        if act.candidates:
            raise ValueError("candidates are only meaningful for the ABU family")
        if act.n is None:
            act.n = DEFAULT_TERMS[act.family]
        if act.family in (ActivationFamily.TANH, ActivationFamily.X_PLUS_SIN_SQ) and act.n != 1:
            raise ValueError(f"{act.family.value} has exactly one term")

    @property
    def candidates(self) -> Tuple[str, ...]:
        return tuple(self.activation.candidates or ())

    @property
    def slice_times(self) -> Tuple[float, float]:
        return EQUATION_DEFAULTS[self.equation]["slice_times"]

    def reference_path(self, reference_dir: str) -> Path:
        if self.reference.path:
            return Path(self.reference.path)
        return Path(reference_dir) / f"{self.equation.value}.grid"

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        try:
            return cls.model_validate(data)
        except ValidationError as e:
            raise ConfigError(f"Invalid experiment configuration: {e}") from e

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        """Read and validate an experiment file."""
        config_path = Path(path)
        if not config_path.exists():
            raise ConfigError(f"Experiment file not found: {path}")
        try:
            return cls.model_validate_json(config_path.read_text(encoding="utf-8"))
        except ValidationError as e:
            raise ConfigError(f"Invalid experiment configuration in {path}: {e}") from e

    def save(self, path: Path) -> None:
        Path(path).write_text(self.model_dump_json(indent=2), encoding="utf-8")
