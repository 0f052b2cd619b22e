"""Persistence of models, reference grids, traces and reports.

Binary artifacts share one layout: a magic line, a single-line JSON header
and a little-endian float64 payload. Tabular artifacts are CSV files written
with pandas.
"""

import json
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np
import pandas as pd
import torch
from loguru import logger

from ..errors import ConfigError
from ..models.domain import (
    DTYPE,
    ActivationFamily,
    ActivationSpec,
    CollocationSet,
    EquationId,
    ParamLayout,
    ParamVector,
    PinnModel,
    ReferenceGrid,
)
from ..models.results import RunReport, TraceRow, TrainingTrace

MODEL_MAGIC = b"EXTRAPINN-MODEL 1\n"
GRID_MAGIC = b"EXTRAPINN-GRID 1\n"


def _write_binary(path: Path, magic: bytes, header: Dict[str, Any], payload: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header_line = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"
    path.write_bytes(magic + header_line + np.ascontiguousarray(payload, dtype="<f8").tobytes())


def _read_binary(path: Path, magic: bytes) -> Tuple[Dict[str, Any], np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"File not found: {path}")
    raw = path.read_bytes()
    if not raw.startswith(magic):
        raise ConfigError(f"{path} is not a {magic.decode().split()[0]} file")
    body = raw[len(magic):]
    end = body.find(b"\n")
    if end < 0:
        raise ConfigError(f"{path} has no header line")
    try:
        header = json.loads(body[:end].decode("utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"Unreadable header in {path}: {e}") from e
    payload = np.frombuffer(body[end + 1:], dtype="<f8").astype(np.float64)
    return header, payload


def save_model(model: PinnModel, path: Path) -> None:
    """Write a model checkpoint."""
    header = {
        "equation": model.equation.value,
        "family": model.activation.family.value,
        "n": model.activation.n,
        "candidates": list(model.activation.candidates),
        "seed": model.seed,
        "layout": model.params.layout.to_dict(),
        "metadata": model.metadata,
    }
    _write_binary(path, MODEL_MAGIC, header, model.params.values.detach().numpy())
    logger.debug(f"Saved model checkpoint to {path}")


def load_model(path: Path) -> PinnModel:
    header, payload = _read_binary(path, MODEL_MAGIC)
    try:
        layout = ParamLayout.from_dict(header["layout"])
        if payload.size != layout.total:
            raise ConfigError(f"{path} holds {payload.size} parameters, layout needs {layout.total}")
        values = torch.from_numpy(payload.copy()).to(DTYPE)
        activation = ActivationSpec(
            family=ActivationFamily(header["family"]),
            n=int(header["n"]),
            coeffs=values[layout.af.slice].clone(),
            candidates=tuple(header.get("candidates", ())),
        )
        return PinnModel(
            equation=EquationId(header["equation"]),
            params=ParamVector(values=values, layout=layout, mask=layout.full_mask()),
            activation=activation,
            seed=int(header["seed"]),
            metadata=header.get("metadata", {}),
        )
    except (KeyError, ValueError) as e:
        raise ConfigError(f"Invalid model checkpoint {path}: {e}") from e


def save_grid(grid: ReferenceGrid, path: Path) -> None:
    """Write a reference grid; x and t are stored as their uniform ranges."""
    header = {
        "equation": grid.equation.value,
        "nx": grid.nx,
        "nt": grid.nt,
        "x_range": [float(grid.x[0]), float(grid.x[-1])],
        "t_range": [float(grid.t[0]), float(grid.t[-1])],
        **grid.metadata,
    }
    _write_binary(path, GRID_MAGIC, header, grid.u)
    logger.info(f"Saved {grid.equation.value} reference grid ({grid.nt}x{grid.nx}) to {path}")


def load_grid(path: Path) -> ReferenceGrid:
    header, payload = _read_binary(path, GRID_MAGIC)
    try:
        nx, nt = int(header["nx"]), int(header["nt"])
        if payload.size != nx * nt:
            raise ConfigError(f"{path} holds {payload.size} values, header announces {nt}x{nx}")
        metadata = {k: v for k, v in header.items() if k not in ("equation", "nx", "nt", "x_range", "t_range")}
        return ReferenceGrid(
            equation=EquationId(header["equation"]),
            x=np.linspace(*header["x_range"], nx),
            t=np.linspace(*header["t_range"], nt),
            u=payload.reshape(nt, nx),
            metadata=metadata,
        )
    except (KeyError, ValueError) as e:
        raise ConfigError(f"Invalid reference grid {path}: {e}") from e


def read_csv(path: Path, **kwargs: Any) -> pd.DataFrame:
    """Read a CSV written by this module; floats parse back bit-exactly."""
    return pd.read_csv(path, float_precision="round_trip", **kwargs)


def export_grid_csv(grid: ReferenceGrid, path: Path) -> None:
    """Long-format CSV export (t, x, u) of a reference grid."""
    tt, xx = np.meshgrid(grid.t, grid.x, indexing="ij")
    frame = pd.DataFrame({"t": tt.ravel(), "x": xx.ravel(), "u": grid.u.ravel()})
    frame.to_csv(path, index=False, float_format="%.17g")


def write_trace_csv(trace: TrainingTrace, path: Path) -> None:
    columns = ["phase", "iteration", "loss", "grad_norm", "val_l2", "flag"]
    frame = pd.DataFrame([vars(row) for row in trace.rows], columns=columns)
    frame.to_csv(path, index=False, float_format="%.17g")


def read_trace_csv(path: Path) -> TrainingTrace:
    frame = read_csv(path, keep_default_na=False, na_values={"val_l2": [""]})
    phase = str(frame["phase"].iloc[0]) if len(frame) else Path(path).stem
    trace = TrainingTrace(phase=phase)
    for record in frame.to_dict("records"):
        val = record["val_l2"]
        trace.append(
            TraceRow(
                phase=str(record["phase"]),
                iteration=int(record["iteration"]),
                loss=float(record["loss"]),
                grad_norm=float(record["grad_norm"]),
                val_l2=None if pd.isna(val) else float(val),
                flag=str(record["flag"]),
            )
        )
    return trace


def write_points_csv(points: CollocationSet, residual_sq: torch.Tensor, path: Path) -> None:
    frame = pd.DataFrame(
        {
            "t": points.t.detach().numpy(),
            "x": points.x.detach().numpy(),
            "residual_sq": residual_sq.detach().numpy(),
        }
    )
    frame.to_csv(path, index=False, float_format="%.17g")


def read_points_csv(path: Path) -> pd.DataFrame:
    return read_csv(path)


def write_json(data: Dict[str, Any], path: Path) -> None:
    Path(path).write_text(json.dumps(data, indent=2, default=str), encoding="utf-8")


def read_json(path: Path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"File not found: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def save_report(report: RunReport, path: Path) -> None:
    write_json(report.to_dict(), path)


def load_report(path: Path) -> RunReport:
    return RunReport.from_dict(read_json(path))


class RunStore:
    """File layout of one seeded run."""

    CONFIG = "config.json"
    MODEL_INITIAL = "model_initial.bin"
    MODEL_TRANSFER = "model_transfer.bin"
    TRACE_INITIAL = "trace_initial.csv"
    TRACE_TRANSFER = "trace_transfer.csv"
    SELECTED_POINTS = "selected_points.csv"
    REPORT = "report.json"
    METRICS = "metrics.csv"
    LOG = "run.log"

    def __init__(self, root: Path):
        self.root = Path(root)

    @classmethod
    def for_seed(cls, experiment_dir: Path, seed: int) -> "RunStore":
        return cls(Path(experiment_dir) / f"seed_{seed}")

    def ensure(self) -> "RunStore":
        self.root.mkdir(parents=True, exist_ok=True)
        return self

    def path(self, name: str) -> Path:
        return self.root / name

    def has(self, name: str) -> bool:
        return self.path(name).exists()
