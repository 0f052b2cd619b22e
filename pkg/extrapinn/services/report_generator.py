"""Report generator for result tables built from run reports."""

import re
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd
from jinja2 import Environment, FileSystemLoader
from loguru import logger

from ..errors import ConfigError
from ..models.domain import FAMILY_LABELS, EquationId, Region, TLMethod
from ..models.results import RunReport, TimingReport
from . import metrics
from .storage import RunStore, load_report

# Published extrapolation L2 errors of competing methods.
BASELINES: Dict[EquationId, Dict[str, float]] = {
    EquationId.AC: {"SA-PINN": 0.18, "w-s PINN": 0.14, "DPM": 0.18},
    EquationId.KDV: {"s-d PINN": 0.14},
    EquationId.BURGERS: {"SA-PINN": 0.08, "DPM": 0.09},
}

EQUATION_TITLES = {
    EquationId.AC: "Allen-Cahn",
    EquationId.KDV: "Korteweg-de Vries",
    EquationId.BURGERS: "Burgers",
}

TL_METHOD_LABELS = {TLMethod.VANILLA: "Vanilla TL", TLMethod.L2: "L2 reg.", TLMethod.EWC: "EWC"}

METRICS_COLUMNS = ["run_id", "equation", "activation", "tl_method", "phase", "region", "rel_l2", "rel_mae"]

ABSENT = "n/a"


def file_slug(label: str) -> str:
    """Lower-case ASCII form of an activation label for use in file names."""
    return re.sub(r"[^a-z0-9]+", "-", label.lower()).strip("-")


@dataclass
class Cell:
    """Seed statistics of one table entry; ``mean`` is None when no run fills it."""

    mean: Optional[float] = None
    std: Optional[float] = None
    n: int = 0

    @classmethod
    def of(cls, values: Sequence[float]) -> "Cell":
        if not values:
            return cls()
        arr = np.asarray(values, dtype=float)
        return cls(float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0, int(arr.size))

    @property
    def present(self) -> bool:
        return self.mean is not None

    def fmt(self, digits: int = 4) -> str:
        return ABSENT if self.mean is None else f"{self.mean:.{digits}f}"


@dataclass
class ResultsRow:
    activation: str
    without_tl: Dict[str, Cell] = field(default_factory=dict)
    with_tl: Dict[str, Cell] = field(default_factory=dict)


@dataclass
class TLEffectRow:
    method: str
    per_seed: Dict[str, Cell] = field(default_factory=dict)
    of_means: Dict[str, Optional[float]] = field(default_factory=dict)


def collect_reports(run_dirs: Iterable[Path]) -> List[RunReport]:
    """Load every ``report.json`` under the given run or experiment directories."""
    reports = []
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        if not run_dir.exists():
            raise ConfigError(f"Run directory not found: {run_dir}")
        found = sorted(run_dir.rglob(RunStore.REPORT))
        if not found:
            logger.warning(f"No run reports under {run_dir}")
        reports.extend(load_report(path) for path in found)
    logger.info(f"Collected {len(reports)} run reports")
    return reports


def _extrapolation(reports: Sequence[RunReport], after_tl: bool) -> Dict[str, Cell]:
    key = Region.EXTRAPOLATION.value
    regions = [r.regions_after_tl if after_tl else r.regions for r in reports]
    rows = [reg[key] for reg in regions if key in reg]
    return {
        "rel_l2": Cell.of([row.rel_l2 for row in rows]),
        "rel_mae": Cell.of([row.rel_mae for row in rows]),
    }


def results_table(
    reports: Sequence[RunReport],
    equation: EquationId,
    tl_method: TLMethod = TLMethod.L2,
    activations: Optional[Sequence[str]] = None,
) -> List[ResultsRow]:
    """Extrapolation errors per activation, without and with transfer learning.

    The without-TL column pools every run of the activation; the with-TL
    column uses runs transferred with ``tl_method``.
    """
    equation = EquationId(equation)
    mine = [r for r in reports if r.equation == equation.value]
    if activations is None:
        present = {r.activation for r in mine}
        activations = [label for label in FAMILY_LABELS.values() if label in present]
    rows = []
    for label in activations:
        runs = [r for r in mine if r.activation == label]
        transferred = [r for r in runs if r.has_transfer and r.tl_method == TLMethod(tl_method).value]
        rows.append(
            ResultsRow(
                activation=label,
                without_tl=_extrapolation(_one_per_seed(runs), after_tl=False),
                with_tl=_extrapolation(transferred, after_tl=True),
            )
        )
    return rows


def _one_per_seed(reports: Sequence[RunReport]) -> List[RunReport]:
    # Transfer runs of several methods share one phase-1 model per seed.
    by_seed: Dict[int, RunReport] = {}
    for report in reports:
        by_seed.setdefault(report.seed, report)
    return [by_seed[seed] for seed in sorted(by_seed)]


def comparison_table(rows: Sequence[ResultsRow], equation: EquationId) -> List[Dict[str, object]]:
    """Best with-TL activation next to the published baselines."""
    equation = EquationId(equation)
    entries: List[Dict[str, object]] = [
        {"method": name, "rel_l2": Cell(value), "published": True}
        for name, value in BASELINES[equation].items()
    ]
    filled = [row for row in rows if row.with_tl.get("rel_l2", Cell()).present]
    if filled:
        best = min(filled, key=lambda row: row.with_tl["rel_l2"].mean)
        entries.append({"method": f"{best.activation} + TL", "rel_l2": best.with_tl["rel_l2"], "published": False})
    return entries


def tl_effect_table(reports: Sequence[RunReport], equation: EquationId, activation: Optional[str] = None) -> List[TLEffectRow]:
    """Forgetting and extrapolation-improvement percentages per TL method."""
    equation = EquationId(equation)
    rows = []
    for method in TLMethod:
        runs = [
            r
            for r in reports
            if r.equation == equation.value
            and r.tl_method == method.value
            and r.tl_effect is not None
            and (activation is None or r.activation == activation)
        ]
        if not runs:
            continue
        effects = np.array([r.tl_effect.as_row() for r in runs])
        names = ("forgetting_l2", "forgetting_mae", "reduction_l2", "reduction_mae")
        summary = metrics.summarize_runs(runs)
        rows.append(
            TLEffectRow(
                method=TL_METHOD_LABELS[method],
                per_seed={name: Cell.of(list(effects[:, i])) for i, name in enumerate(names)},
                of_means=dict(summary.get("tl_effect_of_means", {})),
            )
        )
    return rows


def metrics_rows(reports: Sequence[RunReport]) -> pd.DataFrame:
    """Long-format metric rows, one per run, phase and region."""
    records = []
    for report in reports:
        phases = [("before_tl" if report.has_transfer else "initial", report.regions)]
        if report.has_transfer:
            phases.append(("after_tl", report.regions_after_tl))
        for phase, regions in phases:
            for region in regions.values():
                records.append(
                    {
                        "run_id": report.run_id,
                        "equation": report.equation,
                        "activation": report.activation,
                        "tl_method": report.tl_method or "",
                        "phase": phase,
                        "region": region.region,
                        "rel_l2": region.rel_l2,
                        "rel_mae": region.rel_mae,
                    }
                )
    return pd.DataFrame(records, columns=METRICS_COLUMNS)


class ReportGenerator:
    """Service for rendering result tables from run reports."""

    def __init__(self, output_dir: str):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.jinja_env = Environment(
            loader=FileSystemLoader(Path(__file__).parent.parent / "templates"),
            autoescape=False,
            trim_blocks=True,
            lstrip_blocks=True,
        )

    def _render(self, template_name: str, filename: str, **data) -> Path:
        template = self.jinja_env.get_template(template_name)
        content = template.render(timestamp=datetime.now().strftime("%Y-%m-%d %H:%M:%S"), absent=ABSENT, **data)
        path = self.output_dir / filename
        path.write_text(content, encoding="utf-8")
        logger.info(f"Table written: {path}")
        return path

    def write_results_table(
        self,
        reports: Sequence[RunReport],
        equation: EquationId,
        tl_method: TLMethod = TLMethod.L2,
        activations: Optional[Sequence[str]] = None,
    ) -> Path:
        equation = EquationId(equation)
        rows = results_table(reports, equation, tl_method, activations)
        try:
            return self._render(
                "results_table.md.j2",
                f"results_{equation.value}.md",
                title=EQUATION_TITLES[equation],
                tl_method=TL_METHOD_LABELS[TLMethod(tl_method)],
                rows=rows,
            )
        except Exception as e:
            logger.error(f"Failed to generate results table: {e}")
            raise

    def write_comparison_table(self, reports: Sequence[RunReport], equation: EquationId) -> Path:
        equation = EquationId(equation)
        entries = comparison_table(results_table(reports, equation), equation)
        return self._render(
            "comparison_table.md.j2",
            f"comparison_{equation.value}.md",
            title=EQUATION_TITLES[equation],
            entries=entries,
        )

    def write_tl_effect_table(
        self, reports: Sequence[RunReport], equation: EquationId, activation: Optional[str] = None
    ) -> Path:
        equation = EquationId(equation)
        rows = tl_effect_table(reports, equation, activation)
        stem = f"tl_effect_{equation.value}_{file_slug(activation)}" if activation else f"tl_effect_{equation.value}"
        return self._render(
            "tl_effect_table.md.j2",
            f"{stem}.md",
            title=EQUATION_TITLES[equation],
            activation=activation,
            rows=rows,
        )

    def write_timing_table(self, timing: TimingReport) -> Path:
        equation = EquationId(timing.equation)
        rows = [
            {"activation": activation, "with_tl": with_tl, "minutes": timing.minutes(activation, with_tl)}
            for activation in dict.fromkeys(row.activation for row in timing.rows)
            for with_tl in (False, True)
        ]
        return self._render(
            "timing_table.md.j2",
            f"timing_{equation.value}.md",
            title=EQUATION_TITLES[equation],
            hardware=timing.hardware,
            rows=rows,
        )

    def write_metrics_csv(self, reports: Sequence[RunReport], filename: str = RunStore.METRICS) -> Path:
        path = self.output_dir / filename
        metrics_rows(reports).to_csv(path, index=False, float_format="%.17g")
        logger.info(f"Metrics written: {path}")
        return path

    def generate_all(
        self,
        reports: Sequence[RunReport],
        tl_method: TLMethod = TLMethod.L2,
        activations: Optional[Sequence[str]] = None,
    ) -> List[Path]:
        """Every table the reports can fill, grouped by equation."""
        written = [self.write_metrics_csv(reports)]
        for equation in EquationId:
            mine = [r for r in reports if r.equation == equation.value]
            if not mine:
                continue
            written.append(self.write_results_table(mine, equation, tl_method, activations))
            written.append(self.write_comparison_table(mine, equation))
            transferred = [r for r in mine if r.tl_effect is not None]
            for activation in dict.fromkeys(r.activation for r in transferred):
                if activations is None or activation in activations:
                    written.append(self.write_tl_effect_table(transferred, equation, activation))
        return written
