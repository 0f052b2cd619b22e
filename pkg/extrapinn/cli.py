"""Command-line interface for reference generation, training, tables and figures."""

import asyncio
import sys
from pathlib import Path
from typing import List, Optional, Tuple

import click
import torch
from loguru import logger
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from .config.settings import ExperimentConfig, Settings
from .core.experiment_orchestrator import ExperimentOrchestrator
from .core.pde import get_problem, sample_boundary_times, sample_collocation
from .errors import ConfigError, ExtrapinnError
from .models.domain import EquationId, Region, TLMethod
from .models.results import RunReport
from .services import metrics
from .services.plot_generator import PlotGenerator
from .services.report_generator import ReportGenerator, collect_reports
from .services.storage import load_grid, load_model, read_points_csv

console = Console()

config_file_option = click.option("--config-file", "-c", help="Path to an env file with EXTRAPINN_ settings")
verbose_option = click.option("--verbose", "-v", is_flag=True, help="Enable verbose logging")


def _setup(config_file: Optional[str], verbose: bool) -> Settings:
    settings = Settings.load(config_file)
    logger.remove()
    log_level = "DEBUG" if verbose or settings.debug else settings.log_level
    logger.add(sys.stderr, level=log_level, format="{time:HH:mm:ss} | {level} | {message}")
    settings.log_level = log_level
    return settings


def _fail(e: Exception) -> None:
    logger.error(f"{type(e).__name__}: {e}")
    console.print(f"[red]Error: {e}[/red]")
    sys.exit(e.exit_code if isinstance(e, ExtrapinnError) else 1)


def _print_reports(title: str, reports: List[RunReport], after_tl: bool = False) -> None:
    table = Table(title=title)
    table.add_column("seed", justify="right")
    for region in metrics.REPORT_REGIONS:
        table.add_column(f"{region.value} L2", justify="right")
    table.add_column("extrap. MAE", justify="right")
    if after_tl:
        table.add_column("forgetting L2 %", justify="right")
        table.add_column("reduction L2 %", justify="right")
        table.add_column("frozen", justify="center")
    for report in reports:
        regions = report.regions_after_tl if after_tl else report.regions
        cells = [str(report.seed)] + [f"{regions[r.value].rel_l2:.4f}" for r in metrics.REPORT_REGIONS]
        cells.append(f"{regions[Region.EXTRAPOLATION.value].rel_mae:.4f}")
        if after_tl:
            effect = report.tl_effect
            cells += [f"{effect.forgetting_l2:.1f}", f"{effect.reduction_l2:.1f}", "yes" if report.freeze_ok else "NO"]
        table.add_row(*cells)
    console.print(table)
    summary = metrics.summarize_runs(reports)
    key = "regions_after_tl" if after_tl else "regions"
    extrap = summary[key][Region.EXTRAPOLATION.value]
    console.print(
        f"Mean extrapolation rel. L2 {extrap['rel_l2']['mean']:.4f} ± {extrap['rel_l2']['std']:.4f}, "
        f"rel. MAE {extrap['rel_mae']['mean']:.4f} over {extrap['rel_l2']['n']} seeds"
    )


@click.group()
def cli():
    """extrapinn - PINN extrapolation experiments with transfer learning."""
    pass


@cli.command()
@click.argument("equation", type=click.Choice([e.value for e in EquationId]))
@click.option("--out", "-o", type=click.Path(dir_okay=False), help="Output grid file")
@click.option("--nx", type=int, help="Spatial points of the evaluation grid")
@click.option("--nt", type=int, help="Time instants of the evaluation grid (including t=0)")
@click.option("--nx-internal", type=int, default=1024, show_default=True, help="Solver grid points")
@click.option("--rtol", type=float, default=1e-6, show_default=True)
@click.option("--atol", type=float, default=1e-8, show_default=True)
@click.option(
    "--convergence-nx",
    type=int,
    help="Finest grid of the convergence study (default: solver grid, at least 4x the minimum solver grid)",
)
@click.option("--csv", "csv_out", type=click.Path(dir_okay=False), help="Also export the grid as a long-format t,x,u CSV")
@config_file_option
@verbose_option
def reference(
    equation: str,
    out: Optional[str],
    nx: Optional[int],
    nt: Optional[int],
    nx_internal: int,
    rtol: float,
    atol: float,
    convergence_nx: Optional[int],
    csv_out: Optional[str],
    config_file: Optional[str],
    verbose: bool,
) -> None:
    """Generate a reference solution grid and its convergence sidecar."""
    settings = _setup(config_file, verbose)
    console.print(Panel.fit(f"[bold blue]Reference solution: {equation}[/bold blue]", border_style="blue"))
    try:
        section = {"nx_internal": nx_internal, "rtol": rtol, "atol": atol}
        if nx is not None:
            section["eval_nx"] = nx
        if nt is not None:
            if nt < 2:
                raise ConfigError("--nt must be at least 2")
            section["dt"] = 1.0 / (nt - 1)
        config = ExperimentConfig.from_dict({"equation": equation, "reference": section})
        path = Path(out) if out else config.reference_path(settings.reference_dir)
        path.parent.mkdir(parents=True, exist_ok=True)
        grid = ExperimentOrchestrator(settings).reference(
            config.equation, config.reference, path, convergence_nx, Path(csv_out) if csv_out else None
        )
        console.print(f"[green]✓[/green] {grid.nt} x {grid.nx} grid written to {path}")
        if csv_out:
            console.print(f"[green]✓[/green] CSV export written to {csv_out}")
        if "mass_drift" in grid.metadata:
            console.print(f"KdV mass drift: {grid.metadata['mass_drift']:.3e}")
    except Exception as e:
        _fail(e)


@cli.command()
@click.argument("experiment", type=click.Path(exists=True, dir_okay=False))
@config_file_option
@verbose_option
def train(experiment: str, config_file: Optional[str], verbose: bool) -> None:
    """Phase 1: train every seed of an experiment file."""
    settings = _setup(config_file, verbose)
    try:
        config = ExperimentConfig.load(experiment)
        console.print(
            Panel.fit(
                f"[bold blue]Initial training: {config.name}[/bold blue]\n"
                f"{config.equation.value}, {config.activation.family.value}, {len(config.seeds)} seeds",
                border_style="blue",
            )
        )
        reports = asyncio.run(ExperimentOrchestrator(settings).train(config))
        _print_reports(f"{config.name} (without TL)", reports)
    except Exception as e:
        _fail(e)


@cli.command()
@click.argument("experiment", type=click.Path(exists=True, dir_okay=False))
@click.option("--model-dir", "-m", type=click.Path(exists=True, file_okay=False), help="Directory of phase-1 runs")
@config_file_option
@verbose_option
def transfer(experiment: str, model_dir: Optional[str], config_file: Optional[str], verbose: bool) -> None:
    """Phase 2: transfer learning for every seed, from phase-1 checkpoints."""
    settings = _setup(config_file, verbose)
    try:
        config = ExperimentConfig.load(experiment)
        orchestrator = ExperimentOrchestrator(settings)
        source = Path(model_dir) if model_dir else orchestrator.experiment_dir(config)
        console.print(
            Panel.fit(
                f"[bold blue]Transfer learning: {config.name}[/bold blue]\n"
                f"method {config.transfer.method.value}, k={config.transfer.k}, from {source}",
                border_style="blue",
            )
        )
        reports = asyncio.run(orchestrator.transfer(config, source))
        _print_reports(f"{config.name} (with TL)", reports, after_tl=True)
        if any(r.freeze_ok is False for r in reports):
            console.print("[red]Freeze invariant violated[/red]")
            sys.exit(3)
    except Exception as e:
        _fail(e)


@cli.command()
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "-o", default="./tables", show_default=True, help="Output directory")
@click.option("--tl-method", type=click.Choice([m.value for m in TLMethod]), default=TLMethod.L2.value, show_default=True)
@click.option("--activation", "-a", multiple=True, help="Table rows (activation labels) in order")
@verbose_option
def table(run_dirs: Tuple[str, ...], out: str, tl_method: str, activation: Tuple[str, ...], verbose: bool) -> None:
    """Result, comparison and TL-effect tables from run directories."""
    _setup(None, verbose)
    try:
        reports = collect_reports(Path(d) for d in run_dirs)
        if not reports:
            raise ConfigError("No run reports found")
        written = ReportGenerator(out).generate_all(reports, TLMethod(tl_method), list(activation) or None)
        for path in written:
            console.print(f"[green]✓[/green] {path}")
    except Exception as e:
        _fail(e)


@cli.command()
@click.argument("kind", type=click.Choice(["slices", "points", "grad"]))
@click.option("--reference", "-r", "reference_path", type=click.Path(exists=True, dir_okay=False), help="Reference grid")
@click.option("--model", "-m", "models", multiple=True, help="LABEL=PATH of a model checkpoint")
@click.option("--points", "-p", "points_path", type=click.Path(exists=True, dir_okay=False), help="Selected-points CSV")
@click.option("--time", "-t", "times", multiple=True, type=float, help="Slice times (default: equation preset)")
@click.option("--n-points", type=int, default=2000, show_default=True, help="Loss points for the gradient profile")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "-o", default="./figures", show_default=True, help="Output directory")
@verbose_option
def plot(
    kind: str,
    reference_path: Optional[str],
    models: Tuple[str, ...],
    points_path: Optional[str],
    times: Tuple[float, ...],
    n_points: int,
    seed: int,
    out: str,
    verbose: bool,
) -> None:
    """SVG figures: solution slices, selected points or layer-wise gradient norms."""
    _setup(None, verbose)
    try:
        plots = PlotGenerator(out)
        if kind == "points":
            if not points_path:
                raise ConfigError("--points is required for the points plot")
            path = plots.selected_points(read_points_csv(Path(points_path)))
        else:
            loaded = {}
            for item in models:
                label, sep, model_path = item.partition("=")
                if not sep:
                    label, model_path = Path(item).stem, item
                loaded[label] = load_model(Path(model_path))
            if not loaded:
                raise ConfigError("at least one --model is required")
            if kind == "slices":
                if not reference_path:
                    raise ConfigError("--reference is required for the slices plot")
                grid = load_grid(Path(reference_path))
                slice_times = list(times) or list(ExperimentConfig(equation=grid.equation).slice_times)
                path = plots.solution_slices(grid, loaded, slice_times)
            else:
                label, model = next(iter(loaded.items()))
                problem = get_problem(model.equation)
                generator = torch.Generator().manual_seed(seed)
                points = sample_collocation(n_points, 0.0, 0.5, Region.TRAIN, generator)
                boundary_ts = sample_boundary_times(200, 0.5, generator) if problem.needs_boundary_loss else None
                profile = metrics.grad_norm_profile(problem, model, points, boundary_ts)
                path = plots.grad_norms(profile, filename=f"grad_norms_{label}.svg")
        console.print(f"[green]✓[/green] {path}")
    except Exception as e:
        _fail(e)


@cli.command()
@click.argument("experiment", type=click.Path(exists=True, dir_okay=False))
@config_file_option
@verbose_option
def timing(experiment: str, config_file: Optional[str], verbose: bool) -> None:
    """Training-time table for tanh and lctanh, with and without TL."""
    settings = _setup(config_file, verbose)
    try:
        config = ExperimentConfig.load(experiment)
        orchestrator = ExperimentOrchestrator(settings)
        report = asyncio.run(orchestrator.timing(config))
        path = ReportGenerator(str(orchestrator.experiment_dir(config))).write_timing_table(report)
        table_view = Table(title=f"Training time ({report.hardware})")
        table_view.add_column("activation")
        table_view.add_column("TL")
        table_view.add_column("minutes", justify="right")
        for row in report.rows:
            table_view.add_row(row.activation, "w/ TL" if row.with_tl else "w/o TL", f"{row.minutes:.2f}")
        console.print(table_view)
        console.print(f"[green]✓[/green] {path}")
    except Exception as e:
        _fail(e)


@cli.command()
@click.argument("experiment", required=False, type=click.Path(exists=True, dir_okay=False))
@config_file_option
def config(experiment: Optional[str], config_file: Optional[str]) -> None:
    """Show the current settings and, optionally, a fully resolved experiment file."""
    try:
        settings = Settings.load(config_file)
        console.print(Panel.fit("[bold blue]extrapinn configuration[/bold blue]", border_style="blue"))
        console.print("[bold]Settings:[/bold]")
        for key, value in settings.model_dump().items():
            console.print(f"  {key}: {value}")
        if experiment:
            console.print(f"\n[bold]Experiment {experiment}:[/bold]")
            console.print_json(ExperimentConfig.load(experiment).model_dump_json(indent=2))
    except Exception as e:
        _fail(e)


if __name__ == "__main__":
    cli()
