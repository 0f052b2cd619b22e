"""Experiment orchestrator: fans seeded runs out to a worker pool and writes run directories."""

import asyncio
import multiprocessing
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

import torch
from loguru import logger

from ..config.settings import ExperimentConfig, ReferenceConfig, Settings
from ..errors import ConfigError, ContractError
from ..models.domain import ActivationFamily, EquationId, ReferenceGrid
from ..models.results import RunReport, TimingReport, TimingRow
from ..services import metrics
from ..services.reference_solver import convergence_study, generate_reference, min_convergence_nx
from ..services.report_generator import metrics_rows
from ..services.storage import RunStore, export_grid_csv, load_grid, write_json
from ..services.trainer import PinnTrainer

PHASE_INITIAL = "initial"
PHASE_TRANSFER = "transfer"

TIMING_ACTIVATIONS = (ActivationFamily.TANH, ActivationFamily.LCTANH)


@dataclass
class SeedJob:
    """Picklable description of one seeded run."""

    phase: str
    config: Dict[str, Any]
    seed: int
    run_dir: str
    reference_path: str
    source_dir: Optional[str] = None
    torch_threads: int = 1
    log_level: str = "INFO"


def run_seed_job(job: SeedJob) -> Dict[str, Any]:
    """Execute one seeded run; returns the serialised RunReport.

    Runs in a worker process, so everything it needs arrives in ``job``.
    """
    torch.set_num_threads(job.torch_threads)
    store = RunStore(Path(job.run_dir)).ensure()
    sink_id = logger.add(store.path(RunStore.LOG), level=job.log_level, enqueue=False)
    try:
        config = ExperimentConfig.from_dict(job.config)
        config.save(store.path(RunStore.CONFIG))
        reference = load_grid(Path(job.reference_path))
        trainer = PinnTrainer(config, reference)
        if job.phase == PHASE_INITIAL:
            report = trainer.run_initial(job.seed, store)
        else:
            report = trainer.run_transfer(job.seed, RunStore(Path(job.source_dir)), store)
        metrics_rows([report]).to_csv(store.path(RunStore.METRICS), index=False, float_format="%.17g")
        return report.to_dict()
    except Exception as e:
        logger.error(f"Run {job.phase} seed {job.seed} failed: {e}")
        raise
    finally:
        logger.remove(sink_id)


class ExperimentOrchestrator:
    """Coordinates reference generation, training phases and timing runs."""

    def __init__(self, settings: Settings):
        self.settings = settings
        self.settings.ensure_directories()

    def experiment_dir(self, config: ExperimentConfig) -> Path:
        return Path(config.output_dir) / config.name

    def reference_path(self, config: ExperimentConfig) -> Path:
        path = config.reference_path(self.settings.reference_dir)
        if not path.exists():
            raise ConfigError(f"Reference grid not found: {path} (run `extrapinn reference {config.equation.value}` first)")
        return path

    async def _run_jobs(self, jobs: List[SeedJob]) -> List[RunReport]:
        workers = min(self.settings.workers, len(jobs))
        if workers <= 1:
            return [RunReport.from_dict(run_seed_job(job)) for job in jobs]
        loop = asyncio.get_running_loop()
        context = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=context) as pool:
            results = await asyncio.gather(*(loop.run_in_executor(pool, run_seed_job, job) for job in jobs))
        return [RunReport.from_dict(data) for data in results]

    def _job(self, phase: str, config: ExperimentConfig, seed: int, run_dir: Path, source_dir: Optional[Path] = None) -> SeedJob:
        return SeedJob(
            phase=phase,
            config=config.model_dump(mode="json"),
            seed=seed,
            run_dir=str(run_dir),
            reference_path=str(self.reference_path(config)),
            source_dir=str(source_dir) if source_dir else None,
            torch_threads=self.settings.torch_threads,
            log_level="DEBUG" if self.settings.debug else self.settings.log_level,
        )

    def _finish(self, config: ExperimentConfig, reports: List[RunReport]) -> None:
        experiment_dir = self.experiment_dir(config)
        config.save(experiment_dir / RunStore.CONFIG)
        write_json(metrics.summarize_runs(reports), experiment_dir / "summary.json")
        metrics_rows(reports).to_csv(experiment_dir / RunStore.METRICS, index=False, float_format="%.17g")

    async def train(self, config: ExperimentConfig) -> List[RunReport]:
        """Phase 1 for every seed of ``config``."""
        experiment_dir = self.experiment_dir(config)
        logger.info(f"Training {config.name}: {config.equation.value}, {len(config.seeds)} seeds -> {experiment_dir}")
        jobs = [
            self._job(PHASE_INITIAL, config, seed, RunStore.for_seed(experiment_dir, seed).root)
            for seed in config.seeds
        ]
        try:
            reports = await self._run_jobs(jobs)
        except Exception as e:
            logger.error(f"Failed to train {config.name}: {e}")
            raise
        self._finish(config, reports)
        return reports

    async def transfer(self, config: ExperimentConfig, model_dir: Path) -> List[RunReport]:
        """Phase 2 for every seed, starting from the phase-1 models in ``model_dir``."""
        model_dir = Path(model_dir)
        experiment_dir = self.experiment_dir(config)
        jobs = []
        for seed in config.seeds:
            source = RunStore.for_seed(model_dir, seed)
            if not source.has(RunStore.MODEL_INITIAL):
                raise ConfigError(f"No phase-1 model for seed {seed} in {source.root}")
            jobs.append(
                self._job(PHASE_TRANSFER, config, seed, RunStore.for_seed(experiment_dir, seed).root, source.root)
            )
        logger.info(f"Transfer learning {config.name} ({config.transfer.method.value}) for {len(jobs)} seeds")
        try:
            reports = await self._run_jobs(jobs)
        except Exception as e:
            logger.error(f"Failed transfer learning for {config.name}: {e}")
            raise
        for report in reports:
            if report.freeze_ok is False:
                logger.error(f"Freeze invariant violated in {report.run_id}")
        self._finish(config, reports)
        return reports

    def reference(
        self,
        equation: EquationId,
        cfg: ReferenceConfig,
        out: Path,
        convergence_nx: Optional[int] = None,
        csv_path: Optional[Path] = None,
    ) -> ReferenceGrid:
        """Generate and persist a reference grid with its convergence sidecar.

        The convergence grid defaults to the solver grid, raised to the
        smallest size whose coarsest level is still a valid solver grid.
        """
        equation = EquationId(equation)
        torch.set_num_threads(self.settings.torch_threads)
        nx = convergence_nx or max(cfg.nx_internal, min_convergence_nx(equation))
        if nx < min_convergence_nx(equation):
            message = (
                f"{equation.value} convergence study needs nx >= {min_convergence_nx(equation)} "
                f"so its coarsest grid stays resolved, got {nx}"
            )
            logger.error(message)
            raise ContractError(message)
        grid = generate_reference(
            equation, cfg.nx_internal, cfg.eval_nx, cfg.dt, cfg.rtol, cfg.atol, path=Path(out)
        )
        if csv_path is not None:
            export_grid_csv(grid, Path(csv_path))
            logger.info(f"Grid exported to {csv_path}")
        study = convergence_study(equation, nx, cfg.rtol, cfg.atol)
        if "mass_drift" in grid.metadata:
            study["mass_drift"] = grid.metadata["mass_drift"]
            logger.info(f"KdV mass drift on the solver grid: {study['mass_drift']:.3e}")
        sidecar = Path(out).with_suffix(".convergence.json")
        write_json(study, sidecar)
        logger.info(f"Convergence for {equation.value}: change ratio {study['ratio']:.2f} under nx doubling")
        return grid

    async def timing(self, config: ExperimentConfig) -> TimingReport:
        """Wall-clock minutes for tanh and lctanh, with and without transfer learning."""
        seed = config.seeds[0]
        rows = []
        for family in TIMING_ACTIVATIONS:
            data = config.model_dump(mode="json")
            data["name"] = f"{config.name}-timing-{family.value}"
            data["activation"] = {"family": family.value}
            data["seeds"] = [seed]
            run_config = ExperimentConfig.from_dict(data)
            initial = (await self.train(run_config))[0]
            transferred = (await self.transfer(run_config, self.experiment_dir(run_config)))[0]
            base = initial.timings["initial_seconds"] / 60.0
            label = initial.activation
            rows.append(TimingRow(activation=label, with_tl=False, minutes=base))
            rows.append(
                TimingRow(
                    activation=label, with_tl=True, minutes=base + transferred.timings["transfer_seconds"] / 60.0
                )
            )
        report = TimingReport(
            equation=config.equation.value,
            hardware=f"{platform.machine()} {platform.processor() or 'cpu'}, torch threads={self.settings.torch_threads}",
            rows=rows,
        )
        self.experiment_dir(config).mkdir(parents=True, exist_ok=True)
        write_json(
            {"equation": report.equation, "hardware": report.hardware, "rows": [vars(r) for r in rows]},
            self.experiment_dir(config) / "timing.json",
        )
        return report
