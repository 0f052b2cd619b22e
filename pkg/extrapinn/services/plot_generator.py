"""SVG figures: solution slices, selected collocation points and gradient profiles."""

from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from loguru import logger  # noqa: E402

from ..errors import ContractError  # noqa: E402
from ..models.domain import PinnModel, ReferenceGrid  # noqa: E402
from ..models.results import LayerGradNorm  # noqa: E402
from .metrics import model_sampler  # noqa: E402

plt.rcParams["figure.figsize"] = 8, 4.5
plt.rcParams["svg.hashsalt"] = "extrapinn"

LEGEND_SIZE = 10

# Line styles of the compared predictions, in legend order.
CURVE_STYLES = ["r--", "b-.", "g:", "m--", "c-."]


class PlotGenerator:
    """Service writing standalone SVG figures."""

    def __init__(self, output_dir: str):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def _save(self, fig, filename: str) -> Path:
        path = self.output_dir / filename
        fig.savefig(path, format="svg", bbox_inches="tight", metadata={"Date": None})
        plt.close(fig)
        logger.info(f"Figure written: {path}")
        return path

    def solution_slices(
        self,
        reference: ReferenceGrid,
        models: Dict[str, PinnModel],
        times: Sequence[float],
        filename: Optional[str] = None,
    ) -> Path:
        """Reference and predicted u(t, x) at fixed times, one panel per time."""
        if not models:
            raise ContractError("at least one model is needed for a slice plot")
        fig, axes = plt.subplots(1, len(times), squeeze=False, sharey=True)
        for ax, t in zip(axes[0], times):
            row = int(np.argmin(np.abs(reference.t - t)))
            ax.plot(reference.x, reference.u[row], "k-", linewidth=2, label="reference")
            tt = np.full_like(reference.x, reference.t[row])
            for style, (label, model) in zip(CURVE_STYLES * len(models), models.items()):
                ax.plot(reference.x, model_sampler(model)(tt, reference.x), style, linewidth=1.5, label=label)
            ax.set_title(f"t = {reference.t[row]:.2f}")
            ax.set_xlabel("x")
        axes[0][0].set_ylabel("u(t, x)")
        axes[0][0].legend(prop={"size": LEGEND_SIZE}, loc="best")
        filename = filename or f"slices_{reference.equation.value}.svg"
        return self._save(fig, filename)

    def selected_points(self, points: pd.DataFrame, t_bounds: Sequence[float] = (0.5, 0.8), filename: str = "selected_points.svg") -> Path:
        """Scatter of the transfer-learning points over (t, x), shaded by squared residual."""
        for column in ("t", "x", "residual_sq"):
            if column not in points.columns:
                raise ContractError(f"selected points need a '{column}' column")
        fig, ax = plt.subplots()
        scatter = ax.scatter(points["t"], points["x"], c=points["residual_sq"], cmap="viridis", s=18)
        fig.colorbar(scatter, ax=ax, label="squared residual")
        for bound in t_bounds:
            ax.axvline(bound, color="0.5", linestyle=":", linewidth=1)
        ax.set_xlim(0.0, 1.0)
        ax.set_ylim(-1.0, 1.0)
        ax.set_xlabel("t")
        ax.set_ylabel("x")
        ax.set_title(f"{len(points)} selected collocation points")
        return self._save(fig, filename)

    def grad_norms(self, profile: List[LayerGradNorm], filename: str = "grad_norms.svg") -> Path:
        """One bar per linear layer; flagged layers are drawn as empty hatched bars."""
        if not profile:
            raise ContractError("gradient profile is empty")
        fig, ax = plt.subplots()
        layers = [entry.layer for entry in profile]
        heights = [0.0 if entry.flagged else entry.value for entry in profile]
        bars = ax.bar(layers, heights, color="0.4", edgecolor="k")
        for bar, entry in zip(bars, profile):
            if entry.flagged:
                bar.set_facecolor("none")
                bar.set_hatch("//")
        ax.set_xticks(layers)
        ax.set_xlabel("layer")
        ax.set_ylabel("log |dL/dW| + log |dL/db|")
        ax.axhline(0.0, color="k", linewidth=0.8)
        return self._save(fig, filename)
