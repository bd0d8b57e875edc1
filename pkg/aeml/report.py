"""Run reports: per-run metrics, modeled sweep-unit speedups, CSV tables and SVG plots."""
import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import yaml  # noqa: E402
from loguru import logger  # noqa: E402

from aeml import ConfigError, NumericalError  # noqa: E402
from aeml.adjoint_grad import SweepCounter  # noqa: E402
from aeml.formats import TPath, read_field  # noqa: E402
from aeml.wave_core import Grid  # noqa: E402

CSV_FIELDS = (
    "run_id",
    "backend",
    "dofs",
    "fwd",
    "adj",
    "incfwd",
    "incadj",
    "recompute",
    "compress",
    "decompress",
    "ratio_paper",
    "ratio_true",
    "rel_l2_err_pct",
    "speedup_grad",
    "speedup_hvp",
    "wall_s",
)

UNIT_WEIGHTS: Dict[str, float] = {
    "fwd": 1.0,
    "adj": 1.0,
    "incfwd": 1.0,
    "incadj": 1.0,
    "recompute": 1.0,
    "grad": 1.0,
    "hvp": 2.0,
}


def sweep_units(counter: SweepCounter, unit_weights: Optional[Dict[str, float]] = None) -> float:
    """Weighted PDE-solve units; assembly of a gradient or Hessian action counts per evaluation."""
    w = {**UNIT_WEIGHTS, **(unit_weights or {})}
    return (
        w["fwd"] * counter.forward_sweeps
        + w["adj"] * counter.adjoint_sweeps
        + w["incfwd"] * counter.incfwd_sweeps
        + w["incadj"] * counter.incadj_sweeps
        + w["recompute"] * counter.recompute_sweeps
        + w["grad"] * counter.gradient_evals
        + w["hvp"] * counter.hvp_evals
    )


def modeled_speedup(
    counters_baseline: SweepCounter,
    counters_variant: SweepCounter,
    unit_weights: Optional[Dict[str, float]] = None,
) -> float:
    variant = sweep_units(counters_variant, unit_weights)
    if variant == 0.0:
        logger.error("Variant counters hold no sweep units; speedup undefined.")
        raise NumericalError("Variant counters hold no sweep units; speedup undefined.")
    return sweep_units(counters_baseline, unit_weights) / variant


def per_evaluation_speedup(
    baseline: SweepCounter, variant: SweepCounter, evals: str, unit_weights: Optional[Dict[str, float]] = None
) -> Optional[float]:
    """Speedup of the average evaluation; `evals` is gradient_evals or hvp_evals."""
    nb, nv = getattr(baseline, evals), getattr(variant, evals)
    if not nb or not nv:
        return None
    variant_units = sweep_units(variant, unit_weights) / nv
    if variant_units == 0.0:
        return None
    return (sweep_units(baseline, unit_weights) / nb) / variant_units


@dataclass
class RunReport:
    run_id: str
    backend: str
    dofs: int
    gradient: SweepCounter = field(default_factory=SweepCounter)
    hvp: SweepCounter = field(default_factory=SweepCounter)
    ratio_paper: float = 1.0
    ratio_true: float = 1.0
    rel_l2_err_pct: Optional[float] = None
    speedup_grad: Optional[float] = None
    speedup_hvp: Optional[float] = None
    wall_s: float = 0.0
    seed: int = 0

    @property
    def total(self) -> SweepCounter:
        return self.gradient + self.hvp

    def to_row(self) -> List[str]:
        total = self.total
        values = (
            self.run_id,
            self.backend,
            self.dofs,
            total.forward_sweeps,
            total.adjoint_sweeps,
            total.incfwd_sweeps,
            total.incadj_sweeps,
            total.recompute_sweeps,
            total.compress_calls,
            total.decompress_calls,
            self.ratio_paper,
            self.ratio_true,
            self.rel_l2_err_pct,
            self.speedup_grad,
            self.speedup_hvp,
            self.wall_s,
        )
        return ["" if v is None else repr(v) if isinstance(v, float) else str(v) for v in values]

    def to_dict(self) -> Dict:
        values = asdict(self)
        values["gradient"] = asdict(self.gradient)
        values["hvp"] = asdict(self.hvp)
        return values

    @classmethod
    def from_dict(cls, values: Dict) -> "RunReport":
        values = dict(values)
        values["gradient"] = SweepCounter(**values.get("gradient", {}))
        values["hvp"] = SweepCounter(**values.get("hvp", {}))
        return cls(**values)


def save_run(report: RunReport, path: TPath) -> None:
    with open(path, "w") as out:
        yaml.safe_dump(report.to_dict(), out, sort_keys=False)


def load_run(path: TPath) -> RunReport:
    if not Path(path).is_file():
        logger.error(f"Run record {path} not found.")
        raise ConfigError(f"Run record {path} not found.")
    with open(path) as stream:
        return RunReport.from_dict(yaml.safe_load(stream))


def compare_runs(reports: Sequence[RunReport], fields: Sequence[np.ndarray], reference: int = 0) -> List[RunReport]:
    """Fill error and speedup columns against the run at index `reference`."""
    base, u_ref = reports[reference], fields[reference]
    norm = float(np.linalg.norm(u_ref))
    if norm == 0.0:
        raise NumericalError("Reference solution has zero norm.")
    for report, u in zip(reports, fields):
        report.rel_l2_err_pct = 100.0 * float(np.linalg.norm(u - u_ref)) / norm
        report.speedup_grad = per_evaluation_speedup(base.gradient, report.gradient, "gradient_evals")
        report.speedup_hvp = per_evaluation_speedup(base.hvp, report.hvp, "hvp_evals")
    return list(reports)


def write_report(reports: Sequence[RunReport], path: TPath) -> None:
    with open(path, "w", newline="") as out:
        writer = csv.writer(out)
        writer.writerow(CSV_FIELDS)
        for report in reports:
            writer.writerow(report.to_row())


def read_history(path: TPath) -> Dict[str, List[float]]:
    with open(path, newline="") as stream:
        rows = list(csv.DictReader(stream))
    return {
        "iteration": [float(r["iteration"]) for r in rows],
        "J": [float(r["J"]) for r in rows],
        "grad_norm": [float(r["grad_norm"]) for r in rows],
    }


def plot_convergence(histories: Dict[str, Dict[str, List[float]]], path: TPath) -> None:
    fig, (ax_j, ax_g) = plt.subplots(1, 2, figsize=(10, 4))
    for run_id, history in histories.items():
        ax_j.semilogy(history["iteration"], history["J"], marker="o", label=run_id)
        ax_g.semilogy(history["iteration"], history["grad_norm"], marker="o", label=run_id)
    ax_j.set_xlabel("Newton iteration")
    ax_j.set_ylabel("J")
    ax_g.set_xlabel("Newton iteration")
    ax_g.set_ylabel("|g|")
    ax_j.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_fields(grid: Grid, fields: Dict[str, np.ndarray], path: TPath) -> None:
    """Heat maps in 2D, line plots in 1D; x along the horizontal axis."""
    fig, axes = plt.subplots(1, len(fields), figsize=(4 * len(fields), 3.5), squeeze=False)
    extent = grid.extent
    for ax, (run_id, u) in zip(axes[0], fields.items()):
        if grid.dim == 1:
            ax.plot(grid.coordinates()[:, 0], u)
        else:
            image = ax.imshow(
                u.reshape(grid.shape).T,
                origin="lower",
                extent=(0.0, extent[0], 0.0, extent[1]),
                cmap="viridis",
            )
            fig.colorbar(image, ax=ax)
        ax.set_title(run_id)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def load_field(path: TPath, grid: Grid) -> np.ndarray:
    return grid.check_field(read_field(path).ravel(), f"field {path}")
