import os
from pathlib import Path
import sys
import time
from typing import Any, Dict, List, Optional

import click
from click.core import Context
from loguru import logger
import numpy as np
import pkg_resources

from aeml import (
    AemlError,
    ConfigError,
    DataError,
    FormatError,
    NumericalError,
    StorageContractError,
)
from aeml import config_yaml, datagen, dias, mlp_codec, newton_cg, report, selftest
from aeml.adjoint_grad import PriorRegularizer, SweepCounter, WaveObjective, synthesize_data
from aeml.formats import write_field
from aeml.trajectory_store import TrajectoryStore

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
DEFAULT_RUN_ROOT = "runs"
BENCH_VECTORS = 864


class LabGroup(click.Group):
    """Maps library errors to the exit codes of the lab."""

    def invoke(self, ctx: Context) -> Any:
        try:
            return super().invoke(ctx)
        except (ConfigError, FormatError, DataError) as error:
            click.echo(f'{click.style("Error!", fg="red")} {error}', err=True)
            ctx.exit(EXIT_CONFIG)
        except (NumericalError, StorageContractError) as error:
            click.echo(f'{click.style("Error!", fg="red")} {error}', err=True)
            ctx.exit(EXIT_NUMERICAL)
        except AemlError as error:
            click.echo(f'{click.style("Error!", fg="red")} {error}', err=True)
            ctx.exit(EXIT_CONFIG)


def run_root() -> Path:
    return Path(os.environ.get("AEML_RUN_DIR", DEFAULT_RUN_ROOT))


def load_config(ctx: Context) -> config_yaml.LabConfig:
    config: config_yaml.LabConfig = ctx.obj["config"]
    if config.config_file is None:
        logger.error("No --file given and no lab.yaml in the current directory.")
        raise ConfigError("No --file given and no lab.yaml in the current directory.")
    config.read_from_yaml()
    if ctx.obj["seed"] is not None:
        config.seed = ctx.obj["seed"]
    return config


def make_run_dir(run_id: str, config: config_yaml.LabConfig) -> Path:
    run_dir = run_root().joinpath(run_id)
    run_dir.mkdir(parents=True, exist_ok=True)
    config.save_to_yaml(run_dir.joinpath("config.yaml"))
    return run_dir


class TrackingFactory:
    """Store factory that remembers the most recent store for memory statistics."""

    def __init__(self, make: newton_cg.TStoreFactory) -> None:
        self.make = make
        self.last: Optional[TrajectoryStore] = None

    def __call__(self) -> Optional[TrajectoryStore]:
        self.last = self.make()
        return self.last


def summarize(history: List[newton_cg.HistoryRow]) -> Dict[str, SweepCounter]:
    gradient, hvp = SweepCounter(), SweepCounter()
    for row in history:
        gradient = gradient + row.gradient
        hvp = hvp + row.hvp
    return {"gradient": gradient, "hvp": hvp}


def inversion_problem(config: config_yaml.LabConfig):
    forward = config.forward_config()
    truth = config.truth()
    data, sigma = synthesize_data(truth, forward, config.noise_level, config.seed)
    return forward, truth, WaveObjective(forward, data, sigma)


@click.group(cls=LabGroup)
@click.version_option(
    version=Path(pkg_resources.resource_filename(__name__, "aeml/VERSION")).read_text()
)  # type: ignore
@click.option(
    "--file",
    type=click.Path(exists=True),
    help="YAML file with the lab configuration. Defaults to lab.yaml in the current directory.",
)  # type: ignore
@click.option("--seed", type=int, default=None, help="Overrides inversion.seed of the config.")  # type: ignore
@click.option("--verbose", is_flag=True, help="Log at DEBUG level.")  # type: ignore
@click.pass_context
def cli(ctx: Context, file: Optional[Path], seed: Optional[int], verbose: bool) -> None:
    logger.remove()
    logger.add(sys.stderr, level="DEBUG" if verbose else "INFO")

    config_file: Optional[Path] = None
    if file is not None:
        config_file = Path(file).absolute()
    elif Path.cwd().absolute().joinpath(config_yaml.LabConfig.DEFAULT_FILE).is_file():
        config_file = Path.cwd().absolute().joinpath(config_yaml.LabConfig.DEFAULT_FILE)

    if ctx.obj is None:
        ctx.obj = {}
    ctx.obj["config"] = config_yaml.LabConfig(config_file=config_file)
    ctx.obj["seed"] = seed


@cli.command(name="synth-data")
@click.option("--samples", type=int, default=None, help="Number of prior draws.")  # type: ignore
@click.option("--keep-fraction", "keep_fraction", type=float, default=None, help="Probability of keeping a vector.")  # type: ignore
@click.option("--out-dir", "out_dir", type=click.Path(), default=None, help="Directory for the dataset shards.")  # type: ignore
@click.pass_context
def synth_data(ctx: Context, samples: Optional[int], keep_fraction: Optional[float], out_dir: Optional[str]) -> None:
    """Generate autoencoder training data from wave solutions at prior draws."""
    config = load_config(ctx)
    target = Path(out_dir) if out_dir else config.resolve_path(config.data_dir)
    result = datagen.generate(
        config.prior(),
        config.forward_config(),
        samples or config.datagen_samples,
        keep_fraction or config.keep_fraction,
        config.seed,
        target,
        config.scheme,
        config.window,
        workers=config.workers,
    )
    click.echo(
        f"{len(result.shards)} shards, {result.kept} of {result.candidates} vectors kept, "
        f"{result.skipped} draws skipped"
    )


@cli.command()
@click.option("--data-dir", "data_dir", type=click.Path(), default=None, help="Directory with dataset shards.")  # type: ignore
@click.option("--output", type=click.Path(), default=None, help="Weight file to write.")  # type: ignore
@click.pass_context
def train(ctx: Context, data_dir: Optional[str], output: Optional[str]) -> None:
    """Train, prune and fine-tune the autoencoder."""
    config = load_config(ctx)
    source = Path(data_dir) if data_dir else config.resolve_path(config.data_dir)
    shards = sorted(source.glob("shard_*.aetd"))
    if not shards:
        logger.error(f"No dataset shards in {source}.")
        raise DataError(f"No dataset shards in {source}.")
    hparams = config.training_config()
    if ctx.obj["seed"] is not None:
        hparams.seed = ctx.obj["seed"]
    codec = mlp_codec.train(shards, config.architecture(), hparams)
    target = Path(output) if output else config.resolve_path(config.codec_file or "codec.aemw")
    mlp_codec.save(codec, target)
    mlp_codec.write_history(codec, target.with_name("training.csv"))
    click.echo(f"Codec written to {target}")


@cli.command()
@click.option(
    "--store",
    type=click.Choice(config_yaml.LabConfig.BACKENDS),
    default=None,
    help="Trajectory store backend.",
)  # type: ignore
@click.option("--eta", type=float, default=None, help="Quantizer error tolerance.")  # type: ignore
@click.option("--codec-file", "codec_file", type=click.Path(), default=None, help="Trained autoencoder weights.")  # type: ignore
@click.option("--codec-cmd", "codec_cmd", default=None, help="External quantizer command.")  # type: ignore
@click.option("--run-id", "run_id", default=None, help="Run directory name.")  # type: ignore
@click.pass_context
def invert(
    ctx: Context,
    store: Optional[str],
    eta: Optional[float],
    codec_file: Optional[str],
    codec_cmd: Optional[str],
    run_id: Optional[str],
) -> None:
    """Newton-CG MAP inversion of synthetic data under one store backend."""
    config = load_config(ctx)
    config.backend = store or config.backend
    config.eta = eta if eta is not None else config.eta
    config.codec_file = str(Path(codec_file).absolute()) if codec_file else config.codec_file
    config.codec_cmd = codec_cmd or config.codec_cmd
    config.check()
    run_id = run_id or f"{config.backend}-{config.seed}"
    run_dir = make_run_dir(run_id, config)

    start = time.perf_counter()
    forward, _, objective = inversion_problem(config)
    prior = config.prior()
    stores = TrackingFactory(config.store_factory())
    result = newton_cg.solve_map(
        objective.with_regularizer(PriorRegularizer(prior)), prior.mean, stores, config.newton_config()
    )
    wall = time.perf_counter() - start

    newton_cg.write_history(result.history, run_dir.joinpath("history.csv"))
    write_field(run_dir.joinpath("u_map.aefd"), result.u_map.reshape(forward.grid.shape))
    counters = summarize(result.history)
    stats = stores.last.stats() if stores.last is not None else None
    run = report.RunReport(
        run_id=run_id,
        backend=config.backend,
        dofs=forward.grid.node_count,
        gradient=counters["gradient"],
        hvp=counters["hvp"],
        ratio_paper=stats.compression_ratio_paper if stats else 1.0,
        ratio_true=stats.compression_ratio_true if stats else 1.0,
        wall_s=wall,
        seed=config.seed,
    )
    report.save_run(run, run_dir.joinpath("run.yaml"))
    state = "converged" if result.converged else "stagnated" if result.stagnated else "stopped"
    click.echo(f"{run_id}: {state} after {len(result.history) - 1} Newton iterations, results in {run_dir}")


@cli.command(name="dias")
@click.option("--naive", is_flag=True, help="Sample gradients around the prior mean.")  # type: ignore
@click.option("--rank", type=int, default=None, help="Active subspace dimension.")  # type: ignore
@click.option("--samples", type=int, default=None, help="Gradient samples.")  # type: ignore
@click.option("--run-id", "run_id", default=None, help="Run directory name.")  # type: ignore
@click.pass_context
def dias_command(
    ctx: Context, naive: bool, rank: Optional[int], samples: Optional[int], run_id: Optional[str]
) -> None:
    """MAP solve followed by the data-informed active subspace solve."""
    config = load_config(ctx)
    config.dias_naive = naive or config.dias_naive
    config.dias_rank = rank if rank is not None else config.dias_rank
    config.dias_samples = samples if samples is not None else config.dias_samples
    run_id = run_id or f"dias-{config.backend}-{config.seed}"
    run_dir = make_run_dir(run_id, config)

    forward, truth, objective = inversion_problem(config)
    result = dias.solve_dias(
        objective, config.prior(), config.dias_config(), config.store_factory(), truth=truth
    )
    newton_cg.write_history(result.map_result.history, run_dir.joinpath("history.csv"))
    write_field(run_dir.joinpath("u_map.aefd"), result.u_map.reshape(forward.grid.shape))
    write_field(run_dir.joinpath("u_dias.aefd"), result.u_dias.reshape(forward.grid.shape))
    if result.dias_result is not None:
        newton_cg.write_history(result.dias_result.history, run_dir.joinpath("history_dias.csv"))
    if result.basis is not None:
        dias.save_basis(result.basis, run_dir.joinpath("basis.aeas"))
    click.echo(
        f"relative error vs truth: MAP {100 * result.relerr_map:.4f}%, DIAS {100 * result.relerr_dias:.4f}%"
    )


@cli.command()
@click.option("--runs", required=True, help="Comma separated run ids; errors are relative to the first checkpoint run.")  # type: ignore
@click.option("--output", type=click.Path(), default=None, help="Directory for report.csv and plots.")  # type: ignore
@click.pass_context
def compare(ctx: Context, runs: str, output: Optional[str]) -> None:
    """Tabulate and plot finished runs."""
    run_ids = [r.strip() for r in runs.split(",") if r.strip()]
    if not run_ids:
        raise ConfigError("No run ids given.")
    reports, fields, histories = [], [], {}
    grid = None
    for run_id in run_ids:
        run_dir = run_root().joinpath(run_id)
        run = report.load_run(run_dir.joinpath("run.yaml"))
        lab = config_yaml.LabConfig(run_dir.joinpath("config.yaml"))
        lab.read_from_yaml()
        grid = lab.grid()
        reports.append(run)
        fields.append(report.load_field(run_dir.joinpath("u_map.aefd"), grid))
        histories[run_id] = report.read_history(run_dir.joinpath("history.csv"))

    backends = [r.backend for r in reports]
    reference = backends.index("checkpoint") if "checkpoint" in backends else 0
    report.compare_runs(reports, fields, reference)
    target = Path(output) if output else run_root()
    target.mkdir(parents=True, exist_ok=True)
    report.write_report(reports, target.joinpath("report.csv"))
    report.plot_convergence(histories, target.joinpath("convergence.svg"))
    assert grid is not None
    report.plot_fields(grid, dict(zip(run_ids, fields)), target.joinpath("fields.svg"))
    for run in reports:
        click.echo(f"{run.run_id}: rel_l2_err_pct={run.rel_l2_err_pct:.3e} ratio_paper={run.ratio_paper:g}")


@cli.command(name="selftest")
def selftest_command() -> None:
    """Run the quick oracle suite."""
    results = selftest.run_all()
    for result in results:
        mark = click.style("ok", fg="green") if result.passed else click.style("FAIL", fg="red")
        click.echo(f"[{mark}] {result.name}: {result.detail}")
    if not all(r.passed for r in results):
        raise NumericalError(f"{sum(not r.passed for r in results)} oracle checks failed.")


@cli.command(name="bench-codec")
@click.option("--codec-file", "codec_file", type=click.Path(), default=None, help="Trained autoencoder weights.")  # type: ignore
@click.option("--repeats", type=int, default=5, help="Timing repeats; the best is kept.")  # type: ignore
@click.pass_context
def bench_codec(ctx: Context, codec_file: Optional[str], repeats: int) -> None:
    """Time dense against sparse edge layers on a batch of vectors."""
    config = load_config(ctx)
    path = Path(codec_file) if codec_file else config.resolve_path(config.codec_file or "codec.aemw")
    if not path.is_file():
        logger.error(f"Codec file {path} not found.")
        raise ConfigError(f"Codec file {path} not found.")
    codec = mlp_codec.load(path)
    vectors = np.random.default_rng(config.seed).random((BENCH_VECTORS, codec.arch.input_dim))
    timings = mlp_codec.time_paths(codec, vectors, repeats)
    for name, seconds in sorted(timings.items()):
        click.echo(f"{name}: {1e3 * seconds:.3f} ms")


if __name__ == "__main__":
    cli()  # pragma: no cover
