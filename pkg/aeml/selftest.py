"""Quick oracle checks run by `aeml selftest`; each one takes well under a minute."""
from typing import Callable, List, NamedTuple

import numpy as np
from loguru import logger

from aeml.adjoint_grad import SweepCounter, WaveObjective, synthesize_data
from aeml.dias import verify_schur_caveat
from aeml.quant_codec import QuantizerConfig, q_decode, q_encode
from aeml.report import modeled_speedup
from aeml.trajectory_store import CheckpointStore, FullStore
from aeml.wave_core import ForwardConfig, Grid, Medium, SourceSpec, TimeAxis, box_inclusion, cfl_dt


class CheckResult(NamedTuple):
    name: str
    passed: bool
    detail: str


def tiny_problem(cells: int = 8, steps: int = 24) -> ForwardConfig:
    grid = Grid(2, (cells, cells), 1.0 / cells, (cells // 2, cells // 2))
    density = np.ones(grid.node_count)
    dt = cfl_dt(grid, Medium(density, np.full(grid.node_count, 1.5)))
    return ForwardConfig(
        grid=grid,
        density=density,
        time=TimeAxis(dt, steps),
        sources=[SourceSpec((0.5, 0.8), t_c=0.2, sigma_t=0.08, sigma_x=0.1)],
        receivers=[(x, 0.9) for x in (0.2, 0.4, 0.6, 0.8)],
    )


def _objective(config: ForwardConfig) -> WaveObjective:
    truth = box_inclusion(config.grid, 1.0, (0.3, 0.3), (0.6, 0.6), 1.2)
    data, sigma = synthesize_data(truth, config, 0.0)
    return WaveObjective(config, data, sigma)


def check_gradient() -> CheckResult:
    config = tiny_problem()
    objective = _objective(config)
    rng = np.random.default_rng(0)
    u = np.ones(config.grid.node_count)
    g = objective.misfit_and_gradient(u, FullStore()).g
    worst = 0.0
    for _ in range(3):
        p = rng.standard_normal(u.size)
        eps = 1e-5
        fd = (objective.cost(u + eps * p) - objective.cost(u - eps * p)) / (2 * eps)
        worst = max(worst, abs(fd - g @ p) / max(abs(fd), 1e-300))
    return CheckResult("gradient vs central differences", worst < 1e-5, f"worst relative gap {worst:.2e}")


def check_checkpoint() -> CheckResult:
    config = tiny_problem()
    objective = _objective(config)
    u = np.ones(config.grid.node_count)
    full = objective.misfit_and_gradient(u, FullStore())
    store = CheckpointStore()
    ckpt = objective.misfit_and_gradient(u, store)
    p = np.random.default_rng(1).standard_normal(u.size)
    hvp = objective.hessian_vector(u, p, store)
    same = np.array_equal(full.g, ckpt.g)
    sweeps = (ckpt.counter.recompute_sweeps, hvp.counter.recompute_sweeps)
    return CheckResult(
        "checkpoint gradient is lossless with +1/+2 recompute",
        same and sweeps == (1.0, 2.0),
        f"bit-identical={same}, recompute sweeps={sweeps}",
    )


def check_speedup() -> CheckResult:
    ideal_grad = SweepCounter(forward_sweeps=1, adjoint_sweeps=1, gradient_evals=1)
    ckpt_grad = SweepCounter(forward_sweeps=1, adjoint_sweeps=1, recompute_steps=1, gradient_evals=1)
    ideal_hvp = SweepCounter(incfwd_sweeps=1, incadj_sweeps=1, hvp_evals=1)
    ckpt_hvp = SweepCounter(incfwd_sweeps=1, incadj_sweeps=1, recompute_steps=2, hvp_evals=1)
    grad = modeled_speedup(ckpt_grad, ideal_grad)
    hvp = modeled_speedup(ckpt_hvp, ideal_hvp)
    return CheckResult(
        "modeled ideal speedups 4/3 and 3/2",
        grad == 4.0 / 3.0 and hvp == 1.5,
        f"gradient {grad:.6f}, Hessian action {hvp:.6f}",
    )


def check_quantizer() -> CheckResult:
    rng = np.random.default_rng(2)
    cfg = QuantizerConfig(1e-3)
    violations = 0
    for _ in range(200):
        y = rng.standard_normal(257) * rng.uniform(0.01, 10.0)
        violations += int(np.sum(np.abs(q_decode(q_encode(y, cfg), cfg) - y) > cfg.tolerance))
    return CheckResult("quantizer error bound", violations == 0, f"{violations} violations")


def check_schur() -> CheckResult:
    W1 = np.linalg.qr(np.random.default_rng(3).standard_normal((6, 2)))[0]
    report = verify_schur_caveat(3.0 * np.eye(6), W1)
    return CheckResult("projected inverse for isotropic covariance", report.gap < 1e-12, f"gap {report.gap:.2e}")


CHECKS: List[Callable[[], CheckResult]] = [
    check_speedup,
    check_quantizer,
    check_schur,
    check_gradient,
    check_checkpoint,
]


def run_all() -> List[CheckResult]:
    results = []
    for check in CHECKS:
        result = check()
        (logger.info if result.passed else logger.warning)(f"{result.name}: {result.detail}")
        results.append(result)
    return results
