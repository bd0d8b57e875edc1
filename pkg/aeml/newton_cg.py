"""Inexact Newton-CG for the MAP point.

Each Newton iteration evaluates one gradient into a fresh store and reuses that
store for every Hessian-vector product of the inner CG solve.
"""
import csv
from dataclasses import dataclass, field
import math
from typing import Callable, List, Optional, Tuple

import numpy as np
from loguru import logger

from aeml import ConfigError, DivergenceError, InvalidMediumError
from aeml.adjoint_grad import EvalResult, Objective, SweepCounter
from aeml.formats import TPath
from aeml.trajectory_store import TrajectoryStore

TStoreFactory = Callable[[], Optional[TrajectoryStore]]

FORCING_EW = "eisenstat-walker"
FORCING_FIXED = "fixed"


@dataclass
class NewtonConfig:
    max_newton_iters: int = 8
    cg_max_iters: int = 50
    forcing: str = FORCING_EW
    fixed_forcing: float = 0.1
    ew_gamma: float = 0.9
    ew_exponent: float = 2.0
    eta_max: float = 0.5
    c1: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 30
    grad_tol: float = 1e-6
    grad_atol: float = 0.0
    c_min: Optional[float] = None

    def __post_init__(self) -> None:
        if self.forcing not in (FORCING_EW, FORCING_FIXED):
            raise ConfigError(f"Unknown forcing rule {self.forcing!r}.")
        if not 0.0 < self.c1 < 0.5:
            raise ConfigError(f"Armijo c1 must lie in (0, 0.5), got {self.c1}.")
        if not 0.0 < self.backtrack < 1.0:
            raise ConfigError(f"Backtrack factor must lie in (0, 1), got {self.backtrack}.")
        if self.grad_tol <= 0 or self.fixed_forcing <= 0 or self.eta_max <= 0:
            raise ConfigError("Newton tolerances must be positive.")
        if self.max_newton_iters < 0 or self.cg_max_iters < 1:
            raise ConfigError("Iteration caps must be non-negative (CG at least 1).")


@dataclass
class HistoryRow:
    iteration: int
    J: float
    grad_norm: float
    cg_iters: int = 0
    forcing: float = 0.0
    step_length: float = 0.0
    line_search_forwards: int = 0
    gradient: SweepCounter = field(default_factory=SweepCounter)
    hvp: SweepCounter = field(default_factory=SweepCounter)

    CSV_FIELDS = (
        "iteration",
        "J",
        "grad_norm",
        "cg_iters",
        "forcing",
        "step_length",
        "line_search_forwards",
        "grad_fwd",
        "grad_adj",
        "grad_recompute",
        "hvp_count",
        "hvp_incfwd",
        "hvp_incadj",
        "hvp_recompute",
        "compress",
        "decompress",
    )

    def to_csv(self) -> List[str]:
        values = (
            self.iteration,
            self.J,
            self.grad_norm,
            self.cg_iters,
            self.forcing,
            self.step_length,
            self.line_search_forwards,
            self.gradient.forward_sweeps,
            self.gradient.adjoint_sweeps,
            self.gradient.recompute_sweeps,
            self.hvp.hvp_evals,
            self.hvp.incfwd_sweeps,
            self.hvp.incadj_sweeps,
            self.hvp.recompute_sweeps,
            self.gradient.compress_calls + self.hvp.compress_calls,
            self.gradient.decompress_calls + self.hvp.decompress_calls,
        )
        return [repr(v) if isinstance(v, float) else str(v) for v in values]


@dataclass
class NewtonResult:
    u_map: np.ndarray
    history: List[HistoryRow]
    converged: bool = False
    stagnated: bool = False

    @property
    def counter(self) -> SweepCounter:
        total = SweepCounter()
        for row in self.history:
            total = total + row.gradient + row.hvp
            total.forward_sweeps += row.line_search_forwards
        return total


def write_history(history: List[HistoryRow], path: TPath) -> None:
    with open(path, "w", newline="") as out:
        writer = csv.writer(out)
        writer.writerow(HistoryRow.CSV_FIELDS)
        for row in history:
            writer.writerow(row.to_csv())


def _forcing_term(cfg: NewtonConfig, k: int, gnorm: float, gnorm_prev: float, eta_prev: float) -> float:
    if cfg.forcing == FORCING_FIXED:
        return cfg.fixed_forcing
    if k == 0:
        return cfg.eta_max
    eta = cfg.ew_gamma * (gnorm / gnorm_prev) ** cfg.ew_exponent
    safeguard = cfg.ew_gamma * eta_prev ** cfg.ew_exponent
    if safeguard > 0.1:
        eta = max(eta, safeguard)
    return min(eta, cfg.eta_max)


def steihaug_cg(
    objective: Objective,
    u: np.ndarray,
    g: np.ndarray,
    store: Optional[TrajectoryStore],
    tolerance: float,
    max_iters: int,
) -> Tuple[np.ndarray, int, SweepCounter]:
    """Approximately solve H p = -g; stops on negative curvature."""
    counter = SweepCounter()
    x = np.zeros_like(g)
    r = -g
    d = r.copy()
    rr = float(r @ r)
    iters = 0
    for iters in range(1, max_iters + 1):
        hvp = objective.hessian_vector(u, d, store)
        counter = counter + hvp.counter
        curvature = float(d @ hvp.Hp)
        if curvature <= 0.0:
            logger.info(f"CG hit negative curvature at iteration {iters}.")
            if iters == 1:
                x = d
            break
        alpha = rr / curvature
        x = x + alpha * d
        r = r - alpha * hvp.Hp
        rr_new = float(r @ r)
        if math.sqrt(rr_new) <= tolerance:
            break
        d = r + (rr_new / rr) * d
        rr = rr_new
    return x, iters, counter


def _project(u: np.ndarray, c_min: Optional[float]) -> np.ndarray:
    return u if c_min is None else np.maximum(u, c_min)


def solve_map(
    objective: Objective,
    u_init: np.ndarray,
    store_factory: TStoreFactory,
    cfg: Optional[NewtonConfig] = None,
) -> NewtonResult:
    cfg = cfg or NewtonConfig()
    u = _project(np.asarray(u_init, dtype=float).copy(), cfg.c_min)
    store = store_factory()
    ev: EvalResult = objective.misfit_and_gradient(u, store)
    g0 = float(np.linalg.norm(ev.g))
    history = [HistoryRow(0, ev.J, g0, gradient=ev.counter)]
    logger.info(f"Newton iteration 0: J={ev.J:.6e} |g|={g0:.3e}")
    result = NewtonResult(u_map=u, history=history)
    if g0 == 0.0:
        result.converged = True
        return result

    threshold = max(cfg.grad_tol * g0, cfg.grad_atol)
    gnorm_prev, eta_prev = g0, cfg.eta_max
    for k in range(cfg.max_newton_iters):
        gnorm = float(np.linalg.norm(ev.g))
        if gnorm <= threshold:
            result.converged = True
            break
        eta = _forcing_term(cfg, k, gnorm, gnorm_prev, eta_prev)
        step, cg_iters, hvp_counter = steihaug_cg(
            objective, u, ev.g, store, eta * gnorm, cfg.cg_max_iters
        )
        if float(ev.g @ step) >= 0.0:
            logger.warning("CG direction is not a descent direction; using -g.")
            step = -ev.g

        t, forwards, accepted = 1.0, 0, False
        for _ in range(cfg.max_backtracks + 1):
            u_try = _project(u + t * step, cfg.c_min)
            try:
                J_try = objective.cost(u_try)
            except (DivergenceError, InvalidMediumError):
                J_try = math.inf
            forwards += 1
            if J_try <= ev.J + cfg.c1 * float(ev.g @ (u_try - u)):
                accepted = True
                break
            t *= cfg.backtrack
        if not accepted:
            logger.warning(f"Line search stagnated after {cfg.max_backtracks} backtracks.")
            history.append(
                HistoryRow(k + 1, ev.J, gnorm, cg_iters, eta, 0.0, forwards, SweepCounter(), hvp_counter)
            )
            result.stagnated = True
            break

        u = u_try
        store = store_factory()
        ev = objective.misfit_and_gradient(u, store)
        gnorm_prev, eta_prev = gnorm, eta
        row = HistoryRow(
            k + 1,
            ev.J,
            float(np.linalg.norm(ev.g)),
            cg_iters,
            eta,
            t,
            forwards,
            ev.counter,
            hvp_counter,
        )
        history.append(row)
        logger.info(
            f"Newton iteration {k + 1}: J={row.J:.6e} |g|={row.grad_norm:.3e} "
            f"cg={cg_iters} step={t:g}"
        )
    else:
        result.converged = float(np.linalg.norm(ev.g)) <= threshold

    result.u_map = u
    return result
