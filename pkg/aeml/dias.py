"""Data-informed active subspace (DIAS) regularization.

The active subspace W1 holds the dominant eigenvectors of the averaged misfit
gradient outer product. DIAS keeps the full misfit and regularizes only the
inactive complement through P2 = I - W1 W1^T, using P2 Gamma^-1 P2 as the
precision.
"""
from dataclasses import dataclass, field
from multiprocessing.pool import ThreadPool
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.linalg
from loguru import logger

from aeml import ConfigError, FormatError, ShapeError, SolverError
from aeml.adjoint_grad import Objective, PriorRegularizer, Regularizer, SweepCounter
from aeml.bayes_prior import BiLaplacianPrior
from aeml.formats import BASIS_HEADER, BASIS_MAGIC, TPath, pack_header, take, unpack_header
from aeml.newton_cg import NewtonConfig, NewtonResult, TStoreFactory, solve_map

TSampler = Callable[[np.random.SeedSequence], np.ndarray]

MAX_DENSE_N = 200


@dataclass
class ActiveSubspaceBasis:
    W1: np.ndarray
    eigenvalues: np.ndarray
    samples: int = 0
    center: Optional[np.ndarray] = None
    counter: SweepCounter = field(default_factory=SweepCounter)

    def __post_init__(self) -> None:
        self.W1 = np.asarray(self.W1, dtype=float)
        if self.W1.ndim != 2:
            raise ShapeError(f"W1 must be an n x r matrix, got shape {self.W1.shape}.")
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=float)
        if self.eigenvalues.shape != (self.W1.shape[1],):
            raise ShapeError("One eigenvalue per basis column is required.")

    @property
    def n(self) -> int:
        return self.W1.shape[0]

    @property
    def rank(self) -> int:
        return self.W1.shape[1]

    def project_inactive(self, x: np.ndarray) -> np.ndarray:
        """P2 x = x - W1 (W1^T x)."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            logger.error(f"Vector of shape {x.shape} for a basis of size {self.n}.")
            raise ShapeError(f"Vector of shape {x.shape} for a basis of size {self.n}.")
        return x - self.W1 @ (self.W1.T @ x)


def prior_sampler(prior: BiLaplacianPrior) -> TSampler:
    return lambda seed: prior.sample(seed)


def centered_sampler(prior: BiLaplacianPrior, center: np.ndarray) -> TSampler:
    """Prior-shaped perturbations around `center`."""
    return lambda seed: prior.sample(seed, center=center)


def estimate_active_subspace(
    objective: Objective,
    sampler: TSampler,
    m: int = 30,
    r: int = 5,
    store_factory: Optional[TStoreFactory] = None,
    seed: int = 0,
    workers: int = 1,
    center: Optional[np.ndarray] = None,
) -> ActiveSubspaceBasis:
    if r < 1:
        raise ConfigError(f"Active subspace dimension must be at least 1, got {r}.")
    if r > m:
        logger.error(f"Active subspace dimension {r} exceeds the sample count {m}.")
        raise ConfigError(f"Active subspace dimension {r} exceeds the sample count {m}.")
    factory = store_factory or (lambda: None)
    seeds = np.random.SeedSequence(seed).spawn(m)

    def gradient(child: np.random.SeedSequence):
        result = objective.misfit_and_gradient(sampler(child), factory())
        return result.misfit_gradient, result.counter

    if workers > 1:
        with ThreadPool(workers) as pool:
            evaluations = pool.map(gradient, seeds)
    else:
        evaluations = [gradient(child) for child in seeds]

    counter = SweepCounter()
    for _, c in evaluations:
        counter = counter + c
    samples = np.column_stack([g for g, _ in evaluations]) / np.sqrt(m)
    U, s, _ = scipy.linalg.svd(samples, full_matrices=False)
    W1 = U[:, :r]
    # fix the sign of every column
    pivots = np.argmax(np.abs(W1), axis=0)
    W1 = W1 * np.sign(W1[pivots, np.arange(r)])
    logger.info(f"Active subspace from {m} gradients: leading eigenvalues {s[:r] ** 2}")
    return ActiveSubspaceBasis(W1, s[:r] ** 2, m, center, counter)


def apply_dias_reg_grad(
    basis: ActiveSubspaceBasis, prior: BiLaplacianPrior, u: np.ndarray, u0: np.ndarray
) -> np.ndarray:
    """P2 Gamma_prior^-1 P2 (u - u0)."""
    du = np.asarray(u, dtype=float) - np.asarray(u0, dtype=float)
    return basis.project_inactive(prior.apply_precision(basis.project_inactive(du)))


class DiasRegularizer(Regularizer):
    def __init__(self, basis: ActiveSubspaceBasis, prior: BiLaplacianPrior) -> None:
        self.basis = basis
        self.prior = prior

    def energy(self, u: np.ndarray) -> float:
        inactive = self.basis.project_inactive(np.asarray(u) - self.prior.mean)
        return 0.5 * float(inactive @ self.prior.apply_precision(inactive))

    def gradient(self, u: np.ndarray) -> np.ndarray:
        return apply_dias_reg_grad(self.basis, self.prior, u, self.prior.mean)

    def hessian_action(self, p: np.ndarray) -> np.ndarray:
        return self.basis.project_inactive(
            self.prior.apply_precision(self.basis.project_inactive(p))
        )


@dataclass
class SchurReport:
    lhs: np.ndarray
    rhs: np.ndarray
    gap: float
    identity_gap: float


def verify_schur_caveat(gamma: np.ndarray, W1: np.ndarray) -> SchurReport:
    """Compare (P2 Gamma P2)^+ with P2 Gamma^-1 P2 and check the inverse Schur complement identity.

    identity_gap is the relative gap of
        W2^T Gamma^-1 W2 = [W2^T G W2 - W2^T G W1 (W1^T G W1)^-1 W1^T G W2]^-1.
    """
    gamma = np.asarray(gamma, dtype=float)
    W1 = np.atleast_2d(np.asarray(W1, dtype=float))
    if W1.shape[0] != gamma.shape[0] and W1.shape[1] == gamma.shape[0]:
        W1 = W1.T
    n = gamma.shape[0]
    if gamma.shape != (n, n) or W1.shape[0] != n:
        raise ShapeError(f"Gamma {gamma.shape} and W1 {W1.shape} do not match.")
    if n > MAX_DENSE_N:
        raise ConfigError(f"Dense Schur diagnostic limited to n <= {MAX_DENSE_N}, got {n}.")
    P2 = np.eye(n) - W1 @ W1.T
    W2 = scipy.linalg.null_space(W1.T)
    try:
        gamma_inv = np.linalg.inv(gamma)
        lhs = np.linalg.pinv(P2 @ gamma @ P2, hermitian=True)
        rhs = P2 @ gamma_inv @ P2
        active = W1.T @ gamma @ W1
        cross = W2.T @ gamma @ W1
        schur = W2.T @ gamma @ W2 - cross @ np.linalg.solve(active, cross.T)
        left = W2.T @ gamma_inv @ W2
        right = np.linalg.inv(schur)
    except np.linalg.LinAlgError as error:
        logger.error(f"Singular block in Schur diagnostic: {error}")
        raise SolverError(f"Singular block in Schur diagnostic: {error}")
    scale = np.linalg.norm(left, 2) if left.size else 1.0
    identity_gap = float(np.linalg.norm(left - right, 2) / scale) if left.size else 0.0
    return SchurReport(lhs, rhs, float(np.linalg.norm(lhs - rhs, 2)), identity_gap)


@dataclass
class DiasConfig:
    samples: int = 30
    rank: int = 5
    naive: bool = False
    workers: int = 1
    seed: int = 0
    newton: NewtonConfig = field(default_factory=NewtonConfig)


@dataclass
class DiasResult:
    u_map: np.ndarray
    u_dias: np.ndarray
    map_result: NewtonResult
    dias_result: Optional[NewtonResult] = None
    basis: Optional[ActiveSubspaceBasis] = None
    relerr_map: Optional[float] = None
    relerr_dias: Optional[float] = None


def relative_error(u: np.ndarray, reference: np.ndarray) -> float:
    return float(np.linalg.norm(u - reference) / np.linalg.norm(reference))


def solve_dias(
    objective: Objective,
    prior: BiLaplacianPrior,
    cfg: Optional[DiasConfig] = None,
    store_factory: Optional[TStoreFactory] = None,
    u_init: Optional[np.ndarray] = None,
    truth: Optional[np.ndarray] = None,
) -> DiasResult:
    """MAP solve, then Newton on full misfit plus the projected prior from the MAP point."""
    cfg = cfg or DiasConfig()
    factory = store_factory or (lambda: None)
    start = prior.mean if u_init is None else u_init
    map_result = solve_map(objective.with_regularizer(PriorRegularizer(prior)), start, factory, cfg.newton)
    u_map = map_result.u_map
    result = DiasResult(u_map=u_map, u_dias=u_map.copy(), map_result=map_result)

    if cfg.rank > 0:
        sampler = prior_sampler(prior) if cfg.naive else centered_sampler(prior, u_map)
        basis = estimate_active_subspace(
            objective, sampler, cfg.samples, cfg.rank, factory, cfg.seed, cfg.workers,
            center=None if cfg.naive else u_map,
        )
        dias_objective = objective.with_regularizer(DiasRegularizer(basis, prior))
        result.dias_result = solve_map(dias_objective, u_map, factory, cfg.newton)
        result.u_dias = result.dias_result.u_map
        result.basis = basis

    if truth is not None:
        result.relerr_map = relative_error(result.u_map, truth)
        result.relerr_dias = relative_error(result.u_dias, truth)
        logger.info(
            f"Relative error vs truth: MAP {100 * result.relerr_map:.4f}%, "
            f"DIAS {100 * result.relerr_dias:.4f}%"
        )
    return result


def save_basis(basis: ActiveSubspaceBasis, path: TPath) -> None:
    with open(path, "wb") as out:
        out.write(pack_header(BASIS_HEADER, magic=BASIS_MAGIC, n=basis.n, r=basis.rank))
        out.write(np.asarray(basis.W1, dtype="<f8").tobytes(order="F"))
        out.write(np.asarray(basis.eigenvalues, dtype="<f8").tobytes())


def load_basis(path: TPath) -> ActiveSubspaceBasis:
    buffer = Path(path).read_bytes()
    header, offset = unpack_header(buffer, BASIS_HEADER, BASIS_MAGIC)
    n, r = int(header["n"]), int(header["r"])
    columns, offset = take(buffer, "<f8", n * r, offset)
    eigenvalues, offset = take(buffer, "<f8", r, offset)
    if offset != len(buffer):
        raise FormatError(f"Trailing bytes in basis file {path}.")
    return ActiveSubspaceBasis(columns.reshape((n, r), order="F"), eigenvalues, 0)
