"""Discrete adjoint gradient and second-order adjoint Hessian action.

The adjoint is taken of the RK4 scheme itself, so gradients agree with finite
differences of the discrete objective up to roundoff. Forward stage states are
only ever read through a TrajectoryStore; adjoint stage states stay in memory.
"""
from abc import ABCMeta, abstractmethod
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from loguru import logger

from aeml import RK_STAGES, ConfigError, OrderingError, ShapeError, TStageKey
from aeml.bayes_prior import BiLaplacianPrior
from aeml.trajectory_store import FullStore, TrajectoryStore
from aeml.wave_core import (
    RK_A,
    RK_B,
    ForwardConfig,
    Receivers,
    WaveOperator,
    forward_solve,
    rk4_step,
)


@dataclass
class SweepCounter:
    forward_sweeps: int = 0
    adjoint_sweeps: int = 0
    incfwd_sweeps: int = 0
    incadj_sweeps: int = 0
    recompute_steps: int = 0
    steps_per_sweep: int = 1
    compress_calls: int = 0
    decompress_calls: int = 0
    gradient_evals: int = 0
    hvp_evals: int = 0

    @property
    def recompute_sweeps(self) -> float:
        return self.recompute_steps / self.steps_per_sweep if self.steps_per_sweep else 0.0

    def absorb(self, store: Optional[TrajectoryStore], before: Tuple[int, int, int]) -> None:
        if store is None:
            return
        self.recompute_steps += store.recompute_steps - before[0]
        self.compress_calls += store.compress_calls - before[1]
        self.decompress_calls += store.decompress_calls - before[2]

    def __add__(self, other: "SweepCounter") -> "SweepCounter":
        merged = SweepCounter(steps_per_sweep=max(self.steps_per_sweep, other.steps_per_sweep))
        for name in (
            "forward_sweeps",
            "adjoint_sweeps",
            "incfwd_sweeps",
            "incadj_sweeps",
            "recompute_steps",
            "compress_calls",
            "decompress_calls",
            "gradient_evals",
            "hvp_evals",
        ):
            setattr(merged, name, getattr(self, name) + getattr(other, name))
        return merged

    def to_dict(self) -> Dict[str, float]:
        values: Dict[str, float] = asdict(self)
        values["recompute_sweeps"] = self.recompute_sweeps
        return values


def _snapshot(store: Optional[TrajectoryStore]) -> Tuple[int, int, int]:
    if store is None:
        return (0, 0, 0)
    return (store.recompute_steps, store.compress_calls, store.decompress_calls)


class Regularizer(metaclass=ABCMeta):
    @abstractmethod
    def energy(self, u: np.ndarray) -> float:
        pass  # pragma: no cover

    @abstractmethod
    def gradient(self, u: np.ndarray) -> np.ndarray:
        pass  # pragma: no cover

    @abstractmethod
    def hessian_action(self, p: np.ndarray) -> np.ndarray:
        pass  # pragma: no cover


class NoRegularizer(Regularizer):
    def energy(self, u: np.ndarray) -> float:
        return 0.0

    def gradient(self, u: np.ndarray) -> np.ndarray:
        return np.zeros_like(u, dtype=float)

    def hessian_action(self, p: np.ndarray) -> np.ndarray:
        return np.zeros_like(p, dtype=float)


class PriorRegularizer(Regularizer):
    """0.5 ||u - u0||^2 weighted by the prior precision."""

    def __init__(self, prior: BiLaplacianPrior) -> None:
        self.prior = prior

    @property
    def mean(self) -> np.ndarray:
        return self.prior.mean

    def energy(self, u: np.ndarray) -> float:
        return self.prior.energy(u)

    def gradient(self, u: np.ndarray) -> np.ndarray:
        return self.prior.gradient(u)

    def hessian_action(self, p: np.ndarray) -> np.ndarray:
        return self.prior.apply_precision(p)


@dataclass
class EvalResult:
    J: float
    g: np.ndarray
    counter: SweepCounter
    misfit: float = 0.0
    misfit_gradient: Optional[np.ndarray] = None


@dataclass
class HvpResult:
    Hp: np.ndarray
    counter: SweepCounter


@dataclass
class _GradientState:
    u: np.ndarray
    store: object
    adjoint_stages: Dict[TStageKey, np.ndarray] = field(default_factory=dict)


class Objective(metaclass=ABCMeta):
    """J(u) = misfit(u) + regularizer(u)."""

    def __init__(self, regularizer: Regularizer) -> None:
        self.regularizer = regularizer

    @property
    @abstractmethod
    def size(self) -> int:
        pass  # pragma: no cover

    @abstractmethod
    def with_regularizer(self, regularizer: Regularizer) -> "Objective":
        pass  # pragma: no cover

    @abstractmethod
    def cost(self, u: np.ndarray) -> float:
        """J(u) without touching any store."""

    @abstractmethod
    def misfit_and_gradient(self, u: np.ndarray, store: Optional[TrajectoryStore] = None) -> EvalResult:
        pass  # pragma: no cover

    @abstractmethod
    def hessian_vector(
        self,
        u: np.ndarray,
        p: np.ndarray,
        store_forward: Optional[TrajectoryStore] = None,
        store_incfwd: Optional[FullStore] = None,
    ) -> HvpResult:
        pass  # pragma: no cover

    def _check(self, values: np.ndarray, name: str) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.shape != (self.size,):
            logger.error(f"{name} has shape {values.shape}, expected ({self.size},).")
            raise ShapeError(f"{name} has shape {values.shape}, expected ({self.size},).")
        return values


def synthesize_data(
    u_true: np.ndarray, config: ForwardConfig, noise_level: float = 0.01, seed=None
) -> Tuple[np.ndarray, float]:
    """Observations at u_true plus Gaussian noise of std noise_level * peak amplitude.

    Returns (data, sigma); sigma falls back to 1 when there is no noise.
    """
    clean = forward_solve(u_true, config).observations
    peak = float(np.abs(clean).max()) if clean.size else 0.0
    sigma = noise_level * peak
    if sigma <= 0.0:
        return clean, 1.0
    rng = np.random.default_rng(seed)
    return clean + sigma * rng.standard_normal(clean.shape), sigma


def _reverse_sweep(
    receivers: Receivers,
    operator: WaveOperator,
    forcing: np.ndarray,
    dt: float,
    visit: Callable[[int, int, np.ndarray], Optional[np.ndarray]],
) -> np.ndarray:
    """Backward RK4 adjoint driven by receiver residuals `forcing` (T, receivers, d).

    visit(n, i, Lambda_i) sees every stage adjoint and may return an extra term
    added to mu_i = A^T Lambda_i. Returns lambda_0.
    """
    num_steps = forcing.shape[0]
    lam = receivers.adjoint(forcing[num_steps - 1])
    for n in reversed(range(num_steps)):
        mu: list = [None] * RK_STAGES
        for i in reversed(range(RK_STAGES)):
            stage = (dt * RK_B[i]) * lam
            for j in range(i + 1, RK_STAGES):
                a = RK_A[j][i]
                if a:
                    stage = stage + (dt * a) * mu[j]
            m = operator.apply_transpose(stage)
            extra = visit(n, i, stage)
            if extra is not None:
                m = m + extra
            mu[i] = m
        for m in mu:
            lam = lam + m
        if n >= 1:
            lam = lam + receivers.adjoint(forcing[n - 1])
    return lam


class WaveObjective(Objective):
    def __init__(
        self,
        config: ForwardConfig,
        data: np.ndarray,
        noise_sigma: float,
        regularizer: Optional[Regularizer] = None,
    ) -> None:
        super().__init__(regularizer or NoRegularizer())
        if noise_sigma <= 0:
            raise ConfigError(f"Noise sigma must be positive, got {noise_sigma}.")
        self.config = config
        self.receivers = config.observation_operator()
        expected = (config.time.num_steps, self.receivers.count, config.grid.dim)
        self.data = np.asarray(data, dtype=float)
        if self.data.shape != expected:
            logger.error(f"Data has shape {self.data.shape}, expected {expected}.")
            raise ShapeError(f"Data has shape {self.data.shape}, expected {expected}.")
        self.noise_sigma = float(noise_sigma)
        self._last: Optional[_GradientState] = None

    @property
    def size(self) -> int:
        return self.config.grid.node_count

    def with_regularizer(self, regularizer: Regularizer) -> "WaveObjective":
        return WaveObjective(self.config, self.data, self.noise_sigma, regularizer)

    def _operator(self, u: np.ndarray) -> WaveOperator:
        return WaveOperator(self.config.grid, self.config.density, u)

    def misfit(self, observations: np.ndarray) -> float:
        return 0.5 * float(np.sum((observations - self.data) ** 2)) / self.noise_sigma ** 2

    def cost(self, u: np.ndarray) -> float:
        u = self._check(u, "u")
        observations = forward_solve(u, self.config).observations
        return self.misfit(observations) + self.regularizer.energy(u)

    def adjoint_action(
        self, u: np.ndarray, forcing: np.ndarray, store: TrajectoryStore
    ) -> Tuple[np.ndarray, Dict[TStageKey, np.ndarray]]:
        """F'(u)^T applied to receiver-shaped `forcing`, reading forward states from `store`."""
        op = self._operator(u)
        grad = np.zeros(self.size)
        stages: Dict[TStageKey, np.ndarray] = {}

        def visit(n: int, i: int, lam: np.ndarray) -> None:
            nonlocal grad
            grad = grad + op.parameter_action_transpose(store.get((n, i)), lam)
            stages[(n, i)] = lam

        store.begin_sweep()
        _reverse_sweep(self.receivers, op, forcing, self.config.time.dt, visit)
        return grad, stages

    def incremental_forward(
        self, u: np.ndarray, p: np.ndarray, store: TrajectoryStore, store_incfwd: Optional[FullStore] = None
    ) -> Tuple[np.ndarray, FullStore]:
        """Linearized observations F'(u) p and the incremental stage states."""
        op = self._operator(u)
        inc_store = store_incfwd if store_incfwd is not None else FullStore()
        time = self.config.time
        y_hat = np.zeros(self.config.grid.state_size)
        observations = np.zeros_like(self.data)
        store.begin_sweep()
        for n in range(time.num_steps):
            forward = [store.get((n, i)) for i in range(RK_STAGES)]
            stages, y_hat = rk4_step(
                y_hat, time.dt, op.apply, lambda i: op.parameter_action(forward[i], p)
            )
            for s, stage in enumerate(stages):
                inc_store.put((n, s), stage)
            observations[n] = self.receivers.observe(y_hat)
        inc_store.seal()
        return observations, inc_store

    def misfit_and_gradient(self, u: np.ndarray, store: Optional[TrajectoryStore] = None) -> EvalResult:
        u = self._check(u, "u")
        store = store if store is not None else FullStore()
        counter = SweepCounter(steps_per_sweep=self.config.time.num_steps)
        before = _snapshot(store)

        observations = forward_solve(u, self.config, store).observations
        counter.forward_sweeps += 1
        misfit = self.misfit(observations)
        residual = (observations - self.data) / self.noise_sigma ** 2
        misfit_gradient, stages = self.adjoint_action(u, residual, store)
        counter.adjoint_sweeps += 1
        counter.gradient_evals += 1
        counter.absorb(store, before)

        self._last = _GradientState(u=u.copy(), store=store, adjoint_stages=stages)
        return EvalResult(
            J=misfit + self.regularizer.energy(u),
            g=misfit_gradient + self.regularizer.gradient(u),
            counter=counter,
            misfit=misfit,
            misfit_gradient=misfit_gradient,
        )

    def hessian_vector(
        self,
        u: np.ndarray,
        p: np.ndarray,
        store_forward: Optional[TrajectoryStore] = None,
        store_incfwd: Optional[FullStore] = None,
    ) -> HvpResult:
        u = self._check(u, "u")
        p = self._check(p, "p")
        last = self._last
        if (
            last is None
            or store_forward is None
            or last.store is not store_forward
            or not np.array_equal(last.u, u)
        ):
            logger.error("Hessian-vector product requested before the gradient at this point.")
            raise OrderingError("Hessian-vector product requested before the gradient at this point.")
        counter = SweepCounter(steps_per_sweep=self.config.time.num_steps)
        before = _snapshot(store_forward)
        op = self._operator(u)

        observations_hat, inc_store = self.incremental_forward(u, p, store_forward, store_incfwd)
        counter.incfwd_sweeps += 1

        hp = np.zeros(self.size)
        adjoint = last.adjoint_stages

        def visit(n: int, i: int, lam_hat: np.ndarray) -> np.ndarray:
            nonlocal hp
            y = store_forward.get((n, i))
            lam = adjoint[(n, i)]
            hp = (
                hp
                + op.parameter_action_transpose(y, lam, weight=p)
                + op.parameter_action_transpose(inc_store.get((n, i)), lam)
                + op.parameter_action_transpose(y, lam_hat)
            )
            return op.perturbation_transpose(p, lam)

        store_forward.begin_sweep()
        _reverse_sweep(
            self.receivers, op, observations_hat / self.noise_sigma ** 2, self.config.time.dt, visit
        )
        counter.incadj_sweeps += 1
        counter.hvp_evals += 1
        counter.absorb(store_forward, before)
        return HvpResult(Hp=hp + self.regularizer.hessian_action(p), counter=counter)


class LinearObjective(Objective):
    """Misfit of a fixed linear parameter-to-observable matrix; stores are ignored."""

    def __init__(
        self,
        matrix: np.ndarray,
        data: np.ndarray,
        noise_sigma: float = 1.0,
        regularizer: Optional[Regularizer] = None,
    ) -> None:
        super().__init__(regularizer or NoRegularizer())
        self.matrix = np.asarray(matrix, dtype=float)
        self.data = np.asarray(data, dtype=float)
        if self.data.shape != (self.matrix.shape[0],):
            raise ShapeError(f"Data of shape {self.data.shape} for a {self.matrix.shape} map.")
        self.noise_sigma = float(noise_sigma)

    @property
    def size(self) -> int:
        return self.matrix.shape[1]

    def with_regularizer(self, regularizer: Regularizer) -> "LinearObjective":
        return LinearObjective(self.matrix, self.data, self.noise_sigma, regularizer)

    def cost(self, u: np.ndarray) -> float:
        u = self._check(u, "u")
        r = self.matrix @ u - self.data
        return 0.5 * float(r @ r) / self.noise_sigma ** 2 + self.regularizer.energy(u)

    def misfit_and_gradient(self, u: np.ndarray, store: Optional[TrajectoryStore] = None) -> EvalResult:
        u = self._check(u, "u")
        r = self.matrix @ u - self.data
        misfit = 0.5 * float(r @ r) / self.noise_sigma ** 2
        misfit_gradient = self.matrix.T @ r / self.noise_sigma ** 2
        counter = SweepCounter(forward_sweeps=1, adjoint_sweeps=1, gradient_evals=1)
        return EvalResult(
            J=misfit + self.regularizer.energy(u),
            g=misfit_gradient + self.regularizer.gradient(u),
            counter=counter,
            misfit=misfit,
            misfit_gradient=misfit_gradient,
        )

    def hessian_vector(
        self,
        u: np.ndarray,
        p: np.ndarray,
        store_forward: Optional[TrajectoryStore] = None,
        store_incfwd: Optional[FullStore] = None,
    ) -> HvpResult:
        p = self._check(p, "p")
        hp = self.matrix.T @ (self.matrix @ p) / self.noise_sigma ** 2
        counter = SweepCounter(incfwd_sweeps=1, incadj_sweeps=1, hvp_evals=1)
        return HvpResult(Hp=hp + self.regularizer.hessian_action(p), counter=counter)


def misfit_and_gradient(u: np.ndarray, objective: Objective, store: Optional[TrajectoryStore] = None) -> EvalResult:
    return objective.misfit_and_gradient(u, store)


def hessian_vector(
    u: np.ndarray,
    p: np.ndarray,
    objective: Objective,
    store_forward: Optional[TrajectoryStore] = None,
    store_incfwd: Optional[FullStore] = None,
) -> HvpResult:
    return objective.hessian_vector(u, p, store_forward, store_incfwd)
