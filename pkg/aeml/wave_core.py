"""Velocity-dilatation acoustic wave system on uniform 1D/2D grids.

    rho dv/dt - grad(rho c^2 e) = g
    de/dt - div v = 0,          e = 0 on the boundary

Nodes are cell centred (one node per cell); node arrays are flattened in C order
with axis 0 as the horizontal coordinate and the last axis as the vertical one,
the surface being the top layer. A state vector stacks the d velocity fields and
the dilatation: [v_0, ..., v_{d-1}, e], each of length node_count.
"""
from dataclasses import dataclass, field
from functools import lru_cache
import math
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from loguru import logger

from aeml import (
    RK_STAGES,
    ConfigError,
    DivergenceError,
    InvalidMediumError,
    ShapeError,
    StorageContractError,
)

# classical RK4 tableau
RK_A: Tuple[Tuple[float, ...], ...] = ((), (0.5,), (0.0, 0.5), (0.0, 0.0, 1.0))
RK_B: Tuple[float, ...] = (1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0)
RK_C: Tuple[float, ...] = (0.0, 0.5, 0.5, 1.0)

SOURCE_KINDS = ("ricker", "gaussian")


@dataclass(frozen=True)
class Grid:
    dim: int
    cells: Tuple[int, ...]
    spacing: float
    tile_shape: Tuple[int, ...]

    def __post_init__(self) -> None:
        if self.dim not in (1, 2):
            raise ConfigError(f"Grid dimension must be 1 or 2, got {self.dim}.")
        if len(self.cells) != self.dim or len(self.tile_shape) != self.dim:
            raise ConfigError(
                f"cells {self.cells} and tile {self.tile_shape} need {self.dim} entries."
            )
        if any(n < 4 for n in self.cells):
            raise ConfigError(f"At least 4 nodes per axis required, got {self.cells}.")
        if self.spacing <= 0:
            raise ConfigError(f"Grid spacing must be positive, got {self.spacing}.")
        for n, t in zip(self.cells, self.tile_shape):
            if t <= 0 or n % t:
                raise ConfigError(f"Tile {self.tile_shape} does not divide {self.cells}.")

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.cells)

    @property
    def node_count(self) -> int:
        return int(np.prod(self.cells))

    @property
    def field_count(self) -> int:
        return self.dim + 1

    @property
    def state_size(self) -> int:
        return self.field_count * self.node_count

    @property
    def tiles_per_axis(self) -> Tuple[int, ...]:
        return tuple(n // t for n, t in zip(self.cells, self.tile_shape))

    @property
    def tile_count(self) -> int:
        return int(np.prod(self.tiles_per_axis))

    @property
    def tile_nodes(self) -> int:
        return int(np.prod(self.tile_shape))

    @property
    def extent(self) -> Tuple[float, ...]:
        return tuple(n * self.spacing for n in self.cells)

    def coordinates(self) -> np.ndarray:
        axes = [(np.arange(n) + 0.5) * self.spacing for n in self.cells]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def nearest_node(self, location: Sequence[float]) -> int:
        if len(location) != self.dim:
            raise ShapeError(f"Location {location} is not {self.dim}-dimensional.")
        index = []
        for x, n, L in zip(location, self.cells, self.extent):
            if not 0.0 <= x <= L:
                raise ConfigError(f"Location {tuple(location)} is outside the domain.")
            index.append(min(int(x / self.spacing), n - 1))
        return int(np.ravel_multi_index(tuple(index), self.shape))

    def interior_mask(self) -> np.ndarray:
        mask = np.ones(self.shape, dtype=bool)
        for axis in range(self.dim):
            edge = [slice(None)] * self.dim
            edge[axis] = 0
            mask[tuple(edge)] = False
            edge[axis] = -1
            mask[tuple(edge)] = False
        return mask.ravel()

    def check_field(self, values: np.ndarray, name: str = "field") -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.shape != (self.node_count,):
            raise ShapeError(
                f"{name} has shape {values.shape}, expected ({self.node_count},)."
            )
        return values

    def check_state(self, state: np.ndarray) -> np.ndarray:
        state = np.asarray(state, dtype=float)
        if state.shape != (self.state_size,):
            raise ShapeError(
                f"State has shape {state.shape}, expected ({self.state_size},)."
            )
        return state

    def split_state(self, state: np.ndarray) -> np.ndarray:
        """View of a state as (field_count, node_count): velocities first, dilatation last."""
        return self.check_state(state).reshape(self.field_count, self.node_count)


@lru_cache(maxsize=16)
def difference_operators(grid: Grid) -> Tuple[sp.csr_matrix, ...]:
    """Second-order centered differences, one per axis, zero-extended past the edges.

    The matrices are skew-symmetric.
    """
    ops = []
    for axis, n in enumerate(grid.cells):
        central = sp.diags([-1.0, 1.0], [-1, 1], shape=(n, n)) / (2.0 * grid.spacing)
        factors = [sp.identity(m, format="csr") for m in grid.cells]
        factors[axis] = central
        op = factors[0]
        for f in factors[1:]:
            op = sp.kron(op, f)
        ops.append(sp.csr_matrix(op))
    return tuple(ops)


@dataclass
class Medium:
    density: np.ndarray
    wavespeed: np.ndarray

    def __post_init__(self) -> None:
        self.density = np.asarray(self.density, dtype=float)
        self.wavespeed = np.asarray(self.wavespeed, dtype=float)
        if self.density.shape != self.wavespeed.shape:
            raise ShapeError("Density and wavespeed fields differ in shape.")
        if not np.all(self.density > 0):
            logger.error("Density must be positive at every node.")
            raise InvalidMediumError("Density must be positive at every node.")
        if not np.all(self.wavespeed > 0):
            logger.error("Wavespeed must be positive at every node.")
            raise InvalidMediumError("Wavespeed must be positive at every node.")


def box_inclusion(
    grid: Grid,
    background: float,
    lower: Optional[Sequence[float]] = None,
    upper: Optional[Sequence[float]] = None,
    speed: Optional[float] = None,
) -> np.ndarray:
    """Constant background wavespeed with an optional box-shaped anomaly."""
    values = np.full(grid.node_count, float(background))
    if lower is not None and upper is not None and speed is not None:
        coords = grid.coordinates()
        inside = np.all((coords >= np.asarray(lower)) & (coords <= np.asarray(upper)), axis=1)
        values[inside] = float(speed)
    return values


@dataclass(frozen=True)
class SourceSpec:
    location: Tuple[float, ...]
    kind: str = "ricker"
    t_c: float = 0.6
    sigma_t: float = 1.0 / math.pi
    sigma_x: float = 0.05
    direction: Optional[Tuple[float, ...]] = None

    def __post_init__(self) -> None:
        if self.kind not in SOURCE_KINDS:
            raise ConfigError(f"Source kind {self.kind!r} not in {SOURCE_KINDS}.")
        if self.sigma_t <= 0 or self.sigma_x <= 0:
            raise ConfigError("Source widths sigma_t and sigma_x must be positive.")

    def unit_direction(self, dim: int) -> np.ndarray:
        if self.direction is None:
            down = np.zeros(dim)
            down[-1] = -1.0
            return down
        direction = np.asarray(self.direction, dtype=float)
        if direction.shape != (dim,) or not np.any(direction):
            raise ConfigError(f"Source direction {self.direction} is not a {dim}-vector.")
        return direction / np.linalg.norm(direction)

    def wavelet(self, t: float) -> float:
        shifted = (t - self.t_c) ** 2 / self.sigma_t ** 2
        if self.kind == "ricker":
            return (1.0 - shifted) * math.exp(-0.5 * shifted)
        return math.exp(-0.5 * shifted) / (math.sqrt(2.0 * math.pi) * self.sigma_t)


@dataclass(frozen=True)
class TimeAxis:
    dt: float
    num_steps: int
    rk_stages: int = RK_STAGES

    def __post_init__(self) -> None:
        if self.dt <= 0 or self.num_steps <= 0:
            raise ConfigError(f"Invalid time axis dt={self.dt}, steps={self.num_steps}.")
        if self.rk_stages != RK_STAGES:
            raise ConfigError("Only the classical 4-stage Runge-Kutta scheme is supported.")

    @property
    def final_time(self) -> float:
        return self.dt * self.num_steps


def cfl_dt(grid: Grid, medium: Medium, safety: float = 0.5) -> float:
    if not 0.0 < safety <= 1.0:
        raise ConfigError(f"CFL safety factor must lie in (0, 1], got {safety}.")
    wavespeed = np.asarray(medium.wavespeed, dtype=float)
    if not np.all(wavespeed > 0):
        logger.error("Wavespeed must be positive for a CFL bound.")
        raise InvalidMediumError("Wavespeed must be positive for a CFL bound.")
    return safety * grid.spacing / (math.sqrt(grid.dim) * float(wavespeed.max()))


class WaveOperator:
    """The linear spatial operator A(u) of the semi-discrete system dy/dt = A(u) y + s(t).

    Besides A and its transpose it exposes the derivatives with respect to the
    wavespeed u needed by the adjoint and second-order adjoint sweeps.
    """

    def __init__(self, grid: Grid, density: np.ndarray, wavespeed: np.ndarray) -> None:
        self.grid = grid
        self.density = grid.check_field(density, "density")
        self.wavespeed = grid.check_field(wavespeed, "wavespeed")
        Medium(self.density, self.wavespeed)
        self.diff = difference_operators(grid)
        self.diff_t = tuple(c.T.tocsr() for c in self.diff)
        self.interior = grid.interior_mask().astype(float)

        d, n = grid.dim, grid.node_count
        inv_rho = sp.diags(1.0 / self.density)
        stiffness = sp.diags(self.density * self.wavespeed ** 2)
        mask = sp.diags(self.interior)
        blocks: List[List[Optional[sp.spmatrix]]] = [
            [None] * (d + 1) for _ in range(d + 1)
        ]
        for a, c in enumerate(self.diff):
            blocks[a][d] = inv_rho @ c @ stiffness
            blocks[d][a] = mask @ c
        blocks[0][0] = sp.csr_matrix((n, n))
        self.matrix = sp.bmat(blocks, format="csr")
        self.matrix_t = self.matrix.T.tocsr()

    def apply(self, state: np.ndarray) -> np.ndarray:
        return self.matrix @ state

    def apply_transpose(self, adjoint: np.ndarray) -> np.ndarray:
        return self.matrix_t @ adjoint

    def _pull(self, adjoint: np.ndarray) -> np.ndarray:
        """sum_a C_a^T (lambda_a / rho)."""
        n = self.grid.node_count
        acc = np.zeros(n)
        for a, ct in enumerate(self.diff_t):
            acc += ct @ (adjoint[a * n:(a + 1) * n] / self.density)
        return acc

    def parameter_action(self, state: np.ndarray, direction: np.ndarray) -> np.ndarray:
        """(dA/du [p]) y: the velocity slots of rho^-1 C_a (2 rho u p e)."""
        d, n = self.grid.dim, self.grid.node_count
        e = state[d * n:]
        weighted = 2.0 * self.density * self.wavespeed * direction * e
        out = np.zeros_like(state)
        for a, c in enumerate(self.diff):
            out[a * n:(a + 1) * n] = (c @ weighted) / self.density
        return out

    def parameter_action_transpose(
        self, state: np.ndarray, adjoint: np.ndarray, weight: Optional[np.ndarray] = None
    ) -> np.ndarray:
        """Transpose of p -> (dA/du [p]) y applied to an adjoint, a wavespeed-shaped field.

        `weight` replaces the wavespeed factor, which gives the directional
        derivative of this map with respect to u.
        """
        d, n = self.grid.dim, self.grid.node_count
        factor = self.wavespeed if weight is None else weight
        return 2.0 * self.density * factor * state[d * n:] * self._pull(adjoint)

    def perturbation_transpose(self, direction: np.ndarray, adjoint: np.ndarray) -> np.ndarray:
        """(dA/du [p])^T lambda: only the dilatation slot is non-zero."""
        d, n = self.grid.dim, self.grid.node_count
        out = np.zeros_like(adjoint)
        out[d * n:] = 2.0 * self.density * self.wavespeed * direction * self._pull(adjoint)
        return out


class SourceTerm:
    """Sum of source forcings divided by density, laid out as a state vector."""

    def __init__(self, grid: Grid, density: np.ndarray, sources: Sequence[SourceSpec]) -> None:
        self.grid = grid
        self.sources = list(sources)
        density = grid.check_field(density, "density")
        coords = grid.coordinates()
        n, d = grid.node_count, grid.dim
        self.profiles = np.zeros((len(self.sources), grid.state_size))
        for k, src in enumerate(self.sources):
            direction = src.unit_direction(d)
            if src.kind == "ricker":
                # rho(x) N(x; x0, sigma_x) direction / rho
                dist2 = np.sum((coords - np.asarray(src.location)) ** 2, axis=1)
                spatial = np.exp(-0.5 * dist2 / src.sigma_x ** 2) / (
                    math.sqrt(2.0 * math.pi) * src.sigma_x
                )
            else:
                spatial = np.zeros(n)
                spatial[grid.nearest_node(src.location)] = grid.spacing ** (-d)
                spatial = spatial / density
            for a in range(d):
                self.profiles[k, a * n:(a + 1) * n] = spatial * direction[a]

    def at(self, t: float) -> np.ndarray:
        if not self.sources:
            return np.zeros(self.grid.state_size)
        weights = np.array([src.wavelet(t) for src in self.sources])
        return weights @ self.profiles


class Receivers:
    """Nearest-node sampling of all velocity components (the observation operator B)."""

    def __init__(self, grid: Grid, locations: Sequence[Sequence[float]]) -> None:
        self.grid = grid
        self.locations = [tuple(float(x) for x in loc) for loc in locations]
        self.nodes = np.array([grid.nearest_node(loc) for loc in self.locations], dtype=int)

    @property
    def count(self) -> int:
        return len(self.nodes)

    def observe(self, state: np.ndarray) -> np.ndarray:
        fields = state.reshape(self.grid.field_count, self.grid.node_count)
        return fields[: self.grid.dim, self.nodes].T.copy()

    def adjoint(self, values: np.ndarray) -> np.ndarray:
        out = np.zeros((self.grid.field_count, self.grid.node_count))
        for a in range(self.grid.dim):
            np.add.at(out[a], self.nodes, values[:, a])
        return out.ravel()


@dataclass
class ForwardConfig:
    grid: Grid
    density: np.ndarray
    time: TimeAxis
    sources: List[SourceSpec] = field(default_factory=list)
    receivers: List[Tuple[float, ...]] = field(default_factory=list)
    initial_state: Optional[np.ndarray] = None

    def observation_operator(self) -> Receivers:
        return Receivers(self.grid, self.receivers)

    def start_state(self) -> np.ndarray:
        if self.initial_state is None:
            return np.zeros(self.grid.state_size)
        y0 = self.grid.check_state(self.initial_state).copy()
        n = self.grid.node_count
        y0[self.grid.dim * n:] *= self.grid.interior_mask()
        return y0


def rhs(
    state: np.ndarray,
    medium: Medium,
    grid: Grid,
    t: float,
    sources: Sequence[SourceSpec],
) -> np.ndarray:
    """Time derivative (dv/dt, de/dt) of a state."""
    state = grid.check_state(state)
    op = WaveOperator(grid, medium.density, medium.wavespeed)
    return op.apply(state) + SourceTerm(grid, medium.density, sources).at(t)


def rk4_step(
    y: np.ndarray,
    dt: float,
    apply: Callable[[np.ndarray], np.ndarray],
    forcing: Callable[[int], np.ndarray],
) -> Tuple[List[np.ndarray], np.ndarray]:
    """One classical RK4 step of dy/dt = apply(y) + forcing; returns stage states and y_next."""
    stages: List[np.ndarray] = []
    slopes: List[np.ndarray] = []
    for i in range(RK_STAGES):
        stage = y.copy()
        for j, a in enumerate(RK_A[i]):
            if a:
                stage += (dt * a) * slopes[j]
        stages.append(stage)
        slopes.append(apply(stage) + forcing(i))
    y_next = y.copy()
    for b, slope in zip(RK_B, slopes):
        y_next += (dt * b) * slope
    return stages, y_next


class Stepper:
    """Advances the forward system one step; shared by forward solves and checkpoint replay."""

    def __init__(self, config: ForwardConfig, wavespeed: np.ndarray) -> None:
        self.config = config
        self.operator = WaveOperator(config.grid, config.density, wavespeed)
        self.source = SourceTerm(config.grid, config.density, config.sources)
        self.dt = config.time.dt
        self.num_steps = config.time.num_steps

    def step(self, n: int, y: np.ndarray) -> Tuple[List[np.ndarray], np.ndarray]:
        t = n * self.dt
        return rk4_step(
            y,
            self.dt,
            self.operator.apply,
            lambda i: self.source.at(t + RK_C[i] * self.dt),
        )


@dataclass
class ForwardResult:
    observations: np.ndarray
    final_state: np.ndarray
    store: Optional[object] = None


def forward_solve(u: np.ndarray, config: ForwardConfig, store=None) -> ForwardResult:
    """Integrate from the initial state, handing every RK stage state to `store`.

    Observations hold receiver velocities after every step, shape (T, receivers, d).
    """
    grid = config.grid
    u = grid.check_field(u, "wavespeed")
    if store is not None and not store.is_empty:
        logger.error("Forward solve needs an empty trajectory store.")
        raise StorageContractError("Forward solve needs an empty trajectory store.")
    stepper = Stepper(config, u)
    receivers = config.observation_operator()
    if store is not None:
        store.attach(stepper)

    y = config.start_state()
    observations = np.zeros((stepper.num_steps, receivers.count, grid.dim))
    for n in range(stepper.num_steps):
        stages, y = stepper.step(n, y)
        if store is not None:
            for s, stage in enumerate(stages):
                store.put((n, s), stage)
        if not np.all(np.isfinite(y)):
            logger.error(f"Forward solve diverged at timestep {n}.")
            raise DivergenceError(n)
        observations[n] = receivers.observe(y)
    if store is not None:
        store.seal()
    return ForwardResult(observations=observations, final_state=y, store=store)


def energy(state: np.ndarray, grid: Grid, medium: Medium) -> float:
    fields = grid.split_state(state)
    kinetic = np.sum(medium.density * np.sum(fields[: grid.dim] ** 2, axis=0))
    strain = np.sum(medium.density * medium.wavespeed ** 2 * fields[grid.dim] ** 2)
    return float(kinetic + strain)
