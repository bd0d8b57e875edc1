"""Flattening of stage states into fixed-length vectors a codec compresses.

space: one vector per (field, tile) at a single stage key, N_in = tile_nodes.
time:  one vector per (field, tile) over a window of W consecutive stage keys,
       stage-major, N_in = W * tile_nodes. A short final window is zero-padded.

Each physical field is consolidated independently and the in-tile node order
is the same on every tile.
"""
from enum import Enum
from typing import List, Sequence, Tuple

import numpy as np
from loguru import logger

from aeml import RK_STAGES, ConfigError, ShapeError, TStageKey
from aeml.wave_core import Grid


class Scheme(Enum):
    SPACE = "space"
    TIME = "time"


def tile_index(grid: Grid) -> np.ndarray:
    """Node indices per tile, shape (tile_count, tile_nodes), in-tile C order."""
    ids = np.arange(grid.node_count).reshape(grid.shape)
    if grid.dim == 1:
        return ids.reshape(grid.tiles_per_axis[0], grid.tile_shape[0]).copy()
    (tx, tz), (sx, sz) = grid.tiles_per_axis, grid.tile_shape
    return ids.reshape(tx, sx, tz, sz).transpose(0, 2, 1, 3).reshape(tx * tz, sx * sz).copy()


def consolidate_space(state: np.ndarray, grid: Grid) -> np.ndarray:
    """(field_count * tile_count, tile_nodes) vectors of one stage state."""
    fields = grid.split_state(state)
    return fields[:, tile_index(grid)].reshape(-1, grid.tile_nodes)


def scatter_space(vectors: np.ndarray, grid: Grid) -> np.ndarray:
    expected = (grid.field_count * grid.tile_count, grid.tile_nodes)
    if vectors.shape != expected:
        raise ShapeError(f"Space vectors have shape {vectors.shape}, expected {expected}.")
    fields = np.empty((grid.field_count, grid.node_count))
    fields[:, tile_index(grid)] = vectors.reshape(
        grid.field_count, grid.tile_count, grid.tile_nodes
    )
    return fields.ravel()


def consolidate_time(states: np.ndarray, grid: Grid, window: int) -> Tuple[np.ndarray, int]:
    """Vectors of a window of stage states; returns (vectors, pad)."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    count = states.shape[0]
    if count > window:
        raise ShapeError(f"Window overflow: {count} stage states for a window of {window}.")
    if count == 0 or states.shape[1] != grid.state_size:
        raise ShapeError(f"Incomplete window of shape {states.shape}.")
    pad = window - count
    if pad:
        states = np.vstack([states, np.zeros((pad, grid.state_size))])
    # (W, fields, tiles, tile_nodes) -> (fields, tiles, W, tile_nodes)
    blocks = states.reshape(window, grid.field_count, grid.node_count)[:, :, tile_index(grid)]
    vectors = blocks.transpose(1, 2, 0, 3).reshape(-1, window * grid.tile_nodes)
    return vectors, pad


def scatter_time(vectors: np.ndarray, grid: Grid, window: int, pad: int = 0) -> np.ndarray:
    """Inverse of consolidate_time; drops the padded tail, shape (window - pad, state_size)."""
    expected = (grid.field_count * grid.tile_count, window * grid.tile_nodes)
    if vectors.shape != expected:
        raise ShapeError(f"Time vectors have shape {vectors.shape}, expected {expected}.")
    blocks = vectors.reshape(grid.field_count, grid.tile_count, window, grid.tile_nodes)
    states = np.empty((window, grid.field_count, grid.node_count))
    states[:, :, tile_index(grid)] = blocks.transpose(2, 0, 1, 3)
    return states.reshape(window, grid.state_size)[: window - pad]


class Consolidator:
    """Maps stage keys to consolidation units and packs/unpacks their vectors."""

    def __init__(self, grid: Grid, scheme: Scheme = Scheme.SPACE, window: int = 16) -> None:
        if scheme == Scheme.TIME and window < 1:
            raise ConfigError(f"Time window must be positive, got {window}.")
        self.grid = grid
        self.scheme = scheme
        self.window = window if scheme == Scheme.TIME else 1

    @property
    def n_in(self) -> int:
        return self.window * self.grid.tile_nodes

    @property
    def vectors_per_unit(self) -> int:
        return self.grid.field_count * self.grid.tile_count

    @staticmethod
    def flat_index(key: TStageKey) -> int:
        return key[0] * RK_STAGES + key[1]

    def unit_of(self, key: TStageKey) -> Tuple[int, int]:
        """(unit id, position inside the unit)."""
        return divmod(self.flat_index(key), self.window)

    def unit_count(self, num_steps: int) -> int:
        return -(-num_steps * RK_STAGES // self.window)

    def pack(self, states: Sequence[np.ndarray]) -> Tuple[np.ndarray, int]:
        if self.scheme == Scheme.SPACE:
            if len(states) != 1:
                raise ShapeError("Space consolidation packs exactly one stage state.")
            return consolidate_space(states[0], self.grid), 0
        vectors, pad = consolidate_time(np.asarray(states), self.grid, self.window)
        if pad:
            logger.debug(f"Final time window padded by {pad} stage states.")
        return vectors, pad

    def unpack(self, vectors: np.ndarray, pad: int = 0) -> List[np.ndarray]:
        if self.scheme == Scheme.SPACE:
            return [scatter_space(vectors, self.grid)]
        return list(scatter_time(vectors, self.grid, self.window, pad))
