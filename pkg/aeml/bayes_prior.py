"""BiLaplacian-type Gaussian prior on the wavespeed field.

A_pr = alpha (-theta Lap_h + I), with a zero-flux (ghost reflection) Laplacian.
The prior precision is A_pr^2 and the covariance A_pr^-2.
"""
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp
from loguru import logger
from scipy.sparse.linalg import cg, splu

from aeml import ConfigError, ShapeError, SolverError
from aeml.wave_core import Grid

TSeed = Union[None, int, np.random.SeedSequence, np.random.Generator]

CG_RTOL = 1e-10


def neumann_laplacian(grid: Grid) -> sp.csr_matrix:
    """Five-point (three-point in 1D) Laplacian on cell-centred nodes with ghost reflection."""
    factors = []
    for n in grid.cells:
        lap = sp.diags([1.0, -2.0, 1.0], [-1, 0, 1], shape=(n, n)).tolil()
        lap[0, 0] = -1.0
        lap[n - 1, n - 1] = -1.0
        factors.append(sp.csr_matrix(lap) / grid.spacing ** 2)
    if grid.dim == 1:
        return factors[0]
    nx, nz = grid.cells
    return sp.csr_matrix(
        sp.kron(factors[0], sp.identity(nz)) + sp.kron(sp.identity(nx), factors[1])
    )


class BiLaplacianPrior:

    DEFAULT_ALPHA = 1.0
    DEFAULT_THETA = 0.01
    DEFAULT_CLAMP_FRACTION = 0.1

    def __init__(
        self,
        grid: Grid,
        mean: Union[float, np.ndarray],
        alpha: float = DEFAULT_ALPHA,
        theta: float = DEFAULT_THETA,
        c_min: Optional[float] = None,
    ) -> None:
        if alpha <= 0:
            raise ConfigError(f"Prior alpha must be positive, got {alpha}.")
        if theta < 0:
            raise ConfigError(f"Prior theta must be non-negative, got {theta}.")
        self.grid = grid
        self.alpha = float(alpha)
        self.theta = float(theta)
        if np.isscalar(mean):
            self.mean = np.full(grid.node_count, float(mean))  # type: ignore[arg-type]
        else:
            self.mean = grid.check_field(np.asarray(mean), "prior mean").copy()
        self.c_min = (
            float(c_min)
            if c_min is not None
            else self.DEFAULT_CLAMP_FRACTION * float(self.mean.min())
        )
        identity = sp.identity(grid.node_count, format="csr")
        self.operator = sp.csr_matrix(
            self.alpha * (self.theta * -neumann_laplacian(grid) + identity)
        )
        self._lu = None

    def __repr__(self) -> str:
        return f"BiLaplacianPrior(alpha={self.alpha}, theta={self.theta}, c_min={self.c_min})"  # pragma: no cover

    def _check(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if w.shape != (self.grid.node_count,):
            logger.error(f"Prior field has shape {w.shape}, expected ({self.grid.node_count},).")
            raise ShapeError(
                f"Prior field has shape {w.shape}, expected ({self.grid.node_count},)."
            )
        return w

    def apply_operator(self, w: np.ndarray) -> np.ndarray:
        return self.operator @ self._check(w)

    def apply_precision(self, w: np.ndarray) -> np.ndarray:
        return self.operator @ (self.operator @ self._check(w))

    def _solve(self, rhs: np.ndarray) -> np.ndarray:
        x, info = cg(self.operator, rhs, rtol=CG_RTOL, atol=0.0, maxiter=self.grid.node_count)
        if info != 0:
            logger.error(f"Prior CG did not converge (info={info}).")
            raise SolverError(f"Prior CG did not converge (info={info}).")
        return x

    def apply_covariance(self, w: np.ndarray) -> np.ndarray:
        return self._solve(self._solve(self._check(w)))

    def energy(self, u: np.ndarray) -> float:
        """0.5 ||u - u0||^2 in the precision norm."""
        du = self._check(u) - self.mean
        return 0.5 * float(du @ self.apply_precision(du))

    def gradient(self, u: np.ndarray) -> np.ndarray:
        return self.apply_precision(self._check(u) - self.mean)

    def hessian_action(self, p: np.ndarray) -> np.ndarray:
        return self.apply_precision(p)

    def covariance_matrix(self) -> np.ndarray:
        """Dense A_pr^-2; only meant for small grids."""
        inverse = np.linalg.inv(self.operator.toarray())
        return inverse @ inverse

    def perturbation(self, seed: TSeed = None) -> np.ndarray:
        """A zero-mean draw A_pr^-1 w, w standard normal per node."""
        if self._lu is None:
            self._lu = splu(self.operator.tocsc())
        rng = np.random.default_rng(seed)
        return self._lu.solve(rng.standard_normal(self.grid.node_count))

    def sample(self, seed: TSeed = None, center: Optional[np.ndarray] = None) -> np.ndarray:
        base = self.mean if center is None else self._check(center)
        u = base + self.perturbation(seed)
        low = u < self.c_min
        if np.any(low):
            logger.warning(
                f"Prior sample clamped to c_min={self.c_min:g} at {int(low.sum())} nodes."
            )
            u[low] = self.c_min
        return u
