import numpy as np
import pytest

from aeml import ConfigError, ShapeError
from aeml.bayes_prior import BiLaplacianPrior, neumann_laplacian
from aeml.wave_core import Grid


def build_prior(cells: int = 8, **kwargs) -> BiLaplacianPrior:
    grid = Grid(2, (cells, cells), 1.0 / cells, (cells // 2, cells // 2))
    return BiLaplacianPrior(grid, 1.0, **kwargs)


def test_neumann_laplacian_annihilates_constants():
    grid = Grid(2, (6, 8), 0.1, (3, 4))
    lap = neumann_laplacian(grid)
    assert np.allclose(lap @ np.ones(grid.node_count), 0.0)
    assert abs(lap - lap.T).max() == 0.0


def test_parameters_are_validated():
    with pytest.raises(ConfigError):
        build_prior(alpha=0.0)
    with pytest.raises(ConfigError):
        build_prior(theta=-1.0)


def test_default_clamp_is_a_fraction_of_the_mean():
    assert build_prior().c_min == pytest.approx(0.1)
    assert build_prior(c_min=0.5).c_min == 0.5


def test_covariance_inverts_precision():
    prior = build_prior()
    w = np.random.default_rng(0).standard_normal(prior.grid.node_count)
    assert np.allclose(prior.apply_covariance(prior.apply_precision(w)), w, rtol=1e-7, atol=1e-9)


def test_energy_and_gradient():
    prior = build_prior(theta=0.05)
    rng = np.random.default_rng(1)
    u = prior.mean + rng.standard_normal(prior.grid.node_count)
    p = rng.standard_normal(prior.grid.node_count)
    eps = 1e-6
    fd = (prior.energy(u + eps * p) - prior.energy(u - eps * p)) / (2 * eps)
    assert prior.gradient(u) @ p == pytest.approx(fd, rel=1e-6)
    assert prior.energy(prior.mean) == 0.0
    assert np.allclose(prior.hessian_action(p), prior.apply_precision(p))


def test_identity_operator_when_theta_is_zero():
    prior = build_prior(alpha=2.0, theta=0.0)
    w = np.arange(prior.grid.node_count, dtype=float)
    assert np.allclose(prior.apply_precision(w), 4.0 * w)


def test_sample_statistics_match_the_prior():
    prior = build_prior(theta=0.05, c_min=-1e9)
    count = 10_000
    draws = np.array([prior.sample(seed) for seed in range(count)])
    variance = np.diag(prior.covariance_matrix())
    center = prior.grid.nearest_node((0.5, 0.5))

    empirical = draws.var(axis=0)
    assert abs(empirical[center] - variance[center]) <= 0.1 * variance[center]

    deviation = np.abs(draws.mean(axis=0) - prior.mean) / np.sqrt(variance / count)
    assert deviation[center] < 3.0
    # all 64 nodes at once
    assert deviation.max() < 4.5


def test_samples_are_deterministic_and_clamped():
    prior = build_prior(alpha=0.2, c_min=0.9)
    a, b = prior.sample(7), prior.sample(7)
    assert np.array_equal(a, b)
    assert a.min() >= 0.9


def test_centered_samples_move_with_the_center():
    prior = build_prior(c_min=-1e9)
    center = np.full(prior.grid.node_count, 3.0)
    assert np.allclose(prior.sample(3, center=center) - center, prior.sample(3) - prior.mean)


def test_field_shape_is_checked():
    with pytest.raises(ShapeError):
        build_prior().apply_precision(np.ones(5))
