import numpy as np
import pytest

from aeml import ConfigError, OrderingError, ShapeError
from aeml.adjoint_grad import (
    LinearObjective,
    PriorRegularizer,
    SweepCounter,
    WaveObjective,
    hessian_vector,
    misfit_and_gradient,
    synthesize_data,
)
from aeml.bayes_prior import BiLaplacianPrior
from aeml.trajectory_store import CheckpointStore, FullStore, QuantizerStore
from aeml.quant_codec import QuantCodec
from aeml.wave_core import ForwardConfig, Grid, Medium, SourceSpec, TimeAxis, cfl_dt, forward_solve

STEPS = 16
GRID = Grid(2, (8, 8), 1.0 / 8, (4, 4))


def build_config() -> ForwardConfig:
    density = np.ones(GRID.node_count)
    dt = cfl_dt(GRID, Medium(density, np.full(GRID.node_count, 2.0)))
    return ForwardConfig(
        grid=GRID,
        density=density,
        time=TimeAxis(dt, STEPS),
        sources=[SourceSpec((0.5, 0.8), t_c=0.1, sigma_t=0.04)],
        receivers=[(0.25, 0.9), (0.5, 0.9), (0.75, 0.9)],
    )


def truth() -> np.ndarray:
    coords = GRID.coordinates()
    return 1.5 + 0.3 * np.exp(-np.sum((coords - 0.5) ** 2, axis=1) / 0.05)


def build_objective(with_prior: bool = False) -> WaveObjective:
    config = build_config()
    data, sigma = synthesize_data(truth(), config, noise_level=0.0)
    regularizer = PriorRegularizer(BiLaplacianPrior(GRID, 1.5, alpha=0.1)) if with_prior else None
    return WaveObjective(config, data, sigma, regularizer)


def direction(seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(GRID.node_count)


def test_noise_free_data_has_unit_sigma():
    data, sigma = synthesize_data(truth(), build_config(), noise_level=0.0)
    assert sigma == 1.0
    assert data.shape == (STEPS, 3, 2)
    noisy, sigma = synthesize_data(truth(), build_config(), noise_level=0.01, seed=1)
    assert sigma == pytest.approx(0.01 * np.abs(data).max())
    assert not np.array_equal(noisy, data)


def test_misfit_vanishes_at_the_truth():
    objective = build_objective()
    result = misfit_and_gradient(truth(), objective)
    assert result.J == 0.0
    assert np.all(result.g == 0.0)


@pytest.mark.parametrize("with_prior", [False, True])
def test_gradient_matches_central_differences(with_prior):
    objective = build_objective(with_prior)
    u, p = np.full(GRID.node_count, 1.5), direction()
    g = misfit_and_gradient(u, objective).g
    eps = 1e-5
    fd = (objective.cost(u + eps * p) - objective.cost(u - eps * p)) / (2 * eps)
    assert abs(fd - g @ p) <= 1e-5 * abs(fd)


def test_hessian_action_matches_gradient_differences():
    objective = build_objective(with_prior=True)
    u, p = np.full(GRID.node_count, 1.5), direction(1)
    eps = 1e-5
    g_plus = objective.misfit_and_gradient(u + eps * p).g
    g_minus = objective.misfit_and_gradient(u - eps * p).g
    store = FullStore()
    objective.misfit_and_gradient(u, store)
    hp = hessian_vector(u, p, objective, store).Hp
    fd = (g_plus - g_minus) / (2 * eps)
    assert np.linalg.norm(hp - fd) <= 1e-5 * np.linalg.norm(fd)


def test_hessian_action_is_symmetric():
    objective = build_objective()
    u, p, q = np.full(GRID.node_count, 1.5), direction(2), direction(3)
    store = FullStore()
    objective.misfit_and_gradient(u, store)
    hp = objective.hessian_vector(u, p, store).Hp
    hq = objective.hessian_vector(u, q, store).Hp
    assert q @ hp == pytest.approx(p @ hq, rel=1e-8)


def test_hessian_action_needs_the_matching_gradient():
    objective = build_objective()
    u = np.full(GRID.node_count, 1.5)
    store = FullStore()
    with pytest.raises(OrderingError):
        objective.hessian_vector(u, direction(), store)
    objective.misfit_and_gradient(u, store)
    with pytest.raises(OrderingError):
        objective.hessian_vector(u + 0.1, direction(), store)
    with pytest.raises(OrderingError):
        objective.hessian_vector(u, direction(), FullStore())


def test_checkpointing_costs_one_and_two_replays():
    objective = build_objective()
    u, p = np.full(GRID.node_count, 1.5), direction()
    full = FullStore()
    reference = objective.misfit_and_gradient(u, full)
    reference_hp = objective.hessian_vector(u, p, full)
    assert reference.counter.recompute_sweeps == 0.0

    store = CheckpointStore(4)
    result = objective.misfit_and_gradient(u, store)
    assert np.array_equal(result.g, reference.g)
    assert result.counter.recompute_sweeps == 1.0
    hvp = objective.hessian_vector(u, p, store)
    assert np.array_equal(hvp.Hp, reference_hp.Hp)
    assert hvp.counter.recompute_sweeps == 2.0
    assert hvp.counter.incfwd_sweeps == hvp.counter.incadj_sweeps == 1


def test_linearized_map_and_its_adjoint_agree():
    objective = build_objective()
    u = np.full(GRID.node_count, 1.5)
    rng = np.random.default_rng(5)
    p, w = rng.standard_normal(GRID.node_count), rng.standard_normal(objective.data.shape)
    store = FullStore()
    forward_solve(u, objective.config, store)
    linearized, _ = objective.incremental_forward(u, p, store)
    adjoint, _ = objective.adjoint_action(u, w, store)
    lhs, rhs = float(np.sum(linearized * w)), float(p @ adjoint)
    assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


def worst_vector_error(store, reference) -> float:
    """Largest relative error over the nonzero consolidated vectors held by a codec store."""
    worst = 0.0
    for key in sorted(reference._states):
        exact, _ = store.consolidator.pack([reference.get(key)])
        lossy, _ = store.consolidator.pack([store.get(key)])
        norms = np.linalg.norm(exact, axis=1)
        live = norms > 0.0
        if np.any(live):
            errors = np.linalg.norm(lossy - exact, axis=1)[live] / norms[live]
            worst = max(worst, float(errors.max()))
    return worst


@pytest.mark.parametrize("eta", [1e-8, 1e-4])
def test_lossy_store_gradient_error_tracks_the_codec_error(eta):
    objective = build_objective()
    u = np.full(GRID.node_count, 1.5)
    full = FullStore()
    reference = objective.misfit_and_gradient(u, full).g
    store = QuantizerStore(QuantCodec(eta))
    result = objective.misfit_and_gradient(u, store)
    worst = worst_vector_error(store, full)
    assert 0.0 < worst < 1.0
    assert np.linalg.norm(result.g - reference) < 10.0 * worst * np.linalg.norm(reference)
    assert result.counter.compress_calls > 0


def test_objective_validates_its_inputs():
    config = build_config()
    with pytest.raises(ShapeError):
        WaveObjective(config, np.zeros((STEPS, 2, 2)), 1.0)
    with pytest.raises(ConfigError):
        WaveObjective(config, np.zeros((STEPS, 3, 2)), 0.0)
    with pytest.raises(ShapeError):
        build_objective().cost(np.ones(5))


def test_linear_objective():
    rng = np.random.default_rng(4)
    matrix = rng.standard_normal((6, 4))
    data = rng.standard_normal(6)
    objective = LinearObjective(matrix, data, noise_sigma=0.5)
    u, p = rng.standard_normal(4), rng.standard_normal(4)
    result = objective.misfit_and_gradient(u)
    assert np.allclose(result.g, matrix.T @ (matrix @ u - data) / 0.25)
    assert result.J == pytest.approx(objective.cost(u))
    assert np.allclose(objective.hessian_vector(u, p).Hp, matrix.T @ matrix @ p / 0.25)
    with pytest.raises(ShapeError):
        LinearObjective(matrix, np.zeros(5))


def test_sweep_counters_add_up():
    total = SweepCounter(forward_sweeps=1, recompute_steps=8, steps_per_sweep=8) + SweepCounter(
        incfwd_sweeps=1, recompute_steps=16, steps_per_sweep=8
    )
    assert total.recompute_sweeps == 3.0
    values = total.to_dict()
    assert values["forward_sweeps"] == 1 and values["incfwd_sweeps"] == 1
    assert values["recompute_sweeps"] == 3.0
