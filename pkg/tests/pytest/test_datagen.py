import numpy as np
import pytest

from aeml import ConfigError, StorageContractError
from aeml.bayes_prior import BiLaplacianPrior
from aeml.datagen import HarvestStore, generate, shuffle_records
from aeml.formats import dataset_record, read_dataset
from aeml.trajectory_store import StoreKind
from aeml.wave_core import ForwardConfig, Grid, Medium, SourceSpec, TimeAxis, cfl_dt

STEPS = 6
GRID = Grid(2, (8, 8), 1.0 / 8, (4, 4))
# fields x tiles
VECTORS_PER_STATE = 3 * 4


def build_config() -> ForwardConfig:
    density = np.ones(GRID.node_count)
    dt = cfl_dt(GRID, Medium(density, np.full(GRID.node_count, 2.5)))
    return ForwardConfig(
        grid=GRID,
        density=density,
        time=TimeAxis(dt, STEPS),
        sources=[SourceSpec((0.5, 0.8), t_c=0.05, sigma_t=0.02)],
        receivers=[(0.5, 0.9)],
    )


def build_prior() -> BiLaplacianPrior:
    return BiLaplacianPrior(GRID, 1.5, alpha=10.0, theta=0.01)


def test_time_scheme_keeps_every_window(tmp_path):
    report = generate(build_prior(), build_config(), 1, 1.0, 7, tmp_path, scheme="time", window=4)
    windows = -(-STEPS * 4 // 4)
    assert report.candidates == report.kept == windows * VECTORS_PER_STATE
    dataset = read_dataset(report.shards)
    assert dataset.n_in == 4 * GRID.tile_nodes
    assert dataset.scheme == "time"
    assert dataset.payload.min() >= 0.0 and dataset.payload.max() <= 1.0


def test_short_final_window_is_flushed(tmp_path):
    report = generate(build_prior(), build_config(), 1, 1.0, 7, tmp_path, scheme="time", window=5)
    assert report.candidates == -(-STEPS * 4 // 5) * VECTORS_PER_STATE


def test_kept_fraction_is_binomial(tmp_path):
    report = generate(build_prior(), build_config(), 3, 0.25, 11, tmp_path)
    assert report.candidates == 3 * STEPS * 4 * VECTORS_PER_STATE
    spread = 4 * np.sqrt(report.candidates * 0.25 * 0.75)
    assert abs(report.kept - 0.25 * report.candidates) <= spread
    assert [p.name for p in report.shards] == ["shard_0000.aetd", "shard_0001.aetd", "shard_0002.aetd"]


def test_same_seed_gives_identical_shards(tmp_path):
    first = generate(build_prior(), build_config(), 2, 0.5, 3, tmp_path / "a")
    second = generate(build_prior(), build_config(), 2, 0.5, 3, tmp_path / "b", workers=2)
    third = generate(build_prior(), build_config(), 2, 0.5, 4, tmp_path / "c")
    for a, b in zip(first.shards, second.shards):
        assert a.read_bytes() == b.read_bytes()
    assert first.shards[0].read_bytes() != third.shards[0].read_bytes()


def test_bad_arguments(tmp_path):
    with pytest.raises(ConfigError):
        generate(build_prior(), build_config(), 0, 0.5, 0, tmp_path)
    with pytest.raises(ConfigError):
        generate(build_prior(), build_config(), 1, 0.0, 0, tmp_path)
    with pytest.raises(ConfigError):
        HarvestStore(1.5, np.random.default_rng(0))


def test_harvest_store_is_write_only():
    store = HarvestStore(1.0, np.random.default_rng(0))
    assert store.kind == StoreKind.HARVEST
    with pytest.raises(StorageContractError):
        store.put((0, 0), np.zeros(GRID.state_size))
    with pytest.raises(StorageContractError):
        store.get((0, 0))


def test_shuffle_stays_inside_each_buffer():
    records = np.zeros(10, dtype=dataset_record(2))
    records["offset"] = np.arange(10)
    shuffled = shuffle_records(records, np.random.default_rng(0), buffer=4)
    assert sorted(shuffled["offset"][:4]) == [0, 1, 2, 3]
    assert sorted(shuffled["offset"][4:8]) == [4, 5, 6, 7]
    assert sorted(shuffled["offset"][8:]) == [8, 9]
