"""Training data for the autoencoder: wave solutions at prior draws, consolidated and subsampled."""
from dataclasses import dataclass, field
from multiprocessing.pool import ThreadPool
from pathlib import Path
from typing import Iterator, List, Optional, Union

import numpy as np
from loguru import logger

from aeml import ConfigError, DivergenceError, StorageContractError, TStageKey
from aeml.bayes_prior import BiLaplacianPrior
from aeml.consolidation import Consolidator, Scheme
from aeml.formats import TPath, dataset_record, write_dataset
from aeml.mlp_codec import normalize_batch
from aeml.trajectory_store import SpillRecord, StoreKind, TrajectoryStore
from aeml.wave_core import ForwardConfig, forward_solve

SHUFFLE_BUFFER = 2 ** 16


class HarvestStore(TrajectoryStore):
    """Write-only store that keeps each consolidated vector with probability keep_fraction."""

    def __init__(
        self,
        keep_fraction: float,
        rng: np.random.Generator,
        scheme: Union[Scheme, str] = Scheme.SPACE,
        window: int = 16,
    ) -> None:
        super().__init__(StoreKind.HARVEST)
        if not 0.0 < keep_fraction <= 1.0:
            raise ConfigError(f"keep_fraction must lie in (0, 1], got {keep_fraction}.")
        self.keep_fraction = keep_fraction
        self.rng = rng
        self.scheme = Scheme(scheme)
        self.window = window
        self.consolidator: Optional[Consolidator] = None
        self.candidates = 0
        self._records: List[np.ndarray] = []
        self._pending: List[np.ndarray] = []

    def attach(self, stepper) -> None:
        super().attach(stepper)
        self.consolidator = Consolidator(stepper.config.grid, self.scheme, self.window)

    def _harvest(self, states: List[np.ndarray]) -> None:
        assert self.consolidator is not None
        vectors, _ = self.consolidator.pack(states)
        normalized, offsets, scales = normalize_batch(vectors)
        keep = self.rng.random(len(vectors)) < self.keep_fraction
        self.candidates += len(vectors)
        if np.any(keep):
            records = np.zeros(int(keep.sum()), dtype=dataset_record(self.consolidator.n_in))
            records["offset"], records["scale"] = offsets[keep], scales[keep]
            records["payload"] = normalized[keep]
            self._records.append(records)

    def _put(self, key: TStageKey, state: np.ndarray) -> None:
        if self.consolidator is None:
            raise StorageContractError("Harvest store used before attach.")
        if self.scheme == Scheme.SPACE:
            self._harvest([state])
            return
        self._pending.append(state.copy())
        if len(self._pending) == self.consolidator.window:
            self._harvest(self._pending)
            self._pending = []

    def seal(self) -> None:
        if self._pending:
            self._harvest(self._pending)
            self._pending = []
        super().seal()

    def get(self, key: TStageKey) -> np.ndarray:
        raise StorageContractError("A harvest store keeps no trajectory to read back.")

    def resident_bytes(self) -> int:
        return sum(r.nbytes for r in self._records)

    def spill_records(self) -> Iterator[SpillRecord]:
        return iter(())

    def records(self) -> np.ndarray:
        assert self.consolidator is not None
        if not self._records:
            return np.zeros(0, dtype=dataset_record(self.consolidator.n_in))
        return np.concatenate(self._records)


def shuffle_records(records: np.ndarray, rng: np.random.Generator, buffer: int = SHUFFLE_BUFFER) -> np.ndarray:
    """Shuffle within consecutive windows of `buffer` records."""
    out = records.copy()
    for start in range(0, len(out), buffer):
        chunk = out[start:start + buffer]
        out[start:start + buffer] = chunk[rng.permutation(len(chunk))]
    return out


@dataclass
class DatagenReport:
    shards: List[Path] = field(default_factory=list)
    candidates: int = 0
    kept: int = 0
    skipped: int = 0


def generate(
    prior: BiLaplacianPrior,
    config: ForwardConfig,
    n_samples: int,
    keep_fraction: float,
    seed: int,
    out_dir: TPath,
    scheme: Union[Scheme, str] = Scheme.SPACE,
    window: int = 16,
    shuffle_buffer: int = SHUFFLE_BUFFER,
    workers: int = 1,
) -> DatagenReport:
    """One shard per prior draw; deterministic given `seed`."""
    if n_samples < 1:
        raise ConfigError(f"n_samples must be at least 1, got {n_samples}.")
    scheme = Scheme(scheme)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(n_samples)

    def draw(index: int):
        draw_seed, keep_seed, shuffle_seed = children[index].spawn(3)
        u = prior.sample(draw_seed)
        store = HarvestStore(keep_fraction, np.random.default_rng(keep_seed), scheme, window)
        try:
            forward_solve(u, config, store)
        except DivergenceError as error:
            logger.warning(f"Prior draw {index} skipped: {error}")
            return None
        records = shuffle_records(store.records(), np.random.default_rng(shuffle_seed), shuffle_buffer)
        path = out / f"shard_{index:04d}.aetd"
        write_dataset(path, records, scheme.value)
        logger.info(f"Wrote {len(records)} of {store.candidates} records to {path}.")
        return path, store.candidates, len(records)

    if workers > 1:
        with ThreadPool(workers) as pool:
            results = pool.map(draw, range(n_samples))
    else:
        results = [draw(i) for i in range(n_samples)]

    report = DatagenReport()
    for result in results:
        if result is None:
            report.skipped += 1
            continue
        path, candidates, kept = result
        report.shards.append(path)
        report.candidates += candidates
        report.kept += kept
    return report
