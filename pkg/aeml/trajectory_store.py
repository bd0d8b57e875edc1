from abc import ABCMeta, abstractmethod
from dataclasses import dataclass
from enum import Enum
import math
from pathlib import Path
from typing import Any, Dict, Iterator, List, NamedTuple, Optional, Tuple, Union

import numpy as np
from loguru import logger

from aeml import (
    RK_STAGES,
    ConfigError,
    FormatError,
    ShapeError,
    StorageContractError,
    TStageKey,
)
from aeml.consolidation import Consolidator, Scheme
from aeml.formats import (
    FORMAT_VERSION,
    SCHEME_CODES,
    SCHEME_NAMES,
    TRAJECTORY_HEADER,
    TRAJECTORY_MAGIC,
    TPath,
    pack_header,
    take,
    unpack_header,
)
from aeml.mlp_codec import MlpCodec, normalize_batch
from aeml.quant_codec import ExternalCodec, QuantCodec

SPILL_RECORD = np.dtype([("t", "<u4"), ("s", "u1"), ("tile", "<u4"), ("length", "<u4")])
METADATA_BYTES = 16

TVectorCodec = Union[QuantCodec, ExternalCodec]


class StoreKind(Enum):
    FULL = "full"
    CHECKPOINT = "checkpoint"
    AUTOENCODER = "ae"
    QUANTIZER = "quant"
    HARVEST = "harvest"


@dataclass(frozen=True)
class StoreStats:
    bytes_logical: int
    bytes_resident: int
    compression_ratio_paper: float
    compression_ratio_true: float


class SpillRecord(NamedTuple):
    t: int
    s: int
    tile: int
    payload: bytes


class TrajectoryStore(metaclass=ABCMeta):
    """Keeps the forward stage states of one solve, addressed by (timestep, stage).

    Keys are put in strictly increasing order; gets may come in any order once
    the sweep is sealed, reverse order being the fast path.
    """

    TOLERANCE: Optional[float] = 0.0

    def __init__(self, kind: StoreKind) -> None:
        self.kind = kind
        self.stepper: Any = None
        self.puts = 0
        self.sealed = False
        self.recompute_steps = 0
        self.compress_calls = 0
        self.decompress_calls = 0
        self._last_key: Optional[TStageKey] = None
        self._state_size = 0

    def __repr__(self) -> str:
        return f"{self.kind.value} store with {self.puts} states"  # pragma: no cover

    @property
    def is_empty(self) -> bool:
        return self.puts == 0

    @property
    def tolerance(self) -> Optional[float]:
        return self.TOLERANCE

    def attach(self, stepper: Any) -> None:
        self.stepper = stepper
        self._state_size = stepper.config.grid.state_size

    def _check_order(self, key: TStageKey) -> None:
        if not 0 <= key[1] < RK_STAGES or key[0] < 0:
            raise StorageContractError(f"Invalid stage key {key}.")
        if self.sealed:
            raise StorageContractError(f"Put of {key} into a sealed store.")
        if self._last_key is not None and key <= self._last_key:
            logger.error(f"Out-of-order put {key} after {self._last_key}.")
            raise StorageContractError(f"Out-of-order put {key} after {self._last_key}.")

    def put(self, key: TStageKey, state: np.ndarray) -> None:
        self._check_order(key)
        if self._state_size and state.shape != (self._state_size,):
            raise ShapeError(f"State of shape {state.shape} for a store of {self._state_size}.")
        self._state_size = state.shape[0]
        self._put(key, state)
        self._last_key = key
        self.puts += 1

    def seal(self) -> None:
        self.sealed = True

    def begin_sweep(self) -> None:
        """Called before every sweep that reads the store."""

    @abstractmethod
    def _put(self, key: TStageKey, state: np.ndarray) -> None:
        pass  # pragma: no cover

    @abstractmethod
    def get(self, key: TStageKey) -> np.ndarray:
        pass  # pragma: no cover

    @abstractmethod
    def resident_bytes(self) -> int:
        pass  # pragma: no cover

    def logical_bytes(self) -> int:
        return self.puts * self._state_size * 8

    def paper_ratio(self) -> float:
        return self.true_ratio()

    def true_ratio(self) -> float:
        resident = self.resident_bytes()
        return self.logical_bytes() / resident if resident else 1.0

    def stats(self) -> StoreStats:
        return StoreStats(
            bytes_logical=self.logical_bytes(),
            bytes_resident=self.resident_bytes(),
            compression_ratio_paper=self.paper_ratio(),
            compression_ratio_true=self.true_ratio(),
        )

    def _missing(self, key: TStageKey) -> StorageContractError:
        logger.error(f"Stage state {key} is not available in the {self.kind.value} store.")
        return StorageContractError(f"Stage state {key} is not available in the {self.kind.value} store.")

    def spill_layout(self) -> Tuple[int, str]:
        return self._state_size, "space"

    @abstractmethod
    def spill_records(self) -> Iterator[SpillRecord]:
        pass  # pragma: no cover

    def spill(self, path: TPath) -> int:
        """Write the resident records to `path`; returns the record count."""
        n_in, scheme = self.spill_layout()
        count = 0
        with open(path, "wb") as out:
            out.write(
                pack_header(
                    TRAJECTORY_HEADER,
                    magic=TRAJECTORY_MAGIC,
                    version=FORMAT_VERSION,
                    n_in=n_in,
                    scheme=SCHEME_CODES[scheme],
                )
            )
            for record in self.spill_records():
                head = np.zeros(1, dtype=SPILL_RECORD)
                head["t"], head["s"], head["tile"] = record.t, record.s, record.tile
                head["length"] = len(record.payload)
                out.write(head.tobytes())
                out.write(record.payload)
                count += 1
        logger.info(f"Spilled {count} {self.kind.value} records to {path}.")
        return count


def read_spill(path: TPath) -> Tuple[int, str, List[SpillRecord]]:
    buffer = Path(path).read_bytes()
    header, offset = unpack_header(buffer, TRAJECTORY_HEADER, TRAJECTORY_MAGIC)
    scheme = SCHEME_NAMES.get(int(header["scheme"]))
    if scheme is None:
        raise FormatError(f"Unknown scheme code in {path}.")
    records = []
    while offset < len(buffer):
        head, offset = take(buffer, SPILL_RECORD, 1, offset)
        payload, offset = take(buffer, "u1", int(head["length"][0]), offset)
        records.append(
            SpillRecord(int(head["t"][0]), int(head["s"][0]), int(head["tile"][0]), payload.tobytes())
        )
    return int(header["n_in"]), scheme, records


class FullStore(TrajectoryStore):
    def __init__(self) -> None:
        super().__init__(StoreKind.FULL)
        self._states: Dict[TStageKey, np.ndarray] = {}

    def _put(self, key: TStageKey, state: np.ndarray) -> None:
        self._states[key] = state.copy()

    def get(self, key: TStageKey) -> np.ndarray:
        if key not in self._states:
            raise self._missing(key)
        return self._states[key]

    def resident_bytes(self) -> int:
        return sum(s.nbytes for s in self._states.values())

    def spill_records(self) -> Iterator[SpillRecord]:
        for (t, s), state in self._states.items():
            yield SpillRecord(t, s, 0, state.astype("<f8").tobytes())


class CheckpointStore(TrajectoryStore):
    """Keeps the step-boundary state every `interval` steps and replays one segment on a miss."""

    def __init__(self, interval: Optional[int] = None) -> None:
        super().__init__(StoreKind.CHECKPOINT)
        if interval is not None and interval < 1:
            raise ConfigError(f"Checkpoint interval must be positive, got {interval}.")
        self.interval = interval
        self._checkpoints: Dict[int, np.ndarray] = {}
        self._segment: Dict[TStageKey, np.ndarray] = {}
        self._segment_start: Optional[int] = None

    @staticmethod
    def default_interval(num_steps: int) -> int:
        return max(1, math.ceil(math.ceil(math.sqrt(RK_STAGES * num_steps)) / RK_STAGES))

    def attach(self, stepper: Any) -> None:
        super().attach(stepper)
        if self.interval is None:
            self.interval = self.default_interval(stepper.num_steps)

    def _put(self, key: TStageKey, state: np.ndarray) -> None:
        if self.interval is None:
            raise StorageContractError("Checkpoint store used before attach.")
        n, s = key
        if s == 0 and n % self.interval == 0:
            self._checkpoints[n] = state.copy()

    def begin_sweep(self) -> None:
        self._segment = {}
        self._segment_start = None

    def _replay(self, start: int) -> None:
        if self.stepper is None or start not in self._checkpoints:
            raise StorageContractError(f"No checkpoint at step {start} to replay from.")
        assert self.interval is not None
        stop = min(start + self.interval, self.stepper.num_steps)
        y = self._checkpoints[start]
        segment: Dict[TStageKey, np.ndarray] = {}
        for m in range(start, stop):
            stages, y = self.stepper.step(m, y)
            for s, stage in enumerate(stages):
                segment[(m, s)] = stage
        self._segment = segment
        self._segment_start = start
        self.recompute_steps += stop - start
        logger.debug(f"Replayed steps {start}..{stop - 1} from checkpoint.")

    def get(self, key: TStageKey) -> np.ndarray:
        if key in self._segment:
            return self._segment[key]
        n, s = key
        if self._last_key is None or key > self._last_key or not 0 <= s < RK_STAGES:
            raise self._missing(key)
        assert self.interval is not None
        self._replay((n // self.interval) * self.interval)
        return self._segment[key]

    def resident_bytes(self) -> int:
        return sum(c.nbytes for c in self._checkpoints.values())

    def spill_records(self) -> Iterator[SpillRecord]:
        for n, state in self._checkpoints.items():
            yield SpillRecord(n, 0, 0, state.astype("<f8").tobytes())


class CodecStore(TrajectoryStore):
    """Consolidates stage states into fixed-length vectors, normalizes and compresses them."""

    DEFAULT_SCHEME = Scheme.SPACE
    DEFAULT_WINDOW = 16

    def __init__(
        self,
        kind: StoreKind,
        scheme: Union[Scheme, str] = DEFAULT_SCHEME,
        window: int = DEFAULT_WINDOW,
    ) -> None:
        super().__init__(kind)
        self.scheme = Scheme(scheme)
        self.window = window
        self.consolidator: Optional[Consolidator] = None
        self._units: Dict[int, Tuple[Any, np.ndarray, np.ndarray, int]] = {}
        self._pending: List[np.ndarray] = []
        self._pending_unit: Optional[int] = None
        self._decoded: Tuple[Optional[int], List[np.ndarray]] = (None, [])

    def attach(self, stepper: Any) -> None:
        super().attach(stepper)
        self.consolidator = Consolidator(stepper.config.grid, self.scheme, self.window)
        self.check_codec(self.consolidator.n_in)

    def check_codec(self, n_in: int) -> None:
        pass

    @abstractmethod
    def _encode(self, normalized: np.ndarray) -> Any:
        pass  # pragma: no cover

    @abstractmethod
    def _decode(self, payload: Any) -> np.ndarray:
        pass  # pragma: no cover

    @abstractmethod
    def payload_bytes(self, payload: Any) -> int:
        pass  # pragma: no cover

    def _compress(self, unit: int, states: List[np.ndarray]) -> None:
        assert self.consolidator is not None
        vectors, pad = self.consolidator.pack(states)
        normalized, offsets, scales = normalize_batch(vectors)
        self._units[unit] = (self._encode(normalized), offsets, scales, pad)
        self.compress_calls += len(vectors)
        logger.debug(f"Compressed unit {unit}: {len(vectors)} vectors of {vectors.shape[1]}.")

    def _put(self, key: TStageKey, state: np.ndarray) -> None:
        if self.consolidator is None:
            raise StorageContractError("Codec store used before attach.")
        unit, position = self.consolidator.unit_of(key)
        if self.scheme == Scheme.SPACE:
            self._compress(unit, [state])
            return
        if self._last_key is not None and (
            Consolidator.flat_index(key) != Consolidator.flat_index(self._last_key) + 1
        ):
            raise StorageContractError(f"Time consolidation needs contiguous keys, got {key}.")
        if position != len(self._pending):
            raise StorageContractError(f"Key {key} does not continue the open window.")
        self._pending.append(state.copy())
        self._pending_unit = unit
        if len(self._pending) == self.consolidator.window:
            self._flush()

    def _flush(self) -> None:
        if self._pending and self._pending_unit is not None:
            self._compress(self._pending_unit, self._pending)
        self._pending = []
        self._pending_unit = None

    def seal(self) -> None:
        self._flush()
        super().seal()

    def get(self, key: TStageKey) -> np.ndarray:
        if self.consolidator is None:
            raise self._missing(key)
        unit, position = self.consolidator.unit_of(key)
        if self._decoded[0] != unit:
            if unit not in self._units:
                raise self._missing(key)
            payload, offsets, scales, pad = self._units[unit]
            normalized = self._decode(payload)
            self.decompress_calls += len(normalized)
            vectors = normalized * scales[:, None] + offsets[:, None]
            self._decoded = (unit, self.consolidator.unpack(vectors, pad))
        states = self._decoded[1]
        if position >= len(states):
            raise self._missing(key)
        return states[position]

    def resident_bytes(self) -> int:
        return sum(
            self.payload_bytes(payload) + METADATA_BYTES * len(offsets)
            for payload, offsets, _, _ in self._units.values()
        )

    def spill_layout(self) -> Tuple[int, str]:
        assert self.consolidator is not None
        return self.consolidator.n_in, self.scheme.value

    @abstractmethod
    def vector_payloads(self, payload: Any) -> List[bytes]:
        pass  # pragma: no cover

    def spill_records(self) -> Iterator[SpillRecord]:
        assert self.consolidator is not None
        for unit, (payload, offsets, scales, _) in self._units.items():
            t, s = divmod(unit * self.consolidator.window, RK_STAGES)
            for tile, body in enumerate(self.vector_payloads(payload)):
                meta = np.array([offsets[tile], scales[tile]], dtype="<f8").tobytes()
                yield SpillRecord(t, s, tile, meta + body)


class MlpCodecStore(CodecStore):

    TOLERANCE = None

    def __init__(
        self,
        codec: MlpCodec,
        scheme: Union[Scheme, str] = CodecStore.DEFAULT_SCHEME,
        window: int = CodecStore.DEFAULT_WINDOW,
    ) -> None:
        super().__init__(StoreKind.AUTOENCODER, scheme, window)
        self.codec = codec

    def check_codec(self, n_in: int) -> None:
        if self.codec.input_dim != n_in:
            logger.error(f"Codec input {self.codec.input_dim} does not match N_in={n_in}.")
            raise ConfigError(f"Codec input {self.codec.input_dim} does not match N_in={n_in}.")

    def _encode(self, normalized: np.ndarray) -> np.ndarray:
        return np.asarray(self.codec.encode(normalized), dtype=np.float32)

    def _decode(self, payload: np.ndarray) -> np.ndarray:
        return np.asarray(self.codec.decode(payload), dtype=float)

    def payload_bytes(self, payload: np.ndarray) -> int:
        return int(payload.nbytes)

    def paper_ratio(self) -> float:
        """Double-precision input over single-precision latent, metadata excluded."""
        return self.codec.input_dim * 8 / (self.codec.latent_dim * 4)

    def vector_payloads(self, payload: np.ndarray) -> List[bytes]:
        return [row.astype("<f4").tobytes() for row in payload]


class QuantizerStore(CodecStore):
    def __init__(
        self,
        codec: TVectorCodec,
        scheme: Union[Scheme, str] = CodecStore.DEFAULT_SCHEME,
        window: int = CodecStore.DEFAULT_WINDOW,
    ) -> None:
        super().__init__(StoreKind.QUANTIZER, scheme, window)
        self.codec = codec

    @property
    def tolerance(self) -> Optional[float]:
        return self.codec.tolerance

    def check_codec(self, n_in: int) -> None:
        if isinstance(self.codec, ExternalCodec) and self.codec.n_in != n_in:
            raise ConfigError(f"External codec declared N_in={self.codec.n_in}, store uses {n_in}.")

    def _encode(self, normalized: np.ndarray) -> List[bytes]:
        return self.codec.encode_batch(normalized)

    def _decode(self, payload: List[bytes]) -> np.ndarray:
        return self.codec.decode_batch(payload)

    def payload_bytes(self, payload: List[bytes]) -> int:
        return sum(len(p) for p in payload)

    def paper_ratio(self) -> float:
        stored = sum(self.payload_bytes(p) for p, _, _, _ in self._units.values())
        return self.logical_bytes() / stored if stored else 1.0

    def vector_payloads(self, payload: List[bytes]) -> List[bytes]:
        return list(payload)


class StoreFactory:
    def get(self, kind: str, **args: Any) -> TrajectoryStore:
        if kind == StoreKind.FULL.value:
            return FullStore()
        elif kind == StoreKind.CHECKPOINT.value:
            return CheckpointStore(interval=args.get("interval"))
        elif kind == StoreKind.AUTOENCODER.value:
            if args.get("codec") is None:
                raise ConfigError("The ae store needs a trained codec (--codec-file).")
            return MlpCodecStore(
                args["codec"],
                args.get("scheme", CodecStore.DEFAULT_SCHEME),
                args.get("window", CodecStore.DEFAULT_WINDOW),
            )
        elif kind == StoreKind.QUANTIZER.value:
            codec = args.get("codec")
            if codec is None:
                codec = QuantCodec(args.get("eta", 1e-4))
            return QuantizerStore(
                codec,
                args.get("scheme", CodecStore.DEFAULT_SCHEME),
                args.get("window", CodecStore.DEFAULT_WINDOW),
            )
        else:
            raise ConfigError(f"Store backend: {kind} not implemented!")


factory = StoreFactory()
