"""Fixed-tolerance block quantizer and an external-codec process hook.

Stream layout (little-endian):
    header  {count u64, block_size u32, eta f64}
    block*  {offset f64, width u8, ceil(len * width / 8) bytes of packed codes}
Each block subtracts its minimum, quantizes at step 2*eta and packs the codes
with a fixed bit width per block.
"""
from dataclasses import dataclass
import shlex
from typing import List, Optional, Sequence

import numpy as np
from loguru import logger
from plumbum import local  # type: ignore

from aeml import ConfigError, DataError, FormatError, check_exit
from aeml.formats import take

STREAM_HEADER = np.dtype([("count", "<u8"), ("block", "<u4"), ("eta", "<f8")])
# keeps offset + q * step inside the eta bound after rounding
STEP_SHRINK = 1.0 - 2.0 ** -20
MAX_WIDTH = 64


@dataclass(frozen=True)
class QuantizerConfig:
    tolerance: float
    block_size: int = 64

    def __post_init__(self) -> None:
        if not self.tolerance > 0:
            logger.error(f"Quantizer tolerance must be positive, got {self.tolerance}.")
            raise ConfigError(f"Quantizer tolerance must be positive, got {self.tolerance}.")
        if self.block_size < 1:
            raise ConfigError(f"Block size must be positive, got {self.block_size}.")

    @property
    def step(self) -> float:
        return 2.0 * self.tolerance * STEP_SHRINK


def _pack_codes(codes: np.ndarray, width: int) -> bytes:
    if width == 0:
        return b""
    shifts = np.arange(width - 1, -1, -1, dtype=np.uint64)
    bits = ((codes[:, None] >> shifts) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bits.ravel()).tobytes()


def _unpack_codes(payload: bytes, count: int, width: int) -> np.ndarray:
    if width == 0:
        return np.zeros(count, dtype=np.uint64)
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), count=count * width)
    weights = np.uint64(1) << np.arange(width - 1, -1, -1, dtype=np.uint64)
    return (bits.reshape(count, width).astype(np.uint64) * weights).sum(axis=1, dtype=np.uint64)


def q_encode(y: np.ndarray, cfg: QuantizerConfig) -> bytes:
    y = np.asarray(y, dtype=float).ravel()
    if y.size == 0:
        return b""
    if not np.all(np.isfinite(y)):
        logger.error("Quantizer input contains NaN or Inf.")
        raise DataError("Quantizer input contains NaN or Inf.")
    header = np.zeros(1, dtype=STREAM_HEADER)
    header["count"], header["block"], header["eta"] = y.size, cfg.block_size, cfg.tolerance
    chunks = [header.tobytes()]
    step = cfg.step
    for start in range(0, y.size, cfg.block_size):
        block = y[start:start + cfg.block_size]
        offset = float(block.min())
        codes = np.rint((block - offset) / step).astype(np.uint64)
        width = int(codes.max()).bit_length()
        if width > MAX_WIDTH:
            raise DataError(f"Block range too large for tolerance {cfg.tolerance}.")
        chunks.append(np.array([offset], dtype="<f8").tobytes())
        chunks.append(np.array([width], dtype="u1").tobytes())
        chunks.append(_pack_codes(codes, width))
    return b"".join(chunks)


def q_decode(stream: bytes, cfg: Optional[QuantizerConfig] = None) -> np.ndarray:
    """Inverse of q_encode; the tolerance is read from the stream."""
    if len(stream) == 0:
        return np.zeros(0)
    header, offset = take(stream, STREAM_HEADER, 1, 0)
    count, block_size, eta = int(header["count"][0]), int(header["block"][0]), float(header["eta"][0])
    if block_size < 1 or not eta > 0:
        raise FormatError(f"Corrupt quantizer header (block={block_size}, eta={eta}).")
    if cfg is not None and eta != cfg.tolerance:
        logger.warning(f"Stream tolerance {eta:g} differs from configured {cfg.tolerance:g}.")
    step = QuantizerConfig(eta, block_size).step
    out = np.empty(count)
    for start in range(0, count, block_size):
        length = min(block_size, count - start)
        base, offset = take(stream, "<f8", 1, offset)
        width, offset = take(stream, "u1", 1, offset)
        w = int(width[0])
        if w > MAX_WIDTH:
            raise FormatError(f"Corrupt quantizer block width {w}.")
        nbytes = -(-length * w // 8)
        payload, offset = take(stream, "u1", nbytes, offset)
        codes = _unpack_codes(payload.tobytes(), length, w)
        out[start:start + length] = base[0] + codes.astype(float) * step
    if offset != len(stream):
        raise FormatError(f"Trailing bytes in quantizer stream ({len(stream) - offset}).")
    return out


class QuantCodec:
    """Batch front end of the block quantizer."""

    name = "quant"

    def __init__(self, tolerance: float, block_size: int = 64) -> None:
        self.config = QuantizerConfig(tolerance, block_size)

    @property
    def tolerance(self) -> float:
        return self.config.tolerance

    def encode_batch(self, vectors: np.ndarray) -> List[bytes]:
        return [q_encode(v, self.config) for v in np.atleast_2d(vectors)]

    def decode_batch(self, streams: Sequence[bytes]) -> np.ndarray:
        return np.stack([q_decode(s, self.config) for s in streams])


class ExternalCodec:
    """Shells out to `<command> {encode|decode} <N_in> <eta>` with bytes on stdin/stdout.

    Encode receives raw little-endian f64 values; decode must return them.
    """

    name = "external"

    def __init__(self, command: str, n_in: int, tolerance: float) -> None:
        parts = shlex.split(command)
        if not parts:
            raise ConfigError("Empty external codec command.")
        self.command = command
        self.program = local[parts[0]][parts[1:]]
        self.n_in = n_in
        self.config = QuantizerConfig(tolerance)

    @property
    def tolerance(self) -> float:
        return self.config.tolerance

    def _call(self, mode: str, payload: bytes) -> bytes:
        proc = self.program[mode, str(self.n_in), repr(self.tolerance)].popen()
        out, err = proc.communicate(payload)
        check_exit((proc.returncode, out, err))
        return out

    def encode_batch(self, vectors: np.ndarray) -> List[bytes]:
        vectors = np.atleast_2d(vectors)
        if vectors.shape[1] != self.n_in:
            raise DataError(f"External codec expects {self.n_in} values, got {vectors.shape[1]}.")
        return [self._call("encode", np.asarray(v, dtype="<f8").tobytes()) for v in vectors]

    def decode_batch(self, streams: Sequence[bytes]) -> np.ndarray:
        decoded = []
        for s in streams:
            raw = self._call("decode", s)
            if len(raw) != 8 * self.n_in:
                raise FormatError(
                    f"External codec returned {len(raw)} bytes, expected {8 * self.n_in}."
                )
            decoded.append(np.frombuffer(raw, dtype="<f8").copy())
        return np.stack(decoded)
