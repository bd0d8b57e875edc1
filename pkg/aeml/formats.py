"""Little-endian binary headers shared by the on-disk formats.

Every file starts with a 4-byte magic and a packed header described by a numpy
structured dtype; payloads follow as raw little-endian arrays.
"""
from pathlib import Path
from typing import Any, List, NamedTuple, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from aeml import DataError, FormatError, ShapeError

FORMAT_VERSION = 1

TRAJECTORY_MAGIC = b"AETS"
WEIGHTS_MAGIC = b"AEMW"
DATASET_MAGIC = b"AETD"
FIELD_MAGIC = b"AEFD"
BASIS_MAGIC = b"AEAS"

SCHEME_CODES = {"space": 0, "time": 1}
SCHEME_NAMES = {code: name for name, code in SCHEME_CODES.items()}

TRAJECTORY_HEADER = np.dtype(
    [("magic", "S4"), ("version", "<u4"), ("n_in", "<u4"), ("scheme", "u1")]
)
DATASET_HEADER = TRAJECTORY_HEADER
WEIGHTS_HEADER = np.dtype(
    [
        ("magic", "S4"),
        ("version", "<u4"),
        ("layers", "<u2"),
        ("encoder_layers", "<u2"),
        ("activation", "u1"),
    ]
)
FIELD_HEADER = np.dtype([("magic", "S4"), ("ndim", "<u4")])
BASIS_HEADER = np.dtype([("magic", "S4"), ("n", "<u8"), ("r", "<u4")])

TPath = Union[str, Path]


def pack_header(dtype: np.dtype, **values: Any) -> bytes:
    header = np.zeros(1, dtype=dtype)
    for name, value in values.items():
        header[name] = value
    return header.tobytes()


def unpack_header(
    buffer: bytes, dtype: np.dtype, magic: bytes, offset: int = 0
) -> Tuple[np.void, int]:
    end = offset + dtype.itemsize
    if len(buffer) < end:
        logger.error(f"Truncated {magic!r} header: {len(buffer)} bytes.")
        raise FormatError(f"Truncated {magic!r} header: {len(buffer)} bytes.")
    header = np.frombuffer(buffer, dtype=dtype, count=1, offset=offset)[0]
    if bytes(header["magic"]) != magic:
        logger.error(f"Bad magic {bytes(header['magic'])!r}, expected {magic!r}.")
        raise FormatError(f"Bad magic {bytes(header['magic'])!r}, expected {magic!r}.")
    if "version" in dtype.names and int(header["version"]) != FORMAT_VERSION:
        raise FormatError(f"Unsupported {magic!r} version {int(header['version'])}.")
    return header, end


def take(
    buffer: bytes, dtype: Union[str, np.dtype], count: int, offset: int
) -> Tuple[np.ndarray, int]:
    """Read `count` items of `dtype` at `offset`, returning a copy and the new offset."""
    size = np.dtype(dtype).itemsize * count
    if len(buffer) < offset + size:
        raise FormatError(f"Payload truncated at byte {offset}, wanted {size} more.")
    values = np.frombuffer(buffer, dtype=dtype, count=count, offset=offset).copy()
    return values, offset + size


def write_field(path: TPath, field: np.ndarray) -> None:
    field = np.asarray(field, dtype="<f8")
    if field.ndim == 0:
        raise ShapeError("A field needs at least one dimension.")
    with open(path, "wb") as out:
        out.write(pack_header(FIELD_HEADER, magic=FIELD_MAGIC, ndim=field.ndim))
        out.write(np.asarray(field.shape, dtype="<u4").tobytes())
        out.write(np.ascontiguousarray(field).tobytes())


def read_field(path: TPath) -> np.ndarray:
    buffer = Path(path).read_bytes()
    header, offset = unpack_header(buffer, FIELD_HEADER, FIELD_MAGIC)
    shape, offset = take(buffer, "<u4", int(header["ndim"]), offset)
    values, offset = take(buffer, "<f8", int(np.prod(shape)), offset)
    if offset != len(buffer):
        raise FormatError(f"Trailing bytes in field file {path}.")
    return values.reshape(tuple(int(s) for s in shape))


def dataset_record(n_in: int) -> np.dtype:
    return np.dtype([("offset", "<f8"), ("scale", "<f8"), ("payload", "<f4", (n_in,))])


class Dataset(NamedTuple):
    offsets: np.ndarray
    scales: np.ndarray
    payload: np.ndarray
    scheme: str

    @property
    def n_in(self) -> int:
        return int(self.payload.shape[1])

    def __len__(self) -> int:
        return int(self.payload.shape[0])


def write_dataset(path: TPath, records: np.ndarray, scheme: str) -> None:
    n_in = records.dtype["payload"].shape[0]
    with open(path, "wb") as out:
        out.write(
            pack_header(
                DATASET_HEADER,
                magic=DATASET_MAGIC,
                version=FORMAT_VERSION,
                n_in=n_in,
                scheme=SCHEME_CODES[scheme],
            )
        )
        out.write(records.astype(dataset_record(n_in)).tobytes())


def read_dataset(paths: Sequence[TPath]) -> Dataset:
    parts: List[np.ndarray] = []
    n_in, scheme = None, None
    for path in paths:
        buffer = Path(path).read_bytes()
        header, offset = unpack_header(buffer, DATASET_HEADER, DATASET_MAGIC)
        file_n_in, file_scheme = int(header["n_in"]), SCHEME_NAMES.get(int(header["scheme"]))
        if file_scheme is None:
            raise FormatError(f"Unknown consolidation scheme code in {path}.")
        if n_in is not None and (file_n_in, file_scheme) != (n_in, scheme):
            logger.error(f"Dataset {path} does not match N_in={n_in}, scheme={scheme}.")
            raise DataError(f"Dataset {path} does not match N_in={n_in}, scheme={scheme}.")
        n_in, scheme = file_n_in, file_scheme
        record = dataset_record(n_in)
        if (len(buffer) - offset) % record.itemsize:
            logger.error(f"Record length mismatch in dataset {path}.")
            raise DataError(f"Record length mismatch in dataset {path}.")
        parts.append(np.frombuffer(buffer, dtype=record, offset=offset))
    if not parts or n_in is None or scheme is None or sum(len(p) for p in parts) == 0:
        logger.error("Empty dataset.")
        raise DataError("Empty dataset.")
    records = np.concatenate(parts)
    return Dataset(
        offsets=records["offset"].astype(float),
        scales=records["scale"].astype(float),
        payload=records["payload"].astype(np.float32),
        scheme=scheme,
    )
