"""Contêiner binário de tensores com ida e volta bit a bit.

Layout (little-endian):
    magic  b"FMT1"      4 bytes
    dtype  u32          1 = float32, 2 = float64
    ndim   u32
    reserved u32        sempre 0
    dims   ndim x u64
    payload row-major
"""

from __future__ import annotations

import logging
import struct
from pathlib import Path

import numpy as np

from fmnet.core.errors import DataError, UsageError

logger = logging.getLogger(__name__)

MAGIC = b"FMT1"
HEADER = struct.Struct("<4sIII")
MAX_NDIM = 32

_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    code = _CODES.get(array.dtype)
    if code is None:
        raise UsageError(f"dtype não suportado pelo contêiner: {array.dtype}")
    header = HEADER.pack(MAGIC, code, array.ndim, 0)
    dims = struct.pack(f"<{array.ndim}Q", *array.shape)
    payload = np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()
    return header + dims + payload


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < HEADER.size:
        raise DataError("cabeçalho truncado", offset=len(blob))
    magic, code, ndim, reserved = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DataError(f"magic inválido {magic!r}", offset=0)
    dtype = _DTYPES.get(code)
    if dtype is None:
        raise DataError(f"código de dtype desconhecido {code}", offset=4)
    if ndim > MAX_NDIM:
        raise DataError(f"ndim excessivo {ndim}", offset=8)
    if reserved != 0:
        raise DataError(f"campo reservado não nulo {reserved}", offset=12)

    offset = HEADER.size
    dims_end = offset + 8 * ndim
    if len(blob) < dims_end:
        raise DataError("dimensões truncadas", offset=len(blob))
    shape = struct.unpack_from(f"<{ndim}Q", blob, offset)

    numel = 1
    for dim in shape:
        numel *= dim
    expected = numel * dtype.itemsize
    available = len(blob) - dims_end
    if expected > available:
        # cobre tanto payload cortado quanto dimensões absurdas
        raise DataError(
            f"payload truncado ou dimensões excessivas: esperado {expected} bytes, há {available}",
            offset=len(blob),
        )
    if expected < available:
        raise DataError("bytes excedentes após o payload", offset=dims_end + expected)

    array = np.frombuffer(blob, dtype=dtype, count=numel, offset=dims_end)
    return array.reshape(shape).astype(dtype.newbyteorder("="), copy=True)


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path: str | Path) -> np.ndarray:
    """Lê um tensor do contêiner.

    Raises:
        DataError: arquivo ausente, magic errado, dimensões inválidas ou payload truncado.
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError as e:
        raise DataError(f"arquivo de tensor ausente: {path}") from e
    try:
        return decode_tensor(blob)
    except DataError as e:
        logger.error("Contêiner inválido em %s: %s", path, e)
        raise
