"""Named-tensor container: the on-disk format for checkpoints and blocks.

Layout (all integers little-endian)::

    magic      4 bytes  b"TKNT"
    version    u32
    header     u32 length + UTF-8 text (``key = value`` lines)
    count      u32
    per tensor:
        name   u16 length + UTF-8
        dtype  u8 code
        ndim   u8
        shape  ndim x u64
        data   raw little-endian values, C order
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Dict, Mapping, Tuple, Union

import numpy as np

from . import FORMAT_VERSION
from .errors import IngestionError, ParseError

MAGIC = b"TKNT"

_DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
    3: np.dtype("bool"),
}
_CODES = {np.dtype(v).name: k for k, v in _DTYPES.items()}


def _dtype_code(array: np.ndarray) -> int:
    name = array.dtype.name
    if name not in _CODES:
        raise ParseError(f"Unsupported tensor dtype {array.dtype} (use float32, float64, int64 or bool)")
    return _CODES[name]


def write_container(
    target: Union[str, Path, BinaryIO],
    tensors: Mapping[str, np.ndarray],
    header: Union[str, Mapping[str, object]] = "",
) -> None:
    """Write ``tensors`` (in mapping order) plus a text header."""
    if isinstance(header, Mapping):
        header = "".join(f"{k} = {v}\n" for k, v in header.items())
    if isinstance(target, (str, Path)):
        path = Path(target)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as handle:
            write_container(handle, tensors, header)
        return

    header_bytes = header.encode("utf-8")
    target.write(MAGIC)
    target.write(struct.pack("<I", FORMAT_VERSION))
    target.write(struct.pack("<I", len(header_bytes)))
    target.write(header_bytes)
    target.write(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        array = np.asarray(value)
        if array.dtype.kind in "iu":
            array = array.astype(np.int64)
        code = _dtype_code(array)
        array = np.ascontiguousarray(array, dtype=_DTYPES[code])
        name_bytes = name.encode("utf-8")
        target.write(struct.pack("<H", len(name_bytes)))
        target.write(name_bytes)
        target.write(struct.pack("<BB", code, array.ndim))
        target.write(struct.pack(f"<{array.ndim}Q", *array.shape))
        target.write(array.tobytes(order="C"))


def _read_exact(handle: BinaryIO, length: int) -> bytes:
    data = handle.read(length)
    if len(data) != length:
        raise ParseError(f"Truncated container: wanted {length} bytes, got {len(data)}")
    return data


def read_container(
    source: Union[str, Path, BinaryIO, bytes],
) -> Tuple[Dict[str, np.ndarray], str]:
    """Return ``(tensors, header_text)``; tensor order matches the file."""
    if isinstance(source, bytes):
        return read_container(io.BytesIO(source))
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.exists():
            raise IngestionError(f"Container not found: {path}")
        with open(path, "rb") as handle:
            return read_container(handle)

    if _read_exact(source, 4) != MAGIC:
        raise ParseError("Invalid container header (bad magic)")
    (version,) = struct.unpack("<I", _read_exact(source, 4))
    if version > FORMAT_VERSION:
        raise ParseError(f"Container format version {version} is newer than supported {FORMAT_VERSION}")
    (header_len,) = struct.unpack("<I", _read_exact(source, 4))
    header = _read_exact(source, header_len).decode("utf-8")
    (count,) = struct.unpack("<I", _read_exact(source, 4))

    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(source, 2))
        name = _read_exact(source, name_len).decode("utf-8")
        code, ndim = struct.unpack("<BB", _read_exact(source, 2))
        if code not in _DTYPES:
            raise ParseError(f"Unknown dtype code {code} for tensor {name!r}")
        shape = struct.unpack(f"<{ndim}Q", _read_exact(source, 8 * ndim)) if ndim else ()
        dtype = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = _read_exact(source, size * dtype.itemsize)
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return tensors, header


def parse_header(text: str) -> Dict[str, str]:
    values: Dict[str, str] = {}
    for line in text.splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values
