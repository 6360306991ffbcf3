"""Little-endian binary container for named arrays plus JSON metadata.

Layout (all integers unsigned little-endian; see docs/CHECKPOINT_FORMAT.md):

    magic        4 bytes  b"EZCK"
    version      u32      1
    count        u32      number of entries
    meta_len     u32      then meta_len bytes of UTF-8 JSON
    per entry:
        name_len u16      then name_len bytes of UTF-8 name
        dtype    u8       0 float32, 1 float64, 2 int64
        ndim     u8       then ndim x u32 dimensions
        data     product(shape) x itemsize bytes, C order
"""

import json
import struct
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

MAGIC = b"EZCK"
VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_CODE_DTYPES = {code: dtype for dtype, code in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    """Raised for unreadable, truncated or mismatched checkpoint files."""


def _normalize(array: np.ndarray) -> np.ndarray:
    array = np.asarray(array)
    if array.dtype.kind == "f":
        target = "<f8" if array.dtype.itemsize == 8 else "<f4"
    elif array.dtype.kind in "iub":
        target = "<i8"
    else:
        raise CheckpointError(f"Unsupported dtype {array.dtype}")
    return np.ascontiguousarray(array, dtype=target)


def encode_container(entries: Dict[str, np.ndarray], metadata: Dict[str, Any]) -> bytes:
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<III", VERSION, len(entries), len(meta)), meta]
    for name, value in entries.items():
        array = _normalize(value)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", _DTYPE_CODES[array.dtype], array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(array.tobytes())
    return b"".join(chunks)


def decode_container(blob: bytes) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    view = memoryview(blob)
    offset = 0

    def take(size: int) -> memoryview:
        nonlocal offset
        if offset + size > len(view):
            raise CheckpointError(f"Truncated checkpoint: needed {size} bytes at offset {offset}")
        chunk = view[offset : offset + size]
        offset += size
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("Not a checkpoint file (bad magic)")
    version, count, meta_len = struct.unpack("<III", take(12))
    if version != VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}")
    try:
        metadata = json.loads(bytes(take(meta_len)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Corrupt checkpoint metadata: {e}") from e

    entries: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"Unknown dtype code {code} for entry {name}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dtype = _CODE_DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        entries[name] = np.frombuffer(bytes(take(size)), dtype=dtype).reshape(shape).copy()
    if offset != len(view):
        raise CheckpointError(f"{len(view) - offset} trailing bytes after last entry")
    return entries, metadata


def write_container(
    path: Union[str, Path], entries: Dict[str, np.ndarray], metadata: Dict[str, Any]
) -> None:
    """Write atomically: a partially written file never replaces a good one."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_container(entries, metadata))
    tmp.replace(path)


def read_container(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint {path} does not exist")
    return decode_container(path.read_bytes())
