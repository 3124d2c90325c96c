"""TGW named-tensor container.

Little-endian binary layout:

    magic "TGW1" (4 bytes)
    u32 tensor count
    per tensor:
        u16 name length, UTF-8 name
        u8 dtype code (0=f32, 1=i8, 2=i32, 3=u32)
        u8 ndim
        ndim x u32 dims
        raw payload (row-major, little-endian)

The same container carries backbone weights, training checkpoints, quantized
models and reference activations; writers emit tensors in insertion order so
files are byte-deterministic.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"TGW1"

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("i1"): 1,
    np.dtype("<i4"): 2,
    np.dtype("<u4"): 3,
}
_CODE_DTYPES = {code: dt for dt, code in _DTYPE_CODES.items()}


def write_tgw(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Serialize name -> array mappings; arrays are cast to a supported dtype."""
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype in _DTYPE_CODES:
            out = np.ascontiguousarray(arr)
        elif np.issubdtype(arr.dtype, np.floating):
            out = np.ascontiguousarray(arr, dtype="<f4")
        elif np.issubdtype(arr.dtype, np.signedinteger):
            out = np.ascontiguousarray(arr, dtype="<i4")
        elif np.issubdtype(arr.dtype, np.unsignedinteger):
            out = np.ascontiguousarray(arr, dtype="<u4")
        else:
            raise FormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:32]!r}...")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", _DTYPE_CODES[out.dtype], out.ndim))
        chunks.append(struct.pack(f"<{out.ndim}I", *out.shape))
        chunks.append(out.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_tgw(path: str | Path) -> dict[str, np.ndarray]:
    """Parse a container; raises FormatError on bad magic, truncation or duplicates."""
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError(f"bad magic in {path}: not a TGW container")
    pos = 4

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated TGW file {path}: while reading {what}")
        piece = blob[pos:pos + n]
        pos += n
        return piece

    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2, "dtype/ndim"))
        if code not in _CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code} for tensor {name!r}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"dims of {name!r}"))
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        payload = take(nbytes, f"payload of {name!r}")
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r}")
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    if pos != len(blob):
        raise FormatError(f"trailing garbage in TGW file {path}")
    return tensors
