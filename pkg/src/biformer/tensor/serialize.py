"""Binary container and JSON debug form for tensors.

Binary layout (little-endian)::

    magic   4 bytes  b"BRAT"
    dtype   u8       1 = float32, 2 = float64
    rank    u8
    extents rank x u32
    data    product(extents) scalars, row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .core import Tensor

MAGIC = b"BRAT"
_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}

PathLike = Union[str, Path]


def to_bytes(t: Tensor) -> bytes:
    header = MAGIC + struct.pack("<BB", _DTYPE_TO_CODE[t.dtype], t.ndim)
    header += struct.pack(f"<{t.ndim}I", *t.shape)
    return header + t.data.astype(_CODES[_DTYPE_TO_CODE[t.dtype]], copy=False).tobytes()


def from_bytes(buf: bytes) -> Tensor:
    if buf[:4] != MAGIC:
        raise ValueError("not a tensor container (bad magic)")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in _CODES:
        raise ValueError(f"unknown dtype code {code}")
    shape = struct.unpack_from(f"<{rank}I", buf, 6)
    offset = 6 + 4 * rank
    dtype = _CODES[code]
    count = int(np.prod(shape)) if rank else 1
    expected = offset + count * dtype.itemsize
    if len(buf) != expected:
        raise ValueError(f"container length {len(buf)} != expected {expected}")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(shape)
    return Tensor(arr.astype(dtype.newbyteorder("="), copy=True))


def save(t: Tensor, path: PathLike) -> None:
    Path(path).write_bytes(to_bytes(t))


def load(path: PathLike) -> Tensor:
    return from_bytes(Path(path).read_bytes())


def to_json(t: Tensor) -> str:
    return json.dumps({"shape": list(t.shape), "dtype": t.dtype.name, "data": t.tolist()})


def from_json(text: str) -> Tensor:
    obj = json.loads(text)
    t = Tensor(np.array(obj["data"], dtype=obj.get("dtype", "float32")))
    if list(t.shape) != list(obj["shape"]):
        raise ValueError(f"declared shape {obj['shape']} != data shape {list(t.shape)}")
    return t
