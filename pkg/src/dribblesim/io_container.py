"""Little-endian binary container for named arrays.

Layout (all integers little-endian):

    magic    4 bytes  b"DSAC"
    version  u16      currently 1
    count    u32      number of arrays
    then per array:
      name_len u16, name utf-8 bytes
      dtype    u8   (see _DTYPES)
      ndim     u8
      shape    ndim x u64
      data     C-order raw bytes, little-endian

Used for world-state replay snapshots, network checkpoints, and fall banks.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"DSAC"
VERSION = 1

_DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
    3: np.dtype("<u8"),
    4: np.dtype("bool"),
    5: np.dtype("<i4"),
}
_CODES = {v: k for k, v in _DTYPES.items()}


def save_arrays(path: str, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
            arr = arr.astype(dt, copy=False)
            if arr.dtype not in _CODES:
                raise ValueError(f"unsupported dtype {arr.dtype} for array {name!r}")
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def load_arrays(path: str) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not an array container")
        version, count = struct.unpack("<HI", f.read(6))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode()
            code, ndim = struct.unpack("<BB", f.read(2))
            shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim)) if ndim else ()
            dtype = _DTYPES[code]
            n_items = int(np.prod(shape)) if shape else 1
            data = f.read(n_items * dtype.itemsize)
            out[name] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
    return out
