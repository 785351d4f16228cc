"""Binary container for a single dense tensor.

Layout (little-endian throughout):

    offset  size        field
    0       4           magic b"SYFG"
    4       2           format version (u16), currently 1
    6       1           dtype code (u8): 0 = float32, 1 = float64
    7       1           rank (u8)
    8       8 * rank    shape, one u64 per axis
    ...     payload     row-major (C order) values

Round-trips are bit-exact: save followed by load returns an array whose
bytes equal the input's.
"""

import io
import struct

import numpy as np

from .errors import InvalidInput

MAGIC = b"SYFG"
VERSION = 1

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
}
_CODE_DTYPES = {code: dt for dt, code in _DTYPE_CODES.items()}

# refuse absurd headers before allocating
_MAX_RANK = 32
_MAX_ELEMENTS = 1 << 40


def save_tensor(path, array):
    """Write ``array`` (float32 or float64 ndarray) to ``path``."""
    arr = np.asarray(array)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise InvalidInput(f"unsupported dtype {arr.dtype}; expected float32 or float64")
    # asarray with order, not ascontiguousarray: the latter promotes 0-d to 1-d
    arr = np.asarray(arr, dtype=dt, order="C")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HBB", VERSION, _DTYPE_CODES[dt], arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def load_tensor(path):
    """Read a tensor written by :func:`save_tensor`. Returns an ndarray."""
    with open(path, "rb") as fh:
        data = fh.read()
    return loads_tensor(data)


def loads_tensor(data):
    """Parse a tensor from bytes. Raises InvalidInput on any malformation."""
    buf = io.BytesIO(data)
    magic = buf.read(4)
    if magic != MAGIC:
        raise InvalidInput(f"bad magic {magic!r}; not a tensor file")
    head = buf.read(4)
    if len(head) != 4:
        raise InvalidInput("truncated header")
    version, code, rank = struct.unpack("<HBB", head)
    if version != VERSION:
        raise InvalidInput(f"unsupported version {version}")
    if code not in _CODE_DTYPES:
        raise InvalidInput(f"unknown dtype code {code}")
    if rank > _MAX_RANK:
        raise InvalidInput(f"rank {rank} exceeds limit {_MAX_RANK}")
    shape_bytes = buf.read(8 * rank)
    if len(shape_bytes) != 8 * rank:
        raise InvalidInput("truncated shape")
    shape = struct.unpack(f"<{rank}Q", shape_bytes) if rank else ()
    n = 1
    for s in shape:
        n *= s
    if n > _MAX_ELEMENTS:
        raise InvalidInput("element count exceeds limit")
    dt = _CODE_DTYPES[code]
    payload = buf.read()
    expected = n * dt.itemsize
    if len(payload) != expected:
        raise InvalidInput(
            f"payload is {len(payload)} bytes, expected {expected} for shape {shape}"
        )
    return np.frombuffer(payload, dtype=dt).reshape(shape).copy()
