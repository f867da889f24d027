"""Flat binary tensor container.

Single-tensor layout, all header words unsigned 32-bit little-endian:

    magic "SLS1" | dtype code | rank | dims[rank] | payload

Payload is row-major, little-endian. Dtype code 1 is float32, the interchange
format for feature maps. Code 2 is float64, used for checkpoints where the
round-trip must preserve training state bit-for-bit.

Checkpoints hold many named tensors, so a bundle wraps them:

    magic "SLSB" | count | (name_len | name utf8 | single-tensor record)*
"""

import struct

import numpy as np

MAGIC = b"SLS1"
BUNDLE_MAGIC = b"SLSB"

_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_MAX_RANK = 8


class TensorFormatError(ValueError):
    pass


def _code_for(arr: np.ndarray) -> int:
    if arr.dtype == np.float32:
        return 1
    if arr.dtype == np.float64:
        return 2
    raise TensorFormatError(f"unsupported dtype {arr.dtype}; cast to float32 or float64")


def _encode(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    code = _code_for(arr)
    if arr.ndim == 0 or arr.ndim > _MAX_RANK:
        raise TensorFormatError(f"rank {arr.ndim} out of range 1..{_MAX_RANK}")
    header = MAGIC + struct.pack("<II", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype(_CODES[code], copy=False).tobytes()
    return header + payload


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TensorFormatError("truncated tensor file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def _decode(r: _Reader) -> np.ndarray:
    if r.take(4) != MAGIC:
        raise TensorFormatError("bad magic; not a tensor container")
    code = r.u32()
    if code not in _CODES:
        raise TensorFormatError(f"unknown dtype code {code}")
    rank = r.u32()
    if rank == 0 or rank > _MAX_RANK:
        raise TensorFormatError(f"rank {rank} out of range 1..{_MAX_RANK}")
    dims = [r.u32() for _ in range(rank)]
    dtype = _CODES[code]
    count = 1
    for d in dims:
        count *= d
    payload = r.take(count * dtype.itemsize)
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    # frombuffer views are read-only; training code mutates loaded state
    return arr.astype(dtype.newbyteorder("="), copy=True)


def write_tensor(path, arr) -> None:
    with open(path, "wb") as f:
        f.write(_encode(np.asarray(arr)))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    arr = _decode(r)
    if r.pos != len(data):
        raise TensorFormatError("trailing bytes after tensor payload")
    return arr


def write_bundle(path, tensors: dict) -> None:
    """Write an ordered mapping of name -> array."""
    blob = BUNDLE_MAGIC + struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        enc = name.encode("utf-8")
        blob += struct.pack("<I", len(enc)) + enc + _encode(np.asarray(arr))
    with open(path, "wb") as f:
        f.write(blob)


def read_bundle(path) -> dict:
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    if r.take(4) != BUNDLE_MAGIC:
        raise TensorFormatError("bad magic; not a tensor bundle")
    count = r.u32()
    out = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        if name in out:
            raise TensorFormatError(f"duplicate tensor name {name!r}")
        out[name] = _decode(r)
    if r.pos != len(data):
        raise TensorFormatError("trailing bytes after bundle payload")
    return out
