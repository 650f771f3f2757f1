"""Flat binary tensor container used for datasets and checkpoints.

Layout: magic ``TSTR1`` | little-endian u32 header length | JSON header
``{name: {dtype, shape, offset, length}}`` | raw little-endian payload.
Offsets are relative to the start of the payload and must not overlap.
"""

import json
import struct

import numpy as np

MAGIC = b"TSTR1"

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1"), "i64": np.dtype("<i8")}


class TensorStoreError(Exception):
    pass


def _dtype_name(arr: np.ndarray) -> str:
    for name, dt in _DTYPES.items():
        if arr.dtype == dt:
            return name
    raise TensorStoreError(f"unsupported dtype {arr.dtype}; use one of {list(_DTYPES)}")


def write_tensorstore(path, tensors: dict) -> None:
    """Write ``name -> ndarray`` to ``path``. Names are sorted for byte determinism."""
    header = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        dtype = _dtype_name(arr)
        raw = arr.astype(_DTYPES[dtype], copy=False).tobytes()
        header[name] = {
            "dtype": dtype,
            "shape": list(arr.shape),
            "offset": offset,
            "length": len(raw),
        }
        blobs.append(raw)
        offset += len(raw)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        for raw in blobs:
            f.write(raw)


def read_tensorstore(path) -> dict:
    """Read the full store back as ``name -> ndarray``."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:5] != MAGIC:
        raise TensorStoreError(f"{path}: bad magic {data[:5]!r}, expected {MAGIC!r}")
    if len(data) < 9:
        raise TensorStoreError(f"{path}: truncated header")
    (head_len,) = struct.unpack("<I", data[5:9])
    head_end = 9 + head_len
    if head_end > len(data):
        raise TensorStoreError(f"{path}: header length {head_len} exceeds file size")
    try:
        header = json.loads(data[9:head_end].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise TensorStoreError(f"{path}: corrupt header: {e}") from e
    payload = data[head_end:]
    spans = []
    out = {}
    for name, meta in header.items():
        dtype = _DTYPES.get(meta.get("dtype"))
        if dtype is None:
            raise TensorStoreError(f"{path}: {name}: unknown dtype {meta.get('dtype')}")
        off, length = meta["offset"], meta["length"]
        if off < 0 or off + length > len(payload):
            raise TensorStoreError(f"{path}: {name}: span outside payload")
        spans.append((off, off + length, name))
        arr = np.frombuffer(payload, dtype=dtype, count=length // dtype.itemsize, offset=off)
        out[name] = arr.reshape(meta["shape"]).copy()
    spans.sort()
    for (a0, a1, n1), (b0, _, n2) in zip(spans, spans[1:]):
        if b0 < a1:
            raise TensorStoreError(f"{path}: overlapping spans for {n1} and {n2}")
    return out
