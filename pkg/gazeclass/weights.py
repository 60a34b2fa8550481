"""GZC1 weight files.

Layout (little-endian): magic ``b"GZC1"``, version u32, entry count u32, then
per entry: name length u32, UTF-8 name, dtype tag u32, rank u32, dims
u32[rank], raw payload.
"""

import struct
from pathlib import Path

import numpy as np

from .errors import WeightsFormatError

MAGIC = b"GZC1"
VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
TAG_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def dumps(named_arrays):
    chunks = [MAGIC, struct.pack("<II", VERSION, len(named_arrays))]
    for name, arr in named_arrays.items():
        arr = np.asarray(arr)
        tag = TAG_OF.get(arr.dtype)
        if tag is None:
            raise WeightsFormatError(f"{name}: unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<II", tag, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise WeightsFormatError(f"truncated file at byte {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count=1):
        return struct.unpack(f"<{count}I", self.take(4 * count))


def loads(data):
    reader = _Reader(bytes(data))
    if reader.take(4) != MAGIC:
        raise WeightsFormatError("bad magic, not a GZC1 file")
    version, count = reader.u32(2)
    if version != VERSION:
        raise WeightsFormatError(f"unsupported GZC1 version {version}")
    arrays = {}
    for _ in range(count):
        (name_len,) = reader.u32()
        name = reader.take(name_len).decode("utf-8")
        tag, rank = reader.u32(2)
        if tag not in DTYPE_TAGS:
            raise WeightsFormatError(f"{name}: unknown dtype tag {tag}")
        dims = reader.u32(rank) if rank else ()
        dtype = DTYPE_TAGS[tag]
        n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(reader.take(n_bytes), dtype=dtype).reshape(dims).copy()
    if reader.pos != len(reader.data):
        raise WeightsFormatError(f"{len(reader.data) - reader.pos} trailing bytes")
    return arrays


def save(named_arrays, path):
    Path(path).write_bytes(dumps(named_arrays))


def load(path):
    path = Path(path)
    if not path.is_file():
        raise WeightsFormatError(f"weights file not found: {path}")
    return loads(path.read_bytes())


def network_arrays(net):
    return {f"{net.layer_name(i)}.{key}": arr for i, key, arr in net.named_params()}


def load_into(net, path_or_arrays):
    """Copy a GZC1 file's tensors into ``net``'s parameters, matching by name and shape."""
    arrays = path_or_arrays if isinstance(path_or_arrays, dict) else load(path_or_arrays)
    updates = {}
    for i, key, current in net.named_params():
        name = f"{net.layer_name(i)}.{key}"
        if name not in arrays:
            raise WeightsFormatError(f"missing tensor {name}")
        if arrays[name].shape != current.shape:
            raise WeightsFormatError(
                f"{name} has shape {arrays[name].shape}, expected {current.shape}"
            )
        updates[(i, key)] = arrays[name].astype(net.dtype)
    return net.with_params(updates)
