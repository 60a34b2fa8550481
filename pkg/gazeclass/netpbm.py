"""Binary PPM (P6) and PGM (P5) images, 8- or 16-bit."""

import re
from pathlib import Path

import numpy as np

from .errors import ImageFormatError

_HEADER = re.compile(rb"\A(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+"
                     rb"(?:#[^\n]*\n\s*)*(\d+)\s")


def decode(data):
    """Return a ``(H, W)`` array for P5 or ``(H, W, 3)`` for P6."""
    match = _HEADER.match(data)
    if not match:
        raise ImageFormatError("not a binary PGM/PPM file")
    magic, width, height, maxval = match.groups()
    width, height, maxval = int(width), int(height), int(maxval)
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ImageFormatError(f"bad image header {width}x{height} maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    n_bytes = width * height * channels * dtype.itemsize
    payload = data[match.end() : match.end() + n_bytes]
    if len(payload) != n_bytes:
        raise ImageFormatError("truncated image payload")
    arr = np.frombuffer(payload, dtype=dtype).astype(np.uint8 if maxval < 256 else np.uint16)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return arr.reshape(shape)


def encode(arr):
    arr = np.asarray(arr)
    if arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    elif arr.ndim == 2:
        magic = b"P5"
    else:
        raise ImageFormatError(f"cannot encode array of shape {arr.shape}")
    if arr.dtype == np.uint8:
        maxval, payload = 255, arr.tobytes()
    elif arr.dtype == np.uint16:
        maxval, payload = 65535, arr.astype(">u2").tobytes()
    else:
        raise ImageFormatError(f"unsupported pixel dtype {arr.dtype}")
    height, width = arr.shape[:2]
    return b"%s\n%d %d\n%d\n" % (magic, width, height, maxval) + payload


def read(path):
    path = Path(path)
    if not path.is_file():
        raise ImageFormatError(f"image not found: {path}")
    return decode(path.read_bytes())


def write(path, arr):
    Path(path).write_bytes(encode(arr))
