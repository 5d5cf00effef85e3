"""Binary tensor file format used for every persisted array in the repo.

Layout: magic "TEN1", one dtype byte (1=f32, 2=f64, 3=u8), one rank byte,
rank little-endian uint32 extents, then the row-major little-endian payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TEN1"

_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1")}
_CODE_FOR_DTYPE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.uint8): 3}


class TenFormatError(ValueError):
    pass


def save_ten(path: str | Path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array)
    code = _CODE_FOR_DTYPE.get(arr.dtype)
    if code is None:
        raise TenFormatError(f"unsupported dtype {arr.dtype} (want f32, f64 or u8)")
    if arr.ndim > 255:
        raise TenFormatError("rank exceeds 255")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<BB", code, arr.ndim))
        for extent in arr.shape:
            f.write(struct.pack("<I", extent))
        f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_ten(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise TenFormatError(f"{path}: bad magic {magic!r}")
        code, rank = struct.unpack("<BB", f.read(2))
        dtype = _DTYPE_CODES.get(code)
        if dtype is None:
            raise TenFormatError(f"{path}: unknown dtype code {code}")
        shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        payload = f.read(count * dtype.itemsize)
        if len(payload) != count * dtype.itemsize:
            raise TenFormatError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def save_ppm(path: str | Path, image: np.ndarray) -> None:
    """Write an 8-bit P6 preview. Accepts HxWx3 float in [0,1] or uint8."""
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    if image.ndim != 3 or image.shape[2] != 3:
        raise TenFormatError(f"expected HxWx3 image, got shape {image.shape}")
    if image.dtype != np.uint8:
        image = (np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w, _ = image.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(image.tobytes())
