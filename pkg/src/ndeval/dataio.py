"""Binary dataset formats: IDX (images/labels) and ZTB (float32 tensors).

IDX follows the classic big-endian layout (magic 0x00000803 for u8 image cubes,
0x00000801 for u8 label vectors), pixels scaled to [0, 1] on load. ZTB is the
engine's little-endian tensor container: magic ``ZTB1``, u8 dtype tag
(0 = f32le), u8 ndim, u32 dims, raw payload. Both round-trip losslessly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError
from .tensor import Tensor

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
ZTB_MAGIC = b"ZTB1"
ZTB_F32 = 0

_MAX_ELEMENTS = 1 << 33  # refuse absurd headers before allocating


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from e


def load_idx_images(path) -> Tensor:
    """IDX image file -> float32 Tensor [N, 1, H, W] with pixels in [0, 1]."""
    raw = _read(path)
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated IDX header")
    magic, n, h, w = struct.unpack_from(">IIII", raw, 0)
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(
            f"{path}: bad IDX image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
    if n < 1 or h < 1 or w < 1:
        raise FormatError(f"{path}: IDX dims must be positive, got ({n}, {h}, {w})")
    count = n * h * w
    if count > _MAX_ELEMENTS:
        raise FormatError(f"{path}: IDX dim overflow ({n} x {h} x {w})")
    if len(raw) != 16 + count:
        raise FormatError(
            f"{path}: IDX payload is {len(raw) - 16} bytes, header implies {count}")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16).astype(np.float32) / 255.0
    return Tensor(pixels.reshape(n, 1, h, w))


def save_idx_images(images: Tensor, path) -> None:
    """Inverse of load_idx_images; expects [N, 1, H, W] values in [0, 1]."""
    if len(images.dims) != 4 or images.dims[1] != 1:
        raise ValidationError(
            f"IDX images must be [N, 1, H, W], got dims {images.dims}")
    data = images.data
    if data.min() < 0.0 or data.max() > 1.0:
        raise ValidationError("IDX image values must lie in [0, 1]")
    n, _, h, w = images.dims
    payload = np.rint(data.astype(np.float64) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w))
        f.write(payload.tobytes())


def load_idx_labels(path) -> np.ndarray:
    """IDX label file -> int64 class-id vector."""
    raw = _read(path)
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated IDX header")
    magic, n = struct.unpack_from(">II", raw, 0)
    if magic != IDX_LABEL_MAGIC:
        raise FormatError(
            f"{path}: bad IDX label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}")
    if n < 1:
        raise FormatError(f"{path}: IDX label count must be positive, got {n}")
    if len(raw) != 8 + n:
        raise FormatError(f"{path}: IDX payload is {len(raw) - 8} bytes, header implies {n}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)


def save_idx_labels(labels, path) -> None:
    arr = np.asarray(labels)
    if arr.ndim != 1 or arr.size < 1:
        raise ValidationError(f"labels must be a non-empty 1-d vector, got shape {arr.shape}")
    if arr.min() < 0 or arr.max() > 255:
        raise ValidationError("IDX labels must fit in a byte (0..255)")
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, arr.size))
        f.write(arr.astype(np.uint8).tobytes())


def load_ztb(path) -> Tensor:
    raw = _read(path)
    if raw[:4] != ZTB_MAGIC:
        raise FormatError(f"{path}: bad ZTB magic {raw[:4]!r}, expected {ZTB_MAGIC!r}")
    if len(raw) < 6:
        raise FormatError(f"{path}: truncated ZTB header")
    dtype_tag, ndim = raw[4], raw[5]
    if dtype_tag != ZTB_F32:
        raise FormatError(f"{path}: unsupported ZTB dtype tag {dtype_tag}")
    if ndim < 1:
        raise FormatError(f"{path}: ZTB ndim must be >= 1")
    off = 6
    if len(raw) < off + 4 * ndim:
        raise FormatError(f"{path}: truncated ZTB dims")
    dims = struct.unpack_from(f"<{ndim}I", raw, off)
    off += 4 * ndim
    if any(d < 1 for d in dims):
        raise FormatError(f"{path}: all ZTB dims must be >= 1, got {dims}")
    count = int(np.prod(dims))
    if count > _MAX_ELEMENTS:
        raise FormatError(f"{path}: ZTB dim overflow {dims}")
    if len(raw) != off + 4 * count:
        raise FormatError(
            f"{path}: ZTB payload is {len(raw) - off} bytes, header implies {4 * count}")
    arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(dims)
    return Tensor(np.array(arr, dtype=np.float32))


def save_ztb(tensor: Tensor, path) -> None:
    if tensor.dtype != np.float32:
        raise ValidationError(f"ZTB stores float32 tensors, got dtype {tensor.dtype}")
    dims = tensor.dims
    with open(path, "wb") as f:
        f.write(ZTB_MAGIC)
        f.write(struct.pack("<BB", ZTB_F32, len(dims)))
        f.write(struct.pack(f"<{len(dims)}I", *dims))
        f.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
