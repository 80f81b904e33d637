"""Writers for the engine's file formats (ZWB weight blobs, ZTB tensors, IDX).

The exporter talks to the engine only through these on-disk formats, so the
serialization code lives here independently; the engine's own loaders are the
compatibility oracle in the test suite.
"""

from __future__ import annotations

import struct

import numpy as np

ZWB_MAGIC = b"ZWB1"
ZTB_MAGIC = b"ZTB1"
IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class ExportError(RuntimeError):
    pass


def fnv1a64(data: bytes) -> str:
    h = 0xCBF29CE484222325
    prime = 0x100000001B3
    mask = 0xFFFFFFFFFFFFFFFF
    for b in data:
        h = ((h ^ b) * prime) & mask
    return f"{h:016x}"


def pack_zwb(entries: list[tuple[str, np.ndarray]]) -> bytes:
    parts = [ZWB_MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def unpack_zwb(raw: bytes) -> list[tuple[str, np.ndarray]]:
    if raw[:4] != ZWB_MAGIC:
        raise ExportError(f"bad ZWB magic {raw[:4]!r}")
    (count,) = struct.unpack_from("<I", raw, 4)
    off = 8
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        ndim = raw[off]
        off += 1
        dims = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        n_vals = int(np.prod(dims))
        arr = np.frombuffer(raw, dtype="<f4", count=n_vals, offset=off).reshape(dims)
        off += 4 * n_vals
        entries.append((name, arr.copy()))
    if off != len(raw):
        raise ExportError("ZWB blob has trailing bytes")
    return entries


def pack_ztb(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim < 1 or any(d < 1 for d in arr.shape):
        raise ExportError(f"ZTB tensors need positive dims, got shape {arr.shape}")
    header = ZTB_MAGIC + struct.pack("<BB", 0, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def unpack_ztb(raw: bytes) -> np.ndarray:
    if raw[:4] != ZTB_MAGIC:
        raise ExportError(f"bad ZTB magic {raw[:4]!r}")
    dtype_tag, ndim = raw[4], raw[5]
    if dtype_tag != 0:
        raise ExportError(f"unsupported ZTB dtype tag {dtype_tag}")
    dims = struct.unpack_from(f"<{ndim}I", raw, 6)
    count = int(np.prod(dims))
    off = 6 + 4 * ndim
    if len(raw) != off + 4 * count:
        raise ExportError("ZTB payload length mismatch")
    return np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(dims).copy()


def pack_idx_images(pixels_u8: np.ndarray) -> bytes:
    n, h, w = pixels_u8.shape
    return struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w) \
        + np.ascontiguousarray(pixels_u8, dtype=np.uint8).tobytes()


def pack_idx_labels(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels)
    return struct.pack(">II", IDX_LABEL_MAGIC, labels.size) \
        + labels.astype(np.uint8).tobytes()


def validate_idx(raw: bytes) -> tuple[int, ...]:
    """Check an IDX byte string is well-formed; returns its dims."""
    if len(raw) < 8:
        raise ExportError("IDX stream shorter than any header")
    magic = struct.unpack_from(">I", raw, 0)[0]
    if magic == IDX_IMAGE_MAGIC:
        n, h, w = struct.unpack_from(">III", raw, 4)
        if len(raw) != 16 + n * h * w:
            raise ExportError("IDX image payload length mismatch")
        return (n, h, w)
    if magic == IDX_LABEL_MAGIC:
        n = struct.unpack_from(">I", raw, 4)[0]
        if len(raw) != 8 + n:
            raise ExportError("IDX label payload length mismatch")
        return (n,)
    raise ExportError(f"unrecognized IDX magic 0x{magic:08x}")
