"""Dataset archives -> engine files, and torch-side feature banks.

MNIST-style gzip archives pass through as validated IDX (bit-identical to the
canonical distribution); CIFAR-10 binary batches become ZTB image tensors plus
IDX label files. All writes are atomic: nothing lands on failure.
"""

from __future__ import annotations

import gzip
import json
import os
import tarfile
import tempfile
from pathlib import Path

import numpy as np

from .formats import (ExportError, fnv1a64, pack_idx_labels, pack_ztb,
                      unpack_ztb, validate_idx)
from .resnet import torch_features

CIFAR_ROW = 1 + 3 * 32 * 32  # label byte + CHW u8 pixels


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def export_mnist(archive_dir, out_dir) -> list[str]:
    """Gunzip and validate the four canonical MNIST files into IDX."""
    archive_dir, out = Path(archive_dir), Path(out_dir)
    names = {
        "train-images-idx3-ubyte.gz": "train-images.idx",
        "train-labels-idx1-ubyte.gz": "train-labels.idx",
        "t10k-images-idx3-ubyte.gz": "test-images.idx",
        "t10k-labels-idx1-ubyte.gz": "test-labels.idx",
    }
    decoded: list[tuple[Path, bytes]] = []
    for src_name, dst_name in names.items():
        src = archive_dir / src_name
        if not src.exists():
            raise ExportError(f"missing archive member {src}")
        try:
            raw = gzip.decompress(src.read_bytes())
        except OSError as e:
            raise ExportError(f"cannot gunzip {src}: {e}") from e
        validate_idx(raw)
        decoded.append((Path(out_dir) / dst_name, raw))
    out.mkdir(parents=True, exist_ok=True)
    for path, raw in decoded:  # write only after every member validated
        _atomic_write(path, raw)
    return [str(p) for p, _ in decoded]


def _read_cifar_members(archive_path):
    """Yield (name, bytes) for data_batch_*.bin / test_batch.bin members."""
    archive_path = Path(archive_path)
    if archive_path.is_dir():
        files = sorted(archive_path.glob("*.bin"))
        if not files:
            raise ExportError(f"no .bin batches under {archive_path}")
        for f in files:
            yield f.name, f.read_bytes()
        return
    try:
        with tarfile.open(archive_path, "r:*") as tar:
            members = [m for m in tar.getmembers() if m.name.endswith(".bin")]
            if not members:
                raise ExportError(f"no .bin batches inside {archive_path}")
            for m in sorted(members, key=lambda m: m.name):
                yield Path(m.name).name, tar.extractfile(m).read()
    except tarfile.TarError as e:
        raise ExportError(f"cannot read archive {archive_path}: {e}") from e


def export_cifar10(archive_path, out_dir) -> list[str]:
    """CIFAR-10 binary batches -> train/test ZTB [n,3,32,32] + IDX labels."""
    train_images, train_labels = [], []
    test_images, test_labels = [], []
    for name, raw in _read_cifar_members(archive_path):
        if len(raw) % CIFAR_ROW != 0:
            raise ExportError(f"{name}: size {len(raw)} is not a whole number of records")
        rows = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_ROW)
        labels = rows[:, 0].astype(np.int64)
        images = rows[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
        if labels.max() > 9:
            raise ExportError(f"{name}: label {labels.max()} outside CIFAR-10 range")
        if name.startswith("test"):
            test_images.append(images)
            test_labels.append(labels)
        else:
            train_images.append(images)
            train_labels.append(labels)
    if not train_images or not test_images:
        raise ExportError("archive lacks train or test batches")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {
        "train-images.ztb": pack_ztb(np.concatenate(train_images)),
        "train-labels.idx": pack_idx_labels(np.concatenate(train_labels)),
        "test-images.ztb": pack_ztb(np.concatenate(test_images)),
        "test-labels.idx": pack_idx_labels(np.concatenate(test_labels)),
    }
    for name, data in outputs.items():
        _atomic_write(out / name, data)
    return [str(out / n) for n in outputs]


def load_images_file(images_path) -> np.ndarray:
    raw = Path(images_path).read_bytes()
    if raw[:4] == b"ZTB1":
        images = unpack_ztb(raw)
        if images.ndim != 4:
            raise ExportError(f"bank images must be NCHW, got shape {images.shape}")
        return images
    dims = validate_idx(raw)
    if len(dims) != 3:
        raise ExportError(f"{images_path} is not an IDX image file")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16)
    return (pixels.reshape(dims[0], 1, dims[1], dims[2]) / 255.0).astype(np.float32)


def export_bank(backbone_dir, images_path, out_path, dataset_tag: str,
                batch: int = 64) -> str:
    """Precompute a ZTB feature bank in torch for an image ZTB/IDX file.

    The torch model is rebuilt from the exported blob, and the normalization
    constants come from the exported manifest, so the bank is consistent with
    the engine backbone by construction.
    """
    from .resnet import model_from_blob

    backbone_dir = Path(backbone_dir)
    manifest = json.loads((backbone_dir / "backbone.json").read_text())
    norm = next(l for l in manifest["layers"] if l["kind"] == "normalize")
    mean, std = norm["params"]["mean"], norm["params"]["std"]
    size = manifest["input_shape"][1]
    blob = (backbone_dir / "backbone.zwb").read_bytes()
    model = model_from_blob(blob)

    images = load_images_file(images_path)
    if images.shape[1] == 1:
        images = np.repeat(images, 3, axis=1)  # grayscale -> RGB for the backbone
    if images.shape[1] != 3:
        raise ExportError(f"backbone expects 3 channels, got {images.shape[1]}")
    if images.shape[2] != size or images.shape[3] != size:
        raise ExportError(
            f"images are {images.shape[2]}x{images.shape[3]} but the exported "
            f"backbone expects {size}x{size}")

    feats = []
    for i in range(0, images.shape[0], batch):
        feats.append(torch_features(model, images[i:i + batch], mean, std))
    bank = np.concatenate(feats)

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(out_path, pack_ztb(bank))
    sidecar = {
        "schema_version": 1,
        "backbone_hash": fnv1a64(blob),
        "dataset_tag": dataset_tag,
        "defaults": {"k": 2, "gmm_components": 5},
    }
    _atomic_write(Path(str(out_path) + ".meta.json"),
                  (json.dumps(sidecar, indent=2) + "\n").encode())
    return str(out_path)
