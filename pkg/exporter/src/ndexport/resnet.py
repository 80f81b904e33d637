"""ResNet-18 checkpoint -> engine manifest + ZWB blob + probe parity record.

The manifest bakes the normalization constants in as a graph layer (so attacks
in the engine operate on raw [0, 1] pixels), discards the classifier head, and
designates the post-avgpool 512-d output as the feature layer. Every export
also records torch-computed features for 8 fixed probe images; the engine's
``check --parity`` replays them as a cross-ecosystem oracle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torchvision

from .formats import ExportError, fnv1a64, pack_ztb, pack_zwb

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

PROBE_COUNT = 8
PROBE_SEED = 0x5EED_0B5E
PARITY_TOLERANCE = 1e-3

# prefixes seen in the wild around a bare resnet state dict
_STRIP_PREFIXES = ("", "module.model.", "model.", "module.", "model.module.")

_BLOCKS = (("layer1", 2), ("layer2", 2), ("layer3", 2), ("layer4", 2))


@dataclass
class ExportJob:
    checkpoint: str | None = None          # None exports the fresh torchvision init
    out_dir: str = "export"
    input_size: int = 224
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD
    source_id: str = ""

    def __post_init__(self):
        if self.input_size < 16:
            raise ExportError(f"input_size {self.input_size} too small for ResNet-18")
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ExportError("normalization constants must have 3 channels")
        if any(s <= 0 for s in self.std):
            raise ExportError("normalization std entries must be positive")


def _reference_keys() -> set:
    ref = torchvision.models.resnet18(weights=None).state_dict()
    return {k for k in ref if not k.startswith("fc.")}


def load_checkpoint_state(path) -> dict:
    """Normalize an on-disk checkpoint into a bare resnet18 state dict."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if isinstance(blob, dict):
        for key in ("state_dict", "model", "model_state_dict"):
            if key in blob and isinstance(blob[key], dict):
                blob = blob[key]
                break
    if not isinstance(blob, dict):
        raise ExportError(f"checkpoint {path} does not contain a state dict")

    needed = _reference_keys()
    for prefix in _STRIP_PREFIXES:
        candidate = {k[len(prefix):]: v for k, v in blob.items()
                     if k.startswith(prefix)}
        if needed <= set(candidate):
            return {k: candidate[k] for k in needed}
    missing = sorted(needed - set(blob))[:5]
    raise ExportError(
        f"checkpoint {path} is not ResNet-18 shaped under any known prefix; "
        f"first missing keys: {missing}")


def _build_model(job: ExportJob) -> torch.nn.Module:
    model = torchvision.models.resnet18(weights=None)
    if job.checkpoint:
        state = load_checkpoint_state(job.checkpoint)
        missing, unexpected = model.load_state_dict(state, strict=False)
        real_missing = [k for k in missing if not k.startswith("fc.")]
        if real_missing or unexpected:
            raise ExportError(
                f"checkpoint load left missing={real_missing} unexpected={unexpected}")
    model.eval()
    return model


def _conv_params(conv: torch.nn.Conv2d) -> dict:
    if conv.dilation != (1, 1) or conv.groups != 1:
        raise ExportError("unsupported conv configuration (dilation/groups)")
    return {
        "out_channels": conv.out_channels,
        "kernel": list(conv.kernel_size) if conv.kernel_size[0] != conv.kernel_size[1]
        else conv.kernel_size[0],
        "stride": conv.stride[0],
        "padding": conv.padding[0],
        "bias": conv.bias is not None,
    }


def _bn_entries(name: str, bn: torch.nn.BatchNorm2d):
    return [
        (f"{name}.mean", bn.running_mean.detach().numpy()),
        (f"{name}.var", bn.running_var.detach().numpy()),
        (f"{name}.gamma", bn.weight.detach().numpy()),
        (f"{name}.beta", bn.bias.detach().numpy()),
    ]


def build_graph_description(model: torch.nn.Module, job: ExportJob):
    """Walk the torchvision module tree into (manifest dict, weight entries)."""
    layers = [{"id": "in", "kind": "input", "inputs": [], "params": {}}]
    entries: list[tuple[str, np.ndarray]] = []

    def conv(name, module, upstream):
        layers.append({"id": name, "kind": "conv2d", "inputs": [upstream],
                       "params": _conv_params(module)})
        entries.append((f"{name}.weight", module.weight.detach().numpy()))
        if module.bias is not None:
            entries.append((f"{name}.bias", module.bias.detach().numpy()))
        return name

    def bn(name, module, upstream):
        layers.append({"id": name, "kind": "batchnorm_eval", "inputs": [upstream],
                       "params": {"eps": module.eps}})
        entries.extend(_bn_entries(name, module))
        return name

    def relu(name, upstream):
        layers.append({"id": name, "kind": "relu", "inputs": [upstream], "params": {}})
        return name

    layers.append({"id": "norm", "kind": "normalize", "inputs": ["in"],
                   "params": {"mean": [float(v) for v in job.mean],
                              "std": [float(v) for v in job.std]}})
    prev = conv("conv1", model.conv1, "norm")
    prev = bn("bn1", model.bn1, prev)
    prev = relu("relu1", prev)
    layers.append({"id": "pool1", "kind": "maxpool2d", "inputs": [prev],
                   "params": {"window": model.maxpool.kernel_size,
                              "stride": model.maxpool.stride,
                              "padding": model.maxpool.padding}})
    prev = "pool1"

    for stage_name, n_blocks in _BLOCKS:
        stage = getattr(model, stage_name)
        if len(stage) != n_blocks:
            raise ExportError(f"{stage_name} has {len(stage)} blocks, expected {n_blocks}")
        for b, block in enumerate(stage):
            tag = f"l{stage_name[-1]}b{b}"
            skip_src = prev
            p = conv(f"{tag}c1", block.conv1, prev)
            p = bn(f"{tag}n1", block.bn1, p)
            p = relu(f"{tag}r1", p)
            p = conv(f"{tag}c2", block.conv2, p)
            p = bn(f"{tag}n2", block.bn2, p)
            if block.downsample is not None:
                d = conv(f"{tag}dc", block.downsample[0], skip_src)
                skip_src = bn(f"{tag}dn", block.downsample[1], d)
            layers.append({"id": f"{tag}add", "kind": "add",
                           "inputs": [p, skip_src], "params": {}})
            prev = relu(f"{tag}out", f"{tag}add")

    layers.append({"id": "gap", "kind": "global_avgpool", "inputs": [prev], "params": {}})
    manifest = {
        "version": 1,
        "input_shape": [3, job.input_size, job.input_size],
        "feature_layer": "gap",
        "layers": layers,
    }
    return manifest, entries


def _engine_to_torch_key(name: str) -> str:
    """Invert the manifest naming: blob entry name -> torchvision key."""
    lid, param = name.split(".", 1)
    bn_params = {"gamma": "weight", "beta": "bias",
                 "mean": "running_mean", "var": "running_var"}
    if lid in ("conv1", "bn1"):
        return f"{lid}.{bn_params.get(param, param)}"
    # l{stage}b{block}{c1|n1|c2|n2|dc|dn}
    stage, rest = lid[1], lid[3:]
    block, part = rest[0], rest[1:]
    part_map = {"c1": "conv1", "n1": "bn1", "c2": "conv2", "n2": "bn2",
                "dc": "downsample.0", "dn": "downsample.1"}
    return f"layer{stage}.{block}.{part_map[part]}.{bn_params.get(param, param)}"


def model_from_blob(blob: bytes) -> torch.nn.Module:
    """Rebuild the torch model from an exported ZWB blob (the source of truth)."""
    from .formats import unpack_zwb

    model = torchvision.models.resnet18(weights=None)
    state = {_engine_to_torch_key(name): torch.from_numpy(np.array(arr))
             for name, arr in unpack_zwb(blob)}
    missing, unexpected = model.load_state_dict(state, strict=False)
    real_missing = [k for k in missing
                    if not k.startswith("fc.") and "num_batches_tracked" not in k]
    if real_missing or unexpected:
        raise ExportError(
            f"blob does not reconstruct ResNet-18: missing={real_missing[:4]} "
            f"unexpected={unexpected[:4]}")
    model.eval()
    return model


def probe_images(job: ExportJob) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(PROBE_SEED)))
    shape = (PROBE_COUNT, 3, job.input_size, job.input_size)
    return rng.uniform(0.0, 1.0, size=shape).astype(np.float32)


def torch_features(model: torch.nn.Module, images: np.ndarray,
                   mean, std) -> np.ndarray:
    """Source-ecosystem features: normalize then run up to (and incl.) avgpool."""
    x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
    m = torch.tensor(mean, dtype=torch.float32).view(1, 3, 1, 1)
    s = torch.tensor(std, dtype=torch.float32).view(1, 3, 1, 1)
    with torch.no_grad():
        x = (x - m) / s
        x = model.conv1(x)
        x = model.bn1(x)
        x = model.relu(x)
        x = model.maxpool(x)
        x = model.layer1(x)
        x = model.layer2(x)
        x = model.layer3(x)
        x = model.layer4(x)
        x = model.avgpool(x)
        return torch.flatten(x, 1).numpy()


def export_backbone(job: ExportJob) -> dict:
    """Write manifest, blob, probes, torch features and the parity record.

    Returns the parity record document. Output is deterministic for identical
    checkpoints, so re-export is byte-identical.
    """
    model = _build_model(job)
    manifest, entries = build_graph_description(model, job)
    blob = pack_zwb(entries)
    probes = probe_images(job)
    feats = torch_features(model, probes, job.mean, job.std)

    out = Path(job.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "backbone.json").write_text(json.dumps(manifest, indent=2) + "\n")
    (out / "backbone.zwb").write_bytes(blob)
    (out / "probes.ztb").write_bytes(pack_ztb(probes))
    (out / "probe-features.ztb").write_bytes(pack_ztb(feats))
    record = {
        "version": 1,
        "manifest": "backbone.json",
        "weights": "backbone.zwb",
        "probes": "probes.ztb",
        "features": "probe-features.ztb",
        "tolerance": PARITY_TOLERANCE,
        "backbone_hash": fnv1a64(blob),
        "source": job.source_id or (job.checkpoint or "torchvision-resnet18-init"),
    }
    (out / "parity.json").write_text(json.dumps(record, indent=2) + "\n")
    return record
