"""Backbone graphs: manifest parsing, weight blobs, feature extraction, input gradients.

A backbone is described by a JSON manifest (layer DAG, declared in topological
order) plus a binary ZWB weight blob. The designated feature layer must produce
a rank-1 per-sample output; running the graph yields penultimate features, and
the recorded trace yields exact input gradients for a given feature-space
gradient.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import FormatError, NumericError, ValidationError
from .tensor import Tape, Tensor

SUPPORTED_KINDS = ("input", "normalize", "conv2d", "batchnorm_eval", "relu",
                   "maxpool2d", "global_avgpool", "flatten", "linear", "add")

_MANIFEST_KEYS = {"version", "input_shape", "feature_layer", "layers"}
_LAYER_KEYS = {"id", "kind", "inputs", "params"}

# params each kind accepts: name -> (required, validator)
_PARAM_SPECS = {
    "input": {},
    "normalize": {"mean": True, "std": True},
    "conv2d": {"out_channels": True, "kernel": True, "stride": False,
               "padding": False, "bias": False},
    "batchnorm_eval": {"eps": False},
    "relu": {},
    "maxpool2d": {"window": True, "stride": True, "padding": False},
    "global_avgpool": {},
    "flatten": {},
    "linear": {"out_features": True, "bias": False},
    "add": {},
}

_WEIGHT_PARAMS = {
    "conv2d": ("weight", "bias"),
    "batchnorm_eval": ("mean", "var", "gamma", "beta"),
    "linear": ("weight", "bias"),
}

ZWB_MAGIC = b"ZWB1"


def fnv1a64(data: bytes) -> str:
    """64-bit FNV-1a content hash, lowercase hex."""
    h = 0xCBF29CE484222325
    prime = 0x100000001B3
    mask = 0xFFFFFFFFFFFFFFFF
    for b in data:
        h = ((h ^ b) * prime) & mask
    return f"{h:016x}"


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str
    inputs: tuple[str, ...]
    params: dict

    def __post_init__(self):
        if self.kind not in SUPPORTED_KINDS:
            raise ValidationError(f"unsupported layer kind '{self.kind}' (layer '{self.id}')")


@dataclass
class BackboneGraph:
    """Validated layer DAG with (optionally) loaded weights.

    Immutable after load from the caller's perspective; forward passes never
    mutate the graph, so one instance is shareable across threads.
    """

    layers: list[LayerSpec]
    feature_layer: str
    input_shape: tuple[int, int, int]
    weights: dict[str, dict[str, Tensor]] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    shapes: dict[str, tuple[int, ...]] = field(default_factory=dict)
    dtype: np.dtype = np.dtype(np.float32)

    @property
    def input_layer(self) -> str:
        return next(l.id for l in self.layers if l.kind == "input")

    @property
    def feature_dim(self) -> int:
        return self.shapes[self.feature_layer][0]

    @property
    def weights_hash(self) -> str:
        return self.provenance.get("weights_hash", "")

    def layer(self, layer_id: str) -> LayerSpec:
        for l in self.layers:
            if l.id == layer_id:
                return l
        raise ValidationError(f"no layer with id '{layer_id}'")

    def ancestors_of_feature(self) -> list[LayerSpec]:
        """Layers that feed the feature output, in manifest order."""
        needed = {self.feature_layer}
        by_id = {l.id: l for l in self.layers}
        for l in reversed(self.layers):
            if l.id in needed:
                needed.update(l.inputs)
        return [l for l in self.layers if l.id in needed]

    def astype(self, dtype) -> "BackboneGraph":
        dt = np.dtype(dtype)
        w = {lid: {name: t.astype(dt) for name, t in entries.items()}
             for lid, entries in self.weights.items()}
        return replace(self, weights=w, dtype=dt)


# ---------------------------------------------------------------------------
# manifest parsing and serialization


def load_manifest(manifest_bytes) -> BackboneGraph:
    """Parse and validate a manifest; returns a graph without weights."""
    if isinstance(manifest_bytes, bytes):
        manifest_bytes = manifest_bytes.decode("utf-8")
    try:
        doc = json.loads(manifest_bytes)
    except json.JSONDecodeError as e:
        raise FormatError(
            f"manifest parse error at line {e.lineno}, column {e.colno}: {e.msg}") from e
    if not isinstance(doc, dict):
        raise FormatError("manifest root must be a JSON object")
    unknown = set(doc) - _MANIFEST_KEYS
    if unknown:
        raise FormatError(f"unknown manifest keys: {sorted(unknown)}")
    if doc.get("version") != 1:
        raise FormatError(f"unsupported manifest version {doc.get('version')!r}")
    shape = doc.get("input_shape")
    if (not isinstance(shape, list) or len(shape) != 3
            or not all(isinstance(v, int) and v >= 1 for v in shape)):
        raise FormatError(f"input_shape must be [C, H, W] positive ints, got {shape!r}")
    raw_layers = doc.get("layers")
    if not isinstance(raw_layers, list) or not raw_layers:
        raise FormatError("manifest must declare a non-empty 'layers' array")

    layers: list[LayerSpec] = []
    declared_order: list[str] = []
    all_ids = set()
    for raw in raw_layers:
        if not isinstance(raw, dict) or set(raw) != _LAYER_KEYS:
            raise FormatError(
                f"each layer needs exactly the keys {sorted(_LAYER_KEYS)}, got {sorted(raw)}"
                if isinstance(raw, dict) else "each layer must be a JSON object")
        all_ids.add(raw["id"])

    seen: set[str] = set()
    input_count = 0
    for raw in raw_layers:
        lid, kind, inputs, params = raw["id"], raw["kind"], raw["inputs"], raw["params"]
        if not isinstance(lid, str) or not lid:
            raise FormatError(f"layer id must be a non-empty string, got {lid!r}")
        if lid in seen:
            raise ValidationError(f"duplicate layer id '{lid}'")
        if not isinstance(inputs, list) or not all(isinstance(i, str) for i in inputs):
            raise FormatError(f"layer '{lid}': inputs must be a list of ids")
        if not isinstance(params, dict):
            raise FormatError(f"layer '{lid}': params must be an object")
        spec = LayerSpec(lid, kind, tuple(inputs), dict(params))
        _check_arity(spec)
        _check_params(spec)
        for ref in inputs:
            if ref not in all_ids:
                raise ValidationError(f"layer '{lid}' references unknown layer '{ref}'")
            if ref not in seen:
                raise ValidationError(
                    f"layer '{lid}' makes a forward reference to '{ref}'; "
                    "manifests must be declared in topological order")
        if kind == "input":
            input_count += 1
        seen.add(lid)
        declared_order.append(lid)
        layers.append(spec)
    if input_count != 1:
        raise ValidationError(f"manifest must declare exactly one input layer, found {input_count}")

    feature_layer = doc.get("feature_layer")
    if feature_layer is None:
        # a manifest carrying a classifier head defaults to the head's input
        last = layers[-1]
        if last.kind == "linear":
            feature_layer = last.inputs[0]
        else:
            raise ValidationError("feature_layer is required unless the final layer is linear")
    if feature_layer not in seen:
        raise ValidationError(f"feature_layer '{feature_layer}' is not a declared layer")

    graph = BackboneGraph(layers=layers, feature_layer=feature_layer,
                          input_shape=tuple(shape))
    graph.shapes = _infer_shapes(graph)
    feat_shape = graph.shapes[feature_layer]
    if len(feat_shape) != 1:
        raise ValidationError(
            f"feature_layer '{feature_layer}' must produce a rank-1 per-sample output, "
            f"got shape {feat_shape}")
    _check_reachable(graph)
    return graph


def save_manifest(graph: BackboneGraph) -> str:
    doc = {
        "version": 1,
        "input_shape": list(graph.input_shape),
        "feature_layer": graph.feature_layer,
        "layers": [{"id": l.id, "kind": l.kind, "inputs": list(l.inputs),
                    "params": l.params} for l in graph.layers],
    }
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def _check_arity(spec: LayerSpec) -> None:
    want = 0 if spec.kind == "input" else 2 if spec.kind == "add" else 1
    if len(spec.inputs) != want:
        raise ValidationError(
            f"layer '{spec.id}' of kind {spec.kind} takes {want} input(s), "
            f"got {len(spec.inputs)}")


def _check_params(spec: LayerSpec) -> None:
    allowed = _PARAM_SPECS[spec.kind]
    unknown = set(spec.params) - set(allowed)
    if unknown:
        raise FormatError(f"layer '{spec.id}': unknown params {sorted(unknown)}")
    missing = [p for p, required in allowed.items() if required and p not in spec.params]
    if missing:
        raise ValidationError(f"layer '{spec.id}': missing required params {missing}")
    p = spec.params
    if spec.kind == "conv2d":
        kern = p["kernel"]
        if isinstance(kern, int):
            kern = [kern, kern]
        if (not isinstance(kern, list) or len(kern) != 2
                or not all(isinstance(v, int) and v >= 1 for v in kern)):
            raise ValidationError(f"layer '{spec.id}': kernel must be int or [kh, kw]")
        if not isinstance(p["out_channels"], int) or p["out_channels"] < 1:
            raise ValidationError(f"layer '{spec.id}': out_channels must be a positive int")
        if p.get("stride", 1) < 1 or p.get("padding", 0) < 0:
            raise ValidationError(f"layer '{spec.id}': bad stride/padding")
    elif spec.kind == "maxpool2d":
        if p["window"] < 1 or p["stride"] < 1:
            raise ValidationError(f"layer '{spec.id}': window and stride must be >= 1")
        if not 0 <= p.get("padding", 0) < p["window"]:
            raise ValidationError(f"layer '{spec.id}': padding must be < window")
    elif spec.kind == "normalize":
        mean, std = p["mean"], p["std"]
        if (not isinstance(mean, list) or not isinstance(std, list)
                or len(mean) != len(std) or not mean):
            raise ValidationError(f"layer '{spec.id}': mean/std must be equal-length lists")
        if any(not isinstance(v, (int, float)) for v in mean + std):
            raise ValidationError(f"layer '{spec.id}': mean/std must be numeric")
        if any(v <= 0 for v in std):
            raise ValidationError(f"layer '{spec.id}': std entries must be > 0")
    elif spec.kind == "batchnorm_eval":
        if p.get("eps", 1e-5) < 0:
            raise ValidationError(f"layer '{spec.id}': eps must be >= 0")
    elif spec.kind == "linear":
        if not isinstance(p["out_features"], int) or p["out_features"] < 1:
            raise ValidationError(f"layer '{spec.id}': out_features must be a positive int")


def _conv_kernel(params: dict) -> tuple[int, int]:
    kern = params["kernel"]
    return (kern, kern) if isinstance(kern, int) else tuple(kern)


def _infer_shapes(graph: BackboneGraph) -> dict[str, tuple[int, ...]]:
    """Per-sample output shapes for every layer; raises on contradictions."""
    shapes: dict[str, tuple[int, ...]] = {}
    for l in graph.layers:
        ins = [shapes[i] for i in l.inputs]
        if l.kind == "input":
            shapes[l.id] = graph.input_shape
            continue
        s = ins[0]
        if l.kind in ("normalize", "conv2d", "batchnorm_eval", "maxpool2d", "global_avgpool"):
            if len(s) != 3:
                raise ValidationError(
                    f"layer '{l.id}' ({l.kind}) needs a CHW input, got shape {s}")
        if l.kind == "normalize":
            if len(l.params["mean"]) != s[0]:
                raise ValidationError(
                    f"layer '{l.id}': {len(l.params['mean'])} channel stats for {s[0]} channels")
            shapes[l.id] = s
        elif l.kind == "conv2d":
            kh, kw = _conv_kernel(l.params)
            stride = l.params.get("stride", 1)
            pad = l.params.get("padding", 0)
            oh = (s[1] + 2 * pad - kh) // stride + 1
            ow = (s[2] + 2 * pad - kw) // stride + 1
            if oh < 1 or ow < 1:
                raise ValidationError(
                    f"layer '{l.id}': conv output empty for input shape {s}")
            shapes[l.id] = (l.params["out_channels"], oh, ow)
        elif l.kind in ("batchnorm_eval", "relu"):
            shapes[l.id] = s
        elif l.kind == "maxpool2d":
            win, stride = l.params["window"], l.params["stride"]
            pad = l.params.get("padding", 0)
            oh = (s[1] + 2 * pad - win) // stride + 1
            ow = (s[2] + 2 * pad - win) // stride + 1
            if oh < 1 or ow < 1:
                raise ValidationError(f"layer '{l.id}': pool output empty for input shape {s}")
            shapes[l.id] = (s[0], oh, ow)
        elif l.kind == "global_avgpool":
            shapes[l.id] = (s[0],)
        elif l.kind == "flatten":
            shapes[l.id] = (int(np.prod(s)),)
        elif l.kind == "linear":
            if len(s) != 1:
                raise ValidationError(
                    f"layer '{l.id}': linear needs a rank-1 input, got shape {s} "
                    "(insert flatten or global_avgpool)")
            shapes[l.id] = (l.params["out_features"],)
        elif l.kind == "add":
            if ins[0] != ins[1]:
                raise ValidationError(
                    f"layer '{l.id}': add inputs have different shapes {ins[0]} vs {ins[1]}")
            shapes[l.id] = s
    return shapes


def _check_reachable(graph: BackboneGraph) -> None:
    reachable = {graph.input_layer}
    for l in graph.layers:
        if l.inputs and all(i in reachable for i in l.inputs):
            reachable.add(l.id)
    if graph.feature_layer not in reachable:
        raise ValidationError(
            f"feature_layer '{graph.feature_layer}' is not reachable from the input layer")


# ---------------------------------------------------------------------------
# ZWB weight blob


def pack_weights_blob(entries: list[tuple[str, np.ndarray]]) -> bytes:
    """Serialize named float32 arrays into ZWB bytes (order preserved)."""
    parts = [ZWB_MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValidationError(f"weight entry name too long: {name[:32]}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def parse_weights_blob(blob: bytes) -> dict[str, np.ndarray]:
    """Decode a ZWB blob into a name -> float32 array map (keyed, order-free)."""
    if blob[:4] != ZWB_MAGIC:
        raise FormatError(f"bad weight blob magic {blob[:4]!r}, expected {ZWB_MAGIC!r}")
    off = 4
    if len(blob) < off + 4:
        raise FormatError("truncated weight blob: missing entry count")
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        if len(blob) < off + 2:
            raise FormatError(f"truncated weight blob in entry {i}: missing name length")
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        if len(blob) < off + nlen + 1:
            raise FormatError(f"truncated weight blob in entry {i}: missing name/ndim")
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        ndim = blob[off]
        off += 1
        if len(blob) < off + 4 * ndim:
            raise FormatError(f"truncated weight blob in entry '{name}': missing dims")
        dims = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        if any(d < 1 for d in dims):
            raise FormatError(f"weight entry '{name}' has a zero dim {dims}")
        n_vals = int(np.prod(dims))
        nbytes = 4 * n_vals
        if len(blob) < off + nbytes:
            raise FormatError(f"truncated weight blob in entry '{name}': missing payload")
        arr = np.frombuffer(blob, dtype="<f4", count=n_vals, offset=off).reshape(dims)
        off += nbytes
        if name in out:
            raise FormatError(f"duplicate weight entry '{name}'")
        out[name] = arr
    if off != len(blob):
        raise FormatError(f"weight blob has {len(blob) - off} trailing bytes")
    return out


def expected_weight_shapes(graph: BackboneGraph) -> dict[str, tuple[int, ...]]:
    """Entry name -> shape the manifest requires, in canonical order."""
    want: dict[str, tuple[int, ...]] = {}
    for l in graph.layers:
        in_shape = graph.shapes[l.inputs[0]] if l.inputs else None
        if l.kind == "conv2d":
            kh, kw = _conv_kernel(l.params)
            want[f"{l.id}.weight"] = (l.params["out_channels"], in_shape[0], kh, kw)
            if l.params.get("bias", True):
                want[f"{l.id}.bias"] = (l.params["out_channels"],)
        elif l.kind == "batchnorm_eval":
            c = in_shape[0]
            for p in ("mean", "var", "gamma", "beta"):
                want[f"{l.id}.{p}"] = (c,)
        elif l.kind == "linear":
            want[f"{l.id}.weight"] = (l.params["out_features"], in_shape[0])
            if l.params.get("bias", True):
                want[f"{l.id}.bias"] = (l.params["out_features"],)
    return want


def load_weights(graph: BackboneGraph, blob_bytes: bytes,
                 source: str = "") -> BackboneGraph:
    """Attach a ZWB blob to a manifest graph; returns a fully loaded copy."""
    entries = parse_weights_blob(blob_bytes)
    want = expected_weight_shapes(graph)
    missing = sorted(set(want) - set(entries))
    if missing:
        raise ValidationError(f"weight blob is missing entries {missing}")
    extra = sorted(set(entries) - set(want))
    if extra:
        raise ValidationError(f"weight blob has entries the manifest does not expect: {extra}")
    weights: dict[str, dict[str, Tensor]] = {}
    for name, arr in entries.items():
        if arr.shape != want[name]:
            lid = name.split(".")[0]
            raise ValidationError(
                f"weight '{name}' (layer '{lid}') has shape {arr.shape}, "
                f"manifest expects {want[name]}")
        lid, pname = name.split(".", 1)
        if pname == "var" and np.any(arr < 0):
            raise ValidationError(f"weight '{name}': variance entries must be non-negative")
        weights.setdefault(lid, {})[pname] = Tensor(np.array(arr, dtype=np.float32))
    prov = dict(graph.provenance)
    prov["weights_hash"] = fnv1a64(blob_bytes)
    if source:
        prov["source"] = source
    return replace(graph, weights=weights, provenance=prov)


def save_weights(graph: BackboneGraph) -> bytes:
    """Serialize loaded weights in canonical (manifest) order."""
    order = expected_weight_shapes(graph)
    entries = []
    for name in order:
        lid, pname = name.split(".", 1)
        try:
            t = graph.weights[lid][pname]
        except KeyError:
            raise ValidationError(f"graph has no loaded weight '{name}'") from None
        entries.append((name, t.data))
    return pack_weights_blob(entries)


# ---------------------------------------------------------------------------
# execution


def _run_layer(l: LayerSpec, ins: list[Tensor], weights: dict[str, Tensor],
               dtype: np.dtype, tape: Optional[Tape]) -> Tensor:
    if l.kind == "normalize":
        mean = Tensor(np.array(l.params["mean"], dtype=dtype))
        std = Tensor(np.array(l.params["std"], dtype=dtype))
        return T.normalize(ins[0], mean, std, tape=tape)
    if l.kind == "conv2d":
        kh, kw = _conv_kernel(l.params)
        bias = weights.get("bias")
        return T.conv2d(ins[0], weights["weight"], bias,
                        stride=l.params.get("stride", 1),
                        padding=l.params.get("padding", 0), tape=tape)
    if l.kind == "batchnorm_eval":
        return T.batchnorm_eval(ins[0], weights["mean"], weights["var"],
                                weights["gamma"], weights["beta"],
                                eps=l.params.get("eps", 1e-5), tape=tape)
    if l.kind == "relu":
        return T.relu(ins[0], tape=tape)
    if l.kind == "maxpool2d":
        return T.maxpool2d(ins[0], l.params["window"], l.params["stride"],
                           padding=l.params.get("padding", 0), tape=tape)
    if l.kind == "global_avgpool":
        return T.global_avgpool(ins[0], tape=tape)
    if l.kind == "flatten":
        return T.flatten(ins[0], tape=tape)
    if l.kind == "linear":
        return T.linear(ins[0], weights["weight"], weights.get("bias"), tape=tape)
    if l.kind == "add":
        return T.add(ins[0], ins[1], tape=tape)
    raise ValidationError(f"cannot execute layer kind '{l.kind}'")


def _validate_images(graph: BackboneGraph, images: Tensor) -> None:
    if len(images.dims) != 4 or images.dims[1:] != graph.input_shape:
        raise ValidationError(
            f"image batch dims {images.dims} do not match expected input shape "
            f"(N, {', '.join(map(str, graph.input_shape))})")
    if images.dtype != graph.dtype:
        raise ValidationError(
            f"image dtype {images.dtype} does not match graph dtype {graph.dtype}")
    lo = float(images.data.min())
    hi = float(images.data.max())
    if lo < 0.0 or hi > 1.0:
        raise ValidationError(f"pixel values must lie in [0, 1], got range [{lo}, {hi}]")


def _execute(graph: BackboneGraph, images: Tensor,
             tape: Optional[Tape]) -> dict[str, Tensor]:
    values: dict[str, Tensor] = {}
    for l in graph.ancestors_of_feature():
        if l.kind == "input":
            values[l.id] = images
            continue
        ins = [values[i] for i in l.inputs]
        try:
            values[l.id] = _run_layer(l, ins, graph.weights.get(l.id, {}),
                                      graph.dtype, tape)
        except NumericError as e:
            raise NumericError(f"non-finite activation at layer '{l.id}': {e}") from e
    return values


def run_layers(graph: BackboneGraph, images: Tensor) -> dict[str, Tensor]:
    """Execute the feature subgraph and return every intermediate activation."""
    _validate_images(graph, images)
    _check_loaded(graph)
    return _execute(graph, images, tape=None)


def _check_loaded(graph: BackboneGraph) -> None:
    for name in expected_weight_shapes(graph):
        lid, pname = name.split(".", 1)
        if pname not in graph.weights.get(lid, {}):
            raise ValidationError(
                f"graph weights not loaded (missing '{name}'); call load_weights first")


def extract_features(graph: BackboneGraph, images: Tensor) -> Tensor:
    """Run the backbone on an NCHW batch; returns features at the feature layer."""
    _validate_images(graph, images)
    _check_loaded(graph)
    values = _execute(graph, images, tape=None)
    return values[graph.feature_layer]


class TracedForward:
    """Single-image forward pass with a recorded trace for input gradients."""

    def __init__(self, graph: BackboneGraph, image: Tensor):
        if image.dims != graph.input_shape:
            raise ValidationError(
                f"image dims {image.dims} do not match expected input shape "
                f"{graph.input_shape}")
        self._graph = graph
        self._batch = image.reshape((1,) + image.dims)
        _validate_images(graph, self._batch)
        _check_loaded(graph)
        self._tape = Tape()
        values = _execute(graph, self._batch, tape=self._tape)
        self._output = values[graph.feature_layer]

    @property
    def features(self) -> Tensor:
        return self._output.reshape(self._output.dims[1])

    def input_gradient(self, feature_grad: Tensor) -> Tensor:
        if feature_grad.dims != (self._output.dims[1],):
            raise ValidationError(
                f"feature_grad dims {feature_grad.dims} do not match feature dim "
                f"({self._output.dims[1]},)")
        seed = feature_grad.reshape(1, feature_grad.dims[0])
        grad = T.backward(self._tape, self._output, seed, wrt=self._batch)
        return grad.reshape(self._graph.input_shape)


def input_gradient(graph: BackboneGraph, image: Tensor, feature_grad: Tensor) -> Tensor:
    """Chain-rule gradient of g . h(x) with respect to the input image."""
    return TracedForward(graph, image).input_gradient(feature_grad)
