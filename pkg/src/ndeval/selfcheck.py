"""Built-in oracles and the self-test battery behind the ``check`` subcommand.

The oracles here are deliberately independent of the engine's fast paths:
convolution by six nested loops, k-NN by a full sort, AUROC by pairwise
counting, gradients by central finite differences. The same functions back the
acceptance test suite.
"""

from __future__ import annotations

import json
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .backbone import BackboneGraph, load_manifest, load_weights, pack_weights_blob, run_layers
from .dataio import load_ztb, save_ztb
from .errors import EngineError
from .metrics import auroc
from .scoring import FeatureBank, KnnScorer, fit_gmm
from .tensor import Tensor
from .attack import project_linf


def relative_error(actual: np.ndarray, expected: np.ndarray) -> float:
    """Max absolute difference, normalized by the expected scale (floor 1)."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    scale = max(1.0, float(np.max(np.abs(expected))) if expected.size else 0.0)
    return float(np.max(np.abs(actual - expected))) / scale


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray,
                       h: float) -> np.ndarray:
    """Elementwise central finite differences of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    base = x.reshape(-1)
    for i in range(base.size):
        xp = base.copy()
        xm = base.copy()
        xp[i] += h
        xm[i] -= h
        flat[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2.0 * h)
    return grad


def conv2d_reference(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray],
                     stride: int = 1, padding: int = 0) -> np.ndarray:
    """Six-nested-loop cross-correlation in float64."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, h_in, w_in = x.shape
    k, _, kh, kw = w.shape
    out_h = (h_in + 2 * padding - kh) // stride + 1
    out_w = (w_in + 2 * padding - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, k, out_h, out_w))
    for ni in range(n):
        for ki in range(k):
            for oi in range(out_h):
                for oj in range(out_w):
                    acc = 0.0
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[ni, ci, oi * stride + u, oj * stride + v] \
                                    * w[ki, ci, u, v]
                    out[ni, ki, oi, oj] = acc + (b[ki] if b is not None else 0.0)
    return out


def knn_reference(bank: np.ndarray, query: np.ndarray, k: int):
    """Full-sort k-NN oracle; returns (score, neighbor indices)."""
    bank = np.asarray(bank, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    diff = bank - query[None, :]
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    order = np.lexsort((np.arange(dist.size), dist))[:k]
    return float(np.sum(dist[order])), tuple(int(i) for i in order)


def auroc_reference(normal, outlier) -> float:
    """O(n^2) pairwise count with half credit for ties."""
    normal = np.asarray(normal, dtype=np.float64)
    outlier = np.asarray(outlier, dtype=np.float64)
    wins2 = 0
    for o in outlier:
        for s in normal:
            if o > s:
                wins2 += 2
            elif o == s:
                wins2 += 1
    d2 = 2 * normal.size * outlier.size
    if 2 * wins2 <= d2:
        return wins2 / d2
    return 1.0 - (d2 - wins2) / d2


# ---------------------------------------------------------------------------
# random small backbones over the full layer vocabulary


def random_small_backbone(seed: int, dtype=np.float32,
                          max_channels: int = 8) -> tuple[BackboneGraph, Tensor]:
    """Random backbone built through the manifest/blob loaders, plus an image.

    Covers every supported layer kind across seeds; images stay inside
    [0.1, 0.9] so finite-difference probes cannot leave the pixel box.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    c = int(rng.integers(1, 4))
    hw = int(rng.integers(5, 9))
    template = int(rng.integers(0, 5))

    layers = [{"id": "in", "kind": "input", "inputs": [], "params": {}}]
    entries: list[tuple[str, np.ndarray]] = []
    prev, prev_c, prev_hw = "in", c, hw

    def w_init(*shape, fan):
        return (rng.standard_normal(shape) / np.sqrt(fan)).astype(np.float32)

    def add_conv(name, out_c, kern, stride=1, padding=0, bias=True):
        nonlocal prev, prev_c, prev_hw
        layers.append({"id": name, "kind": "conv2d", "inputs": [prev],
                       "params": {"out_channels": out_c, "kernel": kern,
                                  "stride": stride, "padding": padding, "bias": bias}})
        entries.append((f"{name}.weight",
                        w_init(out_c, prev_c, kern, kern, fan=prev_c * kern * kern)))
        if bias:
            entries.append((f"{name}.bias", 0.1 * rng.standard_normal(out_c).astype(np.float32)))
        prev = name
        prev_c = out_c
        prev_hw = (prev_hw + 2 * padding - kern) // stride + 1

    def add_bn(name):
        nonlocal prev
        layers.append({"id": name, "kind": "batchnorm_eval", "inputs": [prev],
                       "params": {"eps": 1e-5}})
        entries.append((f"{name}.mean", 0.2 * rng.standard_normal(prev_c).astype(np.float32)))
        entries.append((f"{name}.var",
                        rng.uniform(0.5, 1.5, prev_c).astype(np.float32)))
        entries.append((f"{name}.gamma",
                        rng.uniform(0.6, 1.4, prev_c).astype(np.float32)))
        entries.append((f"{name}.beta", 0.1 * rng.standard_normal(prev_c).astype(np.float32)))
        prev = name

    def add_simple(name, kind, params=None):
        nonlocal prev
        layers.append({"id": name, "kind": kind, "inputs": [prev],
                       "params": params or {}})
        prev = name

    out_c = int(rng.integers(2, max_channels + 1))
    if template == 0:
        mean = rng.uniform(0.2, 0.6, c).round(3).tolist()
        std = rng.uniform(0.5, 1.5, c).round(3).tolist()
        add_simple("norm", "normalize", {"mean": mean, "std": std})
        add_conv("c1", out_c, 3, padding=1)
        add_bn("bn1")
        add_simple("r1", "relu")
        add_simple("gap", "global_avgpool")
    elif template == 1:
        add_conv("c1", out_c, 3)
        add_simple("r1", "relu")
        add_simple("p1", "maxpool2d", {"window": 2, "stride": 2})
        prev_hw = (prev_hw - 2) // 2 + 1
        add_simple("flat", "flatten")
        m = int(rng.integers(3, 9))
        layers.append({"id": "fc", "kind": "linear", "inputs": ["flat"],
                       "params": {"out_features": m}})
        d_in = out_c * prev_hw * prev_hw
        entries.append(("fc.weight", w_init(m, d_in, fan=d_in)))
        entries.append(("fc.bias", 0.1 * rng.standard_normal(m).astype(np.float32)))
        prev = "fc"
    elif template == 2:
        add_conv("c1", out_c, 3, padding=1, bias=False)
        add_bn("bn1")
        add_simple("r1", "relu")
        trunk = prev
        add_conv("c2", out_c, 3, padding=1)
        add_bn("bn2")
        layers.append({"id": "res", "kind": "add", "inputs": [prev, trunk], "params": {}})
        prev = "res"
        add_simple("r2", "relu")
        add_simple("gap", "global_avgpool")
    elif template == 3:
        mean = rng.uniform(0.3, 0.5, c).round(3).tolist()
        std = rng.uniform(0.8, 1.2, c).round(3).tolist()
        add_simple("norm", "normalize", {"mean": mean, "std": std})
        add_conv("c1", out_c, 3, stride=2)
        add_simple("r1", "relu")
        add_simple("flat", "flatten")
    else:
        add_simple("p1", "maxpool2d", {"window": 3, "stride": 1, "padding": 1})
        add_conv("c1", out_c, 3)
        add_simple("r1", "relu")
        add_simple("gap", "global_avgpool")

    manifest = {"version": 1, "input_shape": [c, hw, hw], "feature_layer": prev,
                "layers": layers}
    graph = load_manifest(json.dumps(manifest))
    graph = load_weights(graph, pack_weights_blob(entries), source=f"random-{seed}")
    if np.dtype(dtype) != np.float32:
        graph = graph.astype(dtype)
    image = Tensor(rng.uniform(0.1, 0.9, size=(c, hw, hw)).astype(dtype))
    return graph, image


def _signature_from_values(graph: BackboneGraph, vals: dict) -> tuple:
    sig = []
    for l in graph.ancestors_of_feature():
        if l.kind == "relu":
            sig.append((l.id, (vals[l.inputs[0]].data > 0).tobytes()))
        elif l.kind == "maxpool2d":
            x = vals[l.inputs[0]].data
            patches, _, _, _, _ = T._extract_patches(
                x, l.params["window"], l.params["window"], l.params["stride"],
                l.params.get("padding", 0), fill=-np.inf)
            sig.append((l.id, patches.argmax(axis=2).tobytes()))
    return tuple(sig)


def activation_signature(graph: BackboneGraph, image: Tensor) -> tuple:
    """Hashable record of every relu sign mask and pooling argmax choice.

    Finite-difference probes are only trusted when the signature is identical
    on both sides of the perturbation (no kink was crossed).
    """
    batch = image.reshape((1,) + image.dims)
    return _signature_from_values(graph, run_layers(graph, batch))


def guarded_input_fd(graph: BackboneGraph, image: Tensor, score_fn, h: float,
                     feature_sig=None):
    """Central finite differences of score_fn(features) w.r.t. each pixel.

    Returns (fd, valid): a pixel is valid only when no relu/pool kink (and,
    via feature_sig, no scorer selection boundary) separates the two probe
    points. The divisor is the realized step in the graph's compute dtype, not
    the nominal h.
    """
    dt = graph.dtype
    base = image.data.astype(np.float64)
    fd = np.zeros(base.shape)
    valid = np.ones(base.shape, dtype=bool)
    flat_fd = fd.reshape(-1)
    flat_valid = valid.reshape(-1)
    base_flat = base.reshape(-1)

    def probe(x64):
        x = Tensor(x64.astype(dt))
        vals = run_layers(graph, x.reshape((1,) + x.dims))
        z = vals[graph.feature_layer].data[0]
        sig = _signature_from_values(graph, vals)
        if feature_sig is not None:
            sig = sig + (feature_sig(z),)
        return score_fn(z), sig

    for i in range(base_flat.size):
        xp = base_flat.copy()
        xm = base_flat.copy()
        xp[i] += h
        xm[i] -= h
        sp, sig_p = probe(xp.reshape(base.shape))
        sm, sig_m = probe(xm.reshape(base.shape))
        if sig_p != sig_m:
            flat_valid[i] = False
            continue
        delta = float(dt.type(xp[i])) - float(dt.type(xm[i]))
        flat_fd[i] = (sp - sm) / delta
    return fd, valid


# ---------------------------------------------------------------------------
# the check battery


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def _check(name: str, fn: Callable[[], str]) -> CheckResult:
    try:
        return CheckResult(name, True, fn())
    except EngineError as e:
        return CheckResult(name, False, str(e))
    except AssertionError as e:
        return CheckResult(name, False, str(e))


def _conv_oracle() -> str:
    rng = np.random.Generator(np.random.PCG64(7))
    worst = 0.0
    for _ in range(3):
        n, c, k = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 4)
        hw = int(rng.integers(4, 8))
        kern = int(rng.integers(1, 4))
        x = rng.standard_normal((n, c, hw, hw)).astype(np.float32)
        w = rng.standard_normal((k, c, kern, kern)).astype(np.float32)
        b = rng.standard_normal(k).astype(np.float32)
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
        ref = conv2d_reference(x, w, b)
        worst = max(worst, relative_error(got, ref))
    assert worst <= 1e-5, f"conv2d deviates from the loop oracle by {worst:.2e}"
    return f"max rel err {worst:.2e}"


def _gradient_fd() -> str:
    worst = 0.0
    for seed in (11, 23, 37):
        graph, image = random_small_backbone(seed)
        rng = np.random.Generator(np.random.PCG64(seed + 1))
        d = graph.feature_dim
        bank = FeatureBank(rng.standard_normal((12, d)).astype(np.float32))
        scorer = KnnScorer(bank, k=2)

        from .backbone import extract_features, input_gradient
        feats = extract_features(graph, image.reshape((1,) + image.dims)).data[0]
        analytic = input_gradient(
            graph, image, Tensor(scorer.score_grad(feats).astype(np.float32))).data

        def f(x64):
            x = Tensor(x64.astype(np.float32))
            z = extract_features(graph, x.reshape((1,) + x.dims)).data[0]
            return scorer.score(z).score

        fd = central_difference(f, image.data, h=1e-3)
        worst = max(worst, relative_error(analytic, fd))
    assert worst <= 1e-3, f"input gradient deviates from finite differences by {worst:.2e}"
    return f"max rel err {worst:.2e}"


def _knn_oracle() -> str:
    rng = np.random.Generator(np.random.PCG64(13))
    for _ in range(25):
        n = int(rng.integers(2, 60))
        d = int(rng.integers(1, 10))
        k = int(rng.integers(1, min(n, 8) + 1))
        bank = rng.standard_normal((n, d)).astype(np.float32)
        if rng.random() < 0.5 and n >= 4:
            bank[1] = bank[0]  # force distance ties
        q = rng.standard_normal(d).astype(np.float32)
        got = KnnScorer(FeatureBank(bank), k=k).score(q)
        want_s, want_n = knn_reference(bank, q, k)
        assert got.score == want_s and got.neighbors == want_n, \
            f"knn mismatch: {got.score} vs {want_s}"
    return "25 instances exact"


def _auroc_oracle() -> str:
    rng = np.random.Generator(np.random.PCG64(17))
    for _ in range(25):
        a = rng.integers(0, 6, size=rng.integers(1, 30)).astype(np.float64) / 2.0
        b = rng.integers(0, 6, size=rng.integers(1, 30)).astype(np.float64) / 2.0
        got = auroc(a, b)
        want = auroc_reference(a, b)
        assert abs(got - want) <= 1e-12, f"auroc {got} vs pairwise {want}"
        assert got + auroc(b, a) == 1.0, "complement identity violated"
    return "25 pairs exact, complement identity exact"


def _gmm_closed_form() -> str:
    rng = np.random.Generator(np.random.PCG64(19))
    x = rng.standard_normal((40, 3)).astype(np.float32)
    model = fit_gmm(FeatureBank(x), components=1, seed=0)
    want_mu = x.astype(np.float64).mean(axis=0)
    want_var = np.maximum(x.astype(np.float64).var(axis=0), 1e-6)
    assert relative_error(model.means[0], want_mu) <= 1e-9
    assert relative_error(model.variances[0], want_var) <= 1e-9
    return "single-component MLE matches closed form"


def _projection_oracle() -> str:
    rng = np.random.Generator(np.random.PCG64(23))
    x = Tensor(rng.uniform(0, 1, (2, 3, 3)).astype(np.float32))
    adv = Tensor(rng.uniform(-0.5, 1.5, (2, 3, 3)).astype(np.float32))
    eps = 0.1
    got = project_linf(adv, x, eps).data
    want = np.minimum(np.maximum(adv.data, np.maximum(x.data - eps, 0.0)),
                      np.minimum(x.data + eps, 1.0))
    assert np.array_equal(got, want), "projection differs from elementwise clamp"
    assert np.max(np.abs(got - x.data)) <= eps + 1e-7
    return "elementwise clamp verified"


def _roundtrips() -> str:
    rng = np.random.Generator(np.random.PCG64(29))
    with tempfile.TemporaryDirectory() as tmp:
        t = Tensor(rng.uniform(0, 1, (3, 1, 4, 4)).astype(np.float32))
        p = Path(tmp) / "t.ztb"
        save_ztb(t, p)
        back = load_ztb(p)
        assert np.array_equal(back.data, t.data), "ZTB round-trip changed values"

        from .dataio import load_idx_images, save_idx_images
        q = Path(tmp) / "t.idx"
        save_idx_images(t, q)
        again = load_idx_images(q)
        save_idx_images(again, Path(tmp) / "t2.idx")
        assert (Path(tmp) / "t2.idx").read_bytes() == q.read_bytes(), \
            "IDX round-trip not byte-identical"
    return "ZTB and IDX round-trips hold"


def check_parity(parity_path) -> str:
    """Compare engine features against a recorded source-ecosystem parity file."""
    parity_path = Path(parity_path)
    doc = json.loads(parity_path.read_text())
    base = parity_path.parent
    graph = load_manifest((base / doc["manifest"]).read_bytes())
    graph = load_weights(graph, (base / doc["weights"]).read_bytes())
    probes = load_ztb(base / doc["probes"])
    expected = load_ztb(base / doc["features"])
    tol = float(doc.get("tolerance", 1e-3))
    if doc.get("backbone_hash") and doc["backbone_hash"] != graph.weights_hash:
        raise AssertionError(
            f"blob hash {graph.weights_hash} does not match parity record "
            f"{doc['backbone_hash']}")
    from .backbone import extract_features
    got = extract_features(graph, probes).data
    diff = float(np.max(np.abs(got.astype(np.float64) - expected.data.astype(np.float64))))
    assert diff <= tol, f"probe feature max abs diff {diff:.3e} exceeds {tol:.1e}"
    return f"{probes.dims[0]} probes, max abs diff {diff:.3e} <= {tol:.1e}"


def run_all(parity_path=None) -> list[CheckResult]:
    results = [
        _check("conv2d vs loop oracle", _conv_oracle),
        _check("input gradient vs finite differences", _gradient_fd),
        _check("knn vs full-sort oracle", _knn_oracle),
        _check("auroc vs pairwise oracle", _auroc_oracle),
        _check("gmm single-component closed form", _gmm_closed_form),
        _check("linf projection oracle", _projection_oracle),
        _check("format round-trips", _roundtrips),
    ]
    if parity_path is not None:
        results.append(_check("backbone parity record", lambda: check_parity(parity_path)))
    return results
