"""Manifest parsing, weight blobs, feature extraction and input gradients."""

import json

import numpy as np
import pytest

from ndeval import tensor as T
from ndeval.backbone import (extract_features, fnv1a64, input_gradient,
                             load_manifest, load_weights, pack_weights_blob,
                             run_layers, save_manifest, save_weights)
from ndeval.errors import FormatError, ValidationError
from ndeval.selfcheck import (guarded_input_fd, random_small_backbone,
                              relative_error)
from ndeval.tensor import Tensor

from conftest import make_rng

MINIMAL = {
    "version": 1,
    "input_shape": [3, 1, 1],
    "feature_layer": "fc",
    "layers": [
        {"id": "in", "kind": "input", "inputs": [], "params": {}},
        {"id": "flat", "kind": "flatten", "inputs": ["in"], "params": {}},
        {"id": "fc", "kind": "linear", "inputs": ["flat"], "params": {"out_features": 2}},
    ],
}

IDENTITY = {
    "version": 1,
    "input_shape": [1, 2, 2],
    "feature_layer": "flat",
    "layers": [
        {"id": "in", "kind": "input", "inputs": [], "params": {}},
        {"id": "flat", "kind": "flatten", "inputs": ["in"], "params": {}},
    ],
}

EMPTY_BLOB = b"ZWB1\x00\x00\x00\x00"


def manifest_bytes(doc):
    return json.dumps(doc).encode()


class TestLoadManifest:
    def test_minimal_manifest(self):
        g = load_manifest(manifest_bytes(MINIMAL))
        assert len(g.layers) == 3
        assert g.feature_dim == 2
        assert g.shapes["flat"] == (3,)

    def test_forward_reference_rejected(self):
        doc = {
            "version": 1, "input_shape": [1, 2, 2], "feature_layer": "s",
            "layers": [
                {"id": "in", "kind": "input", "inputs": [], "params": {}},
                {"id": "s", "kind": "add", "inputs": ["r", "in2d"], "params": {}},
                {"id": "in2d", "kind": "relu", "inputs": ["in"], "params": {}},
                {"id": "r", "kind": "relu", "inputs": ["in"], "params": {}},
            ],
        }
        with pytest.raises(ValidationError, match="forward reference"):
            load_manifest(manifest_bytes(doc))

    def test_unknown_reference_rejected(self):
        doc = dict(MINIMAL)
        doc["layers"] = [
            {"id": "in", "kind": "input", "inputs": [], "params": {}},
            {"id": "flat", "kind": "flatten", "inputs": ["ghost"], "params": {}},
        ]
        doc["feature_layer"] = "flat"
        with pytest.raises(ValidationError, match="unknown layer"):
            load_manifest(manifest_bytes(doc))

    def test_unknown_top_level_key_rejected(self):
        doc = dict(MINIMAL)
        doc["extra"] = 1
        with pytest.raises(FormatError, match="unknown manifest keys"):
            load_manifest(manifest_bytes(doc))

    def test_unknown_param_rejected(self):
        doc = json.loads(json.dumps(MINIMAL))
        doc["layers"][2]["params"]["mystery"] = 5
        with pytest.raises(FormatError, match="unknown params"):
            load_manifest(manifest_bytes(doc))

    def test_unsupported_kind_rejected(self):
        doc = json.loads(json.dumps(MINIMAL))
        doc["layers"][1]["kind"] = "attention"
        with pytest.raises(ValidationError, match="unsupported layer kind"):
            load_manifest(manifest_bytes(doc))

    def test_duplicate_id_rejected(self):
        doc = json.loads(json.dumps(MINIMAL))
        doc["layers"][2]["id"] = "flat"
        with pytest.raises(ValidationError, match="duplicate layer id"):
            load_manifest(manifest_bytes(doc))

    def test_parse_error_reports_line(self):
        with pytest.raises(FormatError, match="line"):
            load_manifest(b'{"version": 1,\n "oops}')

    def test_exactly_one_input_layer(self):
        doc = json.loads(json.dumps(MINIMAL))
        doc["layers"].insert(1, {"id": "in2", "kind": "input", "inputs": [], "params": {}})
        with pytest.raises(ValidationError, match="exactly one input"):
            load_manifest(manifest_bytes(doc))

    def test_feature_layer_must_be_rank_one(self):
        doc = {
            "version": 1, "input_shape": [1, 2, 2], "feature_layer": "r",
            "layers": [
                {"id": "in", "kind": "input", "inputs": [], "params": {}},
                {"id": "r", "kind": "relu", "inputs": ["in"], "params": {}},
            ],
        }
        with pytest.raises(ValidationError, match="rank-1"):
            load_manifest(manifest_bytes(doc))

    def test_feature_layer_defaults_to_classifier_input(self):
        doc = json.loads(json.dumps(MINIMAL))
        del doc["feature_layer"]
        g = load_manifest(manifest_bytes(doc))
        assert g.feature_layer == "flat"

    def test_shape_contradiction_rejected(self):
        doc = {
            "version": 1, "input_shape": [1, 4, 4], "feature_layer": "gap",
            "layers": [
                {"id": "in", "kind": "input", "inputs": [], "params": {}},
                {"id": "c", "kind": "conv2d", "inputs": ["in"],
                 "params": {"out_channels": 2, "kernel": 7}},
                {"id": "gap", "kind": "global_avgpool", "inputs": ["c"], "params": {}},
            ],
        }
        with pytest.raises(ValidationError, match="empty"):
            load_manifest(manifest_bytes(doc))

    def test_manifest_round_trip_is_structural_identity(self):
        for seed in range(6):
            g, _ = random_small_backbone(seed)
            again = load_manifest(save_manifest(g).encode())
            assert again.layers == g.layers
            assert again.feature_layer == g.feature_layer
            assert again.input_shape == g.input_shape
            assert again.shapes == g.shapes


class TestWeights:
    def test_minimal_blob_forward_is_affine(self):
        g = load_manifest(manifest_bytes(MINIMAL))
        rng = make_rng(2)
        w = rng.standard_normal((2, 3)).astype(np.float32)
        b = rng.standard_normal(2).astype(np.float32)
        blob = pack_weights_blob([("fc.weight", w), ("fc.bias", b)])
        g = load_weights(g, blob)
        x = rng.uniform(0, 1, (4, 3, 1, 1)).astype(np.float32)
        feats = extract_features(g, Tensor(x)).data
        ref = x.reshape(4, 3).astype(np.float64) @ w.astype(np.float64).T + b
        assert relative_error(feats, ref) <= 1e-6

    def test_entry_order_does_not_matter(self):
        g = load_manifest(manifest_bytes(MINIMAL))
        rng = make_rng(3)
        w = rng.standard_normal((2, 3)).astype(np.float32)
        b = rng.standard_normal(2).astype(np.float32)
        fwd = load_weights(g, pack_weights_blob([("fc.weight", w), ("fc.bias", b)]))
        rev = load_weights(g, pack_weights_blob([("fc.bias", b), ("fc.weight", w)]))
        x = Tensor(rng.uniform(0, 1, (1, 3, 1, 1)).astype(np.float32))
        assert np.array_equal(extract_features(fwd, x).data,
                              extract_features(rev, x).data)

    def test_missing_key_rejected(self):
        g = load_manifest(manifest_bytes(MINIMAL))
        blob = pack_weights_blob([("fc.weight", np.zeros((2, 3), dtype=np.float32))])
        with pytest.raises(ValidationError, match="missing entries"):
            load_weights(g, blob)

    def test_shape_mismatch_names_layer(self):
        g = load_manifest(manifest_bytes(MINIMAL))
        blob = pack_weights_blob([("fc.weight", np.zeros((2, 4), dtype=np.float32)),
                                  ("fc.bias", np.zeros(2, dtype=np.float32))])
        with pytest.raises(ValidationError, match="'fc'"):
            load_weights(g, blob)

    def test_bad_magic_rejected(self):
        g = load_manifest(manifest_bytes(MINIMAL))
        with pytest.raises(FormatError, match="magic"):
            load_weights(g, b"NOPE" + b"\x00" * 8)

    def test_truncated_blob_rejected(self):
        g = load_manifest(manifest_bytes(MINIMAL))
        rng = make_rng(4)
        blob = pack_weights_blob([("fc.weight", rng.standard_normal((2, 3)).astype(np.float32)),
                                  ("fc.bias", np.zeros(2, dtype=np.float32))])
        with pytest.raises(FormatError, match="truncated"):
            load_weights(g, blob[:-5])

    def test_unexpected_entry_rejected(self):
        g = load_manifest(manifest_bytes(IDENTITY))
        blob = pack_weights_blob([("ghost.weight", np.zeros(1, dtype=np.float32))])
        with pytest.raises(ValidationError, match="does not expect"):
            load_weights(g, blob)

    def test_save_load_round_trip_is_byte_identical(self):
        for seed in range(6):
            g, _ = random_small_backbone(seed)
            blob = save_weights(g)
            again = load_weights(load_manifest(save_manifest(g).encode()), blob)
            assert save_weights(again) == blob

    def test_blob_hash_recorded_in_provenance(self):
        g = load_manifest(manifest_bytes(IDENTITY))
        g = load_weights(g, EMPTY_BLOB)
        assert g.weights_hash == fnv1a64(EMPTY_BLOB)


class TestExtract:
    def identity_graph(self):
        return load_weights(load_manifest(manifest_bytes(IDENTITY)), EMPTY_BLOB)

    def test_identity_features_equal_flattened_input(self):
        g = self.identity_graph()
        rng = make_rng(5)
        x = rng.uniform(0, 1, (3, 1, 2, 2)).astype(np.float32)
        feats = extract_features(g, Tensor(x)).data
        assert np.array_equal(feats, x.reshape(3, 4))

    def test_duplicate_image_rows_identical(self):
        g, img = random_small_backbone(1)
        batch = Tensor(np.stack([img.data, img.data]))
        feats = extract_features(g, batch).data
        assert np.array_equal(feats[0], feats[1])

    def test_batch_equals_single_bit_exact(self):
        for seed in range(8):
            g, _ = random_small_backbone(seed)
            rng = make_rng(seed + 40)
            batch = Tensor(rng.uniform(0.05, 0.95, (4,) + g.input_shape).astype(np.float32))
            zb = extract_features(g, batch).data
            for i in range(4):
                zi = extract_features(g, Tensor(np.array(batch.data[i:i + 1]))).data[0]
                assert np.array_equal(zb[i], zi)

    def test_features_match_layer_by_layer_replay(self):
        # independent re-execution of the manifest with direct op calls
        g, img = random_small_backbone(2)
        batch = img.reshape((1,) + img.dims)
        values = {"in": batch}
        by_id = {l.id: l for l in g.layers}
        for l in g.layers:
            if l.kind == "input":
                values[l.id] = batch
                continue
            ins = [values[i] for i in l.inputs]
            w = g.weights.get(l.id, {})
            if l.kind == "normalize":
                out = T.normalize(ins[0], Tensor(np.array(l.params["mean"], dtype=np.float32)),
                                  Tensor(np.array(l.params["std"], dtype=np.float32)))
            elif l.kind == "conv2d":
                out = T.conv2d(ins[0], w["weight"], w.get("bias"),
                               stride=l.params.get("stride", 1),
                               padding=l.params.get("padding", 0))
            elif l.kind == "batchnorm_eval":
                out = T.batchnorm_eval(ins[0], w["mean"], w["var"], w["gamma"],
                                       w["beta"], eps=l.params.get("eps", 1e-5))
            elif l.kind == "relu":
                out = T.relu(ins[0])
            elif l.kind == "maxpool2d":
                out = T.maxpool2d(ins[0], l.params["window"], l.params["stride"],
                                  padding=l.params.get("padding", 0))
            elif l.kind == "global_avgpool":
                out = T.global_avgpool(ins[0])
            elif l.kind == "flatten":
                out = T.flatten(ins[0])
            elif l.kind == "linear":
                out = T.linear(ins[0], w["weight"], w.get("bias"))
            elif l.kind == "add":
                out = T.add(ins[0], ins[1])
            values[l.id] = out
        want = values[g.feature_layer].data
        got = extract_features(g, batch).data
        assert np.array_equal(got, want)

    def test_wrong_shape_rejected(self):
        g = self.identity_graph()
        with pytest.raises(ValidationError, match="input shape"):
            extract_features(g, Tensor(np.zeros((1, 1, 3, 3), dtype=np.float32)))

    def test_out_of_range_pixels_rejected(self):
        g = self.identity_graph()
        with pytest.raises(ValidationError, match=r"\[0, 1\]"):
            extract_features(g, Tensor(np.full((1, 1, 2, 2), 1.5, dtype=np.float32)))

    def test_missing_weights_rejected(self):
        g = load_manifest(manifest_bytes(MINIMAL))
        with pytest.raises(ValidationError, match="load_weights"):
            extract_features(g, Tensor(np.zeros((1, 3, 1, 1), dtype=np.float32)))


class TestInputGradient:
    def test_identity_graph_reshapes_feature_grad(self):
        g = load_weights(load_manifest(manifest_bytes(IDENTITY)), EMPTY_BLOB)
        rng = make_rng(6)
        img = Tensor(rng.uniform(0, 1, (1, 2, 2)).astype(np.float32))
        fg = rng.standard_normal(4).astype(np.float32)
        grad = input_gradient(g, img, Tensor(fg))
        assert np.array_equal(grad.data, fg.reshape(1, 2, 2))

    def test_zero_feature_grad_gives_zero(self):
        g, img = random_small_backbone(3)
        grad = input_gradient(g, img, Tensor(np.zeros(g.feature_dim, dtype=np.float32)))
        assert np.array_equal(grad.data, np.zeros(img.dims, dtype=np.float32))

    @pytest.mark.parametrize("dtype,h,tol", [(np.float32, 1e-3, 1e-3),
                                             (np.float64, 1e-5, 1e-6)])
    def test_matches_finite_differences_of_projection(self, dtype, h, tol):
        for seed in (4, 9):
            g, img = random_small_backbone(seed, dtype=dtype)
            rng = make_rng(seed + 70)
            fg = rng.standard_normal(g.feature_dim).astype(dtype)
            got = input_gradient(g, img, Tensor(fg)).data

            fd, valid = guarded_input_fd(
                g, img, lambda z: float(z.astype(np.float64) @ fg.astype(np.float64)), h)
            assert valid.mean() >= 0.8  # kink crossings must stay rare
            assert relative_error(got[valid], fd[valid]) <= tol

    def test_normalization_transparency(self):
        # scaling channel_std by c scales the input gradient by 1/c
        def graph_with_std(std):
            doc = {
                "version": 1, "input_shape": [1, 2, 2], "feature_layer": "flat",
                "layers": [
                    {"id": "in", "kind": "input", "inputs": [], "params": {}},
                    {"id": "n", "kind": "normalize", "inputs": ["in"],
                     "params": {"mean": [0.5], "std": [std]}},
                    {"id": "flat", "kind": "flatten", "inputs": ["n"], "params": {}},
                ],
            }
            return load_weights(load_manifest(manifest_bytes(doc)), EMPTY_BLOB)

        rng = make_rng(8)
        img = Tensor(rng.uniform(0.2, 0.8, (1, 2, 2)).astype(np.float32))
        fg = Tensor(rng.standard_normal(4).astype(np.float32))
        c = 4.0
        g1 = input_gradient(graph_with_std(0.5), img, fg).data
        g2 = input_gradient(graph_with_std(0.5 * c), img, fg).data
        assert relative_error(g2, g1 / c) <= 1e-6

    def test_wrong_feature_grad_length(self):
        g, img = random_small_backbone(5)
        with pytest.raises(ValidationError, match="feature_grad"):
            input_gradient(g, img, Tensor(np.zeros(g.feature_dim + 1, dtype=np.float32)))


def test_run_layers_exposes_all_feature_ancestors():
    g, img = random_small_backbone(0)
    vals = run_layers(g, img.reshape((1,) + img.dims))
    for l in g.ancestors_of_feature():
        assert l.id in vals


def test_fnv1a64_known_vectors():
    # standard FNV-1a test vectors
    assert fnv1a64(b"") == "cbf29ce484222325"
    assert fnv1a64(b"a") == "af63dc4c8601ec8c"
    assert fnv1a64(b"foobar") == "85944171f73967e8"
