"""Synthetic datasets and toy backbones for tests, demos and the self-check."""

from __future__ import annotations

import json

import numpy as np

from .backbone import BackboneGraph, load_manifest, load_weights
from .protocols import Dataset
from .tensor import Tensor


def identity_backbone(input_shape=(1, 4, 4)) -> BackboneGraph:
    """Backbone whose features are the flattened raw pixels (no weights)."""
    manifest = {
        "version": 1,
        "input_shape": list(input_shape),
        "feature_layer": "flat",
        "layers": [
            {"id": "in", "kind": "input", "inputs": [], "params": {}},
            {"id": "flat", "kind": "flatten", "inputs": ["in"], "params": {}},
        ],
    }
    graph = load_manifest(json.dumps(manifest))
    return load_weights(graph, b"ZWB1\x00\x00\x00\x00", source="identity")


def two_class_images(n_train: int = 60, n_test: int = 60, shape=(1, 4, 4),
                     centers=(0.35, 0.75), noise: float = 0.03,
                     seed: int = 0, tag: str = "two_blobs") -> Dataset:
    """Two well-separated image classes: constant level per class plus uniform noise.

    The per-pixel class gap is ``centers[1] - centers[0]``; with noise well
    below the gap the classes are essentially perfectly separable in pixel
    space, which makes clean one-class AUROC approach 1.0 under the identity
    backbone.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))

    def split(n):
        images = np.empty((2 * n,) + tuple(shape), dtype=np.float32)
        labels = np.empty(2 * n, dtype=np.int64)
        for cls, level in enumerate(centers):
            block = level + rng.uniform(-noise, noise, size=(n,) + tuple(shape))
            images[cls * n:(cls + 1) * n] = np.clip(block, 0.0, 1.0)
            labels[cls * n:(cls + 1) * n] = cls
        order = rng.permutation(2 * n)
        return Tensor(images[order]), labels[order]

    train_x, train_y = split(n_train)
    test_x, test_y = split(n_test)
    return Dataset(train_images=train_x, train_labels=train_y,
                   test_images=test_x, test_labels=test_y, tag=tag)


def class_gap(centers=(0.35, 0.75)) -> float:
    return abs(centers[1] - centers[0])
