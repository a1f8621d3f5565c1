"""Shared toy checkpoint: a small conv/bn stack saved as a Keras file."""

import json
import os

import numpy as np
import pytest

os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "3")

MANIFEST_LAYERS = [
    {"name": "conv_in", "kind": "conv_fp", "stride": 2},
    {"name": "bn1", "kind": "batch_norm"},
    {"name": "conv_mid", "kind": "conv_bin"},
    {"name": "bn2", "kind": "batch_norm"},
    {"name": "conv_out", "kind": "conv_fp"},
    {"name": "bn3", "kind": "batch_norm"},
    {"kind": "relu"},
    {"kind": "global_avg_pool"},
]

INPUT_SHAPE = (12, 10, 1)
FEATURE_DIM = 5


def build_toy_model(seed=0, positive_mid=False):
    import tensorflow as tf

    rng = np.random.default_rng(seed)
    model = tf.keras.Sequential(
        [
            tf.keras.layers.Input(shape=INPUT_SHAPE),
            tf.keras.layers.Conv2D(4, 3, strides=2, use_bias=False, name="conv_in"),
            tf.keras.layers.BatchNormalization(name="bn1"),
            tf.keras.layers.Conv2D(6, 3, use_bias=False, name="conv_mid"),
            tf.keras.layers.BatchNormalization(name="bn2"),
            tf.keras.layers.Conv2D(FEATURE_DIM, 1, use_bias=False, name="conv_out"),
            tf.keras.layers.BatchNormalization(name="bn3"),
            tf.keras.layers.ReLU(name="act"),
            tf.keras.layers.GlobalAveragePooling2D(name="pool"),
        ]
    )
    for layer in model.layers:
        if layer.name.startswith("conv"):
            (kernel,) = layer.get_weights()
            fresh = rng.normal(0, 0.6, kernel.shape)
            if positive_mid and layer.name == "conv_mid":
                fresh = np.abs(fresh) + 0.01
            layer.set_weights([fresh.astype(np.float32)])
        elif layer.name.startswith("bn"):
            gamma, beta, mean, var = layer.get_weights()
            c = gamma.shape[0]
            layer.set_weights(
                [
                    rng.uniform(0.5, 1.5, c).astype(np.float32),
                    rng.normal(0, 0.3, c).astype(np.float32),
                    rng.normal(0, 0.4, c).astype(np.float32),
                    rng.uniform(0.5, 1.5, c).astype(np.float32),
                ]
            )
    return model


@pytest.fixture(scope="session")
def toy_checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "toy.keras"
    build_toy_model(seed=0).save(path)
    return path


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory):
    path = tmp_path_factory.mktemp("manifest") / "manifest.json"
    path.write_text(
        json.dumps({"feature_dim": FEATURE_DIM, "layers": MANIFEST_LAYERS})
    )
    return path
