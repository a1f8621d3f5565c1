"""Write a trained Keras checkpoint as a BNNKWS01 inference weights file.

The target format (little-endian):

    magic "BNNKWS01" | version u32 (=1) | layer_count u32 | feature_dim u32
    per layer:
      kind u8 | precision u8 | h u16 | w u16 | c_in u32 | c_out u32
      | stride u8 | pad u8 | payload

Kinds: 0 conv_fp, 1 conv_bin, 2 batch_norm, 3 relu, 4 global_avg_pool.
conv_fp payload: float32 kernel (kh, kw, c_in, c_out) in C order.
conv_bin payload: sign bits of the C-order kernel (bit 1 for weight >= 0,
matching sign(0) = +1), packed 64 per little-endian word, zero pad bits.
batch_norm payload: float32 gamma, beta, moving mean, moving variance
(c each), then epsilon. relu and global_avg_pool carry no payload.

Binarization happens here, at export: the inference engine never sees the
latent real weights of binarized layers.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .manifest import ExportManifest, ManifestError

KIND_CODES = {
    "conv_fp": 0,
    "conv_bin": 1,
    "batch_norm": 2,
    "relu": 3,
    "global_avg_pool": 4,
}

_MAGIC = b"BNNKWS01"
_VERSION = 1
_HEADER = struct.Struct("<III")
_LAYER_HEADER = struct.Struct("<BBHHIIBB")


class ExportError(ValueError):
    """Checkpoint and manifest cannot be reconciled."""


def pack_sign_bits(kernel: np.ndarray) -> bytes:
    """Sign bits of the flattened kernel, 64 per little-endian word."""
    bits = (kernel.reshape(-1) >= 0).astype(np.uint8)
    packed = np.packbits(bits, bitorder="little")
    n_words = (bits.size + 63) // 64
    padded = np.zeros(n_words * 8, dtype=np.uint8)
    padded[: packed.size] = packed
    return padded.tobytes()


def load_checkpoint(path: str | Path):
    """Load a Keras model file (.keras or .h5) without compiling."""
    import tensorflow as tf  # deferred: slow import

    try:
        return tf.keras.models.load_model(str(path), compile=False)
    except (OSError, ValueError) as e:
        raise ExportError(f"{path}: cannot load checkpoint: {e}") from None


def _conv_kernel(model, name: str) -> np.ndarray:
    layer = _find_layer(model, name)
    weights = layer.get_weights()
    if not weights:
        raise ExportError(f"layer {name!r} carries no weights")
    kernel = np.asarray(weights[0], dtype=np.float64)
    if kernel.ndim != 4:
        raise ExportError(
            f"layer {name!r}: expected a (kh, kw, c_in, c_out) kernel, "
            f"got shape {kernel.shape}"
        )
    if len(weights) > 1:
        raise ExportError(
            f"layer {name!r} has a bias term; export supports bias-free "
            "convolutions (fold the bias into the following batch norm)"
        )
    if not np.isfinite(kernel).all():
        raise ExportError(f"layer {name!r}: non-finite weights")
    return kernel


def _bn_params(model, name: str) -> tuple[np.ndarray, ...]:
    layer = _find_layer(model, name)
    weights = layer.get_weights()
    if len(weights) != 4:
        raise ExportError(
            f"layer {name!r}: expected gamma, beta, moving mean, moving "
            f"variance; found {len(weights)} arrays"
        )
    gamma, beta, mean, var = (np.asarray(w, dtype=np.float64) for w in weights)
    for arr, label in ((gamma, "gamma"), (beta, "beta"), (mean, "mean"), (var, "variance")):
        if not np.isfinite(arr).all():
            raise ExportError(f"layer {name!r}: non-finite {label}")
    if (var < 0).any():
        raise ExportError(f"layer {name!r}: negative variance")
    eps = float(getattr(layer, "epsilon", 1e-5))
    return gamma, beta, mean, var, eps


def _find_layer(model, name: str):
    try:
        return model.get_layer(name=name)
    except ValueError:
        raise ExportError(
            f"checkpoint has no layer named {name!r}; available: "
            f"{[l.name for l in model.layers]}"
        ) from None


def export(manifest: ExportManifest, out_path: str | Path,
           checkpoint_path: str | Path | None = None) -> Path:
    """Emit the weights file described by the manifest; returns the path."""
    source = checkpoint_path or manifest.checkpoint
    if source is None:
        raise ManifestError("no checkpoint path (manifest field or CLI flag)")
    model = load_checkpoint(source)

    records = []
    channels: int | None = None
    for entry in manifest.layers:
        if entry.kind in ("conv_fp", "conv_bin"):
            kernel = _conv_kernel(model, entry.name)
            kh, kw, c_in, c_out = kernel.shape
            if channels is not None and c_in != channels:
                raise ExportError(
                    f"layer {entry.name!r} expects {c_in} input channels; "
                    f"the previous layer produces {channels}"
                )
            if entry.kind == "conv_fp":
                payload = kernel.astype("<f4").tobytes()
                precision = 0
            else:
                payload = pack_sign_bits(kernel)
                precision = 1
            records.append(
                (KIND_CODES[entry.kind], precision, kh, kw, c_in, c_out,
                 entry.stride, entry.pad, payload)
            )
            channels = c_out
        elif entry.kind == "batch_norm":
            gamma, beta, mean, var, eps = _bn_params(model, entry.name)
            c = gamma.shape[0]
            if channels is not None and c != channels:
                raise ExportError(
                    f"layer {entry.name!r} normalizes {c} channels; the "
                    f"previous layer produces {channels}"
                )
            payload = b"".join(
                a.astype("<f4").tobytes() for a in (gamma, beta, mean, var)
            ) + struct.pack("<f", eps)
            # non-convolution layers carry stride 1 / pad 0 by convention
            records.append((KIND_CODES[entry.kind], 0, 0, 0, c, c, 1, 0, payload))
            channels = c
        else:
            if channels is None:
                raise ExportError(
                    f"{entry.kind} cannot be the first layer: channel count "
                    "unknown"
                )
            records.append(
                (KIND_CODES[entry.kind], 0, 0, 0, channels, channels, 1, 0, b"")
            )

    if channels != manifest.feature_dim:
        raise ExportError(
            f"stack produces {channels} features; manifest says "
            f"{manifest.feature_dim}"
        )

    blob = bytearray()
    blob += _MAGIC
    blob += _HEADER.pack(_VERSION, len(records), manifest.feature_dim)
    for kind, precision, h, w, c_in, c_out, stride, pad, payload in records:
        blob += _LAYER_HEADER.pack(kind, precision, h, w, c_in, c_out, stride, pad)
        blob += payload
    out_path = Path(out_path)
    out_path.write_bytes(bytes(blob))
    return out_path
