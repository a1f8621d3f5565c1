"""Forward inference for the frozen keyword-spotting feature extractor.

The layer stack mixes full-precision convolutions (first and last), sign-
binarized convolutions computed with XNOR + popcount on packed 64-bit
words, inference-mode batch normalization, ReLU, and a global average pool
that yields the feature vector consumed by the trainable classifier head.

Tensors are plain float64 numpy arrays laid out (height, width, channels).
Binarized data lives in BitTensor: one bit per element, bit 1 for +1 and
bit 0 for -1, packed little-endian into uint64 words with zero padding
bits. sign(0) is +1 throughout.

Models are immutable after construction; every forward pass is pure, so a
single model can serve many threads.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "LayerKind",
    "BitTensor",
    "LayerSpec",
    "Layer",
    "BnnModel",
    "binarize",
    "popcount_u64",
    "conv2d_fp",
    "conv2d_bin",
    "batch_norm_apply",
    "relu",
    "global_avg_pool",
    "forward_features",
    "save_model",
    "load_model",
    "fold_bn_for_binary",
    "default_model",
    "ModelFormatError",
]


class ModelFormatError(ValueError):
    """Weights file is malformed or internally inconsistent."""


class LayerKind(enum.Enum):
    CONV_FP = 0
    CONV_BIN = 1
    BATCH_NORM = 2
    RELU = 3
    GLOBAL_AVG_POOL = 4


_WORD_BITS = 64
_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H01 = np.uint64(0x0101010101010101)


def popcount_u64(words: np.ndarray) -> np.ndarray:
    """Per-word population count (SWAR; wraps intentionally on uint64)."""
    a = words.astype(np.uint64, copy=True)
    a -= (a >> np.uint64(1)) & _M1
    a = (a & _M2) + ((a >> np.uint64(2)) & _M2)
    a = (a + (a >> np.uint64(4))) & _M4
    return ((a * _H01) >> np.uint64(56)).astype(np.int64)


def _pack_bit_rows(bits: np.ndarray) -> np.ndarray:
    """Pack a (rows, n) 0/1 array into (rows, ceil(n/64)) uint64 words.

    Bit k of a row lands in word k // 64 at position k % 64; padding bits
    are zero.
    """
    rows, n = bits.shape
    packed = np.packbits(bits.astype(np.uint8), axis=1, bitorder="little")
    n_words = (n + _WORD_BITS - 1) // _WORD_BITS
    padded = np.zeros((rows, n_words * 8), dtype=np.uint8)
    padded[:, : packed.shape[1]] = packed
    return padded.view("<u8").reshape(rows, n_words)


def _unpack_bit_rows(words: np.ndarray, n: int) -> np.ndarray:
    """Inverse of _pack_bit_rows; returns a (rows, n) 0/1 uint8 array."""
    rows = words.shape[0]
    as_bytes = words.astype("<u8").reshape(rows, -1).view(np.uint8)
    return np.unpackbits(as_bytes, axis=1, bitorder="little")[:, :n]


@dataclass(frozen=True)
class BitTensor:
    """Sign bits of a tensor, packed 64 elements per word.

    shape is the logical shape; words holds the C-order flattened bits.
    """

    shape: tuple[int, ...]
    words: np.ndarray

    def __post_init__(self) -> None:
        size = int(np.prod(self.shape))
        n_words = (size + _WORD_BITS - 1) // _WORD_BITS
        w = np.ascontiguousarray(self.words, dtype=np.uint64)
        object.__setattr__(self, "words", w)
        if w.shape != (n_words,):
            raise ValueError(f"expected {n_words} words for shape {self.shape}")
        pad = n_words * _WORD_BITS - size
        if pad and n_words and (w[-1] >> np.uint64(_WORD_BITS - pad)) != 0:
            raise ValueError("padding bits must be zero")

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @classmethod
    def pack(cls, values: np.ndarray) -> "BitTensor":
        """Pack elementwise signs: bit 1 where value >= 0, bit 0 otherwise."""
        values = np.asarray(values)
        bits = (values >= 0).reshape(1, -1)
        return cls(tuple(values.shape), _pack_bit_rows(bits)[0])

    def unpack(self) -> np.ndarray:
        """Recover the +1/-1 tensor (int8)."""
        bits = _unpack_bit_rows(self.words.reshape(1, -1), self.size)[0]
        return (bits.astype(np.int8) * 2 - 1).reshape(self.shape)


def binarize(x: np.ndarray) -> BitTensor:
    """Sign-binarize a tensor; sign(0) = +1."""
    return BitTensor.pack(np.asarray(x))


@dataclass(frozen=True)
class LayerSpec:
    """Structural description of one layer (no weights)."""

    kind: LayerKind
    kernel_h: int = 0
    kernel_w: int = 0
    c_in: int = 0
    c_out: int = 0
    stride: int = 1
    pad: int = 0

    def output_shape(self, input_shape: tuple[int, int, int]) -> tuple[int, int, int]:
        h, w, c = input_shape
        if self.kind in (LayerKind.CONV_FP, LayerKind.CONV_BIN):
            if c != self.c_in:
                raise ValueError(
                    f"{self.kind.name}: input has {c} channels, expected {self.c_in}"
                )
            oh = (h + 2 * self.pad - self.kernel_h) // self.stride + 1
            ow = (w + 2 * self.pad - self.kernel_w) // self.stride + 1
            if oh < 1 or ow < 1:
                raise ValueError(
                    f"{self.kind.name}: kernel {self.kernel_h}x{self.kernel_w} "
                    f"does not fit input {h}x{w}"
                )
            return oh, ow, self.c_out
        if c != self.c_in:
            raise ValueError(
                f"{self.kind.name}: input has {c} channels, expected {self.c_in}"
            )
        if self.kind is LayerKind.GLOBAL_AVG_POOL:
            return 1, 1, c
        return h, w, c


@dataclass(frozen=True)
class Layer:
    """A LayerSpec plus its parameters (whichever apply to the kind)."""

    spec: LayerSpec
    weights: np.ndarray | None = None      # conv_fp: (kh, kw, c_in, c_out)
    bin_weights: BitTensor | None = None   # conv_bin: packed (kh, kw, c_in, c_out)
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    mean: np.ndarray | None = None
    var: np.ndarray | None = None
    eps: float = 1e-5


def conv_fp_layer(weights: np.ndarray, stride: int = 1, pad: int = 0) -> Layer:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 4:
        raise ValueError("conv weights must be (kh, kw, c_in, c_out)")
    kh, kw, c_in, c_out = w.shape
    spec = LayerSpec(LayerKind.CONV_FP, kh, kw, c_in, c_out, stride, pad)
    return Layer(spec, weights=w)


def conv_bin_layer(weights: np.ndarray | BitTensor, stride: int = 1) -> Layer:
    """Binarized conv; only valid (pad=0) convolution is supported because
    the +1/-1 domain has no zero padding value."""
    if isinstance(weights, BitTensor):
        bits = weights
    else:
        bits = binarize(np.asarray(weights))
    if len(bits.shape) != 4:
        raise ValueError("conv weights must be (kh, kw, c_in, c_out)")
    kh, kw, c_in, c_out = bits.shape
    spec = LayerSpec(LayerKind.CONV_BIN, kh, kw, c_in, c_out, stride, 0)
    return Layer(spec, bin_weights=bits)


def batch_norm_layer(
    gamma: np.ndarray,
    beta: np.ndarray,
    mean: np.ndarray,
    var: np.ndarray,
    eps: float = 1e-5,
) -> Layer:
    gamma, beta, mean, var = (
        np.asarray(a, dtype=np.float64) for a in (gamma, beta, mean, var)
    )
    c = gamma.shape[0]
    if not (beta.shape == mean.shape == var.shape == (c,)):
        raise ValueError("batch norm parameter lengths disagree")
    if (var < 0).any():
        raise ValueError("negative variance in batch norm parameters")
    spec = LayerSpec(LayerKind.BATCH_NORM, c_in=c, c_out=c)
    return Layer(spec, gamma=gamma, beta=beta, mean=mean, var=var, eps=float(eps))


def relu_layer(channels: int) -> Layer:
    return Layer(LayerSpec(LayerKind.RELU, c_in=channels, c_out=channels))


def global_avg_pool_layer(channels: int) -> Layer:
    return Layer(LayerSpec(LayerKind.GLOBAL_AVG_POOL, c_in=channels, c_out=channels))


@dataclass(frozen=True)
class BnnModel:
    """Ordered layer stack ending in a global average pool of feature_dim
    channels. Immutable; forward passes never touch it."""

    layers: tuple[Layer, ...]
    feature_dim: int

    def validate(self) -> None:
        """Check channel composition and the final-pool contract."""
        if not self.layers:
            raise ModelFormatError("model has no layers")
        prev_c = None
        for i, layer in enumerate(self.layers):
            spec = layer.spec
            if prev_c is not None and spec.c_in != prev_c:
                raise ModelFormatError(
                    f"layer {i} ({spec.kind.name}) expects {spec.c_in} channels, "
                    f"previous layer produces {prev_c}"
                )
            prev_c = spec.c_out
        last = self.layers[-1].spec
        if last.kind is not LayerKind.GLOBAL_AVG_POOL:
            raise ModelFormatError("final layer must be a global average pool")
        if last.c_out != self.feature_dim:
            raise ModelFormatError(
                f"pool produces {last.c_out} features, header says {self.feature_dim}"
            )


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    """Extract conv patches as rows of length kh*kw*c (kernel-position major)."""
    if pad:
        x = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    h, w, c = x.shape
    view = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(0, 1))
    view = view[::stride, ::stride]  # (oh, ow, c, kh, kw)
    oh, ow = view.shape[:2]
    patches = view.transpose(0, 1, 3, 4, 2).reshape(oh * ow, kh * kw * c)
    return patches, oh, ow


def conv2d_fp(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Full-precision cross-correlation. x: (h, w, c_in), w: (kh, kw, c_in, c_out)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    kh, kw, c_in, c_out = w.shape
    if x.ndim != 3 or x.shape[2] != c_in:
        raise ValueError(f"input shape {x.shape} does not match kernel {w.shape}")
    patches, oh, ow = _im2col(x, kh, kw, stride, pad)
    out = patches @ w.reshape(kh * kw * c_in, c_out)
    return out.reshape(oh, ow, c_out)


def conv2d_bin(x: BitTensor, w: BitTensor, stride: int = 1) -> np.ndarray:
    """Binarized cross-correlation via XNOR + popcount on packed words.

    Each output cell is the +1/-1 dot product over the receptive field,
    recovered as 2*popcount(xnor) - field_size; integer-exact against
    conv2d_fp on the unpacked tensors.
    """
    if len(x.shape) != 3 or len(w.shape) != 4:
        raise ValueError("conv2d_bin expects a 3-d input and 4-d kernel")
    kh, kw, c_in, c_out = w.shape
    if x.shape[2] != c_in:
        raise ValueError(f"input shape {x.shape} does not match kernel {w.shape}")

    field = kh * kw * c_in
    patch_signs, oh, ow = _im2col(x.unpack().astype(np.int8), kh, kw, stride, 0)
    patch_words = _pack_bit_rows(patch_signs >= 0)

    w_signs = w.unpack().transpose(3, 0, 1, 2).reshape(c_out, field)
    w_words = _pack_bit_rows(w_signs >= 0)

    n_words = patch_words.shape[1]
    mask = np.full(n_words, np.uint64(0xFFFFFFFFFFFFFFFF))
    tail = field % _WORD_BITS
    if tail:
        mask[-1] = np.uint64((1 << tail) - 1)

    xnor = ~(patch_words[:, None, :] ^ w_words[None, :, :]) & mask
    matches = popcount_u64(xnor).sum(axis=2)
    out = 2 * matches - field
    return out.reshape(oh, ow, c_out)


def batch_norm_apply(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    mean: np.ndarray,
    var: np.ndarray,
    eps: float = 1e-5,
) -> np.ndarray:
    """Inference-mode batch norm with running statistics, per channel."""
    x = np.asarray(x, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if (var < 0).any():
        raise ValueError("negative variance")
    if x.shape[-1] != np.shape(gamma)[0]:
        raise ValueError(
            f"{x.shape[-1]} channels vs {np.shape(gamma)[0]} batch norm parameters"
        )
    return (x - mean) / np.sqrt(var + eps) * gamma + beta


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Per-channel mean over all spatial positions; returns a 1-d vector."""
    x = np.asarray(x, dtype=np.float64)
    return x.mean(axis=(0, 1))


def forward_features(model: BnnModel, spectrogram) -> np.ndarray:
    """Run the frozen stack on one input and return the feature vector.

    Accepts a LogMelSpectrogram (uses .values) or a (h, w) / (h, w, c)
    array. Pure: the model is never modified.
    """
    x = getattr(spectrogram, "values", spectrogram)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3:
        raise ValueError(f"expected a 2-d or 3-d input, got shape {x.shape}")

    for layer in model.layers:
        kind = layer.spec.kind
        if kind is LayerKind.CONV_FP:
            x = conv2d_fp(x, layer.weights, layer.spec.stride, layer.spec.pad)
        elif kind is LayerKind.CONV_BIN:
            x = conv2d_bin(binarize(x), layer.bin_weights, layer.spec.stride)
            x = x.astype(np.float64)
        elif kind is LayerKind.BATCH_NORM:
            x = batch_norm_apply(
                x, layer.gamma, layer.beta, layer.mean, layer.var, layer.eps
            )
        elif kind is LayerKind.RELU:
            x = relu(x)
        elif kind is LayerKind.GLOBAL_AVG_POOL:
            if x.shape[2] != layer.spec.c_in:
                raise ValueError(
                    f"pool expects {layer.spec.c_in} channels, got {x.shape[2]}"
                )
            return global_avg_pool(x)
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    raise ValueError("model did not end in a global average pool")


def fold_bn_for_binary(model: BnnModel) -> BnnModel:
    """Replace each batch norm that feeds a binarized conv with the
    equivalent sign-preserving threshold affine +-(x - theta).

    sign(gamma*(x-mu)/s + beta) = sign(gamma) * sign(x - theta) with
    theta = mu - beta*s/gamma, so only the threshold and the sign of gamma
    matter to the next layer's binarization. Exact in real arithmetic.
    """
    layers = list(model.layers)
    out: list[Layer] = []
    for i, layer in enumerate(layers):
        nxt = layers[i + 1].spec.kind if i + 1 < len(layers) else None
        if layer.spec.kind is LayerKind.BATCH_NORM and nxt is LayerKind.CONV_BIN:
            s = np.sqrt(layer.var + layer.eps)
            if (layer.gamma == 0).any():
                raise ValueError("cannot fold batch norm with zero gamma")
            theta = layer.mean - layer.beta * s / layer.gamma
            direction = np.sign(layer.gamma)
            c = layer.spec.c_in
            out.append(
                batch_norm_layer(direction, np.zeros(c), theta, np.ones(c), eps=0.0)
            )
        else:
            out.append(layer)
    return BnnModel(tuple(out), model.feature_dim)


def default_model(seed: int = 0, feature_dim: int = 12) -> BnnModel:
    """Small documented reference stack for demos and tests.

    conv_fp 3x3/2 -> bn -> conv_bin 3x3/2 -> bn -> conv_bin 3x3 -> bn
    -> conv_fp 1x1 -> bn -> relu -> pool. Binarized convs consume the
    zero-centered batch-norm outputs directly: a sign taken after ReLU
    saturates to +1 (sign(0) = +1), so no ReLU precedes them.
    """
    rng = np.random.Generator(np.random.PCG64(seed))

    def conv_w(kh, kw, c_in, c_out):
        return rng.normal(0.0, 1.0 / np.sqrt(kh * kw * c_in), (kh, kw, c_in, c_out))

    def bn(c):
        return batch_norm_layer(
            rng.uniform(0.5, 1.5, c),
            rng.normal(0.0, 0.1, c),
            rng.normal(0.0, 0.5, c),
            rng.uniform(0.5, 1.5, c),
            eps=1e-5,
        )

    layers = (
        conv_fp_layer(conv_w(3, 3, 1, 8), stride=2),
        bn(8),
        conv_bin_layer(conv_w(3, 3, 8, 16), stride=2),
        bn(16),
        conv_bin_layer(conv_w(3, 3, 16, 16), stride=1),
        bn(16),
        conv_fp_layer(conv_w(1, 1, 16, feature_dim), stride=1),
        bn(feature_dim),
        relu_layer(feature_dim),
        global_avg_pool_layer(feature_dim),
    )
    model = BnnModel(layers, feature_dim)
    model.validate()
    return model


# --- weights file io --------------------------------------------------------
#
# Little-endian layout:
#   magic "BNNKWS01" | version u32 (=1) | layer_count u32 | feature_dim u32
# then per layer:
#   kind u8 | precision u8 | h u16 | w u16 | c_in u32 | c_out u32
#   | stride u8 | pad u8 | payload
# Payloads: conv_fp float32 weights (kh*kw*c_in*c_out, C order); conv_bin
# packed sign bits of the C-order weight array, padded to 64-bit words with
# zero pad bits; batch_norm float32 gamma, beta, mean, var (c each) then
# eps; relu / global_avg_pool none.

_MODEL_MAGIC = b"BNNKWS01"
_MODEL_VERSION = 1
_HDR = struct.Struct("<III")
_LAYER_HDR = struct.Struct("<BBHHIIBB")


def save_model(model: BnnModel, path: str | Path) -> None:
    model.validate()
    blob = bytearray()
    blob += _MODEL_MAGIC
    blob += _HDR.pack(_MODEL_VERSION, len(model.layers), model.feature_dim)
    for layer in model.layers:
        spec = layer.spec
        precision = 1 if spec.kind is LayerKind.CONV_BIN else 0
        blob += _LAYER_HDR.pack(
            spec.kind.value,
            precision,
            spec.kernel_h,
            spec.kernel_w,
            spec.c_in,
            spec.c_out,
            spec.stride,
            spec.pad,
        )
        if spec.kind is LayerKind.CONV_FP:
            blob += layer.weights.astype("<f4").tobytes()
        elif spec.kind is LayerKind.CONV_BIN:
            blob += layer.bin_weights.words.astype("<u8").tobytes()
        elif spec.kind is LayerKind.BATCH_NORM:
            for arr in (layer.gamma, layer.beta, layer.mean, layer.var):
                blob += arr.astype("<f4").tobytes()
            blob += struct.pack("<f", layer.eps)
    Path(path).write_bytes(bytes(blob))


def load_model(path: str | Path) -> BnnModel:
    raw = Path(path).read_bytes()
    off = len(_MODEL_MAGIC)
    if raw[:off] != _MODEL_MAGIC:
        raise ModelFormatError("bad magic: not a weights file")
    if len(raw) < off + _HDR.size:
        raise ModelFormatError("truncated header")
    version, layer_count, feature_dim = _HDR.unpack_from(raw, off)
    off += _HDR.size
    if version != _MODEL_VERSION:
        raise ModelFormatError(f"unsupported version {version}")

    def take(count: int, dtype: str) -> np.ndarray:
        nonlocal off
        nbytes = count * np.dtype(dtype).itemsize
        if off + nbytes > len(raw):
            raise ModelFormatError("truncated payload")
        out = np.frombuffer(raw, dtype=dtype, count=count, offset=off).copy()
        off += nbytes
        return out

    layers: list[Layer] = []
    for i in range(layer_count):
        if off + _LAYER_HDR.size > len(raw):
            raise ModelFormatError("truncated layer header")
        kind_code, precision, kh, kw, c_in, c_out, stride, pad = _LAYER_HDR.unpack_from(
            raw, off
        )
        off += _LAYER_HDR.size
        try:
            kind = LayerKind(kind_code)
        except ValueError:
            raise ModelFormatError(f"layer {i}: unknown kind {kind_code}") from None

        if kind is LayerKind.CONV_FP:
            if precision != 0:
                raise ModelFormatError(f"layer {i}: conv_fp flagged binary")
            w = take(kh * kw * c_in * c_out, "<f4").astype(np.float64)
            if not np.isfinite(w).all():
                raise ModelFormatError(f"layer {i}: non-finite weights")
            layers.append(conv_fp_layer(w.reshape(kh, kw, c_in, c_out), stride, pad))
        elif kind is LayerKind.CONV_BIN:
            if precision != 1:
                raise ModelFormatError(f"layer {i}: conv_bin flagged full precision")
            if pad != 0:
                raise ModelFormatError(f"layer {i}: binarized conv cannot be padded")
            size = kh * kw * c_in * c_out
            n_words = (size + _WORD_BITS - 1) // _WORD_BITS
            words = take(n_words, "<u8")
            try:
                bits = BitTensor((kh, kw, c_in, c_out), words)
            except ValueError as e:
                raise ModelFormatError(f"layer {i}: {e}") from None
            layers.append(conv_bin_layer(bits, stride))
        elif kind is LayerKind.BATCH_NORM:
            c = c_in
            if c_out != c:
                raise ModelFormatError(f"layer {i}: batch norm channel mismatch")
            params = take(4 * c + 1, "<f4").astype(np.float64)
            gamma, beta, mean, var = (params[j * c : (j + 1) * c] for j in range(4))
            if (var < 0).any():
                raise ModelFormatError(f"layer {i}: negative variance")
            layers.append(batch_norm_layer(gamma, beta, mean, var, eps=params[-1]))
        elif kind is LayerKind.RELU:
            layers.append(relu_layer(c_in))
        else:
            layers.append(global_avg_pool_layer(c_in))

    if off != len(raw):
        raise ModelFormatError("trailing bytes after last layer")
    model = BnnModel(tuple(layers), feature_dim)
    model.validate()
    return model
