"""Streaming continual-learning update rules for the classifier head.

Only the last fully-connected layer (weights M x N, bias N) is trainable;
the feature extractor that produces the length-M input vectors stays frozen.
Seven update rules share one state container and one step function:

  tinyol             per-sample SGD on softmax cross entropy
  tinyol-batches     gradients accumulated, mean applied per batch
  tinyol-v2          as tinyol, but initial-class columns never move
  tinyol-v2-batches  masked and batched
  lwf                extra distillation loss against a frozen copy head
  lwf-batches        as lwf, copy head refreshed at each batch boundary
  cwr                per-sample SGD on a training head, blended into a
                     consolidated head at batch boundaries, then reinit

States are immutable from the caller's perspective: ``cl_step`` returns a
successor and never modifies its argument, so trajectories are replayable
and snapshots can be kept for later evaluation.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError

__all__ = [
    "Algorithm",
    "ClHead",
    "HeadGradient",
    "ClConfig",
    "ClAlgorithmState",
    "head_forward",
    "softmax",
    "ce_gradient",
    "lwf_gradient",
    "expand_head",
    "make_state",
    "cl_step",
    "flush_batch",
    "predict",
    "save_state",
    "load_state",
]


class Algorithm(enum.Enum):
    """The seven last-layer update rules."""

    TINYOL = "tinyol"
    TINYOL_BATCHES = "tinyol-batches"
    TINYOL_V2 = "tinyol-v2"
    TINYOL_V2_BATCHES = "tinyol-v2-batches"
    LWF = "lwf"
    LWF_BATCHES = "lwf-batches"
    CWR = "cwr"

    @property
    def uses_batches(self) -> bool:
        return self in (
            Algorithm.TINYOL_BATCHES,
            Algorithm.TINYOL_V2_BATCHES,
            Algorithm.LWF_BATCHES,
            Algorithm.CWR,
        )

    @property
    def masks_initial_classes(self) -> bool:
        return self in (Algorithm.TINYOL_V2, Algorithm.TINYOL_V2_BATCHES)

    @property
    def uses_copy_head(self) -> bool:
        return self in (Algorithm.LWF, Algorithm.LWF_BATCHES)

    @classmethod
    def from_tag(cls, tag: str) -> "Algorithm":
        for alg in cls:
            if alg.value == tag:
                return alg
        raise ValueError(
            f"unknown algorithm {tag!r}; expected one of "
            + ", ".join(a.value for a in cls)
        )


@dataclass(frozen=True)
class ClHead:
    """Last fully-connected layer: feature i -> class j.

    weights has shape (M, N); bias and class_labels have length N.
    """

    weights: np.ndarray
    bias: np.ndarray
    class_labels: tuple[str, ...]

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)
        if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
            raise ValueError(f"inconsistent head shapes: W{w.shape}, b{b.shape}")
        if len(self.class_labels) != b.shape[0]:
            raise ValueError(
                f"{len(self.class_labels)} labels for {b.shape[0]} classes"
            )
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise NumericError("non-finite head parameters")

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "ClHead":
        return ClHead(self.weights.copy(), self.bias.copy(), self.class_labels)

    @classmethod
    def zeros(cls, feature_dim: int, class_labels: tuple[str, ...]) -> "ClHead":
        return cls(
            np.zeros((feature_dim, len(class_labels))),
            np.zeros(len(class_labels)),
            tuple(class_labels),
        )


@dataclass(frozen=True)
class HeadGradient:
    """Gradient of a loss with respect to a head's weights and bias."""

    d_weights: np.ndarray
    d_bias: np.ndarray


@dataclass(frozen=True)
class ClConfig:
    """Hyperparameters shared by all update rules.

    initial_class_count is the number of classes the extractor head was
    pre-trained on; the v2 rules freeze exactly those columns. None means
    "all classes present when the state is created".
    """

    learning_rate: float = 0.05
    batch_size: int = 32
    lwf_lambda: float = 1.0
    lwf_temperature: float = 1.0
    cwr_reinit: str = "zeros"  # "zeros" | "keep"
    initial_class_count: int | None = None

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lwf_lambda < 0:
            raise ValueError("lwf_lambda must be >= 0")
        if self.lwf_temperature <= 0:
            raise ValueError("lwf_temperature must be > 0")
        if self.cwr_reinit not in ("zeros", "keep"):
            raise ValueError("cwr_reinit must be 'zeros' or 'keep'")


@dataclass(frozen=True)
class ClAlgorithmState:
    """Learning state carried between stream samples.

    per_class_seen counts samples per class, except for cwr where it counts
    consolidations touching each class (the weight k_j of the running
    blend); the checkpoint format has a single counter vector, and k_j is
    the counter cwr needs to resume.
    """

    algorithm: Algorithm
    head: ClHead
    m_old: int
    copy_head: ClHead | None = None
    consolidated_head: ClHead | None = None
    batch_grad_w: np.ndarray | None = None
    batch_grad_b: np.ndarray | None = None
    batch_count: int = 0
    batch_classes: np.ndarray | None = None  # bool per class, cwr only
    batches_completed: int = 0
    per_class_seen: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def __post_init__(self) -> None:
        if self.algorithm.uses_copy_head != (self.copy_head is not None):
            raise ValueError("copy_head present iff algorithm is an LwF variant")
        if (self.algorithm is Algorithm.CWR) != (self.consolidated_head is not None):
            raise ValueError("consolidated_head present iff algorithm is cwr")
        if not 0 <= self.m_old <= self.head.num_classes:
            raise ValueError(f"m_old={self.m_old} out of range")


def make_state(
    algorithm: Algorithm, head: ClHead, config: ClConfig
) -> ClAlgorithmState:
    """Initial state for a stream: auxiliary heads start as copies of head."""
    n = head.num_classes
    m_old = config.initial_class_count
    if m_old is None:
        m_old = n
    return ClAlgorithmState(
        algorithm=algorithm,
        head=head.copy(),
        m_old=m_old,
        copy_head=head.copy() if algorithm.uses_copy_head else None,
        consolidated_head=head.copy() if algorithm is Algorithm.CWR else None,
        batch_classes=np.zeros(n, bool) if algorithm is Algorithm.CWR else None,
        per_class_seen=np.zeros(n, np.int64),
    )


def head_forward(head: ClHead, features: np.ndarray) -> np.ndarray:
    """Logits z_j = sum_i W[i,j] f[i] + b[j]."""
    f = np.asarray(features, dtype=np.float64)
    if f.shape != (head.feature_dim,):
        raise ValueError(
            f"feature length {f.shape} does not match head dim {head.feature_dim}"
        )
    return f @ head.weights + head.bias


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-shifted softmax; safe for arbitrarily large finite logits."""
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def ce_gradient(features: np.ndarray, probs: np.ndarray, label: int) -> HeadGradient:
    """Gradient of -log p[label] w.r.t. head weights and bias.

    db = p - onehot(label); dW = outer(features, db).
    """
    p = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < p.shape[0]:
        raise ValueError(f"label {label} out of range for {p.shape[0]} classes")
    db = p.copy()
    db[label] -= 1.0
    f = np.asarray(features, dtype=np.float64)
    return HeadGradient(np.outer(f, db), db)


def lwf_gradient(
    features: np.ndarray,
    train_logits: np.ndarray,
    copy_logits: np.ndarray,
    label: int,
    lwf_lambda: float,
    temperature: float = 1.0,
) -> HeadGradient:
    """Gradient of the combined LwF loss w.r.t. the training head.

    Loss = CE(softmax(z_train), onehot(label))
         + lambda * CE(softmax(z_train / T), softmax(z_copy / T)).
    At T=1 the bias gradient is (1+lambda)*p_train - onehot - lambda*p_copy.
    """
    if not 0 <= label < train_logits.shape[0]:
        raise ValueError(f"label {label} out of range")
    db = softmax(train_logits)
    db[label] -= 1.0
    if lwf_lambda != 0.0:
        p_t = softmax(train_logits / temperature)
        q = softmax(copy_logits / temperature)
        db += (lwf_lambda / temperature) * (p_t - q)
    f = np.asarray(features, dtype=np.float64)
    return HeadGradient(np.outer(f, db), db)


def expand_head(head: ClHead, new_classes: list[str] | tuple[str, ...]) -> ClHead:
    """Append zero-initialized columns for new classes; existing parameters
    are preserved exactly and keep their positions."""
    new_classes = tuple(new_classes)
    if len(set(new_classes)) != len(new_classes):
        raise ValueError("duplicate labels in new_classes")
    clash = set(new_classes) & set(head.class_labels)
    if clash:
        raise ValueError(f"labels already present: {sorted(clash)}")
    if not new_classes:
        return head
    m = head.feature_dim
    k = len(new_classes)
    return ClHead(
        np.hstack([head.weights, np.zeros((m, k))]),
        np.concatenate([head.bias, np.zeros(k)]),
        head.class_labels + new_classes,
    )


def _check_sample(state: ClAlgorithmState, features: np.ndarray, label: int) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    if f.shape != (state.head.feature_dim,):
        raise ValueError(
            f"feature length {f.shape} does not match head dim "
            f"{state.head.feature_dim}"
        )
    if not np.isfinite(f).all():
        raise NumericError("non-finite feature vector")
    if not 0 <= label < state.head.num_classes:
        raise ValueError(
            f"label {label} out of range for {state.head.num_classes} classes"
        )
    return f


def _apply(head: ClHead, grad: HeadGradient, lr: float, mask_below: int = 0) -> ClHead:
    """head - lr * grad, with columns below mask_below left untouched."""
    dw, db = grad.d_weights, grad.d_bias
    if mask_below > 0:
        dw = dw.copy()
        db = db.copy()
        dw[:, :mask_below] = 0.0
        db[:mask_below] = 0.0
    return ClHead(head.weights - lr * dw, head.bias - lr * db, head.class_labels)


def _bump_seen(seen: np.ndarray, label: int) -> np.ndarray:
    out = seen.copy()
    out[label] += 1
    return out


def _consolidate_and_reinit(
    state: ClAlgorithmState, config: ClConfig
) -> tuple[ClHead, ClHead, np.ndarray]:
    """CWR boundary: blend observed classes into the consolidated head with
    per-class weights k_j, bump k_j, and reinit the training head."""
    cons = state.consolidated_head
    train = state.head
    observed = np.flatnonzero(state.batch_classes)
    w = cons.weights.copy()
    b = cons.bias.copy()
    seen = state.per_class_seen.copy()
    for j in observed:
        k = float(seen[j])
        w[:, j] = (w[:, j] * k + train.weights[:, j]) / (k + 1.0)
        b[j] = (b[j] * k + train.bias[j]) / (k + 1.0)
        seen[j] += 1
    new_cons = ClHead(w, b, cons.class_labels)
    if config.cwr_reinit == "zeros":
        new_train = ClHead.zeros(train.feature_dim, train.class_labels)
    else:
        new_train = train
    return new_cons, new_train, seen


def cl_step(
    state: ClAlgorithmState,
    features: np.ndarray,
    label: int,
    config: ClConfig,
) -> ClAlgorithmState:
    """Consume one labeled sample and return the successor state."""
    f = _check_sample(state, features, label)
    alg = state.algorithm
    lr = config.learning_rate
    mask = state.m_old if alg.masks_initial_classes else 0

    if alg in (Algorithm.TINYOL, Algorithm.TINYOL_V2):
        probs = softmax(head_forward(state.head, f))
        grad = ce_gradient(f, probs, label)
        return replace(
            state,
            head=_apply(state.head, grad, lr, mask),
            per_class_seen=_bump_seen(state.per_class_seen, label),
        )

    if alg in (Algorithm.TINYOL_BATCHES, Algorithm.TINYOL_V2_BATCHES):
        probs = softmax(head_forward(state.head, f))
        grad = ce_gradient(f, probs, label)
        if state.batch_grad_w is None:
            acc_w, acc_b = grad.d_weights, grad.d_bias
        else:
            acc_w = state.batch_grad_w + grad.d_weights
            acc_b = state.batch_grad_b + grad.d_bias
        count = state.batch_count + 1
        seen = _bump_seen(state.per_class_seen, label)
        if count < config.batch_size:
            return replace(
                state,
                batch_grad_w=acc_w,
                batch_grad_b=acc_b,
                batch_count=count,
                per_class_seen=seen,
            )
        mean = HeadGradient(acc_w / count, acc_b / count)
        return replace(
            state,
            head=_apply(state.head, mean, lr, mask),
            batch_grad_w=None,
            batch_grad_b=None,
            batch_count=0,
            batches_completed=state.batches_completed + 1,
            per_class_seen=seen,
        )

    if alg in (Algorithm.LWF, Algorithm.LWF_BATCHES):
        z_train = head_forward(state.head, f)
        z_copy = head_forward(state.copy_head, f)
        grad = lwf_gradient(
            f, z_train, z_copy, label, config.lwf_lambda, config.lwf_temperature
        )
        head = _apply(state.head, grad, lr)
        seen = _bump_seen(state.per_class_seen, label)
        if alg is Algorithm.LWF:
            return replace(state, head=head, per_class_seen=seen)
        count = state.batch_count + 1
        if count < config.batch_size:
            return replace(state, head=head, batch_count=count, per_class_seen=seen)
        return replace(
            state,
            head=head,
            copy_head=head.copy(),
            batch_count=0,
            batches_completed=state.batches_completed + 1,
            per_class_seen=seen,
        )

    if alg is Algorithm.CWR:
        probs = softmax(head_forward(state.head, f))
        grad = ce_gradient(f, probs, label)
        head = _apply(state.head, grad, lr)
        classes = state.batch_classes.copy()
        classes[label] = True
        count = state.batch_count + 1
        if count < config.batch_size:
            return replace(
                state, head=head, batch_classes=classes, batch_count=count
            )
        boundary = replace(state, head=head, batch_classes=classes)
        cons, train, seen = _consolidate_and_reinit(boundary, config)
        return replace(
            state,
            head=train,
            consolidated_head=cons,
            batch_classes=np.zeros_like(classes),
            batch_count=0,
            batches_completed=state.batches_completed + 1,
            per_class_seen=seen,
        )

    raise ValueError(f"unknown algorithm: {alg!r}")


def flush_batch(state: ClAlgorithmState, config: ClConfig) -> ClAlgorithmState:
    """Close out a trailing partial batch at stream end.

    Accumulating rules apply the mean over the actual sample count, lwf
    refreshes its copy head, cwr consolidates. A no-op when no samples
    arrived since the last boundary or for the per-sample rules.
    """
    if state.batch_count == 0:
        return state
    alg = state.algorithm

    if alg in (Algorithm.TINYOL_BATCHES, Algorithm.TINYOL_V2_BATCHES):
        mask = state.m_old if alg.masks_initial_classes else 0
        mean = HeadGradient(
            state.batch_grad_w / state.batch_count,
            state.batch_grad_b / state.batch_count,
        )
        return replace(
            state,
            head=_apply(state.head, mean, config.learning_rate, mask),
            batch_grad_w=None,
            batch_grad_b=None,
            batch_count=0,
            batches_completed=state.batches_completed + 1,
        )

    if alg is Algorithm.LWF_BATCHES:
        return replace(
            state,
            copy_head=state.head.copy(),
            batch_count=0,
            batches_completed=state.batches_completed + 1,
        )

    if alg is Algorithm.CWR:
        cons, train, seen = _consolidate_and_reinit(state, config)
        return replace(
            state,
            head=train,
            consolidated_head=cons,
            batch_classes=np.zeros_like(state.batch_classes),
            batch_count=0,
            batches_completed=state.batches_completed + 1,
            per_class_seen=seen,
        )

    return state  # per-sample rules carry no in-flight batch state


def predict(
    state: ClAlgorithmState, features: np.ndarray, during_stream: bool = False
) -> int:
    """Argmax class index; ties break toward the lowest index.

    During the stream every rule predicts with its training head. For
    evaluation after the stream, cwr predicts with the consolidated head.
    """
    head = state.head
    if not during_stream and state.algorithm is Algorithm.CWR:
        head = state.consolidated_head
    return int(np.argmax(head_forward(head, features)))


# --- checkpoint io ---------------------------------------------------------
#
# Little-endian layout:
#   magic "CLHD0001" | algorithm u8 | M u32 | N u32 | M_old u32
#   | batches_completed u64 | per_class_seen u64 x N
#   | head W (M*N f64 row-major), head b (N f64)
#   | same for copy head (lwf variants) and consolidated head (cwr)
#
# Partial-batch accumulators and class labels are not part of the format;
# states are checkpointed at batch boundaries.

_MAGIC = b"CLHD0001"
_ALG_CODES = {alg: i for i, alg in enumerate(Algorithm)}
_ALG_FROM_CODE = {i: alg for alg, i in _ALG_CODES.items()}


def _head_bytes(head: ClHead) -> bytes:
    return (
        head.weights.astype("<f8").tobytes()
        + head.bias.astype("<f8").tobytes()
    )


def save_state(state: ClAlgorithmState, path: str | Path) -> None:
    """Write a boundary-state checkpoint (requires no partial batch in flight)."""
    if state.batch_count != 0:
        raise ValueError(
            "cannot checkpoint mid-batch: flush_batch or finish the batch first"
        )
    m = state.head.feature_dim
    n = state.head.num_classes
    blob = bytearray()
    blob += _MAGIC
    blob += struct.pack(
        "<BIIIQ",
        _ALG_CODES[state.algorithm],
        m,
        n,
        state.m_old,
        state.batches_completed,
    )
    blob += state.per_class_seen.astype("<u8").tobytes()
    blob += _head_bytes(state.head)
    if state.copy_head is not None:
        blob += _head_bytes(state.copy_head)
    if state.consolidated_head is not None:
        blob += _head_bytes(state.consolidated_head)
    Path(path).write_bytes(bytes(blob))


def load_state(
    path: str | Path, class_labels: tuple[str, ...] | None = None
) -> ClAlgorithmState:
    """Read a checkpoint written by save_state.

    The format does not carry class names; pass class_labels to restore
    them, otherwise placeholder names class_0..class_{N-1} are used.
    """
    raw = Path(path).read_bytes()
    if len(raw) < len(_MAGIC) + struct.calcsize("<BIIIQ"):
        raise DataError("truncated checkpoint")
    if raw[: len(_MAGIC)] != _MAGIC:
        raise DataError("bad magic: not a head checkpoint")
    off = len(_MAGIC)
    code, m, n, m_old, batches = struct.unpack_from("<BIIIQ", raw, off)
    off += struct.calcsize("<BIIIQ")
    if code not in _ALG_FROM_CODE:
        raise DataError(f"unknown algorithm code {code}")
    alg = _ALG_FROM_CODE[code]

    if class_labels is None:
        class_labels = tuple(f"class_{i}" for i in range(n))
    elif len(class_labels) != n:
        raise ValueError(f"{len(class_labels)} labels for {n} classes")

    def take(count: int, dtype: str) -> np.ndarray:
        nonlocal off
        nbytes = count * np.dtype(dtype).itemsize
        if off + nbytes > len(raw):
            raise DataError("truncated checkpoint")
        out = np.frombuffer(raw, dtype=dtype, count=count, offset=off).copy()
        off += nbytes
        return out

    seen = take(n, "<u8").astype(np.int64)

    def take_head() -> ClHead:
        w = take(m * n, "<f8").reshape(m, n)
        b = take(n, "<f8")
        return ClHead(w, b, class_labels)

    head = take_head()
    copy_head = take_head() if alg.uses_copy_head else None
    cons_head = take_head() if alg is Algorithm.CWR else None
    if off != len(raw):
        raise DataError("trailing bytes in checkpoint")
    return ClAlgorithmState(
        algorithm=alg,
        head=head,
        m_old=m_old,
        copy_head=copy_head,
        consolidated_head=cons_head,
        batch_classes=np.zeros(n, bool) if alg is Algorithm.CWR else None,
        batches_completed=batches,
        per_class_seen=seen,
    )
