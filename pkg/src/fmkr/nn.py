"""NumPy multilayer perceptron with a class-balanced cross-entropy loss.

Parameters live in :class:`Layer` objects (``weight`` is ``out x in``).
Gradients are exact and analytic; there is no autodiff. The binary model
format is::

    b"FMKR" | u16 version | u16 len(tag) | tag (utf-8) | u32 n_layers
    per layer: u32 out | u32 in | u8 activation | u8 frozen
               | weight (out*in f64, row major) | bias (out f64)
    u32 crc32 of everything above

All integers and floats are little-endian.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
import struct
import zlib
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

MAGIC = b"FMKR"
FORMAT_VERSION = 1

RELU = "relu"
_ACT_CODES = {None: 0, RELU: 1}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}

# Default widths for fused (80 flow + 14 syslog), traffic-only and syslog-only input.
FUSED_SIZES = (94, 64, 32, 5)
TRAFFIC_SIZES = (80, 64, 32, 5)
SYSLOG_SIZES = (14, 20, 12, 5)


class IntegrityError(ValueError):
    """A model file is truncated, corrupt or of an unknown format."""


@dataclasses.dataclass(eq=False)
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str | None = RELU
    frozen: bool = False

    @property
    def fan_in(self) -> int:
        return self.weight.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[0]

    def copy(self) -> Layer:
        return Layer(self.weight.copy(), self.bias.copy(), self.activation, self.frozen)

    def digest(self) -> str:
        """SHA-256 over the layer parameters; used to audit frozen layers."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.weight, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.bias, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclasses.dataclass(eq=False)
class MlpModel:
    layers: list[Layer]
    arch_tag: str = ""

    def __post_init__(self):
        if not self.layers:
            raise ValueError("model needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.fan_out != b.fan_in:
                raise ValueError(f"layer dims do not chain: {a.fan_out} -> {b.fan_in}")
        for layer in self.layers:
            if layer.bias.shape != (layer.fan_out,):
                raise ValueError("bias shape does not match weight")
        if self.layers[-1].activation is not None:
            raise ValueError("final layer must emit logits (activation None)")
        if not self.arch_tag:
            self.arch_tag = "mlp-" + "-".join(str(s) for s in self.sizes)

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0].fan_in] + [l.fan_out for l in self.layers]

    @property
    def n_inputs(self) -> int:
        return self.layers[0].fan_in

    @property
    def n_classes(self) -> int:
        return self.layers[-1].fan_out

    @property
    def frozen(self) -> list[bool]:
        return [l.frozen for l in self.layers]

    def parameter_count(self, trainable_only: bool = False) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers
                   if not (trainable_only and l.frozen))

    def copy(self) -> MlpModel:
        return MlpModel([l.copy() for l in self.layers], self.arch_tag)

    def is_finite(self) -> bool:
        return all(np.isfinite(l.weight).all() and np.isfinite(l.bias).all() for l in self.layers)

    def __eq__(self, other):
        """Bit-exact equality of parameters, activations, freeze flags and tag."""
        if not isinstance(other, MlpModel):
            return NotImplemented
        if self.arch_tag != other.arch_tag or len(self.layers) != len(other.layers):
            return False
        for a, b in zip(self.layers, other.layers):
            if (a.activation != b.activation or a.frozen != b.frozen
                    or a.weight.shape != b.weight.shape
                    or a.weight.tobytes() != b.weight.tobytes()
                    or a.bias.tobytes() != b.bias.tobytes()):
                return False
        return True

    __hash__ = None


@dataclasses.dataclass(eq=False)
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def scaled(self, factor: float) -> Gradients:
        return Gradients([g * factor for g in self.weights], [g * factor for g in self.biases])

    def norm(self) -> float:
        return float(np.sqrt(sum((g ** 2).sum() for g in self.weights + self.biases)))


def mlp_init(layer_sizes: Sequence[int], seed=0, arch_tag: str = "") -> MlpModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, ReLU hidden layers."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ValueError(f"invalid layer sizes {layer_sizes!r}")
    rng = np.random.default_rng(seed)
    layers = [init_layer(rng, n_in, n_out, RELU) for n_in, n_out in zip(sizes[:-1], sizes[1:])]
    layers[-1].activation = None
    return MlpModel(layers, arch_tag)


def init_layer(rng: np.random.Generator, n_in: int, n_out: int, activation) -> Layer:
    bound = 1.0 / np.sqrt(n_in)
    return Layer(rng.uniform(-bound, bound, size=(n_out, n_in)), np.zeros(n_out), activation)


def _check_input(model: MlpModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.n_inputs:
        raise ValueError(f"expected input of shape (n, {model.n_inputs}), got {X.shape}")
    return X


def _forward_all(model: MlpModel, X: np.ndarray, output_rows=None):
    """Return the list of layer inputs and the final logits."""
    acts = [X]
    h = X
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        W, b = layer.weight, layer.bias
        if i == last and output_rows is not None:
            W, b = W[output_rows], b[output_rows]
        z = h @ W.T + b
        if layer.activation == RELU:
            z = np.maximum(z, 0.0)
        if i < last:
            acts.append(z)
        h = z
    return acts, h


def forward(model: MlpModel, X, output_rows: Sequence[int] | None = None) -> np.ndarray:
    """Logits of shape ``(n, n_classes)``.

    ``output_rows`` restricts the head to a subset of its rows (in that order),
    which is how a k-way task is scored against a wider head.
    """
    X = _check_input(model, X)
    return _forward_all(model, X, output_rows)[1]


def hidden_forward(model: MlpModel, X) -> np.ndarray:
    """Activations feeding the head."""
    X = _check_input(model, X)
    return _forward_all(model, X)[0][-1]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _weight_vector(weights, n_classes: int, labels: np.ndarray) -> np.ndarray:
    """Per-sample class weights; ``None`` means 1 for every class."""
    if weights is None:
        return np.ones(len(labels))
    if isinstance(weights, Mapping):
        lam = np.full(n_classes, np.nan)
        for key, val in weights.items():
            k = int(key)
            if 0 <= k < n_classes:
                lam[k] = float(val)
    else:
        lam = np.asarray(weights, dtype=np.float64)
        if lam.shape != (n_classes,):
            raise ValueError(f"weights must have length {n_classes}")
    per_sample = lam[labels]
    if np.isnan(per_sample).any():
        missing = sorted({int(c) for c in labels[np.isnan(per_sample)]})
        raise KeyError(f"no class weight for label(s) {missing}")
    return per_sample


def _check_labels(labels, n: int, n_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    y = y.astype(np.int64)
    if n and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return y


def class_balanced_loss(logits, labels, weights=None) -> tuple[float, dict[int, float]]:
    """Class-weighted softmax cross-entropy, divided by the batch size.

    ``loss = sum_c weights[c] * CE_c / n`` where ``CE_c`` is the summed
    cross-entropy over samples of class ``c``. ``weights`` may be a mapping
    from class index to weight, a length-``n_classes`` array, or ``None``
    (all ones, plain mean cross-entropy).

    Returns the loss and the unweighted ``CE_c / n`` for each class present.
    """
    logits = np.asarray(logits, dtype=np.float64)
    n, n_classes = logits.shape
    if n == 0:
        raise ValueError("empty batch")
    y = _check_labels(labels, n, n_classes)
    lam = _weight_vector(weights, n_classes, y)
    ce = -log_softmax(logits)[np.arange(n), y]
    per_class = {int(c): float(ce[y == c].sum() / n) for c in np.unique(y)}
    return float((lam * ce).sum() / n), per_class


def backward(model: MlpModel, X, labels, weights=None,
             output_rows: Sequence[int] | None = None) -> tuple[float, Gradients]:
    """Loss and exact gradients of :func:`class_balanced_loss` w.r.t. every parameter.

    With ``output_rows`` the loss is taken over the selected head rows only and
    the remaining head rows receive zero gradient.
    """
    X = _check_input(model, X)
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    acts, logits = _forward_all(model, X, output_rows)
    y = _check_labels(labels, n, logits.shape[1])
    lam = _weight_vector(weights, logits.shape[1], y)
    logp = log_softmax(logits)
    loss = float((lam * -logp[np.arange(n), y]).sum() / n)

    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta *= (lam / n)[:, None]

    n_layers = len(model.layers)
    gw: list[np.ndarray] = [None] * n_layers
    gb: list[np.ndarray] = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        layer = model.layers[i]
        dW = delta.T @ acts[i]
        db = delta.sum(axis=0)
        if i == n_layers - 1 and output_rows is not None:
            full_w = np.zeros_like(layer.weight)
            full_b = np.zeros_like(layer.bias)
            full_w[output_rows] = dW
            full_b[output_rows] = db
            W = layer.weight[output_rows]
            dW, db = full_w, full_b
        else:
            W = layer.weight
        gw[i], gb[i] = dW, db
        if i > 0:
            delta = delta @ W
            if model.layers[i - 1].activation == RELU:
                delta = delta * (acts[i] > 0)
    return loss, Gradients(gw, gb)


def sgd_step(model: MlpModel, grads: Gradients, lr: float, inplace: bool = False) -> MlpModel:
    """``param -= lr * grad`` on unfrozen layers; frozen layers are left untouched."""
    if len(grads.weights) != len(model.layers):
        raise ValueError("gradient/model layer count mismatch")
    target = model if inplace else model.copy()
    for layer, gw, gb in zip(target.layers, grads.weights, grads.biases):
        if gw.shape != layer.weight.shape or gb.shape != layer.bias.shape:
            raise ValueError("gradient shape does not match model")
        if layer.frozen:
            continue
        layer.weight -= lr * gw
        layer.bias -= lr * gb
    return target


def predict(model: MlpModel, X, output_rows=None) -> np.ndarray:
    return forward(model, X, output_rows).argmax(axis=1)


def accuracy(model: MlpModel, X, y) -> float:
    y = np.asarray(y)
    if len(y) == 0:
        return float("nan")
    return float((predict(model, X) == y).mean())


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def model_to_bytes(model: MlpModel) -> bytes:
    tag = model.arch_tag.encode("utf-8")
    parts = [MAGIC, struct.pack("<HH", FORMAT_VERSION, len(tag)), tag,
             struct.pack("<I", len(model.layers))]
    for layer in model.layers:
        parts.append(struct.pack("<IIBB", layer.fan_out, layer.fan_in,
                                 _ACT_CODES[layer.activation], int(layer.frozen)))
        parts.append(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def model_from_bytes(data: bytes) -> MlpModel:
    if len(data) < 4 + 4 + 4 + 4 or data[:4] != MAGIC:
        raise IntegrityError("not an FMKR model file")
    body, (stored,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != stored:
        raise IntegrityError("checksum mismatch")
    try:
        version, tag_len = struct.unpack_from("<HH", body, 4)
        if version != FORMAT_VERSION:
            raise IntegrityError(f"unsupported format version {version}")
        off = 8
        tag = body[off:off + tag_len].decode("utf-8")
        off += tag_len
        (n_layers,) = struct.unpack_from("<I", body, off)
        off += 4
        layers = []
        for _ in range(n_layers):
            n_out, n_in, act, frozen = struct.unpack_from("<IIBB", body, off)
            off += 10
            w_end = off + 8 * n_out * n_in
            b_end = w_end + 8 * n_out
            if b_end > len(body):
                raise IntegrityError("truncated layer data")
            weight = np.frombuffer(body[off:w_end], dtype="<f8").reshape(n_out, n_in).astype(np.float64)
            bias = np.frombuffer(body[w_end:b_end], dtype="<f8").astype(np.float64)
            off = b_end
            layers.append(Layer(weight, bias, _ACT_NAMES[act], bool(frozen)))
        if off != len(body):
            raise IntegrityError("trailing bytes after last layer")
        return MlpModel(layers, tag)
    except IntegrityError:
        raise
    except (struct.error, KeyError, UnicodeDecodeError, ValueError) as exc:
        raise IntegrityError(f"malformed model file: {exc}") from None


def save_model(model: MlpModel, path) -> None:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(model_to_bytes(model))
    os.replace(tmp, path)


def load_model(path) -> MlpModel:
    return model_from_bytes(Path(path).read_bytes())


def model_digest(model: MlpModel) -> str:
    return hashlib.sha256(model_to_bytes(model)).hexdigest()
