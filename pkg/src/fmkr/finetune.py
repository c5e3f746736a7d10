"""Deployment-time restructuring and local fine-tuning of a pretrained MLP."""

from __future__ import annotations

import dataclasses
import enum
import json
from collections import Counter

import numpy as np

from fmkr import nn
from fmkr.ingest import compute_class_weights, samples_to_arrays


class FinetuneMode(str, enum.Enum):
    REPLACE_HEAD = "replace-head"
    REINIT_N = "reinit-n"
    EXTEND_N = "extend-n"


@dataclasses.dataclass(frozen=True)
class FinetuneConfig:
    """Fine-tuning settings.

    ``freeze`` is the number of leading layers kept frozen (``None`` picks the
    mode default: every hidden layer, minus the re-initialized ones for
    ``reinit-n``). ``n_layers`` is how many layers are re-initialized or
    appended.
    """

    mode: FinetuneMode = FinetuneMode.EXTEND_N
    freeze: int | None = None
    n_layers: int = 1
    new_head_classes: int = 5
    epochs: int = 100
    lr: float = 0.01
    batch_size: int = 64
    seed: int = 0
    class_balance: bool = True
    holdout: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "mode", FinetuneMode(self.mode))
        if self.new_head_classes < 2:
            raise ValueError("new_head_classes must be >= 2")
        if self.mode is not FinetuneMode.REPLACE_HEAD and self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("epochs/lr must be >= 0 and batch_size >= 1")
        if not 0 < self.holdout < 1:
            raise ValueError("holdout must be in (0, 1)")


@dataclasses.dataclass
class FinetuneReport:
    epochs: int
    pre_accuracy: float
    post_accuracy: float
    pretrained_accuracy: float | None
    trainable_parameters: int
    n_train: int
    n_heldout: int
    frozen_digests: list[str]

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True)


def resolve_freeze(model: nn.MlpModel, cfg: FinetuneConfig) -> int:
    hidden = len(model.layers) - 1
    if cfg.freeze is None:
        m = hidden - cfg.n_layers if cfg.mode is FinetuneMode.REINIT_N else hidden
    else:
        m = cfg.freeze
    if m < 0 or m > hidden:
        raise ValueError(f"freeze={m} out of range [0, {hidden}]")
    if cfg.mode is FinetuneMode.REINIT_N:
        if cfg.n_layers > hidden:
            raise ValueError(f"cannot re-initialize {cfg.n_layers} of {hidden} hidden layers")
        if m > hidden - cfg.n_layers:
            raise ValueError("frozen layers overlap the re-initialized layers")
    return m


def restructure(model: nn.MlpModel, cfg: FinetuneConfig) -> nn.MlpModel:
    """Return a new model per ``cfg.mode``; the input model is not modified.

    ``replace-head`` keeps the body and swaps in a fresh head;
    ``reinit-n`` also re-initializes the last ``n_layers`` hidden layers;
    ``extend-n`` appends ``n_layers`` fresh hidden layers as wide as the last
    hidden layer before the fresh head. The first ``freeze`` layers are frozen
    and every other layer is trainable.
    """
    if len(model.layers) < 2:
        raise ValueError("model has no hidden layers to keep")
    m = resolve_freeze(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    body = [l.copy() for l in model.layers[:-1]]
    width = body[-1].fan_out
    if cfg.mode is FinetuneMode.REINIT_N:
        for i in range(len(body) - cfg.n_layers, len(body)):
            fresh = nn.init_layer(rng, body[i].fan_in, body[i].fan_out, nn.RELU)
            body[i] = fresh
    elif cfg.mode is FinetuneMode.EXTEND_N:
        body += [nn.init_layer(rng, width, width, nn.RELU) for _ in range(cfg.n_layers)]
    head = nn.init_layer(rng, width, cfg.new_head_classes, None)
    layers = body + [head]
    for i, layer in enumerate(layers):
        layer.frozen = i < m
    return nn.MlpModel(layers, f"{model.arch_tag}+{cfg.mode.value}")


def train_epochs(model: nn.MlpModel, X: np.ndarray, y: np.ndarray, epochs: int, lr: float,
                 batch_size: int, rng: np.random.Generator, class_balance: bool = True) -> nn.MlpModel:
    """Mini-batch SGD in place; frozen layers are never touched."""
    if epochs == 0 or len(X) == 0:
        return model
    weights = None
    if class_balance:
        weights = np.ones(model.n_classes)
        for c, w in compute_class_weights(Counter(int(v) for v in y)).items():
            weights[c] = w
    for _ in range(epochs):
        order = rng.permutation(len(X))
        for start in range(0, len(X), batch_size):
            idx = order[start:start + batch_size]
            _, grads = nn.backward(model, X[idx], y[idx], weights)
            nn.sgd_step(model, grads, lr, inplace=True)
    return model


def split_holdout(n: int, holdout: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    n_hold = max(1, int(round(n * holdout)))
    return np.sort(order[n_hold:]), np.sort(order[:n_hold])


def finetune(model: nn.MlpModel, local, cfg: FinetuneConfig = FinetuneConfig()
             ) -> tuple[nn.MlpModel, FinetuneReport]:
    """Restructure ``model`` and train it on local samples.

    Args:
        local: list of fused samples, or an ``(X, y)`` pair with integer labels.

    The data is split ``1 - holdout`` / ``holdout`` with a seeded shuffle;
    all reported accuracies are on the held-out part. ``pre_accuracy`` scores
    the restructured model before training and ``pretrained_accuracy`` scores
    the input model when its head width matches ``new_head_classes``.
    """
    if isinstance(local, tuple):
        X, y = np.asarray(local[0], dtype=np.float64), np.asarray(local[1], dtype=np.int64)
    else:
        X, y = samples_to_arrays(local)
    if len(np.unique(y)) < 2:
        raise ValueError("local data must contain at least two classes")
    if y.max() >= cfg.new_head_classes:
        raise ValueError(f"labels exceed new_head_classes={cfg.new_head_classes}")
    rng = np.random.default_rng(cfg.seed)
    train_idx, hold_idx = split_holdout(len(X), cfg.holdout, rng)
    Xt, yt, Xh, yh = X[train_idx], y[train_idx], X[hold_idx], y[hold_idx]

    tuned = restructure(model, cfg)
    m = sum(l.frozen for l in tuned.layers)
    frozen_before = [l.digest() for l in tuned.layers[:m]]
    pre = nn.accuracy(tuned, Xh, yh)
    pretrained = nn.accuracy(model, Xh, yh) if model.n_classes == cfg.new_head_classes else None
    train_epochs(tuned, Xt, yt, cfg.epochs, cfg.lr, cfg.batch_size, rng, cfg.class_balance)
    frozen_after = [l.digest() for l in tuned.layers[:m]]
    if frozen_after != frozen_before:
        raise AssertionError("frozen layers changed during fine-tuning")
    report = FinetuneReport(
        epochs=cfg.epochs, pre_accuracy=pre, post_accuracy=nn.accuracy(tuned, Xh, yh),
        pretrained_accuracy=pretrained,
        trainable_parameters=tuned.parameter_count(trainable_only=True),
        n_train=len(train_idx), n_heldout=len(hold_idx), frozen_digests=frozen_after,
    )
    return tuned, report


def frozen_digests(model: nn.MlpModel) -> list[str]:
    return [l.digest() for l in model.layers if l.frozen]

