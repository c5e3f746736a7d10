"""First-order meta-training loop with class-balanced inner and outer steps.

One running parameter set is updated sequentially: an SGD step per support
task (on the task's head rows), then one SGD step on a query batch from the
DE pool. No gradient flows through the inner steps.

Model replacement requests arrive as :class:`ReplacementMessage` objects in an
append-only inbox (a list, or :class:`FileInbox` over newline-delimited JSON)
and are drained at the start of every round.
"""

from __future__ import annotations

import dataclasses
import io
import json
import logging
from collections import Counter
from pathlib import Path
from typing import Any, MutableSequence, Sequence

import numpy as np

from fmkr import nn
from fmkr.episodes import EpisodeConfig, EpisodeTask, sample_task_batch
from fmkr.ingest import MetaDataset, compute_class_weights, samples_to_arrays

log = logging.getLogger(__name__)

DEFAULT_BATCH_SIZES = (32, 64, 128)


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.01
    beta: float = 0.01
    batch_size: int = 64
    rounds: int = 200
    seed: int = 0
    class_balance: bool = True
    hidden_sizes: tuple[int, ...] = (64, 32)
    n_classes: int = 5

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclasses.dataclass(frozen=True)
class ReplacementMessage:
    endpoint_id: int
    request_flag: bool
    model_ref: Any = None
    round: int = 0

    def __post_init__(self):
        if self.request_flag and self.model_ref is None:
            raise ValueError("model_ref is required when the request flag is set")

    @classmethod
    def from_json(cls, line: str) -> ReplacementMessage:
        obj = json.loads(line)
        if not isinstance(obj, dict):
            raise ValueError("message must be a JSON object")
        flag = obj.get("S", obj.get("request_flag"))
        if not isinstance(flag, bool):
            raise ValueError("message field S must be a boolean")
        return cls(int(obj["endpoint_id"]), flag, obj.get("model_ref"), int(obj.get("round", 0)))

    def to_json(self) -> str:
        ref = self.model_ref
        if ref is not None and not isinstance(ref, str):
            ref = str(ref)
        return json.dumps({"endpoint_id": self.endpoint_id, "S": self.request_flag,
                           "model_ref": ref, "round": self.round})


class FileInbox:
    """Append-only newline-delimited JSON inbox shared between processes.

    Each call to :meth:`drain` returns the messages appended since the last
    call; malformed lines come back as raw strings so the trainer can log them.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._offset = 0

    def drain(self) -> list:
        if not self.path.exists():
            return []
        with open(self.path, "rb") as fh:
            fh.seek(self._offset)
            chunk = fh.read()
        # keep an unterminated last line for the next drain
        end = chunk.rfind(b"\n") + 1
        self._offset += end
        out = []
        for raw in chunk[:end].decode("utf-8", errors="replace").splitlines():
            if not raw.strip():
                continue
            try:
                out.append(ReplacementMessage.from_json(raw))
            except (ValueError, KeyError, TypeError):
                out.append(raw)
        return out

    def post(self, msg: ReplacementMessage) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(msg.to_json() + "\n")


class _ListInbox:
    def __init__(self, items: Sequence):
        self.items = items
        self._pos = 0

    def drain(self) -> list:
        new = list(self.items[self._pos:])
        self._pos += len(new)
        return new


@dataclasses.dataclass
class RoundRecord:
    round: int
    support_loss: float
    query_loss: float
    query_acc: float
    replaced: bool
    eval_acc: float | None = None


@dataclasses.dataclass
class MetaTrainReport:
    rows: list[RoundRecord] = dataclasses.field(default_factory=list)
    replacements: list[tuple[int, int]] = dataclasses.field(default_factory=list)
    final_model_path: str | None = None
    initial_digest: str = ""
    final_digest: str = ""

    def to_csv(self, with_eval: bool = False) -> str:
        buf = io.StringIO()
        cols = ["round", "support_loss", "query_loss", "query_acc", "replaced"]
        if with_eval:
            cols.append("eval_acc")
        buf.write(",".join(cols) + "\n")
        for r in self.rows:
            vals = [str(r.round), repr(r.support_loss), repr(r.query_loss), repr(r.query_acc),
                    str(int(r.replaced))]
            if with_eval:
                vals.append("" if r.eval_acc is None else repr(r.eval_acc))
            buf.write(",".join(vals) + "\n")
        return buf.getvalue()


def _balanced_weights(y: np.ndarray, n_classes: int) -> np.ndarray:
    """Length-``n_classes`` weight vector; classes absent from ``y`` get 1."""
    counts = Counter(int(v) for v in y)
    lam = np.ones(n_classes)
    for c, w in compute_class_weights(counts).items():
        lam[c] = w
    return lam


def inner_update(model: nn.MlpModel, task: EpisodeTask, alpha: float,
                 weights=None, class_balance: bool = True) -> tuple[nn.MlpModel, float]:
    """One SGD step on the task's support loss; returns ``(adapted_copy, loss)``.

    The head is restricted to the rows of ``task.classes``. Class weights come
    from the task's own support counts unless ``weights`` (indexed by local
    class) is given.
    """
    if len(task.support_y) == 0:
        raise ValueError(f"task {task.task_id} has an empty support set")
    if max(task.class_codes) >= model.n_classes:
        raise ValueError("model head is narrower than the task's class codes")
    if weights is None and class_balance:
        weights = _balanced_weights(task.support_y, task.k)
    loss, grads = nn.backward(model, task.support_x, task.support_y, weights,
                              output_rows=task.class_codes)
    return nn.sgd_step(model, grads, alpha), loss


def outer_update(model: nn.MlpModel, X, y, beta: float, weights=None) -> tuple[nn.MlpModel, float]:
    """One SGD step on the full-head query loss at the given (adapted) parameters."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("empty query batch")
    loss, grads = nn.backward(model, X, y, weights)
    return nn.sgd_step(model, grads, beta), loss


class QueryBatcher:
    """Batches of ``min(batch_size, n)`` distinct indices.

    Walks a fresh permutation each epoch; a leftover shorter than a batch is
    dropped.
    """

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("query pool is empty")
        self.n = n
        self.size = min(batch_size, n)
        self.rng = rng
        self._perm = np.zeros(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.size > len(self._perm):
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._perm[self._pos:self._pos + self.size]
        self._pos += self.size
        return idx


def _resolve_model(ref) -> nn.MlpModel:
    if isinstance(ref, nn.MlpModel):
        return ref.copy()
    return nn.load_model(ref)


def meta_train(ds: MetaDataset, ep_cfg: EpisodeConfig, tr_cfg: TrainConfig,
               inbox: MutableSequence | FileInbox | None = None,
               init_model: nn.MlpModel | None = None,
               eval_set: tuple[np.ndarray, np.ndarray] | None = None,
               outbox: FileInbox | MutableSequence | None = None,
               endpoint_id: int = 0) -> tuple[nn.MlpModel, MetaTrainReport]:
    """Run ``tr_cfg.rounds`` rounds of meta-training.

    Each round: drain the inbox and adopt the model named by the last flagged
    message; sample ``ep_cfg.tasks_per_batch`` tasks and apply
    :func:`inner_update` to the running parameters task by task; draw a query
    batch from ``ds.query`` and apply :func:`outer_update`.

    Randomness: tasks use a stream seeded by ``ep_cfg.seed``; initialization
    and query batches use ``tr_cfg.seed``.

    Args:
        inbox: list of :class:`ReplacementMessage` (other components may
            append while training runs) or a :class:`FileInbox`.
        init_model: starting parameters; defaults to a fresh
            ``mlp_init([dim, *hidden_sizes, n_classes], tr_cfg.seed)``.
        eval_set: optional ``(X, y)`` scored after every round into
            ``RoundRecord.eval_acc``.
        outbox: if given, a non-flagged message is posted after every round.
    """
    dim = ds.feature_dim
    rng = np.random.default_rng(tr_cfg.seed)
    if init_model is None:
        model = nn.mlp_init([dim, *tr_cfg.hidden_sizes, tr_cfg.n_classes], rng)
    else:
        model = init_model.copy()
    task_rng = np.random.default_rng(ep_cfg.seed)

    Xq, yq = samples_to_arrays(ds.query, dim)
    batcher = QueryBatcher(len(Xq), tr_cfg.batch_size, rng)
    q_weights = _balanced_weights(yq, model.n_classes) if tr_cfg.class_balance else None
    if inbox is None:
        inbox = []
    source = inbox if isinstance(inbox, FileInbox) else _ListInbox(inbox)

    report = MetaTrainReport(initial_digest=nn.model_digest(model))
    for t in range(1, tr_cfg.rounds + 1):
        replaced = False
        for msg in source.drain():
            if not isinstance(msg, ReplacementMessage):
                log.warning("round %d: skipping malformed message %r", t, msg)
                continue
            if not msg.request_flag:
                continue
            try:
                candidate = _resolve_model(msg.model_ref)
            except (OSError, ValueError) as exc:
                log.warning("round %d: cannot load model %r from endpoint %d: %s",
                            t, msg.model_ref, msg.endpoint_id, exc)
                continue
            if candidate.n_inputs != dim:
                log.warning("round %d: model from endpoint %d expects %d inputs, data has %d",
                            t, msg.endpoint_id, candidate.n_inputs, dim)
                continue
            model = candidate
            replaced = True
            report.replacements.append((t, msg.endpoint_id))

        tasks = sample_task_batch(ds, ep_cfg, task_rng)
        support_losses = []
        for task in tasks:
            model, loss = inner_update(model, task, tr_cfg.alpha, class_balance=tr_cfg.class_balance)
            support_losses.append(loss)

        idx = batcher.next()
        q_acc = float((nn.predict(model, Xq[idx]) == yq[idx]).mean())
        model, q_loss = outer_update(model, Xq[idx], yq[idx], tr_cfg.beta, q_weights)

        eval_acc = None
        if eval_set is not None:
            eval_acc = nn.accuracy(model, *eval_set)
        report.rows.append(RoundRecord(t, float(np.mean(support_losses)), q_loss, q_acc,
                                       replaced, eval_acc))
        if outbox is not None:
            msg = ReplacementMessage(endpoint_id, False, None, t)
            if isinstance(outbox, FileInbox):
                outbox.post(msg)
            else:
                outbox.append(msg)

    report.final_digest = nn.model_digest(model)
    return model, report
