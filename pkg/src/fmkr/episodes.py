"""Episodic k-way task sampling over the support pool."""

from __future__ import annotations

import dataclasses
import itertools
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from fmkr.ingest import MetaDataset, samples_to_arrays
from fmkr.stages import StageLabel

SUPPORT_CLASSES = (StageLabel.NT, StageLabel.RN, StageLabel.EF, StageLabel.LM)


class InsufficientSamplesError(ValueError):
    def __init__(self, label: StageLabel, required: int, available: int):
        self.label = label
        self.required = required
        self.available = available
        super().__init__(f"class {label.name} needs {required} samples, only {available} available")


@dataclasses.dataclass(frozen=True)
class EpisodeConfig:
    k: int = 3
    n_shot: int = 5
    n_query: int = 15
    tasks_per_batch: int = 4
    seed: int = 0
    generalized: bool = False

    def __post_init__(self):
        if not 2 <= self.k <= 5:
            raise ValueError(f"k must be in [2, 5], got {self.k}")
        for name in ("n_shot", "n_query", "tasks_per_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclasses.dataclass(eq=False)
class EpisodeTask:
    """One k-way task. Labels are local indices into ``classes``.

    ``support_index``/``query_index`` point into the pool the task was drawn
    from (``MetaDataset.support`` for training tasks).
    """

    task_id: int
    classes: list[StageLabel]
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    support_index: np.ndarray
    query_index: np.ndarray
    query_pool: np.ndarray | None = None

    @property
    def k(self) -> int:
        return len(self.classes)

    @property
    def class_codes(self) -> list[int]:
        return [int(c) for c in self.classes]

    @property
    def support_set(self) -> list[tuple[np.ndarray, int]]:
        return list(zip(self.support_x, self.support_y.tolist()))

    @property
    def query_set(self) -> list[tuple[np.ndarray, int]]:
        return list(zip(self.query_x, self.query_y.tolist()))

    def decode(self, local: Sequence[int]) -> list[StageLabel]:
        return [self.classes[int(i)] for i in local]

    def to_dict(self) -> dict:
        out = {
            "task_id": self.task_id,
            "classes": [c.name for c in self.classes],
            "support_index": [int(i) for i in self.support_index],
            "query_index": [int(i) for i in self.query_index],
        }
        if self.query_pool is not None:
            out["query_pool"] = [str(p) for p in self.query_pool]
        return out


def support_combinations(k: int = 3, generalized: bool = False) -> list[tuple[StageLabel, ...]]:
    """Class subsets eligible for training tasks; DE never appears.

    The default (``k=3``) gives the four triples NT/RN/EF, NT/RN/LM, NT/EF/LM
    and RN/EF/LM. ``generalized=True`` allows any ``k`` in [2, 4].
    """
    if generalized:
        if not 2 <= k <= len(SUPPORT_CLASSES):
            raise ValueError(f"k must be in [2, {len(SUPPORT_CLASSES)}] for generalized tasks, got {k}")
    elif k != 3:
        raise ValueError(f"k must be 3 unless generalized=True, got {k}")
    return list(itertools.combinations(SUPPORT_CLASSES, k))


def _indices_by_class(samples) -> dict[StageLabel, np.ndarray]:
    labels = np.array([int(s.label) for s in samples], dtype=np.int64)
    return {lab: np.flatnonzero(labels == int(lab)) for lab in StageLabel}


def sample_task_batch(ds: MetaDataset, cfg: EpisodeConfig,
                      rng: np.random.Generator | int | None = None) -> list[EpisodeTask]:
    """Draw ``cfg.tasks_per_batch`` tasks from ``ds.support``.

    Each task picks a class combination uniformly, then ``n_shot + n_query``
    distinct samples per class; the first ``n_shot`` form the support set.
    ``rng`` defaults to ``cfg.seed``; pass a Generator to continue a stream.
    """
    if rng is None:
        rng = cfg.seed
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    combos = support_combinations(cfg.k, cfg.generalized)
    by_class = _indices_by_class(ds.support)
    need = cfg.n_shot + cfg.n_query
    for lab in sorted({c for combo in combos for c in combo}):
        if len(by_class[lab]) < need:
            raise InsufficientSamplesError(lab, need, len(by_class[lab]))

    X, _ = samples_to_arrays(ds.support)
    tasks = []
    for t in range(cfg.tasks_per_batch):
        classes = list(combos[int(rng.integers(len(combos)))])
        s_idx, q_idx, s_y, q_y = [], [], [], []
        for local, lab in enumerate(classes):
            picked = rng.choice(by_class[lab], size=need, replace=False)
            s_idx.append(picked[:cfg.n_shot])
            q_idx.append(picked[cfg.n_shot:])
            s_y.append(np.full(cfg.n_shot, local))
            q_y.append(np.full(cfg.n_query, local))
        s_idx = np.concatenate(s_idx)
        q_idx = np.concatenate(q_idx)
        tasks.append(EpisodeTask(
            task_id=t, classes=classes,
            support_x=X[s_idx], support_y=np.concatenate(s_y).astype(np.int64),
            query_x=X[q_idx], query_y=np.concatenate(q_y).astype(np.int64),
            support_index=s_idx, query_index=q_idx,
        ))
    return tasks


def build_de_eval_set(ds: MetaDataset, seed=0) -> EpisodeTask:
    """Evaluation-only task: every DE sample plus as many random non-DE samples.

    The contrast samples come from the support pool (fewer if the pool is
    smaller). ``classes`` lists every stage present, in code order, and
    ``query_pool`` tags each query row with ``"query"`` or ``"support"``.
    """
    if not ds.query:
        raise ValueError("DE pool is empty; cannot build an evaluation task")
    rng = np.random.default_rng(seed)
    n_contrast = min(len(ds.query), len(ds.support))
    contrast = np.sort(rng.choice(len(ds.support), size=n_contrast, replace=False)) \
        if n_contrast else np.zeros(0, dtype=np.int64)
    samples = list(ds.query) + [ds.support[i] for i in contrast]
    X, y = samples_to_arrays(samples)
    classes = [StageLabel(c) for c in sorted(set(y.tolist()))]
    local = {int(c): i for i, c in enumerate(classes)}
    dim = X.shape[1]
    return EpisodeTask(
        task_id=-1, classes=classes,
        support_x=np.zeros((0, dim)), support_y=np.zeros(0, dtype=np.int64),
        query_x=X, query_y=np.array([local[int(v)] for v in y], dtype=np.int64),
        support_index=np.zeros(0, dtype=np.int64),
        query_index=np.concatenate([np.arange(len(ds.query)), contrast]).astype(np.int64),
        query_pool=np.array(["query"] * len(ds.query) + ["support"] * n_contrast),
    )


def dump_tasks(tasks: Sequence[EpisodeTask], path) -> None:
    Path(path).write_text(json.dumps([t.to_dict() for t in tasks], indent=1) + "\n", encoding="utf-8")
