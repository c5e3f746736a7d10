"""Binary confusion counts and per-stage accuracy/precision/recall/F1 reports."""

from __future__ import annotations

import dataclasses
import io
import json
from typing import Iterable, Sequence

from fmkr.stages import ATTACK_STAGES, StageLabel


@dataclasses.dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclasses.dataclass(frozen=True)
class MetricsRow:
    stage: str
    accuracy: float
    precision: float
    recall: float
    f1: float
    degenerate: bool = False

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def confusion(predictions: Sequence, truths: Sequence,
              positive: Iterable | None = None) -> ConfusionCounts:
    """Tally TP/TN/FP/FN where "positive" means membership in ``positive``.

    ``positive`` defaults to every attack stage (all but NT). Labels may be
    :class:`StageLabel` values, names or integer codes.
    """
    if len(predictions) != len(truths):
        raise ValueError(f"length mismatch: {len(predictions)} predictions, {len(truths)} truths")
    if len(truths) == 0:
        raise ValueError("nothing to evaluate")
    pos = ATTACK_STAGES if positive is None else frozenset(StageLabel.parse(p) for p in positive)
    tp = tn = fp = fn = 0
    for p, t in zip(predictions, truths):
        p_pos = StageLabel.parse(p) in pos
        t_pos = StageLabel.parse(t) in pos
        if t_pos:
            if p_pos:
                tp += 1
            else:
                fn += 1
        elif p_pos:
            fp += 1
        else:
            tn += 1
    return ConfusionCounts(tp, tn, fp, fn)


def metrics(cm: ConfusionCounts, stage: str = "Total") -> MetricsRow:
    """Accuracy, precision TP/(TP+FP), recall TP/(TP+FN) and their harmonic mean.

    A ratio whose denominator is zero is reported as 0 and the row is flagged
    ``degenerate``.
    """
    if cm.total == 0:
        raise ValueError("all confusion counts are zero")
    degenerate = False
    acc = (cm.tp + cm.tn) / cm.total
    if cm.tp + cm.fp:
        prec = cm.tp / (cm.tp + cm.fp)
    else:
        prec, degenerate = 0.0, True
    if cm.tp + cm.fn:
        rr = cm.tp / (cm.tp + cm.fn)
    else:
        rr, degenerate = 0.0, True
    if prec + rr > 0:
        f1 = 2 * prec * rr / (prec + rr)
    else:
        f1, degenerate = 0.0, True
    return MetricsRow(stage, acc, prec, rr, f1, degenerate)


def per_stage_report(predictions: Sequence, truths: Sequence) -> list[MetricsRow]:
    """One-vs-rest rows for NT, RN, EF, LM, DE, then the attack-vs-normal Total row."""
    rows = [metrics(confusion(predictions, truths, {stage}), stage.name) for stage in StageLabel]
    rows.append(metrics(confusion(predictions, truths), "Total"))
    return rows


def report_csv(rows: Sequence[MetricsRow]) -> str:
    buf = io.StringIO()
    buf.write("stage,acc,f1,prec,rr\n")
    for r in rows:
        buf.write(f"{r.stage},{r.accuracy!r},{r.f1!r},{r.precision!r},{r.recall!r}\n")
    return buf.getvalue()


def report_json(rows: Sequence[MetricsRow]) -> str:
    return json.dumps([r.as_dict() for r in rows], indent=1)
