"""Round-based cloud/edge fleet simulation of model deployment strategies.

Every round each endpoint picks a source model according to the strategy,
fine-tunes a copy on its local data and is scored on its unknown-attack
evaluation set (all local DE samples plus as many non-DE samples, none of
which are trained on). Rounds end in a barrier where a single coordinator
appends one cost entry to the ledger.

Costs are abstract units of model retrieval across the cloud/edge boundary:
strategies that poll every endpoint (highest-accuracy-first and
aggregate-then-fine-tune) pay ``participants * cost_unit`` per round; random
peer selection and self fine-tuning pay ``cost_unit``.
"""

from __future__ import annotations

import dataclasses
import enum
import io
import json
from typing import Sequence

import numpy as np

from fmkr import nn
from fmkr.episodes import build_de_eval_set
from fmkr.finetune import train_epochs
from fmkr.ingest import MetaDataset, samples_to_arrays, split_support_query
from fmkr.stages import StageLabel
from fmkr.synth import SynthConfig, fused_samples


class Strategy(str, enum.Enum):
    HIGHEST_ACCURACY_FIRST = "highest-accuracy-first"
    FINE_TUNE_AFTER_AGGREGATION = "fine-tune-after-aggregation"
    RANDOM_FINE_TUNING = "random-fine-tuning"
    FINE_TUNE_SELF = "fine-tune-self"

    @property
    def polls_all(self) -> bool:
        return self in (Strategy.HIGHEST_ACCURACY_FIRST, Strategy.FINE_TUNE_AFTER_AGGREGATION)


@dataclasses.dataclass(frozen=True)
class FleetConfig:
    participants: int = 10
    rounds: int = 15
    strategy: Strategy = Strategy.FINE_TUNE_SELF
    seed: int = 0
    cost_unit: float = 1.0
    local_epochs: int = 5
    lr: float = 0.01
    batch_size: int = 64
    class_balance: bool = True

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.participants < 1:
            raise ValueError("participants must be >= 1")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.cost_unit < 0:
            raise ValueError("cost_unit must be >= 0")


@dataclasses.dataclass
class Endpoint:
    endpoint_id: int
    model: nn.MlpModel
    train_x: np.ndarray
    train_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray
    accuracy: list[float] = dataclasses.field(default_factory=list)

    def evaluate(self) -> float:
        return nn.accuracy(self.model, self.eval_x, self.eval_y)


@dataclasses.dataclass(frozen=True)
class CostEntry:
    round: int
    strategy: Strategy
    cost: float


@dataclasses.dataclass
class FleetState:
    endpoints: list[Endpoint]
    cloud_model: nn.MlpModel | None = None
    ledger: list[CostEntry] = dataclasses.field(default_factory=list)

    @property
    def rounds_elapsed(self) -> int:
        return len(self.ledger)

    @property
    def participants(self) -> int:
        return len(self.endpoints)


@dataclasses.dataclass
class FleetRound:
    round: int
    strategy: Strategy
    mean_acc: float
    min_acc: float
    max_acc: float
    cost: float


@dataclasses.dataclass
class FleetReport:
    strategy: Strategy
    participants: int
    rows: list[FleetRound]
    total_cost: float
    cost_ratio: float | None

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("round,strategy,mean_acc,min_acc,max_acc,cost\n")
        for r in self.rows:
            buf.write(f"{r.round},{r.strategy.value},{r.mean_acc!r},{r.min_acc!r},"
                      f"{r.max_acc!r},{r.cost!r}\n")
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "participants": self.participants,
            "rounds": len(self.rows),
            "total_cost": self.total_cost,
            "cost_ratio_vs_fine_tune_self": self.cost_ratio,
            "final_mean_acc": self.rows[-1].mean_acc if self.rows else None,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=1, sort_keys=True)


def aggregate_mean(models: Sequence[nn.MlpModel]) -> nn.MlpModel:
    """Parameter-wise arithmetic mean; freeze flags and tag come from the first model."""
    if not models:
        raise ValueError("no models to aggregate")
    first = models[0]
    for m in models[1:]:
        if m.arch_tag != first.arch_tag or m.sizes != first.sizes or \
                [l.activation for l in m.layers] != [l.activation for l in first.layers]:
            raise ValueError("cannot aggregate models with different architectures")
    layers = []
    for i, ref in enumerate(first.layers):
        w = np.mean([m.layers[i].weight for m in models], axis=0)
        b = np.mean([m.layers[i].bias for m in models], axis=0)
        layers.append(nn.Layer(w, b, ref.activation, ref.frozen))
    return nn.MlpModel(layers, first.arch_tag)


def round_cost(strategy: Strategy, participants: int, cost_unit: float = 1.0) -> float:
    return participants * cost_unit if Strategy(strategy).polls_all else cost_unit


def _endpoint_rng(seed: int, endpoint_id: int, round_no: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, endpoint_id, round_no]))


def select_sources(state: FleetState, strategy: Strategy, rng: np.random.Generator) -> list[nn.MlpModel]:
    """Model each endpoint fine-tunes this round (shared objects; callers copy)."""
    strategy = Strategy(strategy)
    eps = state.endpoints
    if strategy is Strategy.HIGHEST_ACCURACY_FIRST:
        accs = [ep.accuracy[-1] if ep.accuracy else ep.evaluate() for ep in eps]
        best = int(np.argmax(accs))  # first maximum = lowest endpoint id
        return [eps[best].model] * len(eps)
    if strategy is Strategy.FINE_TUNE_AFTER_AGGREGATION:
        state.cloud_model = aggregate_mean([ep.model for ep in eps])
        return [state.cloud_model] * len(eps)
    if strategy is Strategy.RANDOM_FINE_TUNING:
        picks = rng.integers(len(eps), size=len(eps))
        return [eps[int(j)].model for j in picks]
    return [ep.model for ep in eps]


def run_round(state: FleetState, cfg: FleetConfig, strategy: Strategy | None = None) -> FleetState:
    """Advance the fleet by one round in place and return it."""
    strategy = cfg.strategy if strategy is None else Strategy(strategy)
    round_no = state.rounds_elapsed + 1
    coord_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, round_no, len(state.endpoints)]))
    sources = select_sources(state, strategy, coord_rng)
    # endpoints are independent between barriers
    updated = []
    for ep, src in zip(state.endpoints, sources):
        model = src.copy()
        train_epochs(model, ep.train_x, ep.train_y, cfg.local_epochs, cfg.lr, cfg.batch_size,
                     _endpoint_rng(cfg.seed, ep.endpoint_id, round_no), cfg.class_balance)
        updated.append(model)
    for ep, model in zip(state.endpoints, updated):
        ep.model = model
        ep.accuracy.append(ep.evaluate())
    state.ledger.append(CostEntry(round_no, strategy,
                                  round_cost(strategy, len(state.endpoints), cfg.cost_unit)))
    return state


def init_fleet(base_model: nn.MlpModel, datasets: Sequence[MetaDataset], seed: int = 0) -> FleetState:
    """Give every endpoint a copy of ``base_model`` and split its data.

    The evaluation set is :func:`build_de_eval_set` on the endpoint's data;
    training uses every support sample not drawn as evaluation contrast.
    """
    endpoints = []
    for i, ds in enumerate(datasets):
        task = build_de_eval_set(ds, seed=np.random.SeedSequence([seed, i]))
        used = set(task.query_index[task.query_pool == "support"].tolist())
        train = [s for j, s in enumerate(ds.support) if j not in used]
        tx, ty = samples_to_arrays(train, dim=ds.feature_dim)
        eval_y = np.array([int(c) for c in task.decode(task.query_y)], dtype=np.int64)
        endpoints.append(Endpoint(i, base_model.copy(), tx, ty, task.query_x, eval_y))
    return FleetState(endpoints)


def simulate(cfg: FleetConfig, base_model: nn.MlpModel, datasets: Sequence[MetaDataset]) -> FleetReport:
    if len(datasets) != cfg.participants:
        raise ValueError(f"expected {cfg.participants} datasets, got {len(datasets)}")
    state = init_fleet(base_model, datasets, cfg.seed)
    rows = []
    for _ in range(cfg.rounds):
        run_round(state, cfg)
        accs = [ep.accuracy[-1] for ep in state.endpoints]
        entry = state.ledger[-1]
        rows.append(FleetRound(entry.round, entry.strategy, float(np.mean(accs)),
                               float(min(accs)), float(max(accs)), entry.cost))
    total = float(sum(e.cost for e in state.ledger))
    baseline = cfg.rounds * round_cost(Strategy.FINE_TUNE_SELF, cfg.participants, cfg.cost_unit)
    ratio = total / baseline if baseline else None
    return FleetReport(cfg.strategy, cfg.participants, rows, total, ratio)


# Per-endpoint local traffic mix; DE stays rare.
ENDPOINT_COUNTS = {StageLabel.NT: 300, StageLabel.RN: 60, StageLabel.EF: 40,
                   StageLabel.LM: 20, StageLabel.DE: 10}


def synthetic_endpoint_datasets(participants: int, seed: int = 0, shift: float = 1.0,
                                counts=None, **synth_kwargs) -> list[MetaDataset]:
    """One dataset per endpoint, each with its own seeded mean shift."""
    out = []
    for i in range(participants):
        cfg = SynthConfig(counts=counts or ENDPOINT_COUNTS, seed=seed * 10_007 + i,
                          shift=shift, shift_seed=seed * 10_007 + 5_000 + i, **synth_kwargs)
        out.append(split_support_query(fused_samples(cfg)))
    return out
