"""Protocol core: Federator state machine, hospital behavior, and the four
training algorithms (FUALA, FedAvg, weighted FedAvg, centralized).

One FUALA round, in order: the Federator draws a fresh uniform permutation P
and selects a C-fraction S_t proportional to the sampling weights h; it
broadcasts the current average model to all K hospitals and assigns hospital
k the model of hospital P[k] for evaluation; every hospital trains the
broadcast model for E local epochs and scores the assigned model on its own
data; the Federator then accumulates h <- h + a and averages the updates of
the selected hospitals into the next round's model. Sampling weights start
at 1/K, so after t rounds h_k == 1/K + sum of hospital k's scores so far.

All randomness is derived from the run seed: the Federator draws from one
protocol stream, and hospital k's epoch shuffling in round t comes from the
stream keyed by (seed, round, hospital), so results do not depend on the
order hospitals execute.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import HospitalDataset, featurize_all
from .errors import ValidationError, SingleClassError
from .learner import (
    Arch,
    Body,
    Head,
    LearnerConfig,
    ModelParams,
    init_model,
    loss,
    scores,
    train_epochs,
)
from .metrics import ScoredSet, generalization_score
from .transport import (
    Bus,
    EvalAssignment,
    EvalReport,
    Message,
    ModelBroadcast,
    ModelUpdate,
    TransportLog,
    audit_privacy,
    expected_messages_per_round,
    iter_by_receiver,
)

HEADS_SCHEMA = "fuala-heads/1"

FEDERATOR_ID = "F"

# Sub-stream tags under the run seed.
_STREAM_PROTOCOL = 1
_STREAM_LOCAL = 2

# Generalization score reported when a hospital's local data has one class
# and the ranking metrics are undefined: neutral, neither boosts nor sinks h.
NEUTRAL_SCORE = 0.5


class AlgorithmKind(enum.Enum):
    FUALA = "fuala"
    FEDAVG = "fedavg"
    WEIGHTED_FEDAVG = "weighted_fedavg"
    CENTRAL = "central"


def local_seed(seed: int, round_index: int, hospital_index: int) -> list[int]:
    """Seed material for hospital-local RNG streams, keyed (seed, round, k)."""
    return [seed, _STREAM_LOCAL, round_index, hospital_index]


def protocol_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, _STREAM_PROTOCOL])


def make_permutation(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random bijection on {0, ..., n-1}."""
    if n < 1:
        raise ValidationError(f"permutation size must be >= 1, got {n}")
    return rng.permutation(n)


def make_derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation with no fixed points (rejection sampling)."""
    if n < 2:
        raise ValidationError(f"derangement needs n >= 2, got {n}")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def select_fraction(h: np.ndarray, c: int, rng: np.random.Generator) -> frozenset[int]:
    """Weighted sampling without replacement: C successive draws, each
    proportional to the remaining weights."""
    h = np.asarray(h, dtype=np.float64)
    k = len(h)
    if not (1 <= c <= k):
        raise ValidationError(f"cannot select {c} of {k} hospitals")
    if np.any(h <= 0):
        raise ValidationError("selection weights must all be positive")
    w = h.copy()
    chosen: list[int] = []
    for _ in range(c):
        cum = np.cumsum(w)
        u = rng.random() * cum[-1]
        i = int(np.searchsorted(cum, u, side="right"))
        i = min(i, k - 1)
        chosen.append(i)
        w[i] = 0.0
    return frozenset(chosen)


def update_sampling_weights(h: np.ndarray, a: np.ndarray) -> np.ndarray:
    """h_k <- h_k + a_k, elementwise; selection normalizes implicitly."""
    h = np.asarray(h, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if h.shape != a.shape:
        raise ValidationError(f"weight shape {h.shape} != score shape {a.shape}")
    return h + a


def aggregate_mean(updates: Sequence[ModelParams]) -> ModelParams:
    """Elementwise unweighted mean of the given parameter sets."""
    if not updates:
        raise ValidationError("nothing to aggregate")
    arch = updates[0].arch
    if any(u.arch != arch for u in updates):
        raise ValidationError("cannot aggregate models with different architectures")
    return ModelParams(
        body=Body(
            W1=np.mean([u.body.W1 for u in updates], axis=0),
            b1=np.mean([u.body.b1 for u in updates], axis=0),
        ),
        head=Head(
            W2=np.mean([u.head.W2 for u in updates], axis=0),
            b2=float(np.mean([u.head.b2 for u in updates])),
        ),
        arch=arch,
    )


def aggregate_weighted(updates: Sequence[ModelParams], weights: Sequence[float]) -> ModelParams:
    """Convex combination of parameter sets with the given nonnegative weights."""
    if not updates:
        raise ValidationError("nothing to aggregate")
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != len(updates):
        raise ValidationError(
            f"{len(weights)} weights for {len(updates)} updates"
        )
    if np.any(weights < 0):
        raise ValidationError("aggregation weights must be nonnegative")
    total = weights.sum()
    if total == 0:
        raise ValidationError("aggregation weights are all zero")
    wn = weights / total
    arch = updates[0].arch
    if any(u.arch != arch for u in updates):
        raise ValidationError("cannot aggregate models with different architectures")
    return ModelParams(
        body=Body(
            W1=np.tensordot(wn, np.stack([u.body.W1 for u in updates]), axes=1),
            b1=np.tensordot(wn, np.stack([u.body.b1 for u in updates]), axes=1),
        ),
        head=Head(
            W2=np.tensordot(wn, np.stack([u.head.W2 for u in updates]), axes=1),
            b2=float(np.dot(wn, [u.head.b2 for u in updates])),
        ),
        arch=arch,
    )


class HospitalNode:
    """A protocol participant holding private local data.

    Only `train`, `evaluate`, and `local_loss` touch the records; the
    Federator sees nothing but messages and the record count.
    """

    def __init__(self, dataset: HospitalDataset, index: int) -> None:
        self.hospital_id = dataset.hospital_id
        self.index = index
        self._X, self._y = featurize_all(dataset.records, dataset.vocab_size)

    @property
    def actor_id(self) -> str:
        return f"H{self.index}"

    @property
    def n_records(self) -> int:
        return len(self._y)

    def train(
        self, params: ModelParams, cfg: LearnerConfig, rng_seed: int | Sequence[int]
    ) -> ModelParams:
        return train_epochs(params, (self._X, self._y), cfg, rng_seed)

    def evaluate(self, params: ModelParams) -> float:
        """Generalization score of the given model on this hospital's data."""
        s = scores(params.body, params.head, self._X)
        try:
            return generalization_score(ScoredSet(scores=s, labels=self._y.astype(np.int64)))
        except SingleClassError:
            return NEUTRAL_SCORE

    def local_loss(self, params: ModelParams) -> float:
        return loss(params, (self._X, self._y))


@dataclass(frozen=True)
class FederationConfig:
    rounds: int
    n_selected: int
    learner: LearnerConfig
    seed: int = 0
    derangement: bool = False
    heads_from_all: bool = False

    def __post_init__(self) -> None:
        if self.rounds < 0:
            raise ValidationError(f"rounds must be >= 0, got {self.rounds}")
        if self.n_selected < 1:
            raise ValidationError(f"n_selected must be >= 1, got {self.n_selected}")
        if self.seed < 0:
            raise ValidationError(f"seed must be >= 0, got {self.seed}")


@dataclass(frozen=True)
class FederatorState:
    """Authoritative protocol state between rounds.

    ``hospital_models[k]`` is hospital k's most recent update w_k^t (the
    initial model before any round), which round t's permutation hands out
    for cross-evaluation.
    """

    round: int
    h: np.ndarray
    a_latest: np.ndarray | None
    current_model: ModelParams
    permutation: np.ndarray | None
    selected: frozenset[int]
    rng: np.random.Generator
    hospital_models: tuple[ModelParams, ...]


@dataclass(frozen=True)
class RoundArtifacts:
    updates: dict[int, ModelParams]
    eval_scores: np.ndarray          # indexed by model owner
    aggregated: ModelParams
    local_losses: np.ndarray


@dataclass(frozen=True)
class RoundLog:
    round: int
    gen_scores: np.ndarray      # nan where not computed
    weights_before: np.ndarray  # selection weights in force this round
    selected: frozenset[int]
    local_losses: np.ndarray    # nan where the hospital did not train


@dataclass(frozen=True)
class TrainedResult:
    algorithm: AlgorithmKind
    final_model: ModelParams
    hospital_heads: dict[int, Head]
    history: tuple[RoundLog, ...]
    hospital_ids: tuple[int, ...]
    transport_log: TransportLog


def initial_state(model: ModelParams, n_hospitals: int, seed: int) -> FederatorState:
    """Round-zero state: uniform sampling weights 1/K, all w_k^0 = w^0."""
    return FederatorState(
        round=0,
        h=np.full(n_hospitals, 1.0 / n_hospitals),
        a_latest=None,
        current_model=model,
        permutation=None,
        selected=frozenset(),
        rng=protocol_rng(seed),
        hospital_models=(model,) * n_hospitals,
    )


def run_round_fuala(
    state: FederatorState,
    hospitals: Sequence[HospitalNode],
    cfg: FederationConfig,
    bus: Bus,
) -> tuple[FederatorState, RoundArtifacts]:
    """Execute one FUALA round and return the successor state."""
    k = len(hospitals)
    t = state.round
    if cfg.derangement:
        perm = make_derangement(k, state.rng)
    else:
        perm = make_permutation(k, state.rng)
    selected = select_fraction(state.h, cfg.n_selected, state.rng)

    for node in hospitals:
        bus.send(Message(FEDERATOR_ID, node.actor_id, ModelBroadcast(state.current_model), t))
    for node in hospitals:
        owner = int(perm[node.index])
        bus.send(
            Message(
                FEDERATOR_ID,
                node.actor_id,
                EvalAssignment(owner, state.hospital_models[owner]),
                t,
            )
        )

    inbox = iter_by_receiver(bus.deliver_all())
    local_losses = np.full(k, np.nan)
    for node in hospitals:
        broadcast = next(m.payload for m in inbox[node.actor_id] if isinstance(m.payload, ModelBroadcast))
        assignment = next(m.payload for m in inbox[node.actor_id] if isinstance(m.payload, EvalAssignment))
        updated = node.train(broadcast.params, cfg.learner, local_seed(cfg.seed, t, node.index))
        score = node.evaluate(assignment.params)
        bus.send(Message(node.actor_id, FEDERATOR_ID, ModelUpdate(updated), t))
        bus.send(Message(node.actor_id, FEDERATOR_ID, EvalReport(assignment.model_owner, score), t))
        local_losses[node.index] = node.local_loss(updated)

    updates: dict[int, ModelParams] = {}
    a = np.full(k, np.nan)
    for msg in bus.deliver_all():
        sender_index = int(msg.sender[1:])
        if isinstance(msg.payload, ModelUpdate):
            updates[sender_index] = msg.payload.params
        elif isinstance(msg.payload, EvalReport):
            a[msg.payload.model_owner] = msg.payload.score
    if len(updates) != k or np.isnan(a).any():
        raise ValidationError(f"round {t}: incomplete updates or evaluation reports")

    new_h = update_sampling_weights(state.h, a)
    aggregated = aggregate_mean([updates[i] for i in sorted(selected)])
    artifacts = RoundArtifacts(
        updates=updates,
        eval_scores=a,
        aggregated=aggregated,
        local_losses=local_losses,
    )
    new_state = FederatorState(
        round=t + 1,
        h=new_h,
        a_latest=a,
        current_model=aggregated,
        permutation=perm,
        selected=selected,
        rng=state.rng,
        hospital_models=tuple(updates[i] for i in range(k)),
    )
    return new_state, artifacts


def _make_bus(hospitals: Sequence[HospitalNode], algorithm: AlgorithmKind, n_selected: int) -> Bus:
    bus = Bus()
    bus.register(FEDERATOR_ID)
    for node in hospitals:
        bus.register(node.actor_id)
    bus.log.metadata.update(
        algorithm=algorithm.value,
        n_hospitals=len(hospitals),
        n_selected=n_selected,
    )
    return bus


def _arch_for(cohort: Sequence[HospitalDataset], cfg: FederationConfig) -> Arch:
    return Arch(vocab_size=cohort[0].vocab_size, hidden_dim=cfg.learner.hidden_dim)


def _run_fuala(
    hospitals: Sequence[HospitalNode], model: ModelParams, cfg: FederationConfig, bus: Bus
) -> tuple[ModelParams, dict[int, Head], list[RoundLog]]:
    state = initial_state(model, len(hospitals), cfg.seed)
    history: list[RoundLog] = []
    for _ in range(cfg.rounds):
        h_before = state.h
        state, artifacts = run_round_fuala(state, hospitals, cfg, bus)
        history.append(
            RoundLog(
                round=state.round - 1,
                gen_scores=artifacts.eval_scores,
                weights_before=h_before,
                selected=state.selected,
                local_losses=artifacts.local_losses,
            )
        )
    if cfg.heads_from_all or not history:
        head_indices = range(len(hospitals))
    else:
        head_indices = sorted(state.selected)
    heads = {
        hospitals[i].hospital_id: state.hospital_models[i].head for i in head_indices
    }
    return state.current_model, heads, history


def _run_fedavg(
    hospitals: Sequence[HospitalNode],
    model: ModelParams,
    cfg: FederationConfig,
    bus: Bus,
    weighted_by_generalization: bool,
) -> tuple[ModelParams, list[RoundLog]]:
    """FedAvg (and its generalization-weighted variant).

    Plain FedAvg: only the selected C-fraction trains, selection and
    aggregation are both weighted by local data size. The weighted variant
    additionally runs the FUALA permutation-evaluation every round (so all
    hospitals train, keeping every hospital model fresh for evaluation) and
    aggregates the selected updates by their normalized generalization
    scores; round 0 falls back to uniform weights because the scores then
    rate the shared initial model, not any hospital's own update.
    """
    k = len(hospitals)
    sizes = np.array([float(node.n_records) for node in hospitals])
    rng = protocol_rng(cfg.seed)
    models = (model,) * k
    current = model
    history: list[RoundLog] = []
    for t in range(cfg.rounds):
        selected = select_fraction(sizes, cfg.n_selected, rng)
        perm = make_permutation(k, rng) if weighted_by_generalization else None
        train_indices = range(k) if weighted_by_generalization else sorted(selected)
        for i in train_indices:
            bus.send(Message(FEDERATOR_ID, hospitals[i].actor_id, ModelBroadcast(current), t))
        if weighted_by_generalization:
            for node in hospitals:
                owner = int(perm[node.index])
                bus.send(
                    Message(FEDERATOR_ID, node.actor_id, EvalAssignment(owner, models[owner]), t)
                )
        inbox = iter_by_receiver(bus.deliver_all())
        local_losses = np.full(k, np.nan)
        for i in train_indices:
            node = hospitals[i]
            broadcast = next(
                m.payload for m in inbox[node.actor_id] if isinstance(m.payload, ModelBroadcast)
            )
            updated = node.train(broadcast.params, cfg.learner, local_seed(cfg.seed, t, i))
            bus.send(Message(node.actor_id, FEDERATOR_ID, ModelUpdate(updated), t))
            if weighted_by_generalization:
                assignment = next(
                    m.payload for m in inbox[node.actor_id] if isinstance(m.payload, EvalAssignment)
                )
                score = node.evaluate(assignment.params)
                bus.send(
                    Message(node.actor_id, FEDERATOR_ID, EvalReport(assignment.model_owner, score), t)
                )
            local_losses[i] = node.local_loss(updated)

        updates: dict[int, ModelParams] = {}
        a = np.full(k, np.nan)
        for msg in bus.deliver_all():
            sender_index = int(msg.sender[1:])
            if isinstance(msg.payload, ModelUpdate):
                updates[sender_index] = msg.payload.params
            elif isinstance(msg.payload, EvalReport):
                a[msg.payload.model_owner] = msg.payload.score

        chosen = sorted(selected)
        if weighted_by_generalization:
            models = tuple(updates[i] for i in range(k))
            if t == 0 or np.nansum(a[chosen]) == 0:
                agg_weights = np.ones(len(chosen))
            else:
                agg_weights = a[chosen]
        else:
            agg_weights = sizes[chosen]
        current = aggregate_weighted([updates[i] for i in chosen], agg_weights)
        history.append(
            RoundLog(
                round=t,
                gen_scores=a,
                weights_before=sizes,
                selected=selected,
                local_losses=local_losses,
            )
        )
    return current, history


def _run_central(
    hospitals: Sequence[HospitalNode], model: ModelParams, cfg: FederationConfig
) -> tuple[ModelParams, list[RoundLog]]:
    """Pool all training hospitals and run rounds*epochs epochs of SGD.

    Training proceeds in `rounds` blocks of `epochs` epochs, block t drawing
    its shuffles from the round-t seed stream, so a single-hospital federated
    run and its centralized counterpart are bit-identical.
    """
    X = np.concatenate([node._X for node in hospitals])
    y = np.concatenate([node._y for node in hospitals])
    params = model
    history: list[RoundLog] = []
    for t in range(cfg.rounds):
        params = train_epochs(params, (X, y), cfg.learner, local_seed(cfg.seed, t, 0))
        history.append(
            RoundLog(
                round=t,
                gen_scores=np.array([np.nan]),
                weights_before=np.array([np.nan]),
                selected=frozenset(),
                local_losses=np.array([loss(params, (X, y))]),
            )
        )
    return params, history


def run_training(
    algorithm: AlgorithmKind,
    cohort: Sequence[HospitalDataset],
    cfg: FederationConfig,
) -> TrainedResult:
    """Train one algorithm on the given training hospitals; deterministic per config."""
    if not cohort:
        raise ValidationError("no training hospitals")
    if algorithm is not AlgorithmKind.CENTRAL and cfg.n_selected > len(cohort):
        raise ValidationError(
            f"n_selected {cfg.n_selected} exceeds {len(cohort)} hospitals"
        )
    hospitals = [HospitalNode(d, index=i) for i, d in enumerate(cohort)]
    arch = _arch_for(cohort, cfg)
    model = init_model(arch, cfg.learner)
    bus = _make_bus(hospitals, algorithm, cfg.n_selected)

    heads: dict[int, Head] = {}
    if algorithm is AlgorithmKind.FUALA:
        final, heads, history = _run_fuala(hospitals, model, cfg, bus)
    elif algorithm is AlgorithmKind.FEDAVG:
        final, history = _run_fedavg(hospitals, model, cfg, bus, weighted_by_generalization=False)
    elif algorithm is AlgorithmKind.WEIGHTED_FEDAVG:
        final, history = _run_fedavg(hospitals, model, cfg, bus, weighted_by_generalization=True)
    elif algorithm is AlgorithmKind.CENTRAL:
        final, history = _run_central(hospitals, model, cfg)
    else:
        raise ValidationError(f"unknown algorithm {algorithm}")

    expected = expected_messages_per_round(algorithm.value, len(hospitals), cfg.n_selected)
    audit = audit_privacy(bus.log, expected if cfg.rounds > 0 else None)
    if not audit.passed:
        raise ValidationError(f"privacy audit failed: {audit.failures[0]}")

    hospital_ids = tuple(node.hospital_id for node in hospitals)
    return TrainedResult(
        algorithm=algorithm,
        final_model=final,
        hospital_heads=heads,
        history=tuple(history),
        hospital_ids=hospital_ids,
        transport_log=bus.log,
    )


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def write_history_csv(result: TrainedResult, path: str) -> None:
    """One row per (round, hospital): round, hospital_id, a, h, selected, local_loss.

    Centralized history uses hospital_id -1 for the pooled dataset.
    """
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["round", "hospital_id", "a", "h", "selected", "local_loss"])
        for log in result.history:
            if result.algorithm is AlgorithmKind.CENTRAL:
                writer.writerow([log.round, -1, "", "", 0, _fmt(float(log.local_losses[0]))])
                continue
            for k, hospital_id in enumerate(result.hospital_ids):
                writer.writerow(
                    [
                        log.round,
                        hospital_id,
                        _fmt(float(log.gen_scores[k])),
                        _fmt(float(log.weights_before[k])),
                        int(k in log.selected),
                        _fmt(float(log.local_losses[k])),
                    ]
                )


def read_history_csv(path: str) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append(
                {
                    "round": int(row["round"]),
                    "hospital_id": int(row["hospital_id"]),
                    "a": float(row["a"]) if row["a"] else None,
                    "h": float(row["h"]) if row["h"] else None,
                    "selected": bool(int(row["selected"])),
                    "local_loss": float(row["local_loss"]) if row["local_loss"] else None,
                }
            )
    return rows


def save_heads(heads: dict[int, Head], path: str) -> None:
    obj = {
        "schema": HEADS_SCHEMA,
        "heads": {str(k): heads[k].as_flat().tolist() for k in sorted(heads)},
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, separators=(",", ":"))
        fh.write("\n")


def load_heads(path: str) -> dict[int, Head]:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if obj.get("schema") != HEADS_SCHEMA:
        raise ValidationError(
            f"expected schema {HEADS_SCHEMA!r}, got {obj.get('schema')!r} in {path!r}"
        )
    return {int(k): Head.from_flat(flat) for k, flat in obj["heads"].items()}
