"""Typed in-memory message transport between the Federator and hospitals.

The payload union is closed: the only things that can cross the wire are
model parameters and scalar evaluation reports. Patient records and feature
vectors are unrepresentable in any payload variant, which makes the privacy
boundary structural; `Bus.send` re-asserts it at runtime and `audit_privacy`
re-checks the complete log after the fact.

Delivery is synchronous and lockstep: messages are FIFO per (sender,
receiver) pair, and `deliver_all` drains everything pending in deterministic
(round, sender, receiver) order.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

from .data import FeatureVector, HospitalDataset, PatientRecord
from .errors import TransportError
from .learner import ModelParams

_FLOAT_BYTES = 8


@dataclass(frozen=True)
class ModelBroadcast:
    """Federator -> hospital: the current average model."""

    params: ModelParams


@dataclass(frozen=True)
class EvalAssignment:
    """Federator -> hospital: another hospital's model to evaluate locally."""

    model_owner: int
    params: ModelParams


@dataclass(frozen=True)
class ModelUpdate:
    """Hospital -> Federator: locally trained parameters."""

    params: ModelParams


@dataclass(frozen=True)
class EvalReport:
    """Hospital -> Federator: generalization score for the assigned model."""

    model_owner: int
    score: float


@dataclass(frozen=True)
class WeightsNotice:
    """Federator -> hospital: optional scalar diagnostics."""

    diagnostics: tuple[float, ...] = ()


Payload = ModelBroadcast | EvalAssignment | ModelUpdate | EvalReport | WeightsNotice
PAYLOAD_TYPES = (ModelBroadcast, EvalAssignment, ModelUpdate, EvalReport, WeightsNotice)
_FORBIDDEN = (PatientRecord, FeatureVector, HospitalDataset)


def payload_kind(payload: Payload) -> str:
    return type(payload).__name__


def payload_nbytes(payload: Payload) -> int:
    """Deterministic wire-size accounting: 8 bytes per float or id."""
    if isinstance(payload, (ModelBroadcast, ModelUpdate)):
        return payload.params.arch.n_params * _FLOAT_BYTES
    if isinstance(payload, EvalAssignment):
        return payload.params.arch.n_params * _FLOAT_BYTES + _FLOAT_BYTES
    if isinstance(payload, EvalReport):
        return 2 * _FLOAT_BYTES
    if isinstance(payload, WeightsNotice):
        return len(payload.diagnostics) * _FLOAT_BYTES
    raise TransportError(f"unknown payload type {type(payload).__name__}")


@dataclass(frozen=True)
class Message:
    sender: str
    receiver: str
    payload: Payload
    round: int


@dataclass(frozen=True)
class LogEntry:
    round: int
    sender: str
    receiver: str
    kind: str
    nbytes: int


@dataclass
class TransportLog:
    """Append-only record of every message accepted by the bus."""

    entries: list[LogEntry] = field(default_factory=list)
    metadata: dict[str, int | str] = field(default_factory=dict)

    def append(self, entry: LogEntry) -> None:
        self.entries.append(entry)

    def rounds(self) -> list[int]:
        return sorted({e.round for e in self.entries})

    def count_per_round(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for e in self.entries:
            counts[e.round] = counts.get(e.round, 0) + 1
        return counts

    def bytes_per_round(self) -> dict[int, int]:
        totals: dict[int, int] = {}
        for e in self.entries:
            totals[e.round] = totals.get(e.round, 0) + e.nbytes
        return totals


def write_transport_csv(log: TransportLog, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["round", "from", "to", "kind", "bytes"])
        for e in log.entries:
            writer.writerow([e.round, e.sender, e.receiver, e.kind, e.nbytes])


def _assert_clean(payload: Payload) -> None:
    if not isinstance(payload, PAYLOAD_TYPES):
        raise TransportError(
            f"payload type {type(payload).__name__} is not a transport variant"
        )
    for value in vars(payload).values():
        if isinstance(value, _FORBIDDEN):
            raise TransportError(
                f"payload field of type {type(value).__name__} would leak local data"
            )
        if isinstance(value, (list, tuple, set)) and any(
            isinstance(item, _FORBIDDEN) for item in value
        ):
            raise TransportError("payload container would leak local data")


class Bus:
    """Shared channel between one Federator and its hospitals."""

    def __init__(self) -> None:
        self._actors: set[str] = set()
        self._queues: dict[tuple[str, str], deque[Message]] = {}
        self.log = TransportLog()

    def register(self, actor_id: str) -> None:
        self._actors.add(actor_id)

    def send(self, msg: Message) -> None:
        if msg.sender not in self._actors:
            raise TransportError(f"unknown sender {msg.sender!r}")
        if msg.receiver not in self._actors:
            raise TransportError(f"unknown receiver {msg.receiver!r}")
        _assert_clean(msg.payload)
        self._queues.setdefault((msg.sender, msg.receiver), deque()).append(msg)
        self.log.append(
            LogEntry(
                round=msg.round,
                sender=msg.sender,
                receiver=msg.receiver,
                kind=payload_kind(msg.payload),
                nbytes=payload_nbytes(msg.payload),
            )
        )

    def deliver_all(self) -> list[Message]:
        """Flush every pending message in (round, sender, receiver) order."""
        delivered: list[Message] = []
        for key in sorted(self._queues):
            delivered.extend(self._queues[key])
            self._queues[key].clear()
        delivered.sort(key=lambda m: m.round)  # stable: FIFO within a pair
        return delivered


@dataclass(frozen=True)
class AuditResult:
    passed: bool
    failures: tuple[str, ...]

    def __bool__(self) -> bool:
        return self.passed


def audit_privacy(log: TransportLog, messages_per_round: int | None = None) -> AuditResult:
    """Check payload-kind closure and, optionally, the per-round message count.

    For FUALA every round carries 2K downlink (broadcast + assignment) plus 2K
    uplink (update + report) messages, so callers pass ``messages_per_round=4K``;
    FedAvg rounds carry ``2C``.
    """
    failures: list[str] = []
    allowed = {t.__name__ for t in PAYLOAD_TYPES}
    for e in log.entries:
        if e.kind not in allowed:
            failures.append(f"round {e.round}: forbidden payload kind {e.kind!r}")
    if messages_per_round is not None:
        for rnd, count in sorted(log.count_per_round().items()):
            if count != messages_per_round:
                failures.append(
                    f"round {rnd}: expected {messages_per_round} messages, saw {count}"
                )
    return AuditResult(passed=not failures, failures=tuple(failures))


def read_transport_csv(path: str) -> TransportLog:
    log = TransportLog()
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            log.append(
                LogEntry(
                    round=int(row["round"]),
                    sender=row["from"],
                    receiver=row["to"],
                    kind=row["kind"],
                    nbytes=int(row["bytes"]),
                )
            )
    return log


def expected_messages_per_round(algorithm: str, n_hospitals: int, n_selected: int) -> int | None:
    """Per-round message count implied by each algorithm's wire pattern."""
    if algorithm in ("fuala", "weighted_fedavg"):
        return 4 * n_hospitals
    if algorithm == "fedavg":
        return 2 * n_selected
    if algorithm == "central":
        return 0
    return None


def iter_by_receiver(messages: Iterable[Message]) -> dict[str, list[Message]]:
    inbox: dict[str, list[Message]] = {}
    for msg in messages:
        inbox.setdefault(msg.receiver, []).append(msg)
    return inbox
