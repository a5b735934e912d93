"""Clinical-style data model, cohort file I/O, featurization, and splitting.

Clinical codes are abstract non-negative integer tokens in ``[0, vocab_size)``;
the protocol never inspects code semantics. A cohort is stored as UTF-8 JSON
Lines: a header object ``{"schema": "fuala-cohort/1", "vocab_size": V,
"n_hospitals": K}`` followed by one record object per line with keys in fixed
order (``hospital_id``, ``id``, ``age``, ``label``, ``encounters``). Files are
ASCII, LF-terminated, and byte-reproducible for a given cohort.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError

COHORT_SCHEMA = "fuala-cohort/1"

# Encounter history window, in days before the delivery anchor.
MIN_TIME_OFFSET = 90
MAX_TIME_OFFSET = 270

MIN_AGE = 12
MAX_AGE = 60


@dataclass(frozen=True)
class Encounter:
    """One coded visit at ``time_offset`` days before the anchor."""

    time_offset: int
    codes: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "codes", tuple(int(c) for c in self.codes))
        if not (MIN_TIME_OFFSET <= self.time_offset <= MAX_TIME_OFFSET):
            raise ValidationError(
                f"encounter time_offset {self.time_offset} outside "
                f"[{MIN_TIME_OFFSET}, {MAX_TIME_OFFSET}]"
            )
        if not self.codes:
            raise ValidationError("encounter has no codes")
        if any(c < 0 for c in self.codes):
            raise ValidationError("encounter contains a negative code")


@dataclass(frozen=True)
class PatientRecord:
    """A labeled encounter sequence; the unit of hospital-local data.

    Encounters are ordered by non-increasing ``time_offset`` (oldest first,
    approaching the anchor). ``label`` is 1 for the positive (preterm) class.
    """

    id: str
    encounters: tuple[Encounter, ...]
    label: int
    age: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "encounters", tuple(self.encounters))
        if not self.encounters:
            raise ValidationError(f"record {self.id!r} has no encounters")
        offsets = [e.time_offset for e in self.encounters]
        if any(a < b for a, b in zip(offsets, offsets[1:])):
            raise ValidationError(
                f"record {self.id!r} encounters not ordered by decreasing time_offset"
            )
        if self.label not in (0, 1):
            raise ValidationError(f"record {self.id!r} has label {self.label}, expected 0 or 1")
        if not (MIN_AGE <= self.age <= MAX_AGE):
            raise ValidationError(
                f"record {self.id!r} has age {self.age} outside [{MIN_AGE}, {MAX_AGE}]"
            )

    def all_codes(self) -> tuple[int, ...]:
        return tuple(c for e in self.encounters for c in e.codes)


@dataclass(frozen=True)
class HospitalDataset:
    """All records held by one hospital, plus the shared code vocabulary size."""

    hospital_id: int
    records: tuple[PatientRecord, ...]
    vocab_size: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))
        if self.hospital_id < 0:
            raise ValidationError(f"hospital_id {self.hospital_id} is negative")
        if not self.records:
            raise ValidationError(f"hospital {self.hospital_id} has no records")
        if self.vocab_size <= 0:
            raise ValidationError(f"vocab_size must be positive, got {self.vocab_size}")
        for rec in self.records:
            bad = [c for c in rec.all_codes() if c >= self.vocab_size]
            if bad:
                raise ValidationError(
                    f"record {rec.id!r} has code {bad[0]} >= vocab_size {self.vocab_size}"
                )

    @property
    def n_records(self) -> int:
        return len(self.records)

    @property
    def prevalence(self) -> float:
        return sum(r.label for r in self.records) / len(self.records)


@dataclass(frozen=True)
class FeatureVector:
    """Multi-hot code presence over the vocabulary, with the record's label."""

    values: np.ndarray
    label: int

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        if values.ndim != 1:
            raise ValidationError("feature vector must be one-dimensional")
        if not values.any():
            raise ValidationError("feature vector has no nonzero component")


def featurize(record: PatientRecord, vocab_size: int) -> FeatureVector:
    """Bag-of-codes featurization: component j is 1 iff code j occurs anywhere.

    Duplicate codes collapse to the same component, so the result is invariant
    to code multiplicity.
    """
    values = np.zeros(vocab_size, dtype=np.float64)
    for code in record.all_codes():
        if code >= vocab_size:
            raise ValidationError(
                f"record {record.id!r} has code {code} >= vocab_size {vocab_size}"
            )
        values[code] = 1.0
    return FeatureVector(values=values, label=record.label)


def featurize_all(
    records: Sequence[PatientRecord], vocab_size: int
) -> tuple[np.ndarray, np.ndarray]:
    """Stack featurized records into an (n, vocab_size) matrix and label vector."""
    X = np.zeros((len(records), vocab_size), dtype=np.float64)
    y = np.zeros(len(records), dtype=np.float64)
    for i, rec in enumerate(records):
        for code in rec.all_codes():
            if code >= vocab_size:
                raise ValidationError(
                    f"record {rec.id!r} has code {code} >= vocab_size {vocab_size}"
                )
            X[i, code] = 1.0
        y[i] = rec.label
    return X, y


def _record_to_obj(hospital_id: int, rec: PatientRecord) -> dict:
    return {
        "hospital_id": hospital_id,
        "id": rec.id,
        "age": rec.age,
        "label": rec.label,
        "encounters": [{"t": e.time_offset, "codes": list(e.codes)} for e in rec.encounters],
    }


def save_cohort(cohort: Sequence[HospitalDataset], path: str) -> None:
    """Write a cohort as canonical JSON Lines (fixed key order, ASCII, LF)."""
    if not cohort:
        raise ValidationError("cannot save an empty cohort")
    vocab_size = cohort[0].vocab_size
    for h in cohort:
        if h.vocab_size != vocab_size:
            raise ValidationError("all hospitals must share one vocab_size")
    header = {"schema": COHORT_SCHEMA, "vocab_size": vocab_size, "n_hospitals": len(cohort)}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, separators=(",", ":"), ensure_ascii=True) + "\n")
        for hospital in cohort:
            for rec in hospital.records:
                obj = _record_to_obj(hospital.hospital_id, rec)
                fh.write(json.dumps(obj, separators=(",", ":"), ensure_ascii=True) + "\n")


def _parse_line(text: str, lineno: int) -> dict:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
    if not isinstance(obj, dict):
        raise ValidationError(f"line {lineno}: expected a JSON object")
    return obj


def load_cohort(path: str) -> list[HospitalDataset]:
    """Read a cohort file, validating every record against the type invariants.

    Hospital ids must be contiguous from 0 and match the header's
    ``n_hospitals``; the returned list is ordered by hospital id.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValidationError(f"cohort file {path!r} is empty")

    header = _parse_line(lines[0], 1)
    if header.get("schema") != COHORT_SCHEMA:
        raise ValidationError(
            f"line 1: expected schema {COHORT_SCHEMA!r}, got {header.get('schema')!r}"
        )
    try:
        vocab_size = int(header["vocab_size"])
        n_hospitals = int(header["n_hospitals"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"line 1: header missing vocab_size/n_hospitals") from exc

    by_hospital: dict[int, list[PatientRecord]] = {}
    for lineno, text in enumerate(lines[1:], start=2):
        if not text.strip():
            raise ValidationError(f"line {lineno}: blank line in cohort file")
        obj = _parse_line(text, lineno)
        try:
            hospital_id = int(obj["hospital_id"])
            encounters = tuple(
                Encounter(time_offset=int(e["t"]), codes=tuple(e["codes"]))
                for e in obj["encounters"]
            )
            record = PatientRecord(
                id=str(obj["id"]),
                encounters=encounters,
                label=int(obj["label"]),
                age=int(obj["age"]),
            )
        except ValidationError as exc:
            raise ValidationError(f"line {lineno}: {exc}") from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"line {lineno}: malformed record object ({exc})") from exc
        by_hospital.setdefault(hospital_id, []).append(record)

    if sorted(by_hospital) != list(range(n_hospitals)):
        raise ValidationError(
            f"hospital ids {sorted(by_hospital)} are not contiguous 0..{n_hospitals - 1}"
        )
    return [
        HospitalDataset(hospital_id=h, records=tuple(by_hospital[h]), vocab_size=vocab_size)
        for h in range(n_hospitals)
    ]


def split_hospitals(
    cohort: Sequence[HospitalDataset], n_test: int, seed: int | Sequence[int]
) -> tuple[list[HospitalDataset], list[HospitalDataset]]:
    """Uniformly select ``n_test`` held-out hospitals; deterministic per seed."""
    if not (0 < n_test < len(cohort)):
        raise ValidationError(
            f"n_test must be in (0, {len(cohort)}), got {n_test}"
        )
    rng = np.random.default_rng(seed)
    test_ids = set(rng.choice(len(cohort), size=n_test, replace=False).tolist())
    train = [h for i, h in enumerate(cohort) if i not in test_ids]
    test = [h for i, h in enumerate(cohort) if i in test_ids]
    return train, test


def pooled_records(cohort: Iterable[HospitalDataset]) -> list[PatientRecord]:
    """All records of the given hospitals, in hospital order."""
    return [rec for hospital in cohort for rec in hospital.records]
