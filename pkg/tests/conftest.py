import numpy as np
import pytest

from fuala.data import Encounter, HospitalDataset, PatientRecord


def make_record(rec_id: str, codes_by_encounter, label: int = 0, age: int = 30) -> PatientRecord:
    encounters = tuple(
        Encounter(time_offset=260 - 10 * i, codes=tuple(codes))
        for i, codes in enumerate(codes_by_encounter)
    )
    return PatientRecord(id=rec_id, encounters=encounters, label=label, age=age)


def make_hospital(hospital_id: int, n_records: int, vocab_size: int, seed: int) -> HospitalDataset:
    """Small random hospital with both classes present."""
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_records):
        n_enc = int(rng.integers(1, 4))
        codes_by_encounter = [
            rng.integers(0, vocab_size, size=rng.integers(1, 5)).tolist()
            for _ in range(n_enc)
        ]
        label = int(i % 3 == 0)
        records.append(
            make_record(f"h{hospital_id}-r{i}", codes_by_encounter, label=label,
                        age=int(rng.integers(18, 45)))
        )
    return HospitalDataset(hospital_id=hospital_id, records=tuple(records), vocab_size=vocab_size)


@pytest.fixture
def tiny_cohort():
    return [make_hospital(h, 24, vocab_size=16, seed=100 + h) for h in range(4)]
