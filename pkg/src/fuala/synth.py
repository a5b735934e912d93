"""Synthetic non-i.i.d. multi-hospital cohort generator.

Heterogeneity enters through two knobs. Each hospital draws its own code
distribution pi_h ~ Dirichlet(skew * 1) (smaller ``skew`` = spikier, more
hospital-specific coding), and its own prevalence logit shift ~
Normal(0, prevalence_jitter). A fixed subset of "risk" codes carries the
label signal: a record's positive-label probability is
sigmoid(c + shift_h + risk_effect * n_distinct_risk_codes_present), with the
intercept c calibrated globally so the expected cohort prevalence equals
``base_prevalence``. Positives therefore carry more risk codes, and the
signal is linear in the multi-hot featurization, so the task is learnable by
construction.

Generation consumes a single seeded RNG stream in a fixed order, so a config
maps to exactly one cohort, byte-for-byte.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Encounter, HospitalDataset, PatientRecord
from .errors import NumericalError, ValidationError
from .learner import sigmoid

# Class-conditional age distributions (mean, std), clipped to [12, 60] years.
AGE_FULL_TERM = (28.4, 5.7)
AGE_PRETERM = (29.2, 5.9)

_OFFSET_SPAN = 270 - 90 + 1


@dataclass(frozen=True)
class SynthConfig:
    n_hospitals: int = 50
    records_per_hospital: tuple[int, int] = (500, 700)
    vocab_size: int = 512
    n_risk_codes: int = 20
    skew: float = 0.05
    base_prevalence: float = 0.076
    prevalence_jitter: float = 0.5
    encounters_per_record: tuple[int, int] = (1, 12)
    codes_per_encounter: tuple[int, int] = (2, 8)
    risk_effect: float = 1.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_hospitals < 1:
            raise ValidationError(f"n_hospitals must be >= 1, got {self.n_hospitals}")
        if self.n_risk_codes >= self.vocab_size or self.n_risk_codes < 1:
            raise ValidationError(
                f"n_risk_codes must be in [1, vocab_size), got {self.n_risk_codes}"
            )
        if not (0.0 < self.base_prevalence < 1.0):
            raise ValidationError(
                f"base_prevalence must be in (0, 1), got {self.base_prevalence}"
            )
        if self.skew <= 0:
            raise ValidationError(f"skew must be > 0, got {self.skew}")
        if self.prevalence_jitter < 0:
            raise ValidationError(
                f"prevalence_jitter must be >= 0, got {self.prevalence_jitter}"
            )
        for name, (lo, hi) in (
            ("records_per_hospital", self.records_per_hospital),
            ("encounters_per_record", self.encounters_per_record),
            ("codes_per_encounter", self.codes_per_encounter),
        ):
            if lo < 1 or hi < lo:
                raise ValidationError(f"{name} range ({lo}, {hi}) is infeasible")
        if self.encounters_per_record[1] > _OFFSET_SPAN:
            raise ValidationError(
                f"encounters_per_record max {self.encounters_per_record[1]} exceeds "
                f"the {_OFFSET_SPAN}-day history window"
            )


def _calibrate_intercept(logit_terms: np.ndarray, target: float) -> float:
    """Bisect for c with mean(sigmoid(c + terms)) == target."""
    lo, hi = -40.0, 40.0
    for _ in range(200):
        mid = (lo + hi) / 2.0
        if float(np.mean(sigmoid(mid + logit_terms))) < target:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2.0


def generate_cohort(cfg: SynthConfig) -> list[HospitalDataset]:
    """Draw a full cohort; deterministic per ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    v = cfg.vocab_size
    risk_codes = np.sort(rng.choice(v, size=cfg.n_risk_codes, replace=False))
    risk_mask = np.zeros(v, dtype=bool)
    risk_mask[risk_codes] = True
    alpha = np.full(v, cfg.skew, dtype=np.float64)

    # Pass 1: per-hospital structure (code distribution, encounters, tokens).
    structures = []
    for h in range(cfg.n_hospitals):
        pi = rng.dirichlet(alpha)
        if not np.isfinite(pi).all() or pi.sum() <= 0:
            raise NumericalError(f"dirichlet draw degenerate at skew {cfg.skew}")
        shift = float(rng.normal(0.0, cfg.prevalence_jitter))
        lo, hi = cfg.records_per_hospital
        n_rec = int(rng.integers(lo, hi + 1))
        e_lo, e_hi = cfg.encounters_per_record
        n_enc = rng.integers(e_lo, e_hi + 1, size=n_rec)
        offsets = [
            np.sort(rng.choice(_OFFSET_SPAN, size=k, replace=False))[::-1] + 90
            for k in n_enc
        ]
        c_lo, c_hi = cfg.codes_per_encounter
        n_codes = rng.integers(c_lo, c_hi + 1, size=int(n_enc.sum()))
        tokens = rng.choice(v, size=int(n_codes.sum()), p=pi)

        rec_of_enc = np.repeat(np.arange(n_rec), n_enc)
        rec_of_token = np.repeat(rec_of_enc, n_codes)
        risky = risk_mask[tokens]
        # distinct (record, risk code) pairs -> distinct risk codes per record
        pair_keys = np.unique(rec_of_token[risky] * v + tokens[risky])
        risk_counts = np.bincount(pair_keys // v, minlength=n_rec)
        structures.append((shift, n_enc, offsets, n_codes, tokens, risk_counts))

    # Pass 2: calibrate the intercept over the whole cohort, then draw labels.
    logit_terms = np.concatenate(
        [s[0] + cfg.risk_effect * s[5] for s in structures]
    ).astype(np.float64)
    intercept = _calibrate_intercept(logit_terms, cfg.base_prevalence)
    probs = sigmoid(intercept + logit_terms)
    labels = (rng.random(len(probs)) < probs).astype(np.int64)

    # Pass 3: ages, class-conditional.
    z = rng.normal(size=len(labels))
    mean = np.where(labels == 1, AGE_PRETERM[0], AGE_FULL_TERM[0])
    std = np.where(labels == 1, AGE_PRETERM[1], AGE_FULL_TERM[1])
    ages = np.clip(np.rint(mean + std * z), 12, 60).astype(np.int64)

    # Assemble records.
    cohort = []
    pos = 0
    for h, (shift, n_enc, offsets, n_codes, tokens, _) in enumerate(structures):
        records = []
        enc_start = 0
        tok_start = 0
        for i in range(len(n_enc)):
            encounters = []
            for e in range(int(n_enc[i])):
                k = int(n_codes[enc_start + e])
                encounters.append(
                    Encounter(
                        time_offset=int(offsets[i][e]),
                        codes=tuple(int(t) for t in tokens[tok_start : tok_start + k]),
                    )
                )
                tok_start += k
            enc_start += int(n_enc[i])
            records.append(
                PatientRecord(
                    id=f"h{h:03d}-r{i:05d}",
                    encounters=tuple(encounters),
                    label=int(labels[pos]),
                    age=int(ages[pos]),
                )
            )
            pos += 1
        cohort.append(
            HospitalDataset(hospital_id=h, records=tuple(records), vocab_size=v)
        )
    return cohort


@dataclass(frozen=True)
class CohortStats:
    n_hospitals: int
    n_records: int
    n_preterm: int
    prevalence: float
    mean_encounters: float
    mean_encounters_full_term: float
    mean_encounters_preterm: float
    mean_age_full_term: float
    mean_age_preterm: float

    def summary(self) -> str:
        return (
            f"hospitals={self.n_hospitals} records={self.n_records} "
            f"preterm={self.n_preterm} prevalence={self.prevalence:.4f}\n"
            f"mean encounters: all={self.mean_encounters:.2f} "
            f"full-term={self.mean_encounters_full_term:.2f} "
            f"preterm={self.mean_encounters_preterm:.2f}\n"
            f"mean age: full-term={self.mean_age_full_term:.1f} "
            f"preterm={self.mean_age_preterm:.1f}"
        )


def cohort_stats(cohort: Sequence[HospitalDataset]) -> CohortStats:
    """Exact summary arithmetic over a cohort."""
    if not cohort:
        raise ValidationError("empty cohort")
    labels = np.array([r.label for h in cohort for r in h.records])
    encs = np.array([len(r.encounters) for h in cohort for r in h.records])
    ages = np.array([r.age for h in cohort for r in h.records])
    pos = labels == 1
    n = len(labels)

    def _mean(x: np.ndarray) -> float:
        return float(np.mean(x)) if len(x) else float("nan")

    return CohortStats(
        n_hospitals=len(cohort),
        n_records=n,
        n_preterm=int(pos.sum()),
        prevalence=float(pos.sum() / n),
        mean_encounters=_mean(encs),
        mean_encounters_full_term=_mean(encs[~pos]),
        mean_encounters_preterm=_mean(encs[pos]),
        mean_age_full_term=_mean(ages[~pos]),
        mean_age_preterm=_mean(ages[pos]),
    )


def code_histogram(hospital: HospitalDataset) -> np.ndarray:
    """Empirical token distribution over the vocabulary (sums to 1)."""
    counts = np.zeros(hospital.vocab_size, dtype=np.float64)
    for rec in hospital.records:
        for code in rec.all_codes():
            counts[code] += 1.0
    return counts / counts.sum()


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def mean_pairwise_tv(cohort: Sequence[HospitalDataset]) -> float:
    """Mean total-variation distance between all hospital code histograms."""
    hists = [code_histogram(h) for h in cohort]
    dists = [
        total_variation(hists[i], hists[j])
        for i in range(len(hists))
        for j in range(i + 1, len(hists))
    ]
    return float(np.mean(dists)) if dists else 0.0
