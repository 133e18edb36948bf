"""Synthetic EHR-like cohort generation and dataset serialization.

A cohort is a set of patients, each carrying four aligned token sequences
(clinical codes, age bins, visit segments, visit positions) plus a binary
label meaning "the target condition occurs in the six months after the
history cutoff". Labels are produced by a known generative process: a
small set of planted risk codes drives a logistic label probability in
the patient's risk-code count, so a Bayes-optimal classifier exists and
separability is controlled by the config.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ParseError, ValidationError

MAX_SEQUENCE_LENGTH = 256
N_AGE_BINS = 111  # integer years 0..110

SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]")

# Steepness of the logistic mapping risk-code count -> label probability.
# Moderate slope keeps an ambiguous band of counts so label noise is
# controllable through the count overlap between noisy and clean patients.
_LABEL_SLOPE = 1.6


@dataclass(frozen=True)
class Vocabulary:
    """Token universe for a cohort.

    Code tokens and special tokens share one id space (PAD is id 0,
    special tokens come first); age bins form their own id space of
    integer years 0..110.
    """

    code_tokens: tuple[str, ...]
    special_tokens: tuple[str, ...] = SPECIAL_TOKENS
    n_age_bins: int = N_AGE_BINS

    def __post_init__(self):
        all_tokens = self.special_tokens + self.code_tokens
        if len(set(all_tokens)) != len(all_tokens):
            raise ValidationError("vocabulary tokens are not unique")
        if set(self.special_tokens) & set(self.code_tokens):
            raise ValidationError("special tokens overlap code tokens")

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def cls_id(self) -> int:
        return self.special_tokens.index("[CLS]")

    @property
    def sep_id(self) -> int:
        return self.special_tokens.index("[SEP]")

    @property
    def mask_id(self) -> int:
        return self.special_tokens.index("[MASK]")

    @property
    def size(self) -> int:
        return len(self.special_tokens) + len(self.code_tokens)

    def token_to_id(self, token: str) -> int:
        try:
            return self.special_tokens.index(token)
        except ValueError:
            return len(self.special_tokens) + self.code_tokens.index(token)

    def id_to_token(self, token_id: int) -> str:
        n_special = len(self.special_tokens)
        if 0 <= token_id < n_special:
            return self.special_tokens[token_id]
        if token_id < self.size:
            return self.code_tokens[token_id - n_special]
        raise ValidationError(f"token id {token_id} out of range")

    def code_id(self, code_token: str) -> int:
        return len(self.special_tokens) + self.code_tokens.index(code_token)

    @property
    def code_id_range(self) -> tuple[int, int]:
        """Half-open id range [lo, hi) covered by code tokens."""
        return len(self.special_tokens), self.size


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    codes: tuple[int, ...]
    ages: tuple[int, ...]
    segments: tuple[int, ...]
    positions: tuple[int, ...]
    label: int
    split: str


@dataclass(frozen=True)
class CohortConfig:
    n_patients: int = 2000
    positive_rate: float = 0.083
    n_codes: int = 100
    n_risk_codes: int = 4
    visits_per_patient: tuple[int, int] = (2, 6)
    codes_per_visit: tuple[int, int] = (1, 4)
    noise_rate: float = 0.05
    seed: int = 0


def validate_config(config: CohortConfig) -> None:
    if config.n_patients < 1:
        raise ConfigurationError("n_patients must be positive")
    if not (0.0 < config.positive_rate < 1.0):
        raise ConfigurationError("positive_rate must lie in (0, 1)")
    if config.n_codes < 2:
        raise ConfigurationError("n_codes must be at least 2")
    if not (0 < config.n_risk_codes < config.n_codes):
        raise ConfigurationError("n_risk_codes must satisfy 0 < n_risk_codes < n_codes")
    for name in ("visits_per_patient", "codes_per_visit"):
        lo, hi = getattr(config, name)
        if lo < 1 or hi < lo:
            raise ConfigurationError(f"{name} range ({lo}, {hi}) is empty or invalid")
    if not (0.0 <= config.noise_rate <= 1.0):
        raise ConfigurationError("noise_rate must lie in [0, 1]")


def validate_record(record: PatientRecord, vocabulary: Vocabulary) -> None:
    """Check the structural invariants every record must satisfy."""
    n = len(record.codes)
    if not (len(record.ages) == len(record.segments) == len(record.positions) == n):
        raise ValidationError("sequence fields have unequal lengths", record.patient_id)
    if n == 0 or n > MAX_SEQUENCE_LENGTH:
        raise ValidationError(
            f"sequence length {n} outside 1..{MAX_SEQUENCE_LENGTH}", record.patient_id
        )
    if record.codes[0] != vocabulary.cls_id:
        raise ValidationError("sequence does not begin with CLS", record.patient_id)
    if any(p2 < p1 for p1, p2 in zip(record.positions, record.positions[1:])):
        raise ValidationError("positions are not non-decreasing", record.patient_id)
    if any(not (0 <= c < vocabulary.size) for c in record.codes):
        raise ValidationError("code id out of vocabulary range", record.patient_id)
    if any(not (0 <= a < vocabulary.n_age_bins) for a in record.ages):
        raise ValidationError("age bin out of range", record.patient_id)
    if any(s not in (0, 1) for s in record.segments):
        raise ValidationError("segment outside {0, 1}", record.patient_id)
    if record.label not in (0, 1):
        raise ValidationError("label outside {0, 1}", record.patient_id)
    if record.split not in ("train", "validation"):
        raise ValidationError(f"unknown split {record.split!r}", record.patient_id)


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _label_probability(count: int, offset: float) -> float:
    # Zero risk exposure can never convert; among exposed patients the
    # conversion probability is logistic in the risk-code count.
    if count == 0:
        return 0.0
    return _sigmoid(_LABEL_SLOPE * (count - offset))


def _calibrate_offset(counts: np.ndarray, target_rate: float) -> float:
    """Bisect the logistic offset so the mean label probability hits the
    target positive rate. The mean is strictly decreasing in the offset."""
    values, multiplicity = np.unique(counts, return_counts=True)
    exposed = values > 0
    values = values[exposed].astype(np.float64)
    weight = multiplicity[exposed] / counts.size
    if float(weight.sum()) < target_rate:
        raise ConfigurationError(
            "positive_rate unreachable: too few patients carry risk codes "
            "(raise noise_rate, visits_per_patient or codes_per_visit)"
        )

    def mean_prob(offset: float) -> float:
        z = np.clip(_LABEL_SLOPE * (values - offset), -500.0, 500.0)
        return float(np.sum(weight / (1.0 + np.exp(-z))))

    lo, hi = -40.0, float(counts.max(initial=0)) + 40.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if mean_prob(mid) > target_rate:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _patient_slots(rng: np.random.Generator, config: CohortConfig) -> list[int]:
    v_lo, v_hi = config.visits_per_patient
    c_lo, c_hi = config.codes_per_visit
    n_visits = int(rng.integers(v_lo, v_hi + 1))
    return [int(rng.integers(c_lo, c_hi + 1)) for _ in range(n_visits)]


def _draw_codes(
    rng: np.random.Generator,
    slots_per_visit: list[int],
    risk_slot_prob: float,
    n_codes: int,
    n_risk: int,
) -> list[list[int]]:
    """Draw code indices (0-based within the code vocabulary) per visit."""
    visits = []
    for n_slots in slots_per_visit:
        visit = []
        for _ in range(n_slots):
            if risk_slot_prob > 0.0 and rng.random() < risk_slot_prob:
                visit.append(int(rng.integers(0, n_risk)))
            else:
                visit.append(int(rng.integers(n_risk, n_codes)))
        visits.append(visit)
    return visits


def _assemble_record(
    patient_id: str,
    visits: list[list[int]],
    start_age: int,
    visit_age_gaps: list[int],
    label: int,
    split: str,
    vocabulary: Vocabulary,
) -> PatientRecord:
    """Lay out [CLS] v1... [SEP] v2... [SEP] with aligned feature rows.

    If the assembled sequence would exceed the length cap, the oldest
    visits are dropped so the most recent history is kept.
    """
    code_base, _ = vocabulary.code_id_range
    ages = []
    age = start_age
    for gap in visit_age_gaps:
        age = min(age + gap, N_AGE_BINS - 1)
        ages.append(age)

    while True:
        length = 1 + sum(len(v) + 1 for v in visits)
        if length <= MAX_SEQUENCE_LENGTH or len(visits) == 1:
            break
        visits = visits[1:]
        ages = ages[1:]

    codes = [vocabulary.cls_id]
    age_row = [ages[0]]
    segments = [0]
    positions = [0]
    for v_index, (visit, visit_age) in enumerate(zip(visits, ages), start=1):
        seg = v_index % 2
        for code in visit:
            codes.append(code_base + code)
            age_row.append(visit_age)
            segments.append(seg)
            positions.append(v_index)
        codes.append(vocabulary.sep_id)
        age_row.append(visit_age)
        segments.append(seg)
        positions.append(v_index)

    return PatientRecord(
        patient_id=patient_id,
        codes=tuple(codes[:MAX_SEQUENCE_LENGTH]),
        ages=tuple(age_row[:MAX_SEQUENCE_LENGTH]),
        segments=tuple(segments[:MAX_SEQUENCE_LENGTH]),
        positions=tuple(positions[:MAX_SEQUENCE_LENGTH]),
        label=label,
        split=split,
    )


def generate_cohort(config: CohortConfig) -> tuple[Vocabulary, list[PatientRecord]]:
    """Generate a deterministic synthetic cohort.

    Each patient's content is a pure function of (seed, patient index),
    so generation is order-independent and parallelizable. Labels are
    drawn from a logistic function of the patient's risk-code count,
    with the logistic offset calibrated so the mean label probability
    equals the configured positive rate.
    """
    validate_config(config)
    vocabulary = Vocabulary(
        code_tokens=tuple(f"C{i:04d}" for i in range(config.n_codes))
    )
    n_risk = config.n_risk_codes
    intent_rate = min(0.95, config.positive_rate * 1.35)

    visits_per_patient: list[list[list[int]]] = []
    counts = np.zeros(config.n_patients, dtype=np.int64)
    meta: list[tuple[int, list[int]]] = []
    for i in range(config.n_patients):
        rng = np.random.default_rng([config.seed, i])
        slots = _patient_slots(rng, config)
        intended_positive = rng.random() < intent_rate
        if intended_positive:
            risk_prob = rng.uniform(0.45, 0.85)
        elif config.noise_rate > 0.0 and rng.random() < config.noise_rate:
            risk_prob = rng.uniform(0.10, 0.45)
        else:
            risk_prob = 0.0
        visits = _draw_codes(rng, slots, risk_prob, config.n_codes, n_risk)
        start_age = int(rng.integers(18, 86))
        gaps = [int(rng.integers(0, 3)) for _ in slots]
        visits_per_patient.append(visits)
        counts[i] = sum(1 for visit in visits for c in visit if c < n_risk)
        meta.append((start_age, gaps))

    offset = _calibrate_offset(counts, config.positive_rate)

    records = []
    for i, visits in enumerate(visits_per_patient):
        label_rng = np.random.default_rng([config.seed, 7, i])
        split_rng = np.random.default_rng([config.seed, 11, i])
        p = _label_probability(int(counts[i]), offset)
        label = int(label_rng.random() < p)
        split = "train" if split_rng.random() < 0.7 else "validation"
        start_age, gaps = meta[i]
        record = _assemble_record(
            f"P{i:07d}", visits, start_age, gaps, label, split, vocabulary
        )
        validate_record(record, vocabulary)
        records.append(record)
    return vocabulary, records


def risk_code_ids(vocabulary: Vocabulary, config: CohortConfig) -> tuple[int, ...]:
    """Token ids of the planted risk codes (the first codes in the vocabulary)."""
    base, _ = vocabulary.code_id_range
    return tuple(base + i for i in range(config.n_risk_codes))


# --------------------------------------------------------------------------
# Serialization: one JSON object per record line, vocabulary in a sibling
# header file. Streamable and diff-friendly.
# --------------------------------------------------------------------------

VOCABULARY_FILENAME = "vocabulary.json"
RECORDS_FILENAME = "records.jsonl"


def write_dataset(path: str, vocabulary: Vocabulary, records: list[PatientRecord]) -> None:
    os.makedirs(path, exist_ok=True)
    vocab_doc = {
        "special_tokens": list(vocabulary.special_tokens),
        "code_tokens": list(vocabulary.code_tokens),
        "n_age_bins": vocabulary.n_age_bins,
        "token_ids": {
            token: idx
            for idx, token in enumerate(vocabulary.special_tokens + vocabulary.code_tokens)
        },
    }
    with open(os.path.join(path, VOCABULARY_FILENAME), "w", encoding="utf-8") as fh:
        json.dump(vocab_doc, fh, indent=1, sort_keys=False)
        fh.write("\n")
    with open(os.path.join(path, RECORDS_FILENAME), "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(
                json.dumps(
                    {
                        "patient_id": record.patient_id,
                        "codes": list(record.codes),
                        "ages": list(record.ages),
                        "segments": list(record.segments),
                        "positions": list(record.positions),
                        "label": record.label,
                        "split": record.split,
                    },
                    separators=(",", ":"),
                )
            )
            fh.write("\n")


def read_dataset(path: str) -> tuple[Vocabulary, list[PatientRecord]]:
    vocab_path = os.path.join(path, VOCABULARY_FILENAME)
    records_path = os.path.join(path, RECORDS_FILENAME)
    with open(vocab_path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"vocabulary file is not valid JSON: {exc}") from exc
    try:
        vocabulary = Vocabulary(
            code_tokens=tuple(doc["code_tokens"]),
            special_tokens=tuple(doc["special_tokens"]),
            n_age_bins=int(doc["n_age_bins"]),
        )
    except KeyError as exc:
        raise ParseError(f"vocabulary file missing field {exc}") from exc
    if vocabulary.special_tokens[0] != "[PAD]":
        raise ValidationError("vocabulary does not place PAD at id 0")

    records = []
    with open(records_path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed record: {exc.msg}", line=line_no) from exc
            try:
                record = PatientRecord(
                    patient_id=str(obj["patient_id"]),
                    codes=tuple(int(c) for c in obj["codes"]),
                    ages=tuple(int(a) for a in obj["ages"]),
                    segments=tuple(int(s) for s in obj["segments"]),
                    positions=tuple(int(p) for p in obj["positions"]),
                    label=int(obj["label"]),
                    split=str(obj["split"]),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"record missing or mistyped field: {exc}", line=line_no) from exc
            validate_record(record, vocabulary)
            records.append(record)
    return vocabulary, records
