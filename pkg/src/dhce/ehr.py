"""Patients, visits and clinical events: loading, splitting, synthesis."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

EVENT_TYPES = ("lab", "rx", "proc")
_FLAGS = ("low", "normal", "high")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class DiseaseVocabulary:
    codes: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        index = {c: i for i, c in enumerate(self.codes)}
        if len(index) != len(self.codes):
            raise DataError("vocabulary codes must be unique")
        object.__setattr__(self, "index", index)

    def __len__(self) -> int:
        return len(self.codes)

    def __contains__(self, code) -> bool:
        return code in self.index

    def encode(self, codes: Iterable[str]) -> list[int]:
        out = []
        for c in codes:
            try:
                out.append(self.index[c])
            except KeyError:
                raise DataError(f"unknown code {c!r}") from None
        return out

    @classmethod
    def from_file(cls, path) -> "DiseaseVocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(s.strip() for s in lines if s.strip()))


@dataclass(frozen=True)
class ClinicalEvent:
    event_type: str
    features: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if not self.event_type:
            raise DataError("event type must be nonempty")


@dataclass(frozen=True)
class Visit:
    codes: frozenset[str]
    events: tuple[ClinicalEvent, ...] = ()


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    visits: tuple[Visit, ...]


@dataclass(frozen=True)
class Dataset:
    vocabulary: DiseaseVocabulary
    event_types: tuple[str, ...]
    patients: tuple[PatientRecord, ...]
    dropped_count: int = 0

    def __len__(self) -> int:
        return len(self.patients)

    def patient(self, patient_id: str) -> PatientRecord:
        for p in self.patients:
            if p.patient_id == patient_id:
                return p
        raise KeyError(patient_id)

    def with_patients(self, patients: Sequence[PatientRecord]) -> "Dataset":
        return Dataset(self.vocabulary, self.event_types, tuple(patients))


# --- JSONL format -----------------------------------------------------------


def _expect_keys(obj, allowed: set[str], required: set[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise DataError(f"{where}: expected an object")
    extra = set(obj) - allowed
    if extra:
        raise DataError(f"{where}: unknown keys {sorted(extra)}")
    missing = required - set(obj)
    if missing:
        raise DataError(f"{where}: missing keys {sorted(missing)}")


def _parse_event(raw, where: str) -> ClinicalEvent:
    _expect_keys(raw, {"type", "features"}, {"type"}, where)
    etype = raw["type"]
    if not isinstance(etype, str) or not etype:
        raise DataError(f"{where}: event type must be a nonempty string")
    feats = []
    for pair in raw.get("features", []):
        if not (isinstance(pair, list) and len(pair) == 2 and all(isinstance(x, str) for x in pair)):
            raise DataError(f"{where}: features must be [name, value] string pairs")
        feats.append((pair[0], pair[1]))
    return ClinicalEvent(etype, tuple(feats))


def parse_patient_line(line: str, lineno: int = 1) -> tuple[PatientRecord, list[str], list[str]]:
    """Parse one JSONL patient line.

    Returns the record plus codes and event types in first-seen order, so
    callers can grow a vocabulary deterministically.
    """
    where = f"line {lineno}"
    try:
        raw = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"{where}: malformed JSON ({exc.msg})") from None
    _expect_keys(raw, {"patient_id", "visits"}, {"patient_id", "visits"}, where)
    pid = raw["patient_id"]
    if not isinstance(pid, str):
        raise DataError(f"{where}: patient_id must be a string")
    if not isinstance(raw["visits"], list):
        raise DataError(f"{where}: visits must be a list")
    codes_seen: list[str] = []
    types_seen: list[str] = []
    visits = []
    for vi, rv in enumerate(raw["visits"]):
        vwhere = f"{where}, visit {vi}"
        _expect_keys(rv, {"codes", "events"}, {"codes"}, vwhere)
        codes = rv["codes"]
        if not isinstance(codes, list) or not all(isinstance(c, str) for c in codes):
            raise DataError(f"{vwhere}: codes must be a list of strings")
        if not codes:
            raise DataError(f"{vwhere}: empty code set")
        events = tuple(_parse_event(e, f"{vwhere}, event {ei}") for ei, e in enumerate(rv.get("events", [])))
        codes_seen.extend(codes)
        types_seen.extend(e.event_type for e in events)
        visits.append(Visit(frozenset(codes), events))
    return PatientRecord(pid, tuple(visits)), codes_seen, types_seen


def load_dataset(path, vocab_path=None) -> Dataset:
    """Read a line-delimited JSON patient file.

    Patients with fewer than two visits are dropped and counted in
    ``dropped_count``.
    """
    fixed_vocab = DiseaseVocabulary.from_file(vocab_path) if vocab_path else None
    codes: dict[str, None] = {}
    types: dict[str, None] = {}
    patients = []
    ids = set()
    dropped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec, seen, seen_types = parse_patient_line(line, lineno)
            if rec.patient_id in ids:
                raise DataError(f"line {lineno}: duplicate patient_id {rec.patient_id!r}")
            ids.add(rec.patient_id)
            if fixed_vocab is not None:
                unknown = [c for c in seen if c not in fixed_vocab]
                if unknown:
                    raise DataError(f"line {lineno}: codes not in vocabulary: {sorted(set(unknown))}")
            codes.update(dict.fromkeys(seen))
            types.update(dict.fromkeys(seen_types))
            if len(rec.visits) < 2:
                dropped += 1
                continue
            patients.append(rec)
    if dropped:
        log.warning("dropped %d patient(s) with fewer than 2 visits", dropped)
    vocab = fixed_vocab or DiseaseVocabulary(tuple(codes))
    return Dataset(vocab, tuple(types), tuple(patients), dropped)


def patient_to_json(patient: PatientRecord, vocab: DiseaseVocabulary) -> str:
    visits = []
    for v in patient.visits:
        codes = sorted(v.codes, key=lambda c: vocab.index.get(c, len(vocab)))
        events = [{"type": e.event_type, "features": [list(f) for f in e.features]} for e in v.events]
        visits.append({"codes": codes, "events": events})
    return json.dumps({"patient_id": patient.patient_id, "visits": visits}, separators=(",", ":"))


def write_dataset(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in dataset.patients:
            fh.write(patient_to_json(p, dataset.vocabulary) + "\n")


def write_vocabulary(vocab: DiseaseVocabulary, path) -> None:
    Path(path).write_text("".join(c + "\n" for c in vocab.codes), encoding="utf-8")


# --- splitting --------------------------------------------------------------


def _split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    raw = [r * n for r in ratios]
    sizes = [int(np.floor(x + 1e-9)) for x in raw]
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    # every nonzero split gets at least one patient, taken from the largest
    for i, r in enumerate(ratios):
        if r > 0 and sizes[i] == 0:
            donor = max(range(len(sizes)), key=lambda j: (sizes[j], -j))
            sizes[donor] -= 1
            sizes[i] += 1
    return sizes


def split_dataset(dataset: Dataset, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Patient-level disjoint train/val/test split sharing one vocabulary."""
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError("ratios must be three non-negative fractions")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(dataset.patients)
    nonzero = sum(1 for r in ratios if r > 0)
    if n < nonzero:
        raise DataError(f"cannot split {n} patient(s) into {nonzero} nonempty parts")
    sizes = _split_sizes(n, ratios)
    perm = np.random.default_rng(seed).permutation(n)
    out = []
    start = 0
    for size in sizes:
        members = sorted(perm[start : start + size].tolist())
        out.append(dataset.with_patients([dataset.patients[i] for i in members]))
        start += size
    return tuple(out)


# --- synthesis --------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 500
    vocab_size: int = 80
    visits_per_patient: tuple[int, int] = (3, 8)
    codes_per_visit: tuple[int, int] = (2, 5)
    chronic_persistence: float = 0.5
    rules: tuple[tuple[int, int, float], ...] = ()
    event_noise: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.visits_per_patient
        if not 2 <= lo <= hi:
            raise ValueError(f"bad visits_per_patient range {self.visits_per_patient}")
        lo, hi = self.codes_per_visit
        if not 1 <= lo <= hi:
            raise ValueError(f"bad codes_per_visit range {self.codes_per_visit}")
        if self.vocab_size < hi:
            raise ValueError(f"vocab_size {self.vocab_size} is smaller than max codes_per_visit {hi}")
        for p in (self.chronic_persistence, self.event_noise):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0, 1]")
        for trig, ind, p in self.rules:
            if not (0 <= trig < self.vocab_size and 0 <= ind < self.vocab_size):
                raise ValueError(f"rule ({trig}, {ind}) references a code outside the vocabulary")
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"rule probability {p} outside [0, 1]")
        if self.n_patients < 0 or not 0 <= self.seed < 2**64:
            raise ValueError("n_patients must be >= 0 and seed a 64-bit unsigned integer")


def random_rules(vocab_size: int, n_rules: int, p: float, seed: int = 0) -> tuple[tuple[int, int, float], ...]:
    """Distinct-trigger comorbidity rules with trigger != induced."""
    rng = np.random.default_rng(seed)
    triggers = rng.choice(vocab_size, size=min(n_rules, vocab_size), replace=False)
    rules = []
    for t in triggers.tolist():
        induced = int(rng.integers(vocab_size - 1))
        if induced >= t:
            induced += 1
        rules.append((t, induced, p))
    return tuple(rules)


def code_name(i: int) -> str:
    return f"D{i:03d}"


def _synth_events(rng: np.random.Generator, codes: list[int], cfg: SynthConfig) -> tuple[ClinicalEvent, ...]:
    events = []
    for _ in range(int(rng.integers(1, 4))):
        etype = EVENT_TYPES[int(rng.integers(len(EVENT_TYPES)))]
        k = int(rng.integers(1, min(3, len(codes)) + 1))
        picked = rng.choice(codes, size=k, replace=False).tolist()
        feats = []
        for c in picked:
            if rng.random() < cfg.event_noise:
                c = int(rng.integers(cfg.vocab_size))
            feats.append((f"{etype}_code", code_name(c)))
            feats.append((f"{etype}_flag", _FLAGS[c % len(_FLAGS)]))
        events.append(ClinicalEvent(etype, tuple(feats)))
    return tuple(events)


def generate_synthetic(config: SynthConfig) -> Dataset:
    """Seeded visit sequences with planted chronic persistence and comorbidity rules.

    Visit t+1 keeps each visit-t code with probability ``chronic_persistence``,
    adds each rule's induced code with the rule's probability when its
    trigger is in visit t, and is then topped up with uniformly drawn codes
    up to a size drawn from ``codes_per_visit``.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    V = config.vocab_size
    by_trigger: dict[int, list[tuple[int, float]]] = {}
    for trig, ind, p in config.rules:
        by_trigger.setdefault(trig, []).append((ind, p))
    patients = []
    for pi in range(config.n_patients):
        n_visits = int(rng.integers(config.visits_per_patient[0], config.visits_per_patient[1] + 1))
        visits = []
        prev: list[int] = []
        for _ in range(n_visits):
            current: set[int] = set()
            for c in prev:
                if rng.random() < config.chronic_persistence:
                    current.add(c)
                for ind, p in by_trigger.get(c, ()):
                    if rng.random() < p:
                        current.add(ind)
            target = int(rng.integers(config.codes_per_visit[0], config.codes_per_visit[1] + 1))
            while len(current) < target:
                current.add(int(rng.integers(V)))
            codes = sorted(current)
            visits.append(Visit(frozenset(code_name(c) for c in codes), _synth_events(rng, codes, config)))
            prev = codes
        patients.append(PatientRecord(f"P{pi:05d}", tuple(visits)))
    vocab = DiseaseVocabulary(tuple(code_name(i) for i in range(V)))
    return Dataset(vocab, EVENT_TYPES, tuple(patients))
