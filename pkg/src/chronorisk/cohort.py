"""Cohort construction: windowed anchoring, encoding, balancing, splitting.

Turns a population of PatientRecords into labeled, 1:1-balanced, 70/10/20
split datasets for one disease and horizon. Everything is deterministic per
seed; patients are processed in input order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

import numpy as np

from .ehr import (
    DiseaseConfig,
    Encounter,
    FeatureSpec,
    PatientRecord,
    add_months,
    elixhauser_group,
    matches_criterion,
    mean_arterial_pressure,
)
from .errors import CohortError, InvalidVitalsError

SPLIT_TAGS = ("train", "validation", "test", "unsplit")
SPLIT_QUOTAS = (("train", 0.70), ("validation", 0.10), ("test", 0.20))


@dataclass(frozen=True)
class FeatureVector:
    """Ordinal/binary encoding of one patient at one anchor date."""

    values: tuple[int, ...]
    anchor_date: date
    patient_id: str


@dataclass(frozen=True)
class LabeledExample:
    features: FeatureVector
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


@dataclass
class Dataset:
    """Examples sharing one feature schema, optionally tagged with a split."""

    schema: tuple[FeatureSpec, ...]
    examples: tuple[LabeledExample, ...]
    split_tag: str = "unsplit"

    def __post_init__(self):
        self.schema = tuple(self.schema)
        self.examples = tuple(self.examples)
        if self.split_tag not in SPLIT_TAGS:
            raise ValueError(f"unknown split tag {self.split_tag!r}")
        for ex in self.examples:
            vals = ex.features.values
            if len(vals) != len(self.schema):
                raise ValueError("example length does not match schema")
            for v, spec in zip(vals, self.schema):
                if not 0 <= v < spec.cardinality:
                    raise ValueError(
                        f"value {v} out of range for feature {spec.name}"
                    )

    def __len__(self) -> int:
        return len(self.examples)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(X, y) as int16/int8 matrices."""
        x = np.array([ex.features.values for ex in self.examples], dtype=np.int16)
        y = np.array([ex.label for ex in self.examples], dtype=np.int8)
        if len(self.examples) == 0:
            x = x.reshape(0, len(self.schema))
        return x, y

    def class_counts(self) -> tuple[int, int]:
        pos = sum(ex.label for ex in self.examples)
        return len(self.examples) - pos, pos


@dataclass
class BuildReport:
    """Stage counts emitted by build_dataset."""

    disease_id: str
    horizon_months: int
    seed: int
    n_patients: int
    n_diagnosed: int = 0
    n_anchored_positive: int = 0
    n_anchored_negative: int = 0
    n_dropped_missing: int = 0
    n_encoded_positive: int = 0
    n_encoded_negative: int = 0
    n_balanced_per_class: int = 0
    split_sizes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class BuildResult:
    train: Dataset
    validation: Dataset
    test: Dataset
    report: BuildReport


def index_date(patient: PatientRecord, config: DiseaseConfig) -> date | None:
    """Earliest date any diagnosis matches the disease criteria, else None."""
    best: date | None = None
    for enc in patient.encounters:
        for dx in enc.diagnoses:
            if config.matches_any(dx.code):
                when = dx.onset_date or enc.date
                if best is None or when < best:
                    best = when
    return best


def anchor_encounter(
    patient: PatientRecord, config: DiseaseConfig
) -> tuple[Encounter, int] | None:
    """Pick the feature-vector encounter and label, or None if ineligible.

    Diagnosed (index date D): earliest encounter in [D - H months, D).
    Normal: latest encounter at least H months before the last encounter,
    so the negative label is observed over a comparable horizon.
    """
    h = config.horizon_months
    d = index_date(patient, config)
    if d is not None:
        start = add_months(d, -h)
        in_window = [e for e in patient.encounters if start <= e.date < d]
        if not in_window:
            return None
        return in_window[0], 1
    last = patient.encounters[-1].date
    cutoff = add_months(last, -h)
    eligible = [e for e in patient.encounters if e.date <= cutoff]
    if not eligible:
        return None
    return eligible[-1], 0


def discretize(value: float, bins: tuple[float, ...]) -> int:
    """Ordinal level = count of thresholds <= value."""
    if not math.isfinite(value):
        raise InvalidVitalsError(f"cannot discretize non-finite value {value}")
    return int(sum(1 for b in bins if b <= value))


def _accumulated_codes(patient: PatientRecord, anchor: Encounter, config: DiseaseConfig):
    """All diagnosis codes recorded up to the anchor, minus target matches."""
    codes = []
    for enc in patient.encounters:
        if enc.date > anchor.date:
            break
        for dx in enc.diagnoses:
            if not config.matches_any(dx.code):
                codes.append(dx.code)
    return codes


def _accumulated_medications(patient: PatientRecord, anchor: Encounter):
    meds = set()
    for enc in patient.encounters:
        if enc.date > anchor.date:
            break
        meds.update(enc.medications)
    return meds


def encode_with_report(
    patient: PatientRecord, anchor: Encounter, config: DiseaseConfig
) -> tuple[FeatureVector | None, list[str]]:
    """Encode one patient at an anchor; also report which required features
    were missing (non-empty list means the patient is dropped)."""
    codes = _accumulated_codes(patient, anchor, config)
    meds = _accumulated_medications(patient, anchor)
    groups = {g for g in (elixhauser_group(c) for c in codes) if g is not None}
    vitals = anchor.vitals
    missing: list[str] = []
    values: list[int] = []
    for spec in config.feature_schema:
        level = 0
        if spec.source == "vital":
            raw = None
            if vitals is not None:
                if spec.field == "map":
                    if vitals.systolic_bp is not None and vitals.diastolic_bp is not None:
                        raw = mean_arterial_pressure(vitals.systolic_bp, vitals.diastolic_bp)
                else:
                    raw = getattr(vitals, spec.field)
            if raw is None:
                missing.append(spec.name)
                continue
            level = discretize(raw, spec.bins)
        elif spec.source == "demographic":
            if spec.field == "age":
                level = discretize(patient.age_at(anchor.date), spec.bins)
            elif spec.field == "gender":
                if patient.gender == "unknown":
                    missing.append(spec.name)
                    continue
                level = 1 if patient.gender == spec.positive else 0
            elif spec.field == "race":
                if patient.race is None:
                    missing.append(spec.name)
                    continue
                level = 1 if patient.race == spec.positive else 0
        elif spec.source == "diagnosis":
            level = int(any(matches_criterion(c, spec.criterion) for c in codes))
        elif spec.source == "elixhauser_group":
            level = int(spec.group in groups)
        elif spec.source == "medication":
            level = int(spec.item in meds)
        elif spec.source == "family_history":
            level = int(spec.item in patient.family_history)
        elif spec.source == "social_history":
            status = anchor.smoking_status
            level = spec.levels.index(status) if status in (spec.levels or ()) else 0
        values.append(level)
    if missing:
        return None, missing
    return FeatureVector(tuple(values), anchor.date, patient.patient_id), []


def encode(
    patient: PatientRecord, anchor: Encounter, config: DiseaseConfig
) -> FeatureVector | None:
    """Encode at the anchor; None when a required vital/demographic is missing."""
    vector, _ = encode_with_report(patient, anchor, config)
    return vector


def undersample(dataset: Dataset, seed: int) -> Dataset:
    """Randomly subsample the majority class to a 1:1 ratio (no replacement)."""
    pos = [ex for ex in dataset.examples if ex.label == 1]
    neg = [ex for ex in dataset.examples if ex.label == 0]
    if not pos or not neg:
        raise CohortError(
            f"cannot balance: {len(pos)} positive / {len(neg)} negative examples"
        )
    rng = np.random.default_rng(seed)
    if len(pos) > len(neg):
        keep = rng.choice(len(pos), size=len(neg), replace=False)
        pos = [pos[i] for i in sorted(keep)]
    elif len(neg) > len(pos):
        keep = rng.choice(len(neg), size=len(pos), replace=False)
        neg = [neg[i] for i in sorted(keep)]
    combined = pos + neg
    order = rng.permutation(len(combined))
    return Dataset(dataset.schema, tuple(combined[i] for i in order), "unsplit")


def _largest_remainder_sizes(n: int) -> dict[str, int]:
    exact = [(tag, n * q) for tag, q in SPLIT_QUOTAS]
    sizes = {tag: int(math.floor(v)) for tag, v in exact}
    leftover = n - sum(sizes.values())
    by_frac = sorted(
        range(len(exact)), key=lambda i: (-(exact[i][1] - math.floor(exact[i][1])), i)
    )
    for i in by_frac[:leftover]:
        sizes[exact[i][0]] += 1
    return sizes


def split(dataset: Dataset, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Stratified 70/10/20 partition with largest-remainder rounding.

    Requires a 1:1-balanced input; each split ends up balanced to within one
    example per class.
    """
    pos = [ex for ex in dataset.examples if ex.label == 1]
    neg = [ex for ex in dataset.examples if ex.label == 0]
    if len(pos) != len(neg):
        raise CohortError(f"split requires 1:1 balance, got {len(pos)}/{len(neg)}")
    if len(pos) < 10:
        raise CohortError(f"need at least 10 examples per class, got {len(pos)}")
    sizes = _largest_remainder_sizes(len(dataset.examples))
    # Distribute each split's size across the two classes; two odd-sized
    # splits pair up so class totals stay exact and |pos-neg| <= 1 per split.
    per_class: dict[str, tuple[int, int]] = {}
    odd_flip = 0
    for tag, _ in SPLIT_QUOTAS:
        s = sizes[tag]
        if s % 2 == 0:
            per_class[tag] = (s // 2, s // 2)
        else:
            if odd_flip % 2 == 0:
                per_class[tag] = (s // 2 + 1, s // 2)
            else:
                per_class[tag] = (s // 2, s // 2 + 1)
            odd_flip += 1
    rng = np.random.default_rng(seed)
    pos = [pos[i] for i in rng.permutation(len(pos))]
    neg = [neg[i] for i in rng.permutation(len(neg))]
    out = []
    p0 = n0 = 0
    for tag, _ in SPLIT_QUOTAS:
        np_, nn_ = per_class[tag]
        chunk = pos[p0 : p0 + np_] + neg[n0 : n0 + nn_]
        p0 += np_
        n0 += nn_
        order = rng.permutation(len(chunk))
        out.append(Dataset(dataset.schema, tuple(chunk[i] for i in order), tag))
    return out[0], out[1], out[2]


def build_dataset(
    population: list[PatientRecord], config: DiseaseConfig, seed: int
) -> BuildResult:
    """Anchor, encode, balance, and split a population for one disease/horizon."""
    if not population:
        raise CohortError("population is empty")
    report = BuildReport(
        disease_id=config.disease_id,
        horizon_months=config.horizon_months,
        seed=seed,
        n_patients=len(population),
    )
    examples = []
    for patient in population:
        if index_date(patient, config) is not None:
            report.n_diagnosed += 1
        anchored = anchor_encounter(patient, config)
        if anchored is None:
            continue
        anchor, label = anchored
        if label == 1:
            report.n_anchored_positive += 1
        else:
            report.n_anchored_negative += 1
        vector, missing = encode_with_report(patient, anchor, config)
        if vector is None:
            report.n_dropped_missing += 1
            continue
        if label == 1:
            report.n_encoded_positive += 1
        else:
            report.n_encoded_negative += 1
        examples.append(LabeledExample(vector, label))
    unbalanced = Dataset(config.feature_schema, tuple(examples))
    balanced = undersample(unbalanced, seed)
    report.n_balanced_per_class = len(balanced) // 2
    train, validation, test = split(balanced, seed)
    report.split_sizes = {
        "train": len(train),
        "validation": len(validation),
        "test": len(test),
    }
    return BuildResult(train, validation, test, report)


# --- Dataset file format (JSON-Lines with a schema header) ------------------

def _spec_to_dict(spec: FeatureSpec) -> dict:
    out = {"name": spec.name, "kind": spec.kind, "cardinality": spec.cardinality,
           "source": spec.source}
    for key in ("field", "criterion", "group", "item", "positive"):
        v = getattr(spec, key)
        if v is not None:
            out[key] = v
    if spec.bins is not None:
        out["bins"] = list(spec.bins)
    if spec.levels is not None:
        out["levels"] = list(spec.levels)
    return out


def spec_from_dict(doc: dict) -> FeatureSpec:
    kwargs = dict(doc)
    if "bins" in kwargs:
        kwargs["bins"] = tuple(kwargs["bins"])
    if "levels" in kwargs:
        kwargs["levels"] = tuple(kwargs["levels"])
    return FeatureSpec(**kwargs)


def schema_to_dicts(schema: tuple[FeatureSpec, ...]) -> list[dict]:
    return [_spec_to_dict(s) for s in schema]


def schema_from_dicts(docs: list[dict]) -> tuple[FeatureSpec, ...]:
    return tuple(spec_from_dict(d) for d in docs)


def write_dataset(dataset: Dataset, path: str | Path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        header = {
            "schema": schema_to_dicts(dataset.schema),
            "split_tag": dataset.split_tag,
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for ex in dataset.examples:
            line = {
                "patient_id": ex.features.patient_id,
                "anchor_date": ex.features.anchor_date.isoformat(),
                "label": ex.label,
                "values": list(ex.features.values),
            }
            fh.write(json.dumps(line, sort_keys=True) + "\n")


def read_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    with path.open() as fh:
        header = json.loads(fh.readline())
        schema = schema_from_dicts(header["schema"])
        examples = []
        for line in fh:
            if not line.strip():
                continue
            doc = json.loads(line)
            examples.append(
                LabeledExample(
                    FeatureVector(
                        tuple(doc["values"]),
                        date.fromisoformat(doc["anchor_date"]),
                        doc["patient_id"],
                    ),
                    doc["label"],
                )
            )
    return Dataset(schema, tuple(examples), header.get("split_tag", "unsplit"))
