"""Clinical data model, ICD-10 criterion matching, and Elixhauser grouping.

All types are frozen dataclasses: safe to share across threads and to use as
inputs to the pure pipeline functions in the rest of the package.
"""

from __future__ import annotations

import calendar
import functools
import json
import re
from dataclasses import dataclass
from datetime import date
from importlib import resources

from .errors import ConfigurationError, InvalidVitalsError, ParseError

GENDERS = ("male", "female", "unknown")
SMOKING_STATUSES = ("never", "former", "current")
DISEASES = (
    "hypertension",
    "diabetes",
    "ckd",
    "chd",
    "copd",
    "afib",
    "osteoarthritis",
    "hyperlipidemia",
)
HORIZONS = (3, 6, 12)
FEATURE_KINDS = ("binary", "ordinal")
FEATURE_SOURCES = (
    "vital",
    "demographic",
    "diagnosis",
    "elixhauser_group",
    "medication",
    "family_history",
    "social_history",
)

_CODE_RE = re.compile(r"^[A-Z][A-Z0-9]{2}(\.[A-Z0-9]{1,4})?$")
_PREFIX_RE = re.compile(r"^[A-Z][A-Z0-9]{2}(\.[A-Z0-9]{1,4})?$")
_CATEGORY_RE = re.compile(r"^[A-Z][A-Z0-9]{2}$")
_RANGE_RE = re.compile(r"^([A-Z][A-Z0-9]{2})-([A-Z][A-Z0-9]{2})$")
_BRACKET_RE = re.compile(r"^\[([A-Z][A-Z0-9]{2})-([A-Z][A-Z0-9]{2})\]\.([A-Z0-9]{1,4})$")


def valid_code(code: str) -> bool:
    """True iff ``code`` is syntactically a valid ICD-10-CM code."""
    return bool(_CODE_RE.match(code.upper()))


@dataclass(frozen=True)
class DiagnosisCode:
    """One coded diagnosis. ``onset_date`` may be absent in source data."""

    code: str
    onset_date: date | None = None

    def __post_init__(self):
        if not valid_code(self.code):
            raise ValueError(f"invalid ICD-10 code {self.code!r}")
        object.__setattr__(self, "code", self.code.upper())


@dataclass(frozen=True)
class Vitals:
    systolic_bp: float | None = None
    diastolic_bp: float | None = None
    bmi: float | None = None
    height: float | None = None
    weight: float | None = None

    def __post_init__(self):
        if self.systolic_bp is not None and self.diastolic_bp is not None:
            if not self.systolic_bp > self.diastolic_bp:
                raise ValueError(
                    f"systolic {self.systolic_bp} must exceed diastolic {self.diastolic_bp}"
                )
        if self.bmi is not None and not self.bmi > 0:
            raise ValueError(f"bmi must be positive, got {self.bmi}")


@dataclass(frozen=True)
class Encounter:
    """A dated clinical visit carrying vitals, diagnoses, and medications."""

    date: date
    vitals: Vitals | None = None
    diagnoses: tuple[DiagnosisCode, ...] = ()
    medications: tuple[str, ...] = ()
    smoking_status: str | None = None

    def __post_init__(self):
        if self.smoking_status is not None and self.smoking_status not in SMOKING_STATUSES:
            raise ValueError(f"unknown smoking status {self.smoking_status!r}")


@dataclass(frozen=True)
class PatientRecord:
    """Longitudinal record: demographics plus date-sorted encounters."""

    patient_id: str
    birth_date: date
    gender: str
    race: str | None = None
    family_history: frozenset[str] = frozenset()
    encounters: tuple[Encounter, ...] = ()

    def __post_init__(self):
        if self.gender not in GENDERS:
            raise ValueError(f"unknown gender {self.gender!r}")
        if not self.encounters:
            raise ValueError("encounters must be non-empty")
        object.__setattr__(
            self, "encounters", tuple(sorted(self.encounters, key=lambda e: e.date))
        )
        object.__setattr__(self, "family_history", frozenset(self.family_history))
        if self.birth_date > self.encounters[0].date:
            raise ValueError("birth_date is after the first encounter")

    def age_at(self, on: date) -> int:
        years = on.year - self.birth_date.year
        if (on.month, on.day) < (self.birth_date.month, self.birth_date.day):
            years -= 1
        return years


@dataclass(frozen=True)
class FeatureSpec:
    """One column of a disease's feature schema.

    The source-specific parameters are config, not code: bins for ordinal
    vitals/age, the criterion pattern for diagnosis indicators, the group
    name for Elixhauser indicators, the item for medications and family
    history, the value encoded as 1 for gender/race.
    """

    name: str
    kind: str
    cardinality: int
    source: str
    field: str | None = None
    bins: tuple[float, ...] | None = None
    criterion: str | None = None
    group: str | None = None
    item: str | None = None
    positive: str | None = None
    levels: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS:
            raise ConfigurationError(f"feature {self.name}: unknown kind {self.kind!r}")
        if self.source not in FEATURE_SOURCES:
            raise ConfigurationError(f"feature {self.name}: unknown source {self.source!r}")
        if self.kind == "binary" and self.cardinality != 2:
            raise ConfigurationError(f"feature {self.name}: binary implies cardinality 2")
        if self.cardinality < 2:
            raise ConfigurationError(f"feature {self.name}: cardinality must be >= 2")
        if self.bins is not None:
            object.__setattr__(self, "bins", tuple(float(b) for b in self.bins))
            if list(self.bins) != sorted(set(self.bins)):
                raise ConfigurationError(f"feature {self.name}: bins must strictly increase")
            if self.cardinality != len(self.bins) + 1:
                raise ConfigurationError(
                    f"feature {self.name}: cardinality {self.cardinality} != len(bins)+1"
                )
        if self.levels is not None:
            object.__setattr__(self, "levels", tuple(self.levels))
            if self.cardinality != len(self.levels):
                raise ConfigurationError(
                    f"feature {self.name}: cardinality {self.cardinality} != len(levels)"
                )
        if self.criterion is not None:
            parse_criterion(self.criterion)


@dataclass(frozen=True)
class DiseaseConfig:
    """Code criteria, horizon, and feature schema for one disease model."""

    disease_id: str
    code_criteria: tuple[str, ...]
    horizon_months: int
    feature_schema: tuple[FeatureSpec, ...]

    def __post_init__(self):
        if self.horizon_months not in HORIZONS:
            raise ConfigurationError(f"horizon must be one of {HORIZONS}")
        if not self.code_criteria:
            raise ConfigurationError("code_criteria must be non-empty")
        for c in self.code_criteria:
            parse_criterion(c)
        names = [s.name for s in self.feature_schema]
        if len(names) != len(set(names)):
            raise ConfigurationError("feature schema names must be unique")

    def matches_any(self, code: str) -> bool:
        return any(matches_criterion(code, c) for c in self.code_criteria)


# --- ICD-10 criterion matching -------------------------------------------

@dataclass(frozen=True)
class _Criterion:
    kind: str  # prefix | range | bracket
    prefix: str = ""
    low: str = ""
    high: str = ""
    suffix: str = ""


@functools.lru_cache(maxsize=1024)
def parse_criterion(criterion: str) -> _Criterion:
    """Classify a Table-1-style pattern; raise ConfigurationError if malformed."""
    pat = criterion.strip().upper()
    m = _BRACKET_RE.match(pat)
    if m:
        low, high, suffix = m.groups()
        if low > high:
            raise ConfigurationError(f"criterion {criterion!r}: range bounds out of order")
        return _Criterion("bracket", low=low, high=high, suffix=suffix)
    m = _RANGE_RE.match(pat)
    if m:
        low, high = m.groups()
        if low > high:
            raise ConfigurationError(f"criterion {criterion!r}: range bounds out of order")
        return _Criterion("range", low=low, high=high)
    if _PREFIX_RE.match(pat):
        return _Criterion("prefix", prefix=pat)
    raise ConfigurationError(f"malformed code criterion {criterion!r}")


def matches_criterion(code: str, criterion: str) -> bool:
    """True iff ``code`` falls under a single-prefix, range, or bracketed pattern.

    Ranges compare the 3-character category lexicographically; bracketed
    patterns additionally require the post-dot portion to begin with the
    given suffix. Matching is case-insensitive.
    """
    crit = parse_criterion(criterion)
    c = code.strip().upper()
    category = c[:3]
    if crit.kind == "prefix":
        return c.startswith(crit.prefix)
    if len(category) < 3:
        return False
    in_range = crit.low <= category <= crit.high
    if crit.kind == "range":
        return in_range
    post_dot = c.split(".", 1)[1] if "." in c else ""
    return in_range and post_dot.startswith(crit.suffix)


# --- Elixhauser comorbidity groups ----------------------------------------

_ELIX_CACHE: dict[str, object] | None = None


def _load_elixhauser() -> dict[str, object]:
    global _ELIX_CACHE
    if _ELIX_CACHE is None:
        raw = resources.files("chronorisk.data").joinpath("elixhauser_icd10.json").read_text()
        doc = json.loads(raw)
        prefix_to_group: dict[str, str] = {}
        for group, prefixes in doc["groups"].items():
            for p in prefixes:
                p = p.upper()
                if p in prefix_to_group:
                    raise ConfigurationError(
                        f"elixhauser mapping: prefix {p} in both "
                        f"{prefix_to_group[p]} and {group}"
                    )
                prefix_to_group[p] = group
        _ELIX_CACHE = {"version": doc["version"], "prefix_to_group": prefix_to_group}
    return _ELIX_CACHE


def elixhauser_version() -> str:
    return _load_elixhauser()["version"]  # type: ignore[return-value]


def elixhauser_groups() -> tuple[str, ...]:
    table: dict[str, str] = _load_elixhauser()["prefix_to_group"]  # type: ignore[assignment]
    return tuple(sorted(set(table.values())))


def elixhauser_group(code: str) -> str | None:
    """Map an ICD-10 code to its comorbidity group, or None if unmapped.

    Longest matching prefix wins, so e.g. I11.0 lands in congestive-heart-
    failure while every other I11.x code lands in hypertension-complicated.
    """
    table: dict[str, str] = _load_elixhauser()["prefix_to_group"]  # type: ignore[assignment]
    c = code.strip().upper()
    best = None
    best_len = 0
    for i in range(3, len(c) + 1):
        p = c[:i]
        if p in table and i > best_len:
            best, best_len = table[p], i
    return best


# --- Derived vitals --------------------------------------------------------

def mean_arterial_pressure(systolic: float, diastolic: float) -> float:
    """MAP = diastolic + pulse pressure / 3."""
    if not (systolic > diastolic > 0):
        raise InvalidVitalsError(
            f"need systolic > diastolic > 0, got {systolic}/{diastolic}"
        )
    return diastolic + (systolic - diastolic) / 3.0


# --- Calendar-month arithmetic ---------------------------------------------

def add_months(d: date, months: int) -> date:
    """Shift by calendar months, clamping the day to the target month's end."""
    total = d.year * 12 + (d.month - 1) + months
    year, month = divmod(total, 12)
    month += 1
    day = min(d.day, calendar.monthrange(year, month)[1])
    return date(year, month, day)


# --- Patient bundle parsing -------------------------------------------------

def _expect(obj: dict, key: str, path: str, required: bool = True):
    if key not in obj or obj[key] is None:
        if required:
            raise ParseError(f"{path}.{key}", "missing required field")
        return None
    return obj[key]


def _parse_date(value, path: str) -> date:
    if not isinstance(value, str):
        raise ParseError(path, f"expected ISO-8601 date string, got {type(value).__name__}")
    try:
        return date.fromisoformat(value)
    except ValueError as exc:
        raise ParseError(path, f"invalid date {value!r}") from exc


def _parse_vitals(obj, path: str) -> Vitals | None:
    if obj is None:
        return None
    if not isinstance(obj, dict):
        raise ParseError(path, "expected object")
    fields = {}
    for key in ("systolic_bp", "diastolic_bp", "bmi", "height", "weight"):
        v = obj.get(key)
        if v is None:
            continue
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise ParseError(f"{path}.{key}", "expected number")
        fields[key] = float(v)
    try:
        return Vitals(**fields)
    except ValueError as exc:
        raise ParseError(path, str(exc)) from exc


def _parse_encounter(obj, path: str) -> Encounter:
    if not isinstance(obj, dict):
        raise ParseError(path, "expected object")
    when = _parse_date(_expect(obj, "date", path), f"{path}.date")
    diagnoses = []
    for i, dx in enumerate(obj.get("diagnoses") or []):
        dpath = f"{path}.diagnoses[{i}]"
        if not isinstance(dx, dict):
            raise ParseError(dpath, "expected object")
        code = _expect(dx, "code", dpath)
        if not isinstance(code, str) or not valid_code(code):
            raise ParseError(f"{dpath}.code", f"invalid ICD-10 code {code!r}")
        onset = dx.get("onset_date")
        onset_date = _parse_date(onset, f"{dpath}.onset_date") if onset is not None else None
        diagnoses.append(DiagnosisCode(code, onset_date))
    medications = []
    for i, med in enumerate(obj.get("medications") or []):
        if not isinstance(med, str):
            raise ParseError(f"{path}.medications[{i}]", "expected string")
        medications.append(med)
    smoking = obj.get("smoking_status")
    if smoking is not None and smoking not in SMOKING_STATUSES:
        raise ParseError(f"{path}.smoking_status", f"must be one of {SMOKING_STATUSES}")
    try:
        return Encounter(
            date=when,
            vitals=_parse_vitals(obj.get("vitals"), f"{path}.vitals"),
            diagnoses=tuple(diagnoses),
            medications=tuple(medications),
            smoking_status=smoking,
        )
    except ValueError as exc:
        raise ParseError(path, str(exc)) from exc


def parse_patient(document: str | dict) -> PatientRecord:
    """Parse and validate a JSON patient bundle.

    Unknown fields are ignored; encounters are re-sorted ascending by date.
    Raises ParseError with the JSON path of the first offending field.
    """
    if isinstance(document, str):
        try:
            obj = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ParseError("$", f"not valid JSON: {exc}") from exc
    else:
        obj = document
    if not isinstance(obj, dict):
        raise ParseError("$", "expected a JSON object")
    patient_id = _expect(obj, "patient_id", "$")
    if not isinstance(patient_id, str):
        raise ParseError("$.patient_id", "expected string")
    birth = _parse_date(_expect(obj, "birth_date", "$"), "$.birth_date")
    gender = obj.get("gender", "unknown")
    if gender not in GENDERS:
        raise ParseError("$.gender", f"must be one of {GENDERS}")
    race = obj.get("race")
    if race is not None and not isinstance(race, str):
        raise ParseError("$.race", "expected string")
    history = obj.get("family_history") or []
    if not isinstance(history, list) or not all(isinstance(h, str) for h in history):
        raise ParseError("$.family_history", "expected array of strings")
    raw_encounters = _expect(obj, "encounters", "$")
    if not isinstance(raw_encounters, list) or not raw_encounters:
        raise ParseError("$.encounters", "expected non-empty array")
    encounters = [
        _parse_encounter(e, f"$.encounters[{i}]") for i, e in enumerate(raw_encounters)
    ]
    try:
        return PatientRecord(
            patient_id=patient_id,
            birth_date=birth,
            gender=gender,
            race=race,
            family_history=frozenset(history),
            encounters=tuple(encounters),
        )
    except ValueError as exc:
        raise ParseError("$", str(exc)) from exc


def serialize_patient(record: PatientRecord) -> dict:
    """Inverse of parse_patient: a JSON-ready dict (None fields omitted)."""
    encounters = []
    for e in record.encounters:
        enc: dict = {"date": e.date.isoformat()}
        if e.vitals is not None:
            vit = {
                k: getattr(e.vitals, k)
                for k in ("systolic_bp", "diastolic_bp", "bmi", "height", "weight")
                if getattr(e.vitals, k) is not None
            }
            if vit:
                enc["vitals"] = vit
        enc["diagnoses"] = [
            {"code": d.code, **({"onset_date": d.onset_date.isoformat()} if d.onset_date else {})}
            for d in e.diagnoses
        ]
        enc["medications"] = list(e.medications)
        if e.smoking_status is not None:
            enc["smoking_status"] = e.smoking_status
        encounters.append(enc)
    doc: dict = {
        "patient_id": record.patient_id,
        "birth_date": record.birth_date.isoformat(),
        "gender": record.gender,
        "family_history": sorted(record.family_history),
        "encounters": encounters,
    }
    if record.race is not None:
        doc["race"] = record.race
    return doc
