"""Domain data model and file ingestion for diagnosis-count cohorts.

A cohort is a set of patients with demographics, censored survival outcomes
and an M x V matrix of diagnosis counts over a fixed disease vocabulary.
Follow-up exposure can be split into single-year age bins per sex, which is
what the baseline rate model consumes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

__all__ = [
    "DiseaseVocabulary",
    "PatientRecord",
    "Cohort",
    "ExposureBins",
    "CohortValidationReport",
    "load_vocabulary",
    "write_vocabulary",
    "load_cohort",
    "write_cohort",
    "validate_cohort",
    "patient_age_bins",
    "bin_exposure",
]

SEXES = ("M", "F")

#: slack allowed when checking survival_time <= followup_years
SURVIVAL_TOL = 1e-9


@dataclass(frozen=True)
class DiseaseVocabulary:
    """Ordered set of disease category codes; column order of every matrix."""

    codes: tuple[str, ...]

    def __post_init__(self):
        if len(self.codes) < 1:
            raise DataError("vocabulary must contain at least one code")
        if len(set(self.codes)) != len(self.codes):
            raise DataError("vocabulary codes must be unique")
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(self.codes)})

    @property
    def size(self) -> int:
        return len(self.codes)

    def __len__(self) -> int:
        return len(self.codes)

    def __contains__(self, code: str) -> bool:
        return code in self._index

    def index(self, code: str) -> int:
        try:
            return self._index[code]
        except KeyError:
            raise DataError(f"unknown disease code {code!r}") from None


@dataclass(frozen=True)
class PatientRecord:
    """Demographics and survival outcome for one patient.

    ``survival_time`` is years from entry to death or censoring; ``event``
    is True when death was observed within follow-up.
    """

    id: str
    sex: str
    age_at_entry: float
    followup_years: float
    survival_time: float
    event: bool

    def __post_init__(self):
        if self.sex not in SEXES:
            raise DataError(f"patient {self.id}: sex must be one of {SEXES}, got {self.sex!r}")
        if not self.followup_years > 0:
            raise DataError(f"patient {self.id}: followup_years must be > 0")
        if self.survival_time < 0:
            raise DataError(f"patient {self.id}: survival_time must be >= 0")
        if self.survival_time > self.followup_years + SURVIVAL_TOL:
            raise DataError(
                f"patient {self.id}: survival_time {self.survival_time} exceeds "
                f"followup_years {self.followup_years}"
            )


class Cohort:
    """Immutable bundle of vocabulary, patients and the M x V count matrix.

    Rows follow ``patients`` order; columns follow ``vocabulary`` order.
    Every retained patient has at least one positive count.
    """

    def __init__(self, vocabulary: DiseaseVocabulary, patients: list[PatientRecord], counts):
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (len(patients), vocabulary.size):
            raise DataError(
                f"counts shape {counts.shape} does not match "
                f"{len(patients)} patients x {vocabulary.size} codes"
            )
        if counts.size and counts.min() < 0:
            raise DataError("counts must be non-negative")
        if len(patients) and not np.all(counts.sum(axis=1) > 0):
            bad = [patients[m].id for m in np.nonzero(counts.sum(axis=1) == 0)[0]]
            raise DataError(f"patient with zero diagnoses: {', '.join(bad)}")
        ids = [p.id for p in patients]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate patient ids in cohort")
        counts = counts.copy()
        counts.flags.writeable = False
        self.vocabulary = vocabulary
        self.patients = tuple(patients)
        self.counts = counts

    @property
    def n_patients(self) -> int:
        return len(self.patients)

    @property
    def n_codes(self) -> int:
        return self.vocabulary.size

    def patient_ids(self) -> list[str]:
        return [p.id for p in self.patients]

    def total_counts(self) -> np.ndarray:
        """Total diagnoses per patient."""
        return self.counts.sum(axis=1)

    def survival_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(times, events) in patient order."""
        times = np.array([p.survival_time for p in self.patients], dtype=np.float64)
        events = np.array([p.event for p in self.patients], dtype=bool)
        return times, events


@dataclass(frozen=True)
class ExposureBins:
    """Per (sex, single-year age) exposure and attributed diagnosis counts.

    ``counts`` holds each patient's diagnoses spread over their bins
    proportionally to the person-years they contribute to each bin, so the
    entries are real-valued even though patient counts are integers.
    """

    sex: np.ndarray  # (B,) of "M"/"F"
    age: np.ndarray  # (B,) int years
    person_years: np.ndarray  # (B,) float
    counts: np.ndarray  # (B, V) float

    def __post_init__(self):
        keys = list(zip(self.sex.tolist(), self.age.tolist()))
        if len(set(keys)) != len(keys):
            raise DataError("duplicate (sex, age) bin")
        if self.person_years.size and self.person_years.min() < 0:
            raise DataError("person_years must be >= 0")

    @property
    def n_bins(self) -> int:
        return len(self.age)

    def total_person_years(self) -> float:
        return float(self.person_years.sum())


@dataclass
class CohortValidationReport:
    """Per-patient pass/fail from the inclusion rules; never mutates the cohort."""

    min_total: int
    max_total: int
    index_code: str
    min_index: int
    passed: list[str] = field(default_factory=list)
    failures: dict[str, list[str]] = field(default_factory=dict)

    @property
    def all_pass(self) -> bool:
        return not self.failures

    def reasons(self, patient_id: str) -> list[str]:
        return self.failures.get(patient_id, [])


# ---------------------------------------------------------------------------
# file ingestion


def load_vocabulary(path) -> DiseaseVocabulary:
    """One code per line, order significant."""
    codes = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            code = line.strip()
            if code:
                codes.append(code)
    if not codes:
        raise DataError(f"vocabulary file {path} is empty")
    return DiseaseVocabulary(tuple(codes))


def write_vocabulary(vocabulary: DiseaseVocabulary, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for code in vocabulary.codes:
            fh.write(code + "\n")


def _parse_demographics(path) -> dict[str, PatientRecord]:
    expected = ["patient_id", "sex", "age_at_entry", "followup_years", "survival_time", "event"]
    records: dict[str, PatientRecord] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected:
            raise DataError(f"{path}: expected header {','.join(expected)}")
        for row in reader:
            line = reader.line_num
            if len(row) != 6:
                raise DataError(f"{path}:{line}: expected 6 fields, got {len(row)}")
            pid, sex, age_s, fup_s, surv_s, event_s = row
            if not pid:
                raise DataError(f"{path}:{line}: empty patient_id")
            if pid in records:
                raise DataError(f"{path}:{line}: duplicate patient id {pid!r} in demographics")
            if event_s not in ("0", "1"):
                raise DataError(f"{path}:{line}: event must be 0 or 1, got {event_s!r}")
            try:
                record = PatientRecord(
                    id=pid,
                    sex=sex,
                    age_at_entry=float(age_s),
                    followup_years=float(fup_s),
                    survival_time=float(surv_s),
                    event=event_s == "1",
                )
            except ValueError as exc:
                raise DataError(f"{path}:{line}: malformed numeric field ({exc})") from None
            except DataError as exc:
                raise DataError(f"{path}:{line}: {exc}") from None
            records[pid] = record
    return records


def load_cohort(diagnoses_path, demographics_path, vocabulary: DiseaseVocabulary) -> Cohort:
    """Read the diagnoses and demographics CSVs into a Cohort.

    Counts are aggregated per (patient, code). Patient rows are ordered by
    patient id, so the same files always produce the same matrix.
    """
    demographics = _parse_demographics(demographics_path)

    tallies: dict[str, np.ndarray] = {}
    n_rows = 0
    with open(diagnoses_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header not in (["patient_id", "code", "count"], ["patient_id", "code"]):
            raise DataError(f"{diagnoses_path}: expected header patient_id,code[,count]")
        has_count = header == ["patient_id", "code", "count"]
        for row in reader:
            line = reader.line_num
            if len(row) != len(header):
                raise DataError(
                    f"{diagnoses_path}:{line}: expected {len(header)} fields, got {len(row)}"
                )
            pid, code = row[0], row[1]
            if code not in vocabulary:
                raise DataError(f"{diagnoses_path}:{line}: unknown disease code {code!r}")
            if pid not in demographics:
                raise DataError(
                    f"{diagnoses_path}:{line}: patient {pid!r} missing from demographics"
                )
            if has_count and row[2] != "":
                try:
                    count = int(row[2])
                except ValueError:
                    raise DataError(
                        f"{diagnoses_path}:{line}: count must be an integer, got {row[2]!r}"
                    ) from None
                if count < 0:
                    raise DataError(f"{diagnoses_path}:{line}: count must be >= 0")
            else:
                count = 1
            if pid not in tallies:
                tallies[pid] = np.zeros(vocabulary.size, dtype=np.int64)
            tallies[pid][vocabulary.index(code)] += count
            n_rows += 1
    if n_rows == 0:
        raise DataError(f"{diagnoses_path}: no diagnoses")

    missing = [pid for pid in demographics if pid not in tallies or tallies[pid].sum() == 0]
    if missing:
        raise DataError(f"patient with zero diagnoses: {', '.join(sorted(missing))}")

    order = sorted(demographics)
    patients = [demographics[pid] for pid in order]
    counts = np.vstack([tallies[pid] for pid in order])
    return Cohort(vocabulary, patients, counts)


def write_cohort(cohort: Cohort, diagnoses_path, demographics_path, vocabulary_path) -> None:
    """Inverse of load_cohort; a round trip reproduces the cohort exactly."""
    write_vocabulary(cohort.vocabulary, vocabulary_path)
    with open(demographics_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["patient_id", "sex", "age_at_entry", "followup_years", "survival_time", "event"]
        )
        for p in cohort.patients:
            writer.writerow(
                [p.id, p.sex, repr(p.age_at_entry), repr(p.followup_years),
                 repr(p.survival_time), int(p.event)]
            )
    with open(diagnoses_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_id", "code", "count"])
        for m, p in enumerate(cohort.patients):
            row = cohort.counts[m]
            for v in np.nonzero(row)[0]:
                writer.writerow([p.id, cohort.vocabulary.codes[v], int(row[v])])


# ---------------------------------------------------------------------------
# inclusion rules


def validate_cohort(
    cohort: Cohort, min_total: int, max_total: int, index_code: str, min_index: int
) -> CohortValidationReport:
    """Check each patient against the total-count and index-count rules.

    A patient passes iff min_total <= sum(counts) <= max_total and the count
    of ``index_code`` is at least ``min_index``. The cohort is not modified.
    """
    index = cohort.vocabulary.index(index_code)
    report = CohortValidationReport(
        min_total=min_total, max_total=max_total, index_code=index_code, min_index=min_index
    )
    totals = cohort.total_counts()
    for m, patient in enumerate(cohort.patients):
        reasons = []
        if totals[m] < min_total:
            reasons.append("total below minimum")
        if totals[m] > max_total:
            reasons.append("total above maximum")
        if cohort.counts[m, index] < min_index:
            reasons.append("index count below minimum")
        if reasons:
            report.failures[patient.id] = reasons
        else:
            report.passed.append(patient.id)
    return report


# ---------------------------------------------------------------------------
# exposure binning


def patient_age_bins(age_at_entry: float, followup_years: float) -> list[tuple[int, float]]:
    """Split one follow-up interval across integer age years.

    Returns (age_year, person_years) pairs; the first and last bins are
    fractional when entry/exit fall inside a year.
    """
    bins: list[tuple[int, float]] = []
    age = float(age_at_entry)
    remaining = float(followup_years)
    while remaining > 1e-12:
        year = int(math.floor(age + 1e-9))
        span = min(remaining, (year + 1.0) - age)
        bins.append((year, span))
        age = float(year + 1)
        remaining -= span
    return bins


def bin_exposure(cohort: Cohort) -> ExposureBins:
    """Aggregate follow-up and diagnosis counts into (sex, age-year) bins.

    Each patient's counts are attributed to their bins proportionally to the
    person-years in each bin; total person-years is conserved exactly.
    """
    if cohort.n_patients == 0:
        raise DataError("cohort is empty")
    py: dict[tuple[str, int], float] = {}
    counts: dict[tuple[str, int], np.ndarray] = {}
    for m, patient in enumerate(cohort.patients):
        bins = patient_age_bins(patient.age_at_entry, patient.followup_years)
        row = cohort.counts[m].astype(np.float64)
        for year, span in bins:
            key = (patient.sex, year)
            py[key] = py.get(key, 0.0) + span
            share = row * (span / patient.followup_years)
            if key in counts:
                counts[key] += share
            else:
                counts[key] = share
    keys = sorted(py)
    return ExposureBins(
        sex=np.array([k[0] for k in keys]),
        age=np.array([k[1] for k in keys], dtype=np.int64),
        person_years=np.array([py[k] for k in keys], dtype=np.float64),
        counts=np.vstack([counts[k] for k in keys]),
    )
