"""Survival and comorbidity statistics for patient subgroups.

Kaplan-Meier product-limit curves, the G-sample log-rank test, chi-square
tail probabilities, tie-corrected Kruskal-Wallis, chi-square tests of
independence, and 29-category comorbidity profiles, plus the per-subgroup
demographic report that ties them together.

Tie convention throughout survival code: at equal times, events precede
censorings, so subjects censored at t are still at risk at t.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import gammainc, gammaincc

from .cohort import Cohort
from .errors import DataError

__all__ = [
    "ECI_CATEGORIES",
    "KmCurve",
    "LogRankResult",
    "KruskalWallisResult",
    "EciProfile",
    "SubgroupReport",
    "kaplan_meier",
    "log_rank_test",
    "chi_square_sf",
    "chi_square_cdf",
    "kruskal_wallis",
    "chi2_independence",
    "eci_profile",
    "load_eci_mapping",
    "write_eci_mapping",
    "subgroup_report",
]

#: the 29 comorbidity categories, normalized to lowercase underscores
ECI_CATEGORIES = (
    "congestive_heart_failure",
    "cardiac_arrhythmias",
    "valvular_disease",
    "pulmonary_circulation_disorders",
    "peripheral_vascular_disease",
    "hypertension",
    "paralysis",
    "other_neurological_disorders",
    "chronic_pulmonary_disease",
    "diabetes_uncomplicated",
    "diabetes_complicated",
    "hypothyroidism",
    "renal_failure",
    "liver_disease",
    "peptic_ulcer_disease",
    "lymphoma",
    "metastatic_cancer",
    "solid_tumour",
    "rheumatoid_arthritis",
    "coagulopathy",
    "obesity",
    "weight_loss",
    "fluid_and_electrolyte_disorders",
    "blood_loss_anaemia",
    "deficiency_anaemia",
    "alcohol_abuse",
    "drug_abuse",
    "psychoses",
    "depression",
)


# ---------------------------------------------------------------------------
# survival


@dataclass(frozen=True)
class KmCurve:
    """Product-limit estimate: one row per distinct event time."""

    times: np.ndarray  # ascending distinct event times
    survival: np.ndarray  # S(t) just after each event time, starts <= 1
    at_risk: np.ndarray  # n at each event time
    events: np.ndarray  # d at each event time

    def __post_init__(self):
        if self.survival.size:
            if self.survival.min() < 0 or self.survival.max() > 1:
                raise DataError("survival probabilities must lie in [0, 1]")
            if np.any(np.diff(self.survival) > 1e-12):
                raise DataError("survival must be non-increasing")
            if np.any(np.diff(self.at_risk) >= 0):
                raise DataError("at-risk counts must be strictly decreasing")

    def evaluate(self, t: float) -> float:
        """S(t); right-continuous step function starting at 1."""
        idx = np.searchsorted(self.times, t, side="right")
        return 1.0 if idx == 0 else float(self.survival[idx - 1])


def kaplan_meier(times, events) -> KmCurve:
    """Product-limit estimator over distinct event times."""
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    if times.size == 0:
        raise DataError("no survival observations")
    if times.min() < 0 or not np.all(np.isfinite(times)):
        raise DataError("times must be finite and >= 0")
    event_times = np.unique(times[events])
    surv, risks, deaths = [], [], []
    s = 1.0
    for t in event_times:
        n = int((times >= t).sum())
        d = int(((times == t) & events).sum())
        s *= 1.0 - d / n
        surv.append(s)
        risks.append(n)
        deaths.append(d)
    return KmCurve(
        times=event_times,
        survival=np.array(surv),
        at_risk=np.array(risks, dtype=np.int64),
        events=np.array(deaths, dtype=np.int64),
    )


@dataclass(frozen=True)
class LogRankResult:
    chi_square: float
    degrees_of_freedom: int
    p_value: float


def log_rank_test(times, events, labels) -> LogRankResult:
    """G-sample log-rank test over pooled risk sets.

    At each distinct event time the observed events per group are compared
    with their hypergeometric expectation; the statistic is the quadratic
    form over the first G-1 groups with the hypergeometric covariance
    (generalized inverse if singular). df = G - 1.
    """
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    labels = np.asarray(labels)
    groups = np.unique(labels)
    G = len(groups)
    if G < 2:
        raise DataError("log-rank needs at least two non-empty groups")
    if not events.any():
        raise DataError("no events observed")

    event_times = np.unique(times[events])
    observed = np.zeros(G)
    expected = np.zeros(G)
    cov = np.zeros((G, G))
    for t in event_times:
        at_risk = times >= t
        n_j = int(at_risk.sum())
        d_j = int(((times == t) & events).sum())
        n_gj = np.array([(at_risk & (labels == g)).sum() for g in groups], dtype=np.float64)
        d_gj = np.array([((times == t) & events & (labels == g)).sum() for g in groups],
                        dtype=np.float64)
        observed += d_gj
        expected += d_j * n_gj / n_j
        if n_j > 1:
            frac = n_gj / n_j
            hyper = d_j * (n_j - d_j) / (n_j - 1)
            cov += hyper * (np.diag(frac) - np.outer(frac, frac))

    diff = (observed - expected)[:-1]
    V = cov[:-1, :-1]
    try:
        sol = np.linalg.solve(V, diff)
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        sol = np.linalg.pinv(V) @ diff
    chi2 = float(max(diff @ sol, 0.0))
    df = G - 1
    return LogRankResult(chi_square=chi2, degrees_of_freedom=df,
                         p_value=chi_square_sf(chi2, df))


# ---------------------------------------------------------------------------
# chi-square tail


def chi_square_sf(x: float, df: int) -> float:
    """Upper-tail probability Q(df/2, x/2) of the chi-square distribution."""
    if x < 0:
        raise DataError("chi-square statistic must be >= 0")
    if df < 1:
        raise DataError("degrees of freedom must be >= 1")
    return float(gammaincc(df / 2.0, x / 2.0))


def chi_square_cdf(x: float, df: int) -> float:
    if x < 0:
        raise DataError("chi-square statistic must be >= 0")
    return float(gammainc(df / 2.0, x / 2.0))


# ---------------------------------------------------------------------------
# rank test


@dataclass(frozen=True)
class KruskalWallisResult:
    h_statistic: float
    degrees_of_freedom: int
    p_value: float


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def kruskal_wallis(groups: list) -> KruskalWallisResult:
    """Tie-corrected H test; identical observations give H = 0, p = 1."""
    groups = [np.asarray(g, dtype=np.float64) for g in groups]
    G = len(groups)
    if G < 2:
        raise DataError("Kruskal-Wallis needs at least two groups")
    if any(g.size == 0 for g in groups):
        raise DataError("every group must be non-empty")
    pooled = np.concatenate(groups)
    N = pooled.size
    ranks = _midranks(pooled)
    h = 0.0
    start = 0
    for g in groups:
        r_mean = ranks[start:start + g.size].mean()
        h += g.size * (r_mean - (N + 1) / 2.0) ** 2
        start += g.size
    h *= 12.0 / (N * (N + 1))
    _, tie_counts = np.unique(pooled, return_counts=True)
    correction = 1.0 - float(((tie_counts ** 3 - tie_counts).sum()) / (N ** 3 - N))
    if correction <= 0:
        return KruskalWallisResult(0.0, G - 1, 1.0)
    h /= correction
    return KruskalWallisResult(float(h), G - 1, chi_square_sf(float(h), G - 1))


def chi2_independence(table) -> tuple[float, int, float]:
    """Pearson chi-square test on a contingency table.

    Rows/columns with zero margin are dropped; a degenerate table (fewer
    than 2 rows or columns left) has no variation to test, giving p = 1.
    2 x 2 tables get the Yates continuity correction.
    """
    table = np.asarray(table, dtype=np.float64)
    table = table[table.sum(axis=1) > 0][:, table.sum(axis=0) > 0]
    if table.shape[0] < 2 or table.shape[1] < 2:
        return 0.0, 1, 1.0
    row = table.sum(axis=1, keepdims=True)
    col = table.sum(axis=0, keepdims=True)
    exp = row @ col / table.sum()
    diff = np.abs(table - exp)
    if table.shape == (2, 2):
        diff = np.maximum(diff - 0.5, 0.0)
    stat = float((diff ** 2 / exp).sum())
    df = (table.shape[0] - 1) * (table.shape[1] - 1)
    return stat, df, chi_square_sf(stat, df)


# ---------------------------------------------------------------------------
# comorbidity profiles


@dataclass(frozen=True)
class EciProfile:
    """Presence flags over the 29 categories, their count, and the band."""

    flags: dict[str, bool]
    score: int
    band: str

    @classmethod
    def from_flags(cls, flags: dict[str, bool]) -> "EciProfile":
        score = sum(flags.values())
        if score <= 1:
            band = "0-1"
        elif score <= 4:
            band = "2-4"
        else:
            band = "5+"
        return cls(flags=flags, score=score, band=band)


def eci_profile(counts_row, vocabulary, mapping: dict[str, str]) -> EciProfile:
    """Flag a category when any of its mapped codes has a positive count."""
    for code, category in mapping.items():
        if category not in ECI_CATEGORIES:
            raise DataError(f"unknown comorbidity category {category!r} for code {code!r}")
    flags = {name: False for name in ECI_CATEGORIES}
    counts_row = np.asarray(counts_row)
    for code, category in mapping.items():
        if code in vocabulary and counts_row[vocabulary.index(code)] > 0:
            flags[category] = True
    return EciProfile.from_flags(flags)


def load_eci_mapping(path) -> dict[str, str]:
    mapping: dict[str, str] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["code", "category"]:
            raise DataError(f"{path}: expected header code,category")
        for row in reader:
            if len(row) != 2:
                raise DataError(f"{path}:{reader.line_num}: expected 2 fields")
            code, category = row
            if category not in ECI_CATEGORIES:
                raise DataError(f"{path}:{reader.line_num}: unknown category {category!r}")
            if code in mapping:
                raise DataError(f"{path}:{reader.line_num}: duplicate code {code!r}")
            mapping[code] = category
    return mapping


def write_eci_mapping(mapping: dict[str, str], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["code", "category"])
        for code in mapping:
            writer.writerow([code, mapping[code]])


# ---------------------------------------------------------------------------
# subgroup report (the Tables 4-6 surface)


def _median_low(values) -> float:
    """Lower median for even n; used for integer-valued columns."""
    s = np.sort(np.asarray(values))
    return float(s[(len(s) - 1) // 2])


def _median_mid(values) -> float:
    """Midpoint median; used for the age column."""
    return float(np.median(np.asarray(values)))


@dataclass
class SubgroupReport:
    group_labels: list[int]
    sizes: list[int]
    male_counts: list[int]
    female_counts: list[int]
    median_age: list[float]
    median_diagnoses: list[float]
    median_eci: list[float]
    band_counts: dict[str, list[int]]  # band -> per-group counts
    category_counts: dict[str, list[int]]  # category -> per-group counts
    p_values: dict[str, float | None]
    category_p_values: dict[str, float | None]

    def to_csv_rows(self) -> list[list]:
        header = ["metric"] + [f"subgroup_{g}" for g in self.group_labels] + ["p_value", "test"]
        rows = [header]

        def fmt_p(p):
            return "" if p is None else repr(float(p))

        rows.append(["n_patients"] + [str(s) for s in self.sizes] + ["", ""])
        rows.append(["male_count"] + [str(c) for c in self.male_counts]
                    + [fmt_p(self.p_values["sex"]), "chi_square_independence"])
        rows.append(["female_count"] + [str(c) for c in self.female_counts] + ["", ""])
        rows.append(["median_age"] + [repr(v) for v in self.median_age]
                    + [fmt_p(self.p_values["age"]), "kruskal_wallis"])
        rows.append(["median_diagnoses"] + [repr(v) for v in self.median_diagnoses]
                    + [fmt_p(self.p_values["diagnoses"]), "kruskal_wallis"])
        rows.append(["median_eci"] + [repr(v) for v in self.median_eci]
                    + [fmt_p(self.p_values["eci_score"]), "kruskal_wallis"])
        for i, band in enumerate(("0-1", "2-4", "5+")):
            rows.append([f"eci_band_{band}"] + [str(c) for c in self.band_counts[band]]
                        + ([fmt_p(self.p_values["eci_bands"]), "chi_square_independence"]
                           if i == 0 else ["", ""]))
        for name in ECI_CATEGORIES:
            rows.append([f"eci_{name}"] + [str(c) for c in self.category_counts[name]]
                        + [fmt_p(self.category_p_values[name]), "chi_square_independence"])
        return rows

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerows(self.to_csv_rows())

    def to_text(self) -> str:
        rows = [[str(c) for c in row] for row in self.to_csv_rows()]
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows]
        return "\n".join(lines) + "\n"


def subgroup_report(cohort: Cohort, labels, profiles: list[EciProfile]) -> SubgroupReport:
    """Per-subgroup demographics, diagnosis and comorbidity statistics.

    Medians are exact: midpoint convention for age, lower-median for the
    integer-valued diagnosis and comorbidity-score columns. Categorical
    comparisons use the chi-square test of independence, continuous ones
    Kruskal-Wallis. With a single subgroup no p-values are emitted.
    """
    labels = np.asarray(labels)
    if len(labels) != cohort.n_patients or len(profiles) != cohort.n_patients:
        raise DataError("labels/profiles length must match the cohort")
    present = [g for g in np.unique(labels)]
    missing = sorted(set(range(int(max(present)) + 1)) - {int(g) for g in present})
    if missing:
        warnings.warn(f"subgroups of size 0 excluded from the report: {missing}")
    groups = []
    for g in present:
        idx = np.nonzero(labels == g)[0]
        groups.append(idx)

    totals = cohort.total_counts()
    sexes = np.array([p.sex for p in cohort.patients])
    ages = np.array([p.age_at_entry for p in cohort.patients])
    scores = np.array([p.score for p in profiles])

    report = SubgroupReport(
        group_labels=[int(g) for g in present],
        sizes=[len(idx) for idx in groups],
        male_counts=[int((sexes[idx] == "M").sum()) for idx in groups],
        female_counts=[int((sexes[idx] == "F").sum()) for idx in groups],
        median_age=[_median_mid(ages[idx]) for idx in groups],
        median_diagnoses=[_median_low(totals[idx]) for idx in groups],
        median_eci=[_median_low(scores[idx]) for idx in groups],
        band_counts={
            band: [int(sum(profiles[i].band == band for i in idx)) for idx in groups]
            for band in ("0-1", "2-4", "5+")
        },
        category_counts={
            name: [int(sum(profiles[i].flags[name] for i in idx)) for idx in groups]
            for name in ECI_CATEGORIES
        },
        p_values={},
        category_p_values={},
    )

    if len(groups) < 2:
        report.p_values = {k: None for k in ("sex", "age", "diagnoses", "eci_score", "eci_bands")}
        report.category_p_values = {name: None for name in ECI_CATEGORIES}
        return report

    sex_table = np.array([report.male_counts, report.female_counts])
    report.p_values["sex"] = chi2_independence(sex_table.T)[2]
    report.p_values["age"] = kruskal_wallis([ages[idx] for idx in groups]).p_value
    report.p_values["diagnoses"] = kruskal_wallis([totals[idx] for idx in groups]).p_value
    report.p_values["eci_score"] = kruskal_wallis([scores[idx] for idx in groups]).p_value
    band_table = np.array([report.band_counts[b] for b in ("0-1", "2-4", "5+")])
    report.p_values["eci_bands"] = chi2_independence(band_table.T)[2]
    for name in ECI_CATEGORIES:
        with_flag = np.array(report.category_counts[name], dtype=np.float64)
        without = np.array(report.sizes, dtype=np.float64) - with_flag
        report.category_p_values[name] = chi2_independence(np.column_stack([with_flag, without]))[2]
    return report
