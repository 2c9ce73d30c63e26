"""Per-disease, per-sex Poisson rate model over age, and expected counts.

Counts in (sex, single-year age) exposure bins are fit with a log-link
Poisson GLM: intercept plus a cubic B-spline in age, with log person-years
as offset. Predictions integrate the fitted rate over each patient's own
age bins to produce the expected-count matrix consumed by the Poisson
mixture model. A precomputed per-age rate table is an alternative,
fit-free source of the same matrix.
"""

from __future__ import annotations

import csv
import hashlib
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline
from scipy.special import xlogy
from sklearn.base import BaseEstimator

from .cohort import Cohort, ExposureBins, patient_age_bins
from .errors import DataError, NumericalError

__all__ = [
    "SplineBasis",
    "PoissonRateModel",
    "ExpectedCounts",
    "RateTable",
    "EXPECTED_FLOOR",
]

#: floor applied to every expected count so downstream Poisson
#: log-likelihoods stay finite
EXPECTED_FLOOR = 1e-8

#: rate assigned to (disease, sex) slices with no events at all
ZERO_RATE = 1e-12


@dataclass(frozen=True)
class SplineBasis:
    """Intercept-free B-spline basis over an age range.

    ``df`` columns of degree ``degree`` with ``df - degree`` interior knots;
    the constant column of the full basis is dropped because the GLM carries
    its own intercept. ``df == 0`` denotes the intercept-only reduction used
    when the data contains a single distinct age.
    """

    interior_knots: tuple[float, ...]
    lo: float
    hi: float
    degree: int
    df: int

    def __post_init__(self):
        if self.df > 0 and not self.lo < self.hi:
            raise DataError("spline range must have lo < hi")
        knots = np.asarray(self.interior_knots)
        if knots.size and not np.all(np.diff(knots) > 0):
            raise DataError("interior knots must be strictly increasing")
        if knots.size and (knots.min() <= self.lo or knots.max() >= self.hi):
            raise DataError("interior knots must lie strictly inside (lo, hi)")

    @classmethod
    def from_exposure(cls, ages, person_years, df: int = 4, degree: int = 3) -> "SplineBasis":
        """Place interior knots at exposure-weighted age quantiles.

        With fewer distinct ages than df + 1 the basis degrades gracefully:
        df shrinks to (distinct ages - 1) and the degree with it, down to an
        intercept-only basis for a single age.
        """
        if df < 1:
            raise DataError("df must be >= 1")
        ages = np.asarray(ages, dtype=np.float64)
        person_years = np.asarray(person_years, dtype=np.float64)
        keep = person_years > 0
        ages, person_years = ages[keep], person_years[keep]
        if ages.size == 0:
            raise DataError("no bins with positive person-years")
        distinct = np.unique(ages)
        df_eff = min(df, max(len(distinct) - 1, 0))
        if df_eff == 0:
            return cls((), float(distinct[0]), float(distinct[0]), 0, 0)
        degree_eff = min(degree, df_eff)
        n_interior = df_eff - degree_eff
        lo, hi = float(distinct[0]), float(distinct[-1])
        if n_interior > 0:
            order = np.argsort(ages)
            cum = np.cumsum(person_years[order])
            qs = np.arange(1, n_interior + 1) / (n_interior + 1)
            knots = np.interp(qs * cum[-1], cum, ages[order])
            if not (np.all(np.diff(knots) > 0) and knots[0] > lo and knots[-1] < hi):
                knots = np.linspace(lo, hi, n_interior + 2)[1:-1]
            interior = tuple(float(k) for k in knots)
        else:
            interior = ()
        return cls(interior, lo, hi, degree_eff, df_eff)

    def design(self, ages) -> np.ndarray:
        """Evaluate the df basis columns at the given ages (clamped to range)."""
        ages = np.asarray(ages, dtype=np.float64)
        if self.df == 0:
            return np.zeros((ages.size, 0))
        clamped = np.clip(ages, self.lo, self.hi)
        t = np.r_[
            np.full(self.degree + 1, self.lo),
            np.asarray(self.interior_knots),
            np.full(self.degree + 1, self.hi),
        ]
        full = BSpline.design_matrix(clamped, t, self.degree).toarray()
        return full[:, 1:]


@dataclass(frozen=True)
class ExpectedCounts:
    """Positive M x V matrix of model-based expected diagnosis counts."""

    values: np.ndarray
    provenance: str
    floor: float = EXPECTED_FLOOR

    def __post_init__(self):
        if self.values.ndim != 2:
            raise DataError("expected counts must be a matrix")
        if self.values.size and self.values.min() < self.floor:
            raise DataError(f"expected counts must be >= floor {self.floor}")
        self.values.flags.writeable = False

    @property
    def shape(self):
        return self.values.shape


def _poisson_deviance(y: np.ndarray, mu: np.ndarray) -> float:
    return float(2.0 * np.sum(xlogy(y, y / np.maximum(mu, 1e-300)) - (y - mu)))


def _irls_fit(
    X: np.ndarray,
    y: np.ndarray,
    offset: np.ndarray,
    ridge: float,
    tol: float,
    max_iter: int,
) -> tuple[np.ndarray, float, bool, list[float]]:
    """One Poisson GLM fit with log link, offset, ridge jitter and step halving.

    Returns (coefficients, deviance, converged, deviance history). The
    history is non-increasing within 1e-10 by construction.
    """
    n, p = X.shape
    beta = np.zeros(p)
    beta[0] = np.log(max(y.sum(), 1e-300) / np.exp(offset).sum())
    eta = X @ beta + offset
    mu = np.exp(np.clip(eta, -700, 30))
    dev = _poisson_deviance(y, mu)
    history = [dev]
    converged = False
    for _ in range(max_iter):
        w = np.maximum(mu, 1e-300)
        work = (eta - offset) + (y - mu) / w
        xtw = X.T * w
        lhs = xtw @ X + ridge * np.eye(p)
        rhs = xtw @ work
        try:
            beta_new = np.linalg.solve(lhs, rhs)
        except np.linalg.LinAlgError:
            raise NumericalError("design matrix rank-deficient after ridge jitter") from None
        if not np.all(np.isfinite(beta_new)):
            raise NumericalError("design matrix rank-deficient after ridge jitter")
        # step-halve until the deviance does not increase
        step = beta_new - beta
        for _ in range(30):
            candidate = beta + step
            eta_c = candidate @ X.T + offset
            mu_c = np.exp(np.clip(eta_c, -700, 30))
            dev_c = _poisson_deviance(y, mu_c)
            if dev_c <= dev + 1e-10:
                break
            step *= 0.5
        else:
            break
        rel_change = abs(dev - dev_c) / (abs(dev) + 1e-12)
        beta, eta, mu, dev = candidate, eta_c, mu_c, dev_c
        history.append(dev)
        if rel_change < tol:
            converged = True
            break
    return beta, dev, converged, history


class PoissonRateModel(BaseEstimator):
    """Expected diagnosis rates by disease, sex and age.

    Parameters follow the estimator convention: everything is set in the
    constructor, ``fit`` consumes ExposureBins and stores per-(code, sex)
    coefficients, ``predict_expected`` turns a cohort into expected counts.
    """

    def __init__(self, df: int = 4, degree: int = 3, ridge: float = 1e-8,
                 tol: float = 1e-8, max_iter: int = 100, floor: float = EXPECTED_FLOOR):
        self.df = df
        self.degree = degree
        self.ridge = ridge
        self.tol = tol
        self.max_iter = max_iter
        self.floor = floor

    def fit(self, bins: ExposureBins, codes=None, basis: SplineBasis | None = None):
        """Fit one GLM per (disease, sex); sexes with no bins are skipped."""
        keep = bins.person_years > 0
        sexes = bins.sex[keep]
        ages = bins.age[keep].astype(np.float64)
        py = bins.person_years[keep]
        counts = bins.counts[keep]
        if ages.size == 0:
            raise DataError("no bins with positive person-years")
        if basis is None:
            basis = SplineBasis.from_exposure(ages, py, df=self.df, degree=self.degree)
        self.basis_ = basis
        self.codes_ = tuple(codes) if codes is not None else tuple(
            str(i) for i in range(counts.shape[1])
        )
        if len(self.codes_) != counts.shape[1]:
            raise DataError("codes length does not match count columns")

        self.coef_: dict[str, np.ndarray] = {}
        self.deviance_: dict[str, np.ndarray] = {}
        self.converged_: dict[str, np.ndarray] = {}
        self.deviance_history_: dict[tuple[str, str], list[float]] = {}
        V = counts.shape[1]
        p = 1 + basis.df
        for sex in ("M", "F"):
            sel = sexes == sex
            if not sel.any():
                continue
            X = np.hstack([np.ones((int(sel.sum()), 1)), basis.design(ages[sel])])
            offset = np.log(py[sel])
            coef = np.zeros((V, p))
            devs = np.zeros(V)
            conv = np.zeros(V, dtype=bool)
            for v in range(V):
                y = counts[sel, v]
                if y.sum() == 0:
                    beta = np.zeros(p)
                    beta[0] = np.log(ZERO_RATE)
                    mu = np.exp(beta[0] + offset)
                    coef[v], devs[v], conv[v] = beta, _poisson_deviance(y, mu), True
                    self.deviance_history_[(self.codes_[v], sex)] = [devs[v]]
                    continue
                beta, dev, ok, history = _irls_fit(
                    X, y.astype(np.float64), offset, self.ridge, self.tol, self.max_iter
                )
                coef[v], devs[v], conv[v] = beta, dev, ok
                self.deviance_history_[(self.codes_[v], sex)] = history
            self.coef_[sex] = coef
            self.deviance_[sex] = devs
            self.converged_[sex] = conv
        if not self.coef_:
            raise DataError("no sex had any exposure")
        return self

    def rate(self, code_index: int, sex: str, ages) -> np.ndarray:
        """Fitted events-per-person-year rate at the given ages."""
        coef = self.coef_[sex][code_index]
        X = np.hstack([np.ones((np.size(ages), 1)), self.basis_.design(ages)])
        return np.exp(X @ coef)

    def predict_expected(self, cohort: Cohort) -> ExpectedCounts:
        """Integrate fitted rates over each patient's age bins.

        Ages outside the spline support are clamped to the boundary with a
        warning. Every entry is floored at ``floor``.
        """
        for p in cohort.patients:
            if p.sex not in self.coef_:
                raise DataError(f"fit does not cover sex {p.sex!r} (patient {p.id})")
        values = np.empty((cohort.n_patients, cohort.n_codes))
        clamped_any = False
        for m, patient in enumerate(cohort.patients):
            bins = patient_age_bins(patient.age_at_entry, patient.followup_years)
            ages = np.array([b[0] for b in bins], dtype=np.float64)
            pys = np.array([b[1] for b in bins])
            if self.basis_.df > 0 and (ages.min() < self.basis_.lo or ages.max() > self.basis_.hi):
                clamped_any = True
            X = np.hstack([np.ones((len(bins), 1)), self.basis_.design(ages)])
            rates = np.exp(X @ self.coef_[patient.sex].T)  # (bins, V)
            values[m] = pys @ rates
        if clamped_any:
            warnings.warn("ages outside spline support were clamped to the boundary")
        np.maximum(values, self.floor, out=values)
        return ExpectedCounts(values, provenance=f"rate-model:{self._digest()}", floor=self.floor)

    def export_fit_csv(self, path) -> None:
        """`code,sex,coef_index,value,deviance,converged` rows, one per coefficient."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["code", "sex", "coef_index", "value", "deviance", "converged"])
            for sex in sorted(self.coef_):
                coef = self.coef_[sex]
                for v, code in enumerate(self.codes_):
                    for j in range(coef.shape[1]):
                        writer.writerow([
                            code, sex, j, repr(float(coef[v, j])),
                            repr(float(self.deviance_[sex][v])),
                            int(self.converged_[sex][v]),
                        ])

    def to_rate_table(self, ages=None) -> "RateTable":
        """Tabulate fitted rates on an integer age grid."""
        if ages is None:
            ages = np.arange(int(np.floor(self.basis_.lo)), int(np.ceil(self.basis_.hi)) + 1)
        ages = np.asarray(ages, dtype=np.int64)
        rates = {}
        for sex, coef in self.coef_.items():
            X = np.hstack([np.ones((ages.size, 1)), self.basis_.design(ages.astype(float))])
            rates[sex] = np.exp(coef @ X.T)  # (V, n_ages)
        return RateTable(codes=self.codes_, ages=ages, rates=rates)

    def _digest(self) -> str:
        h = hashlib.blake2b(digest_size=8)
        for sex in sorted(self.coef_):
            h.update(sex.encode())
            h.update(np.ascontiguousarray(self.coef_[sex]).tobytes())
        return h.hexdigest()


class RateTable:
    """Per (code, sex, integer age) event rates; the fit-free expectation source."""

    def __init__(self, codes, ages, rates: dict[str, np.ndarray]):
        self.codes = tuple(codes)
        self.ages = np.asarray(ages, dtype=np.int64)
        if self.ages.size == 0 or not np.array_equal(
            self.ages, np.arange(self.ages[0], self.ages[-1] + 1)
        ):
            raise DataError("rate table ages must form a contiguous integer range")
        self.rates = {}
        for sex, mat in rates.items():
            if sex not in ("M", "F"):
                raise DataError(f"rate table sex must be M or F, got {sex!r}")
            mat = np.asarray(mat, dtype=np.float64)
            if mat.shape != (len(self.codes), self.ages.size):
                raise DataError("rate matrix shape does not match codes x ages")
            if mat.size and (mat.min() < 0 or not np.all(np.isfinite(mat))):
                raise DataError("rates must be finite and >= 0")
            self.rates[sex] = mat

    def scale_all(self, factor: float) -> None:
        for sex in self.rates:
            self.rates[sex] *= factor

    def scale_code(self, code: str, factor: float) -> None:
        v = self.codes.index(code)
        for sex in self.rates:
            self.rates[sex][v] *= factor

    def expected_for_patient(self, sex: str, age_at_entry: float, followup_years: float) -> np.ndarray:
        """Sum rate * person-years over the patient's age bins (ages clamped)."""
        if sex not in self.rates:
            raise DataError(f"rate table does not cover sex {sex!r}")
        mat = self.rates[sex]
        out = np.zeros(len(self.codes))
        lo, hi = int(self.ages[0]), int(self.ages[-1])
        for year, py in patient_age_bins(age_at_entry, followup_years):
            idx = min(max(year, lo), hi) - lo
            out += mat[:, idx] * py
        return out

    def predict_expected(self, cohort: Cohort, floor: float = EXPECTED_FLOOR) -> ExpectedCounts:
        if tuple(cohort.vocabulary.codes) != self.codes:
            raise DataError("rate table codes do not match the cohort vocabulary")
        values = np.vstack([
            self.expected_for_patient(p.sex, p.age_at_entry, p.followup_years)
            for p in cohort.patients
        ])
        np.maximum(values, floor, out=values)
        return ExpectedCounts(values, provenance=f"rate-table:{self._digest()}", floor=floor)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["code", "sex", "age", "rate_per_person_year"])
            for v, code in enumerate(self.codes):
                for sex in sorted(self.rates):
                    for j, age in enumerate(self.ages):
                        writer.writerow([code, sex, int(age), repr(float(self.rates[sex][v, j]))])

    @classmethod
    def from_csv(cls, path) -> "RateTable":
        entries: dict[tuple[str, str, int], float] = {}
        codes: list[str] = []
        seen_codes = set()
        sexes = set()
        ages = set()
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["code", "sex", "age", "rate_per_person_year"]:
                raise DataError(f"{path}: expected header code,sex,age,rate_per_person_year")
            for row in reader:
                line = reader.line_num
                if len(row) != 4:
                    raise DataError(f"{path}:{line}: expected 4 fields")
                code, sex, age_s, rate_s = row
                try:
                    age = int(age_s)
                    rate = float(rate_s)
                except ValueError:
                    raise DataError(f"{path}:{line}: malformed age or rate") from None
                key = (code, sex, age)
                if key in entries:
                    raise DataError(f"{path}:{line}: duplicate entry for {key}")
                entries[key] = rate
                if code not in seen_codes:
                    seen_codes.add(code)
                    codes.append(code)
                sexes.add(sex)
                ages.add(age)
        if not entries:
            raise DataError(f"{path}: empty rate table")
        age_grid = np.arange(min(ages), max(ages) + 1)
        rates = {}
        for sex in sorted(sexes):
            mat = np.empty((len(codes), age_grid.size))
            for v, code in enumerate(codes):
                for j, age in enumerate(age_grid):
                    try:
                        mat[v, j] = entries[(code, sex, int(age))]
                    except KeyError:
                        raise DataError(
                            f"{path}: missing rate for code={code} sex={sex} age={age}"
                        ) from None
            rates[sex] = mat
        return cls(codes=codes, ages=age_grid, rates=rates)

    def _digest(self) -> str:
        h = hashlib.blake2b(digest_size=8)
        for sex in sorted(self.rates):
            h.update(sex.encode())
            h.update(np.ascontiguousarray(self.rates[sex]).tobytes())
        return h.hexdigest()
