import numpy as np
import pytest

from diseasemix.cohort import Cohort, DiseaseVocabulary, ExposureBins, PatientRecord
from diseasemix.errors import DataError
from diseasemix.rates import EXPECTED_FLOOR, PoissonRateModel, RateTable, SplineBasis


def make_bins(sex, age, py, counts):
    return ExposureBins(
        sex=np.asarray(sex), age=np.asarray(age, dtype=np.int64),
        person_years=np.asarray(py, dtype=np.float64),
        counts=np.asarray(counts, dtype=np.float64),
    )


def one_patient_cohort(vocab, sex="F", age=70.0, followup=2.0):
    return Cohort(vocab, [PatientRecord("p1", sex, age, followup, 1.0, False)],
                  np.ones((1, vocab.size), dtype=int))


def test_single_bin_reduces_to_intercept():
    bins = make_bins(["F"], [70], [100.0], [[10.0]])
    model = PoissonRateModel().fit(bins, codes=["d"])
    assert model.basis_.df == 0  # one distinct age: intercept only
    rate = model.rate(0, "F", [70.0])[0]
    assert rate == pytest.approx(0.10, rel=1e-8)


def test_predict_rate_times_exposure():
    bins = make_bins(["F"], [70], [100.0], [[10.0]])
    model = PoissonRateModel().fit(bins, codes=["d"])
    vocab = DiseaseVocabulary(("d",))
    cohort = one_patient_cohort(vocab, age=70.0, followup=2.0)
    expected = model.predict_expected(cohort)
    assert expected.values[0, 0] == pytest.approx(0.20, rel=1e-8)


def test_predict_additive_over_bins():
    # two ages with different rates; expectation is r1*t1 + r2*t2
    bins = make_bins(["F", "F"], [70, 71], [100.0, 100.0], [[10.0], [30.0]])
    model = PoissonRateModel(df=1).fit(bins, codes=["d"])
    r1 = model.rate(0, "F", [70.0])[0]
    r2 = model.rate(0, "F", [71.0])[0]
    vocab = DiseaseVocabulary(("d",))
    cohort = one_patient_cohort(vocab, age=70.25, followup=1.0)  # 0.75y at 70, 0.25y at 71
    expected = model.predict_expected(cohort)
    assert expected.values[0, 0] == pytest.approx(0.75 * r1 + 0.25 * r2, rel=1e-10)


def test_offset_invariance():
    rng = np.random.default_rng(0)
    ages = np.arange(60, 90)
    py = rng.uniform(50, 150, ages.size)
    rate = np.exp(-3.0 + 0.03 * (ages - 75))
    counts = rng.poisson(rate * py)[:, None].astype(float)
    bins1 = make_bins(["F"] * ages.size, ages, py, counts)
    bins2 = make_bins(["F"] * ages.size, ages, 2 * py, 2 * counts)
    m1 = PoissonRateModel().fit(bins1, codes=["d"])
    m2 = PoissonRateModel().fit(bins2, codes=["d"])
    assert np.allclose(m1.coef_["F"], m2.coef_["F"], atol=1e-6)


def test_intercept_only_calibration():
    rng = np.random.default_rng(1)
    ages = np.arange(60, 80)
    py = rng.uniform(10, 100, ages.size)
    counts = rng.poisson(0.2 * py)[:, None].astype(float)
    bins = make_bins(["M"] * ages.size, ages, py, counts)
    basis = SplineBasis((), float(ages[0]), float(ages[0]), 0, 0)  # force intercept-only
    model = PoissonRateModel().fit(bins, codes=["d"], basis=basis)
    mu = model.rate(0, "M", ages.astype(float)) * py
    assert mu.sum() == pytest.approx(counts.sum(), abs=1e-6)


def test_loglinear_curve_recovery():
    """Simulate from rate(age) = exp(-5 + 0.04 age) with big exposures."""
    rng = np.random.default_rng(7)
    ages = np.arange(55, 96)
    py = np.full(ages.size, 2e4)
    rate = np.exp(-5.0 + 0.04 * ages)
    counts = rng.poisson(rate * py)[:, None].astype(float)
    bins = make_bins(["F"] * ages.size, ages, py, counts)
    model = PoissonRateModel(df=4).fit(bins, codes=["d"])
    fitted = model.rate(0, "F", ages.astype(float))
    rel_err = np.abs(fitted - rate) / rate
    assert rel_err.max() < 0.05


def test_all_zero_counts_floor():
    bins = make_bins(["F", "F"], [70, 71], [50.0, 60.0], [[0.0], [0.0]])
    model = PoissonRateModel().fit(bins, codes=["d"])
    assert model.converged_["F"][0]
    vocab = DiseaseVocabulary(("d",))
    cohort = one_patient_cohort(vocab, age=70.0, followup=2.0)
    expected = model.predict_expected(cohort)
    # fitted rates collapse below the floor, so flooring leaves exactly it
    assert expected.values[0, 0] == EXPECTED_FLOOR


def test_deviance_non_increasing():
    rng = np.random.default_rng(3)
    ages = np.arange(55, 90)
    py = rng.uniform(5, 40, ages.size)
    counts = rng.poisson(np.exp(-4 + 0.05 * (ages - 70)) * py)[:, None].astype(float)
    bins = make_bins(["F"] * ages.size, ages, py, counts)
    model = PoissonRateModel().fit(bins, codes=["d"])
    history = model.deviance_history_[("d", "F")]
    assert all(b <= a + 1e-10 for a, b in zip(history, history[1:]))


def test_monotone_curve_property():
    """Monotone log-rate data gives monotone fitted curves in >= 95% of runs."""
    rng = np.random.default_rng(11)
    ages = np.arange(55, 96)
    py = np.full(ages.size, 5e3)
    rate = np.exp(-4.5 + 0.05 * ages)
    interior = np.arange(58, 93).astype(float)
    wins = 0
    for _ in range(100):
        counts = rng.poisson(rate * py)[:, None].astype(float)
        bins = make_bins(["F"] * ages.size, ages, py, counts)
        model = PoissonRateModel(df=4).fit(bins, codes=["d"])
        fitted = model.rate(0, "F", interior)
        if np.all(np.diff(np.log(fitted)) > -1e-12):
            wins += 1
    assert wins >= 95


def test_sex_with_no_bins_skipped_and_predict_errors():
    bins = make_bins(["F"], [70], [10.0], [[3.0]])
    model = PoissonRateModel().fit(bins, codes=["d"])
    assert "M" not in model.coef_
    vocab = DiseaseVocabulary(("d",))
    male = one_patient_cohort(vocab, sex="M")
    with pytest.raises(DataError, match="sex"):
        model.predict_expected(male)


def test_predict_clamps_out_of_range_with_warning():
    ages = np.arange(60, 80)
    py = np.full(ages.size, 100.0)
    counts = (0.1 * py)[:, None]
    bins = make_bins(["F"] * ages.size, ages, py, counts)
    model = PoissonRateModel().fit(bins, codes=["d"])
    vocab = DiseaseVocabulary(("d",))
    old = one_patient_cohort(vocab, age=95.0, followup=1.0)
    with pytest.warns(UserWarning, match="clamped"):
        model.predict_expected(old)


def test_fit_export_csv(tmp_path):
    bins = make_bins(["F", "F", "M"], [70, 71, 70], [10.0, 12.0, 8.0],
                     [[1.0, 2.0], [2.0, 0.0], [1.0, 1.0]])
    model = PoissonRateModel(df=1).fit(bins, codes=["a", "b"])
    path = tmp_path / "fit.csv"
    model.export_fit_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "code,sex,coef_index,value,deviance,converged"
    # 2 codes x 2 sexes x (intercept + df coefficients)
    assert len(lines) - 1 == 2 * 2 * len(model.coef_["F"][0])


def test_rate_table_round_trip(tmp_path):
    ages = np.arange(60, 66)
    rng = np.random.default_rng(5)
    table = RateTable(
        codes=("a", "b"), ages=ages,
        rates={"F": rng.uniform(0.01, 1.0, (2, ages.size)),
               "M": rng.uniform(0.01, 1.0, (2, ages.size))},
    )
    path = tmp_path / "rates.csv"
    table.to_csv(path)
    loaded = RateTable.from_csv(path)
    assert loaded.codes == table.codes
    assert np.array_equal(loaded.ages, table.ages)
    for sex in ("F", "M"):
        assert np.array_equal(loaded.rates[sex], table.rates[sex])


def test_rate_table_clamps_ages():
    table = RateTable(codes=("a",), ages=np.arange(60, 63),
                      rates={"F": np.array([[0.1, 0.2, 0.4]])})
    # patient aged 58 for 1 year: clamped to the age-60 rate
    out = table.expected_for_patient("F", 58.0, 1.0)
    assert out[0] == pytest.approx(0.1)
    out_hi = table.expected_for_patient("F", 70.0, 2.0)
    assert out_hi[0] == pytest.approx(0.8)
