import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diseasemix.cohort import Cohort, DiseaseVocabulary, PatientRecord
from diseasemix.errors import DataError
from diseasemix.stats import (
    ECI_CATEGORIES,
    EciProfile,
    chi2_independence,
    chi_square_cdf,
    chi_square_sf,
    eci_profile,
    kaplan_meier,
    kruskal_wallis,
    load_eci_mapping,
    log_rank_test,
    subgroup_report,
    write_eci_mapping,
)


# ---------------------------------------------------------------------------
# Kaplan-Meier


def test_km_all_censored():
    curve = kaplan_meier([1.0, 2.0, 3.0], [False, False, False])
    assert curve.times.size == 0
    assert curve.evaluate(10.0) == 1.0


def test_km_hand_example():
    """times (1 event, 2 censored, 3 event): S(1) = 2/3, S(3) = 0."""
    curve = kaplan_meier([1.0, 2.0, 3.0], [True, False, True])
    assert curve.times.tolist() == [1.0, 3.0]
    assert curve.survival[0] == pytest.approx(2.0 / 3.0, abs=1e-12)
    assert curve.survival[1] == 0.0
    assert curve.at_risk.tolist() == [3, 1]
    assert curve.evaluate(2.5) == pytest.approx(2.0 / 3.0, abs=1e-12)


def test_km_doubling_invariance():
    times = [1.0, 2.0, 2.0, 5.0]
    events = [True, False, True, True]
    single = kaplan_meier(times, events)
    double = kaplan_meier(times * 2, events * 2)
    assert np.allclose(single.survival, double.survival, atol=1e-12)
    assert np.array_equal(single.times, double.times)


def test_km_zero_at_final_event_when_all_evented():
    curve = kaplan_meier([1.0, 2.0, 3.0, 3.0], [True] * 4)
    assert curve.survival[-1] == 0.0


def test_km_censor_after_event_tie_convention():
    # censored at t stays in the risk set for the event at t
    curve = kaplan_meier([1.0, 1.0], [True, False])
    assert curve.at_risk.tolist() == [2]
    assert curve.survival[0] == pytest.approx(0.5)


# ---------------------------------------------------------------------------
# log-rank


def test_log_rank_identical_groups():
    times = [1.0, 2.0, 3.0, 1.0, 2.0, 3.0]
    events = [True, False, True] * 2
    labels = [0, 0, 0, 1, 1, 1]
    res = log_rank_test(times, events, labels)
    assert res.chi_square == pytest.approx(0.0, abs=1e-12)
    assert res.p_value == pytest.approx(1.0, abs=1e-12)


def test_log_rank_hand_tabulated_oracle():
    """A events at 1, 2; B events at 3, 4.

    Hand tabulation: E_A = 2/4 + 1/3 = 5/6, V = 1/4 + 2/9 = 17/36,
    chi-square = (2 - 5/6)^2 / (17/36) = 49/17.
    """
    times = [1.0, 2.0, 3.0, 4.0]
    events = [True] * 4
    labels = [0, 0, 1, 1]
    res = log_rank_test(times, events, labels)
    assert res.chi_square == pytest.approx(49.0 / 17.0, abs=1e-10)
    assert res.degrees_of_freedom == 1
    assert res.p_value == pytest.approx(chi_square_sf(49.0 / 17.0, 1), abs=1e-12)


def test_log_rank_duplicated_group_p_one():
    times = [1.0, 2.0, 4.0]
    events = [True, True, False]
    res = log_rank_test(times * 2, events * 2, [0, 0, 0, 1, 1, 1])
    assert res.p_value == pytest.approx(1.0, abs=1e-12)


def test_log_rank_two_group_z_identity():
    """chi-square equals the squared z statistic computed independently."""
    rng = np.random.default_rng(5)
    times = rng.exponential(5.0, size=40)
    events = rng.random(40) < 0.7
    labels = (rng.random(40) < 0.5).astype(int)
    if not events.any():
        events[0] = True
    res = log_rank_test(times, events, labels)

    o = np.zeros(2)
    e = np.zeros(2)
    v = 0.0
    for t in np.unique(times[events]):
        at_risk = times >= t
        n = at_risk.sum()
        d = ((times == t) & events).sum()
        n0 = (at_risk & (labels == 0)).sum()
        d0 = ((times == t) & events & (labels == 0)).sum()
        o[0] += d0
        e[0] += d * n0 / n
        if n > 1:
            v += d * (n - d) / (n - 1) * (n0 / n) * (1 - n0 / n)
    z2 = (o[0] - e[0]) ** 2 / v
    assert res.chi_square == pytest.approx(z2, abs=1e-10)


def test_log_rank_invariances():
    rng = np.random.default_rng(9)
    times = rng.exponential(3.0, size=30)
    events = rng.random(30) < 0.6
    events[0] = True
    labels = rng.integers(0, 3, size=30)
    labels[:3] = [0, 1, 2]  # every group non-empty
    base = log_rank_test(times, events, labels)
    relabeled = log_rank_test(times, events, 2 - labels)
    assert relabeled.chi_square == pytest.approx(base.chi_square, abs=1e-10)
    warped = log_rank_test(np.exp(times), events, labels)  # monotone transform
    assert warped.chi_square == pytest.approx(base.chi_square, abs=1e-10)


def test_log_rank_requires_events():
    with pytest.raises(DataError, match="no events observed"):
        log_rank_test([1.0, 2.0], [False, False], [0, 1])


# ---------------------------------------------------------------------------
# chi-square tail


def _simpson(f, a, b, n=4001):
    xs = np.linspace(a, b, n)
    ys = f(xs)
    h = (b - a) / (n - 1)
    return h / 3 * (ys[0] + ys[-1] + 4 * ys[1::2].sum() + 2 * ys[2:-1:2].sum())


def _chi2_pdf(x, df):
    return x ** (df / 2 - 1) * np.exp(-x / 2) / (2 ** (df / 2) * math.gamma(df / 2))


def test_sf_at_zero():
    for df in (1, 2, 5, 50):
        assert chi_square_sf(0.0, df) == 1.0


def test_sf_df2_closed_form():
    assert chi_square_sf(2.0, 2) == pytest.approx(math.exp(-1.0), abs=1e-12)


def test_sf_95th_percentile_vs_quadrature():
    """Numerical integration of the density as an independent oracle."""
    oracle = _simpson(lambda x: _chi2_pdf(x, 1), 3.841, 250.0, n=200_001)
    assert abs(oracle - 0.0500) < 5e-4  # the oracle itself lands on the target
    assert chi_square_sf(3.841, 1) == pytest.approx(oracle, abs=1e-7)
    assert chi_square_sf(3.841, 1) == pytest.approx(0.0500, abs=5e-4)


def test_sf_high_precision_grid():
    """mpmath regularized incomplete gamma as an arbitrary-precision oracle."""
    import mpmath

    mpmath.mp.dps = 30
    for x in (0.5, 3.0, 12.7, 55.0, 140.0, 200.0):
        for df in (1, 2, 7, 23, 50):
            oracle = float(mpmath.gammainc(df / 2, x / 2, mpmath.inf, regularized=True))
            assert abs(chi_square_sf(x, df) - oracle) < 1e-10


def test_sf_strictly_decreasing_and_complement():
    xs = np.linspace(0.0, 60.0, 200)
    for df in (1, 4, 19):
        values = [chi_square_sf(float(x), df) for x in xs]
        assert all(b < a for a, b in zip(values, values[1:]))
        for x in (0.1, 5.0, 30.0):
            assert chi_square_sf(x, df) + chi_square_cdf(x, df) == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# Kruskal-Wallis


def test_kw_identical_groups():
    res = kruskal_wallis([[3.0, 1.0, 2.0], [1.0, 2.0, 3.0]])
    assert res.h_statistic == pytest.approx(0.0, abs=1e-12)
    assert res.p_value == pytest.approx(1.0, abs=1e-12)


def test_kw_hand_rank_example():
    """{1,2,3} vs {4,5,6}: mean ranks 2 and 5, H = 12/42 * (3*2.25*2) = 27/7."""
    res = kruskal_wallis([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    assert res.h_statistic == pytest.approx(27.0 / 7.0, abs=1e-10)
    assert res.degrees_of_freedom == 1


def test_kw_all_identical_not_an_error():
    res = kruskal_wallis([[2.0, 2.0], [2.0, 2.0, 2.0]])
    assert res.h_statistic == 0.0
    assert res.p_value == 1.0


def _exhaustive_permutation_p(group_a, group_b):
    pooled = np.array(list(group_a) + list(group_b), dtype=float)
    h_obs = kruskal_wallis([group_a, group_b]).h_statistic
    count = total = 0
    for idx in itertools.combinations(range(len(pooled)), len(group_a)):
        mask = np.zeros(len(pooled), dtype=bool)
        mask[list(idx)] = True
        h = kruskal_wallis([pooled[mask], pooled[~mask]]).h_statistic
        total += 1
        if h >= h_obs - 1e-12:
            count += 1
    return count / total


def test_kw_tie_case_vs_permutation_reference():
    """Exhaustive permutation enumeration as the reference distribution.

    The instance has ties but a non-degenerate permutation distribution, so
    the chi-square tail has something to approximate.
    """
    group_a = [1.0, 1.0, 3.0, 4.0, 5.0, 6.0]
    group_b = [2.0, 2.0, 3.0, 5.0, 7.0, 8.0]
    observed = kruskal_wallis([group_a, group_b])
    p_perm = _exhaustive_permutation_p(group_a, group_b)
    assert abs(observed.p_value - p_perm) < 0.05


def test_kw_degenerate_tie_case_exact_values():
    """{1,1,1} vs {1,1,2}: every 3-3 split of the pooled multiset reproduces
    the same partition, so the exact permutation p is identically 1, while
    the tie-corrected H is exactly 1 (midrank means 3 and 4, correction 3/7).
    """
    observed = kruskal_wallis([[1.0, 1.0, 1.0], [1.0, 1.0, 2.0]])
    assert observed.h_statistic == pytest.approx(1.0, abs=1e-12)
    assert _exhaustive_permutation_p([1.0, 1.0, 1.0], [1.0, 1.0, 2.0]) == 1.0


def test_kw_monotone_transform_invariance():
    rng = np.random.default_rng(3)
    groups = [rng.normal(size=8), rng.normal(1.0, 1.0, size=5), rng.normal(size=6)]
    base = kruskal_wallis(groups)
    warped = kruskal_wallis([np.exp(g) for g in groups])
    assert warped.h_statistic == pytest.approx(base.h_statistic, abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.integers(0, 5), min_size=1, max_size=8), min_size=2, max_size=4))
def test_kw_h_non_negative(groups):
    res = kruskal_wallis([list(map(float, g)) for g in groups])
    assert res.h_statistic >= 0
    assert 0 <= res.p_value <= 1


# ---------------------------------------------------------------------------
# comorbidity profiles


def test_eci_empty_mapping():
    vocab = DiseaseVocabulary(("1", "2"))
    profile = eci_profile(np.array([3, 0]), vocab, {})
    assert profile.score == 0
    assert profile.band == "0-1"


def test_eci_two_categories():
    vocab = DiseaseVocabulary(("1", "2", "3"))
    mapping = {"1": "hypertension", "3": "psychoses"}
    profile = eci_profile(np.array([2, 5, 1]), vocab, mapping)
    assert profile.flags["hypertension"] and profile.flags["psychoses"]
    assert profile.score == 2
    assert profile.band == "2-4"


def test_eci_exactly_29_categories():
    assert len(ECI_CATEGORIES) == 29
    assert len(set(ECI_CATEGORIES)) == 29
    assert "congestive_heart_failure" in ECI_CATEGORIES
    assert "depression" in ECI_CATEGORIES


def test_eci_unknown_category_rejected():
    vocab = DiseaseVocabulary(("1",))
    with pytest.raises(DataError, match="unknown comorbidity category"):
        eci_profile(np.array([1]), vocab, {"1": "sniffles"})


def test_eci_band_boundaries():
    flags = {name: False for name in ECI_CATEGORIES}
    for score, band in ((0, "0-1"), (1, "0-1"), (2, "2-4"), (4, "2-4"), (5, "5+")):
        trial = dict(flags)
        for name in list(flags)[:score]:
            trial[name] = True
        assert EciProfile.from_flags(trial).band == band


def test_eci_mapping_round_trip(tmp_path):
    mapping = {"10": "obesity", "11": "depression"}
    path = tmp_path / "map.csv"
    write_eci_mapping(mapping, path)
    assert load_eci_mapping(path) == mapping


def test_eci_planted_prevalence_matches_ground_truth():
    """Analytic presence probabilities from the generator as the oracle."""
    from diseasemix.generate import GeneratorConfig, default_eci_mapping, generate_synthetic_cohort

    cfg = GeneratorConfig(m=400, v=30, k=2, seed=31, target_mean_diagnoses=25.0)
    cohort, truth = generate_synthetic_cohort(cfg)
    mapping = default_eci_mapping(cohort.vocabulary, codes_per_category=1)
    profiles = [
        eci_profile(cohort.counts[m], cohort.vocabulary, mapping)
        for m in range(cohort.n_patients)
    ]
    # P(code n absent for patient m) = sum_k theta[m,k] exp(-phi[k,n] e g)
    absent = np.einsum(
        "mk,mkn->mn",
        truth.theta_true,
        np.exp(-truth.phi_true[None, :, :] * truth.expected_true[:, None, :]
               * truth.gamma_true[:, None, None]),
    )
    for category in sorted(set(mapping.values())):
        codes = [c for c, cat in mapping.items() if cat == category]
        cols = [cohort.vocabulary.index(c) for c in codes]
        p_present = 1.0 - absent[:, cols].prod(axis=1)
        expected_count = p_present.sum()
        se = math.sqrt(float((p_present * (1 - p_present)).sum()))
        observed = sum(p.flags[category] for p in profiles)
        assert abs(observed - expected_count) <= 3 * se + 1e-9


# ---------------------------------------------------------------------------
# independence test and the subgroup report


def test_chi2_independence_identical_columns():
    stat, df, p = chi2_independence([[10, 10], [5, 5]])
    assert stat == pytest.approx(0.0, abs=1e-12)
    assert p == pytest.approx(1.0, abs=1e-12)


def test_chi2_independence_degenerate_table():
    stat, df, p = chi2_independence([[0, 0], [3, 7]])
    assert p == 1.0


def make_report_cohort(n=12):
    vocab = DiseaseVocabulary(("1", "2", "3"))
    rng = np.random.default_rng(0)
    patients = []
    counts = []
    for i in range(n):
        patients.append(PatientRecord(
            f"p{i:02d}", "F" if i % 3 else "M", 60.0 + i, 5.0,
            float(1 + (i % 4)), bool(i % 2),
        ))
        counts.append(rng.integers(1, 6, size=3))
    return Cohort(vocab, patients, np.array(counts))


def test_report_single_subgroup_no_p_values():
    cohort = make_report_cohort()
    mapping = {"1": "obesity"}
    profiles = [eci_profile(cohort.counts[m], cohort.vocabulary, mapping)
                for m in range(cohort.n_patients)]
    report = subgroup_report(cohort, np.zeros(cohort.n_patients, dtype=int), profiles)
    assert all(p is None for p in report.p_values.values())
    assert all(p is None for p in report.category_p_values.values())


def test_report_duplicated_subgroups_p_one():
    vocab = DiseaseVocabulary(("1", "2"))
    patients = []
    counts = []
    for copy in range(2):
        for i in range(8):
            patients.append(PatientRecord(
                f"c{copy}_{i}", "F" if i % 2 else "M", 60.0 + i, 6.0,
                float(1 + i % 3), bool(i % 2),
            ))
            counts.append([1 + i % 2, i % 3])
    cohort = Cohort(vocab, patients, np.array(counts))
    labels = np.array([0] * 8 + [1] * 8)
    mapping = {"1": "obesity", "2": "psychoses"}
    profiles = [eci_profile(cohort.counts[m], cohort.vocabulary, mapping)
                for m in range(cohort.n_patients)]
    report = subgroup_report(cohort, labels, profiles)
    for key, p in report.p_values.items():
        assert p == pytest.approx(1.0, abs=1e-9), key
    for name, p in report.category_p_values.items():
        assert p == pytest.approx(1.0, abs=1e-9), name


def test_report_median_conventions():
    # age uses the midpoint convention: median of {4, 6} -> 5.0
    from diseasemix.stats import _median_low, _median_mid

    assert _median_mid([4.0, 6.0]) == 5.0
    assert _median_low([4, 6]) == 4.0
    assert _median_low([1, 2, 3]) == 2.0


def test_report_shape_has_all_categories():
    cohort = make_report_cohort()
    mapping = {"1": "obesity"}
    profiles = [eci_profile(cohort.counts[m], cohort.vocabulary, mapping)
                for m in range(cohort.n_patients)]
    labels = np.array([0, 1] * 6)
    report = subgroup_report(cohort, labels, profiles)
    rows = report.to_csv_rows()
    names = [row[0] for row in rows]
    for category in ECI_CATEGORIES:
        assert f"eci_{category}" in names
    assert len(report.sizes) == 2
    text = report.to_text()
    assert "median_age" in text


def test_report_warns_on_empty_subgroup():
    cohort = make_report_cohort()
    mapping = {}
    profiles = [eci_profile(cohort.counts[m], cohort.vocabulary, mapping)
                for m in range(cohort.n_patients)]
    labels = np.array([0] * 6 + [2] * 6)  # label 1 empty
    with pytest.warns(UserWarning, match="size 0"):
        subgroup_report(cohort, labels, profiles)
