"""Forward-simulation synthetic cohort generator.

Simulates diagnosis-count cohorts from the same two generative processes the
models fit: a mixed-membership Poisson process with per-patient multipliers
and age/sex baseline rates (the default), or a token-multinomial process
(``lda_mode``). Ground-truth parameters are retained so recovery tests can
score fitted models against the generator.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ._rng import derive_rng
from .cohort import Cohort, DiseaseVocabulary, PatientRecord, patient_age_bins
from .errors import DataError
from .rates import RateTable

__all__ = [
    "GeneratorConfig",
    "GroundTruth",
    "generate_synthetic_cohort",
    "draw_counts",
    "default_eci_mapping",
    "preset_config",
    "PRESETS",
]


@dataclass(frozen=True)
class GeneratorConfig:
    """All knobs of the synthetic generator; one seed drives every draw."""

    m: int = 100
    v: int = 50
    k: int = 5
    seed: int = 0

    # mixture priors
    alpha: float = 0.3  # symmetric Dirichlet on patient mixtures
    beta: float = 0.1  # symmetric Dirichlet on disease profiles
    xi: float = 2.0  # Gamma shape of the patient multiplier
    delta: float = 0.5  # Gamma scale; xi * delta must equal 1
    fix_gamma: bool = False  # force every multiplier to exactly 1

    # demographics
    sex_fraction_female: float = 0.6
    age_median: float = 74.0
    age_sd: float = 8.0
    min_age: float = 50.0
    max_age: float = 100.0
    followup_min: float = 2.0
    followup_max: float = 17.0

    # baseline rate curves: log r_v(age, sex) is linear in age with a
    # per-code intercept and optional per-code sex effect
    target_mean_diagnoses: float = 400.0
    baseline_log_sd: float = 0.5
    sex_effect_sd: float = 0.0
    age_slope_sd: float = 0.0
    n_age_coupled_codes: int = 0  # trailing codes given a strong common age slope
    age_coupled_slope: float = 0.08

    # disease profile pattern: "dirichlet" draws phi rows from Dirichlet(beta);
    # "blocks" gives each topic a disjoint block of the non-age-coupled codes
    # plus a shared uniform share over the age-coupled codes
    phi_pattern: str = "dirichlet"
    age_coupled_mass: float = 0.5

    # index disease (inclusion-rule realism)
    index_code: str | None = None
    index_expected: float | None = None

    # survival: exponential mean survival per dominant topic
    survival_scales: tuple[float, ...] | None = None

    lda_mode: bool = False

    def validate(self) -> None:
        if min(self.m, self.v, self.k) < 1:
            raise DataError("m, v, k must all be >= 1")
        if abs(self.xi * self.delta - 1.0) > 1e-12:
            raise DataError(f"xi * delta must equal 1, got {self.xi * self.delta}")
        for name in ("alpha", "beta", "xi", "delta", "target_mean_diagnoses"):
            if not getattr(self, name) > 0:
                raise DataError(f"invalid simplex/positivity parameter: {name} must be > 0")
        if not 0.0 <= self.sex_fraction_female <= 1.0:
            raise DataError("sex_fraction_female must be in [0, 1]")
        if self.min_age >= self.max_age:
            raise DataError("min_age must be below max_age")
        if not 0 < self.followup_min <= self.followup_max:
            raise DataError("followup range must satisfy 0 < min <= max")
        if self.phi_pattern not in ("dirichlet", "blocks"):
            raise DataError(f"unknown phi_pattern {self.phi_pattern!r}")
        if not 0 <= self.n_age_coupled_codes <= self.v:
            raise DataError("n_age_coupled_codes must be in [0, v]")
        if self.survival_scales is not None and len(self.survival_scales) != self.k:
            raise DataError("survival_scales must have one entry per topic")


@dataclass
class GroundTruth:
    """Generator-side parameters kept for recovery tests.

    ``z_rows`` holds (patient index, code index, cluster label) for every
    diagnosed (count > 0) pair. ``expected_true`` is the baseline expected
    count matrix actually used to draw the data, and ``rate_table`` is the
    same information as per-age rates (the transferable form).
    """

    theta_true: np.ndarray  # (M, K)
    phi_true: np.ndarray  # (K, V)
    gamma_true: np.ndarray  # (M,)
    z_rows: np.ndarray  # (n_pairs, 3) int: patient, code, label
    expected_true: np.ndarray  # (M, V)
    rate_table: RateTable

    def __post_init__(self):
        for name, arr in (("theta_true", self.theta_true), ("phi_true", self.phi_true)):
            sums = arr.sum(axis=1)
            if np.max(np.abs(sums - 1.0)) > 1e-12:
                raise DataError(f"{name} rows must sum to 1 within 1e-12")
            if arr.min() < 0:
                raise DataError(f"{name} entries must be >= 0")
        if self.gamma_true.min() <= 0:
            raise DataError("gamma_true entries must be > 0")

    def dominant_topics(self) -> np.ndarray:
        return self.theta_true.argmax(axis=1)


def _draw_phi(config: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    V, K = config.v, config.k
    if config.phi_pattern == "dirichlet":
        return rng.dirichlet(np.full(V, config.beta), size=K)
    # blocks: disjoint supports over structure codes, shared mass on age codes
    n_age = config.n_age_coupled_codes
    n_struct = V - n_age
    if n_struct < K:
        raise DataError("blocks pattern needs at least one structure code per topic")
    bounds = np.linspace(0, n_struct, K + 1).astype(int)
    shared = config.age_coupled_mass if n_age > 0 else 0.0
    phi = np.zeros((K, V))
    for k in range(K):
        lo, hi = bounds[k], bounds[k + 1]
        block = rng.dirichlet(np.full(hi - lo, config.beta))
        phi[k, lo:hi] = (1.0 - shared) * block
        if n_age > 0:
            phi[k, n_struct:] = shared / n_age
    return phi


def _build_rate_table(
    config: GeneratorConfig, rng: np.random.Generator, codes: tuple[str, ...]
) -> RateTable:
    V = config.v
    intercepts = rng.normal(0.0, config.baseline_log_sd, size=V)
    sex_effects = rng.normal(0.0, config.sex_effect_sd, size=V)
    slopes = rng.normal(0.0, config.age_slope_sd, size=V)
    if config.n_age_coupled_codes > 0:
        slopes[V - config.n_age_coupled_codes:] = config.age_coupled_slope
    ages = np.arange(int(np.floor(config.min_age)), int(np.ceil(config.max_age)) + 1)
    age_ref = 0.5 * (config.min_age + config.max_age)
    rates = {}
    for si, sex in enumerate(("M", "F")):
        # (V, n_ages) log-linear curves, flat outside [min_age, max_age]
        log_r = (
            intercepts[:, None]
            + slopes[:, None] * (ages[None, :] - age_ref)
            + (sex_effects[:, None] if sex == "F" else 0.0)
        )
        rates[sex] = np.exp(log_r)
    return RateTable(codes=codes, ages=ages, rates=rates)


def draw_counts(
    theta: np.ndarray,
    phi: np.ndarray,
    expected: np.ndarray,
    gamma: np.ndarray,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw (z, y) for every (patient, code) pair of the count process.

    z[m, n] ~ Categorical(theta[m]); y[m, n] ~ Poisson(phi[z, n] * e * gamma).
    """
    M, V = expected.shape
    cum = np.cumsum(theta, axis=1)
    u = rng.random((M, V))
    z = (u[:, :, None] > cum[:, None, :]).sum(axis=2)
    z = np.minimum(z, theta.shape[1] - 1)
    rate = phi[z, np.arange(V)[None, :]] * expected * gamma[:, None]
    y = rng.poisson(rate)
    return z.astype(np.int64), y.astype(np.int64)


def _draw_tokens(
    theta: np.ndarray, phi: np.ndarray, mean_tokens: float, rng: np.random.Generator
) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    """Token-multinomial draw: per patient, N ~ Poisson(mean), then
    (topic, code) per token. Returns counts plus per-patient token arrays."""
    M, K = theta.shape
    V = phi.shape[1]
    counts = np.zeros((M, V), dtype=np.int64)
    all_z, all_w = [], []
    lengths = np.maximum(rng.poisson(mean_tokens, size=M), 1)
    for m in range(M):
        z = rng.choice(K, size=lengths[m], p=theta[m])
        w = np.empty(lengths[m], dtype=np.int64)
        for k in np.unique(z):
            sel = z == k
            w[sel] = rng.choice(V, size=int(sel.sum()), p=phi[k])
        counts[m] = np.bincount(w, minlength=V)
        all_z.append(z)
        all_w.append(w)
    return counts, all_z, all_w


def generate_synthetic_cohort(config: GeneratorConfig) -> tuple[Cohort, GroundTruth]:
    """Simulate a cohort and return it with the generating parameters.

    The same seed always produces bit-identical output; all draws come from
    one generator consumed in a fixed order.
    """
    config.validate()
    M, V, K = config.m, config.v, config.k
    rng = derive_rng(config.seed, "generate")

    codes = tuple(str(i + 1) for i in range(V))
    vocabulary = DiseaseVocabulary(codes)

    sexes = np.where(rng.random(M) < config.sex_fraction_female, "F", "M")
    ages = np.clip(rng.normal(config.age_median, config.age_sd, M), config.min_age, config.max_age)
    followups = rng.uniform(config.followup_min, config.followup_max, M)

    phi = _draw_phi(config, rng)
    theta = rng.dirichlet(np.full(K, config.alpha), size=M)
    if config.fix_gamma:
        gamma = np.ones(M)
    else:
        gamma = rng.gamma(shape=config.xi, scale=config.delta, size=M)
        gamma = np.maximum(gamma, 1e-12)

    table = _build_rate_table(config, rng, codes)
    expected = np.vstack(
        [table.expected_for_patient(sexes[m], ages[m], followups[m]) for m in range(M)]
    )

    # calibrate the table so the mean per-patient expected total equals the
    # target (and the index code's share equals its own target), then rebuild
    # the expected matrix from the final table so both are bit-identical
    mix = theta @ phi  # (M, V) mean profile per patient
    raw_total = float((mix * expected * gamma[:, None]).sum()) / M
    if not raw_total > 0 or not np.isfinite(raw_total):
        raise DataError("target mean unattainable (all baseline rates zero)")
    if config.index_code is not None and config.index_expected is not None:
        if not config.index_expected < config.target_mean_diagnoses:
            raise DataError("index_expected must be below target_mean_diagnoses")
        idx = vocabulary.index(config.index_code)
        raw_index = float((mix[:, idx] * expected[:, idx] * gamma).mean())
        if raw_index <= 0:
            raise DataError("target mean unattainable (all baseline rates zero)")
        scale = (config.target_mean_diagnoses - config.index_expected) / (raw_total - raw_index)
        table.scale_all(scale)
        table.scale_code(config.index_code, (config.index_expected / raw_index) / scale)
    else:
        table.scale_all(config.target_mean_diagnoses / raw_total)
    expected = np.vstack(
        [table.expected_for_patient(sexes[m], ages[m], followups[m]) for m in range(M)]
    )

    if config.lda_mode:
        counts, token_z, token_w = _draw_tokens(theta, phi, config.target_mean_diagnoses, rng)
        z_rows = []
        for m in range(M):
            for n in np.nonzero(counts[m])[0]:
                sel = token_w[m] == n
                label = int(np.bincount(token_z[m][sel], minlength=K).argmax())
                z_rows.append((m, int(n), label))
        z_rows = np.array(z_rows, dtype=np.int64).reshape(-1, 3)
    else:
        z, y = draw_counts(theta, phi, expected, gamma, rng)
        counts = y
        # keep the cohort invariant: a patient that drew nothing gets one
        # count at their highest-rate code (vanishingly rare at real scale)
        empty = np.nonzero(counts.sum(axis=1) == 0)[0]
        for m in empty:
            counts[m, int((mix[m] * expected[m]).argmax())] = 1
        mi, ni = np.nonzero(counts)
        z_rows = np.column_stack([mi, ni, z[mi, ni]]).astype(np.int64)

    if config.survival_scales is not None:
        scales = np.asarray(config.survival_scales, dtype=np.float64)
    else:
        scales = np.full(K, 8.0)
    dominant = theta.argmax(axis=1)
    death_times = rng.exponential(scales[dominant])
    survival_times = np.minimum(death_times, followups)
    events = death_times <= followups

    width = len(str(M))
    patients = [
        PatientRecord(
            id=f"p{m + 1:0{width}d}",
            sex=str(sexes[m]),
            age_at_entry=float(ages[m]),
            followup_years=float(followups[m]),
            survival_time=float(survival_times[m]),
            event=bool(events[m]),
        )
        for m in range(M)
    ]
    cohort = Cohort(vocabulary, patients, counts)
    truth = GroundTruth(
        theta_true=theta,
        phi_true=phi,
        gamma_true=gamma,
        z_rows=z_rows,
        expected_true=expected,
        rate_table=table,
    )
    return cohort, truth


def default_eci_mapping(vocabulary: DiseaseVocabulary, codes_per_category: int = 3) -> dict[str, str]:
    """Deterministic code -> comorbidity-category mapping for synthetic runs.

    The first ``29 * codes_per_category`` codes are assigned round-robin so
    every category receives codes with a spread of baseline rates; remaining
    codes stay unmapped.
    """
    from .stats import ECI_CATEGORIES

    mapping = {}
    limit = min(len(vocabulary.codes), len(ECI_CATEGORIES) * codes_per_category)
    for i in range(limit):
        mapping[vocabulary.codes[i]] = ECI_CATEGORIES[i % len(ECI_CATEGORIES)]
    return mapping


PRESETS: dict[str, dict] = {
    "osteoporosis": dict(
        m=388, v=285, k=20, sex_fraction_female=0.946, age_median=74.4,
        target_mean_diagnoses=406.0, index_code="206", index_expected=38.0,
    ),
    "dementia": dict(
        m=304, v=285, k=20, sex_fraction_female=0.688, age_median=83.6,
        target_mean_diagnoses=387.5, index_code="653", index_expected=38.0,
    ),
    "copd": dict(
        m=685, v=285, k=20, sex_fraction_female=0.508, age_median=73.2,
        target_mean_diagnoses=402.0, index_code="127", index_expected=38.0,
    ),
}


def preset_config(name: str, seed: int, **overrides) -> GeneratorConfig:
    """Build a GeneratorConfig for one of the named cohort presets."""
    if name not in PRESETS:
        raise DataError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    params = dict(PRESETS[name])
    k = int(overrides.get("k", params["k"]))
    params.setdefault("age_slope_sd", 0.01)
    params.setdefault("sex_effect_sd", 0.2)
    params["survival_scales"] = tuple(np.linspace(3.0, 12.0, k))
    params.update(overrides)
    return GeneratorConfig(seed=seed, **params)
