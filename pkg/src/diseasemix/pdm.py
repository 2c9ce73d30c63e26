"""Poisson-Dirichlet mixture with Metropolis-within-Gibbs inference.

For each diagnosed (patient, disease) pair a cluster indicator picks a
disease profile row, and the observed count is Poisson with mean
phi[z, n] * e[m, n] * gamma[m], where e is a fixed expected-count baseline
and gamma a patient-level multiplier with a mean-one Gamma prior.

The indicator, multiplier and mixture updates are exact conjugate Gibbs
draws; the profile rows are not conjugate under the Poisson likelihood and
are updated by Metropolis-Hastings with a Dirichlet proposal centered on
the current row. The proposal concentration adapts toward a target
acceptance rate during burn-in only, then freezes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln
from sklearn.base import BaseEstimator

from ._rng import derive_rng
from .cohort import Cohort
from .errors import DataError
from .rates import EXPECTED_FLOOR, ExpectedCounts
from .sampling import MhDecision, mh_accept_prob, mh_decide
from .topics import TopicFit, greedy_align

__all__ = [
    "mh_accept_prob",
    "MhDecision",
    "z_conditional_probs",
    "sample_z_conditional",
    "gamma_posterior_params",
    "sample_gamma_conditional",
    "theta_posterior_alpha",
    "sample_theta_conditional",
    "phi_row_log_target",
    "mh_update_phi_row",
    "PdmSampler",
    "PoissonDirichletModel",
    "patient_topic_posterior_pdm",
]

#: smallest profile entry kept after proposal jittering
SIMPLEX_EPS = 1e-12


# ---------------------------------------------------------------------------
# full conditionals (pure functions, used by the sampler and by tests)


def z_conditional_probs(theta_row, phi_col, e: float, gamma: float, y: float) -> np.ndarray:
    """p(z = k) over clusters for one pair, proportional to
    theta[k] * Poisson(y; phi_col[k] * e * gamma), computed in log space."""
    lam = np.maximum(np.asarray(phi_col, dtype=np.float64) * e * gamma, 1e-300)
    logp = np.log(np.maximum(theta_row, 1e-300)) + y * np.log(lam) - lam
    logp -= logp.max()
    p = np.exp(logp)
    return p / p.sum()


def sample_z_conditional(theta_row, phi_col, e, gamma, y, rng: np.random.Generator) -> int:
    p = z_conditional_probs(theta_row, phi_col, e, gamma, y)
    return int(np.searchsorted(np.cumsum(p), rng.random(), side="right").clip(0, len(p) - 1))


def gamma_posterior_params(xi: float, delta: float, y_sum: float, rate_sum: float) -> tuple[float, float]:
    """Conjugate update of the patient multiplier.

    Prior Gamma(shape xi, scale delta) times a product of Poisson terms with
    means gamma * rate_n gives Gamma(shape xi + sum y, rate 1/delta + sum rate).
    Returned as (shape, rate); numpy's sampler wants scale = 1 / rate.
    """
    return xi + y_sum, 1.0 / delta + rate_sum


def sample_gamma_conditional(xi, delta, y_sum, rate_sum, rng: np.random.Generator) -> float:
    shape, rate = gamma_posterior_params(xi, delta, y_sum, rate_sum)
    return float(rng.gamma(shape, 1.0 / rate))


def theta_posterior_alpha(alpha: float, cluster_counts: np.ndarray) -> np.ndarray:
    """Dirichlet(alpha + counts): indicators are Multinomial(theta)."""
    return alpha + np.asarray(cluster_counts, dtype=np.float64)


def sample_theta_conditional(alpha, cluster_counts, rng: np.random.Generator) -> np.ndarray:
    a = theta_posterior_alpha(alpha, cluster_counts)
    draw = rng.dirichlet(a)
    draw = np.maximum(draw, 1e-300)
    return draw / draw.sum()


def phi_row_log_target(phi_row, beta: float, s_row, r_row) -> float:
    """Unnormalized log density of one profile row given its assigned pairs.

    s_row[n] sums the counts and r_row[n] the e * gamma factors over pairs
    assigned to this cluster, so the target is
    sum_n (beta - 1 + s[n]) * log(phi[n]) - phi[n] * r[n].
    """
    phi_row = np.asarray(phi_row, dtype=np.float64)
    return float(np.sum((beta - 1.0 + s_row) * np.log(phi_row) - phi_row * r_row))


def _dirichlet_logpdf(x: np.ndarray, a: np.ndarray) -> float:
    return float(np.sum((a - 1.0) * np.log(x)) + gammaln(a.sum()) - np.sum(gammaln(a)))


def mh_update_phi_row(
    phi_row: np.ndarray,
    beta: float,
    s_row: np.ndarray,
    r_row: np.ndarray,
    concentration: float,
    rng: np.random.Generator,
) -> tuple[MhDecision, np.ndarray]:
    """Propose Dirichlet(concentration * current) and accept/reject.

    Proposed rows with exact zeros are re-jittered to SIMPLEX_EPS and
    renormalized before evaluation. Returns the decision and the row to use
    (the proposal if accepted, the unchanged input otherwise).
    """
    a_fwd = concentration * phi_row
    proposal = rng.dirichlet(a_fwd)
    if proposal.min() < SIMPLEX_EPS:
        proposal = np.maximum(proposal, SIMPLEX_EPS)
        proposal = proposal / proposal.sum()
    decision = mh_decide(
        log_p_current=phi_row_log_target(phi_row, beta, s_row, r_row),
        log_p_proposed=phi_row_log_target(proposal, beta, s_row, r_row),
        log_q_forward=_dirichlet_logpdf(proposal, a_fwd),
        log_q_backward=_dirichlet_logpdf(phi_row, concentration * proposal),
        rng=rng,
    )
    return decision, (proposal if decision.accepted else phi_row)


# ---------------------------------------------------------------------------
# sampler core


@dataclass
class PdmSampler:
    """Markov chain state over an explicit set of (patient, disease) pairs.

    The fitting path instantiates one per chain with the pairs where the
    count is positive; model-checking code may pass any fixed pair set and
    counts of zero are handled (they simply contribute no count term).
    """

    pair_m: np.ndarray  # (P,) patient index
    pair_n: np.ndarray  # (P,) disease index
    y: np.ndarray  # (P,) float counts
    e: np.ndarray  # (P,) expected baseline per pair
    n_patients: int
    n_codes: int
    n_topics: int
    alpha: float
    beta: float
    xi: float
    delta: float
    z: np.ndarray = None  # set by init_state
    gamma: np.ndarray = None
    theta: np.ndarray = None
    phi: np.ndarray = None
    concentration: np.ndarray = None  # (K,) per-row proposal concentration
    accept_counts: np.ndarray = None
    propose_counts: np.ndarray = None

    def init_state(
        self,
        rng: np.random.Generator,
        theta0: np.ndarray | None = None,
        phi0: np.ndarray | None = None,
    ) -> None:
        """Set the initial state; fields not supplied are drawn from the prior."""
        K = self.n_topics
        if theta0 is None:
            theta0 = rng.dirichlet(np.full(K, self.alpha), size=self.n_patients)
        self.theta = np.maximum(theta0, 1e-300)
        self.theta /= self.theta.sum(axis=1, keepdims=True)
        if phi0 is None:
            phi0 = rng.dirichlet(np.full(self.n_codes, self.beta), size=K)
        self.phi = np.maximum(phi0, SIMPLEX_EPS)
        self.phi /= self.phi.sum(axis=1, keepdims=True)
        self.gamma = np.maximum(rng.gamma(self.xi, self.delta, size=self.n_patients), 1e-300)
        cum = np.cumsum(self.theta[self.pair_m], axis=1)
        self.z = (cum < rng.random(len(self.pair_m))[:, None]).sum(axis=1)
        self.z = np.minimum(self.z, K - 1).astype(np.int64)
        self.accept_counts = np.zeros(K, dtype=np.int64)
        self.propose_counts = np.zeros(K, dtype=np.int64)

    # -- individual updates, each an exact draw from its full conditional --

    def update_z(self, rng: np.random.Generator) -> None:
        scale = self.e * self.gamma[self.pair_m]
        lam = np.maximum(self.phi.T[self.pair_n] * scale[:, None], 1e-300)  # (P, K)
        logp = np.log(self.theta[self.pair_m]) + self.y[:, None] * np.log(lam) - lam
        logp -= logp.max(axis=1, keepdims=True)
        p = np.exp(logp)
        p /= p.sum(axis=1, keepdims=True)
        cum = np.cumsum(p, axis=1)
        self.z = np.minimum(
            (cum < rng.random(len(self.pair_m))[:, None]).sum(axis=1), self.n_topics - 1
        ).astype(np.int64)

    def update_gamma(self, rng: np.random.Generator) -> None:
        M = self.n_patients
        shape = self.xi + np.bincount(self.pair_m, weights=self.y, minlength=M)
        rate_sum = np.bincount(
            self.pair_m, weights=self.phi[self.z, self.pair_n] * self.e, minlength=M
        )
        rate = 1.0 / self.delta + rate_sum
        self.gamma = np.maximum(rng.gamma(shape, 1.0 / rate), 1e-300)

    def update_theta(self, rng: np.random.Generator) -> None:
        M, K = self.n_patients, self.n_topics
        counts = np.bincount(self.pair_m * K + self.z, minlength=M * K).reshape(M, K)
        g = rng.standard_gamma(self.alpha + counts)
        g = np.maximum(g, 1e-300)
        self.theta = g / g.sum(axis=1, keepdims=True)

    def update_phi(self, rng: np.random.Generator) -> None:
        K, V = self.n_topics, self.n_codes
        flat = self.z * V + self.pair_n
        S = np.bincount(flat, weights=self.y, minlength=K * V).reshape(K, V)
        R = np.bincount(
            flat, weights=self.e * self.gamma[self.pair_m], minlength=K * V
        ).reshape(K, V)
        for k in range(K):
            decision, row = mh_update_phi_row(
                self.phi[k], self.beta, S[k], R[k], float(self.concentration[k]), rng
            )
            self.propose_counts[k] += 1
            if decision.accepted:
                self.accept_counts[k] += 1
                self.phi[k] = row

    def sweep(self, rng: np.random.Generator) -> None:
        self.update_z(rng)
        self.update_gamma(rng)
        self.update_theta(rng)
        self.update_phi(rng)

    def resample_y(self, rng: np.random.Generator) -> None:
        """Redraw counts from the likelihood; used for joint-consistency checks."""
        lam = self.phi[self.z, self.pair_n] * self.e * self.gamma[self.pair_m]
        self.y = rng.poisson(lam).astype(np.float64)

    def adapt(self, target: float, step: float = 1.0) -> None:
        """Nudge each row's proposal concentration toward the target rate.

        Raising the concentration tightens proposals around the current row,
        which raises acceptance; the multiplicative update converges to a
        concentration whose window acceptance sits near the target.
        """
        window = np.maximum(self.propose_counts, 1)
        rate = self.accept_counts / window
        self.concentration = np.clip(
            self.concentration * np.exp(step * (target - rate)), 1.0, 1e10
        )
        self.accept_counts[:] = 0
        self.propose_counts[:] = 0

    def log_likelihood(self) -> float:
        lam = np.maximum(self.phi[self.z, self.pair_n] * self.e * self.gamma[self.pair_m], 1e-300)
        return float(np.sum(self.y * np.log(lam) - lam - gammaln(self.y + 1.0)))


# ---------------------------------------------------------------------------
# estimator


class PoissonDirichletModel(BaseEstimator):
    """Poisson mixture over expected-count baselines, fit by MCMC.

    ``fit`` needs the cohort and its expected-count matrix. Only pairs with
    a positive observed count carry a cluster indicator; zero counts
    contribute no likelihood term. The baseline is never modified.
    """

    def __init__(self, n_topics: int = 20, alpha: float = 1.0, beta: float = 1.0,
                 xi: float = 2.0, delta: float = 0.5,
                 proposal_concentration: float = 500.0, target_acceptance: float = 0.3,
                 adapt_interval: int = 10, chains: int = 2, burn_in: int = 500,
                 samples: int = 1000, thin: int = 1, seed: int = 0,
                 init: str = "kmeans"):
        self.n_topics = n_topics
        self.alpha = alpha
        self.beta = beta
        self.xi = xi
        self.delta = delta
        self.proposal_concentration = proposal_concentration
        self.target_acceptance = target_acceptance
        self.adapt_interval = adapt_interval
        self.chains = chains
        self.burn_in = burn_in
        self.samples = samples
        self.thin = thin
        self.seed = seed
        self.init = init

    def _check_params(self):
        if self.n_topics < 1:
            raise DataError("n_topics must be >= 1")
        if abs(self.xi * self.delta - 1.0) > 1e-12:
            raise DataError(f"xi * delta must equal 1, got {self.xi * self.delta}")
        for name in ("alpha", "beta", "xi", "delta", "proposal_concentration"):
            if not getattr(self, name) > 0:
                raise DataError(f"{name} must be positive")
        if self.chains < 1 or self.samples < 1 or self.thin < 1 or self.burn_in < 0:
            raise DataError("need chains >= 1, samples >= 1, thin >= 1, burn_in >= 0")
        if self.init not in ("kmeans", "prior"):
            raise DataError(f"unknown init {self.init!r}; choose kmeans or prior")

    def _kmeans_init(self, cohort, e_values, chain: int):
        """Per-chain starting point: cluster expected-normalized count profiles.

        Mixture posteriors are multimodal and single-site sweeps rarely hop
        modes, so chains are seeded near a data-supported mode; each chain
        uses its own clustering seed, keeping chains distinct and the whole
        fit deterministic.
        """
        from .cluster import KMeansSubgrouper

        profiles = cohort.counts / e_values
        profiles = profiles / np.maximum(profiles.sum(axis=1, keepdims=True), 1e-300)
        K, M, V = self.n_topics, cohort.n_patients, cohort.n_codes
        if K > M:
            return None, None
        seed_rng = derive_rng(self.seed, "pdm-init", chain)
        best = None
        for _ in range(5):  # restarts buy a much better local optimum
            est = KMeansSubgrouper(
                n_groups=K, seed=int(seed_rng.integers(2 ** 63))
            ).fit(profiles)
            if best is None or est.inertia_ < best.inertia_:
                best = est
        labels = best.labels_
        phi0 = np.empty((K, V))
        for k in range(K):
            members = labels == k
            if members.any():
                phi0[k] = profiles[members].mean(axis=0)
            else:
                phi0[k] = np.full(V, 1.0 / V)
        phi0 = 0.9 * phi0 + 0.1 / V  # keep every coordinate usable
        theta0 = np.full((M, K), 0.2 / K)
        theta0[np.arange(M), labels] += 0.8
        return theta0, phi0

    def fit(self, cohort: Cohort, expected):
        self._check_params()
        e_values = _expected_values(expected, cohort)
        mi, ni = np.nonzero(cohort.counts)
        pair_y = cohort.counts[mi, ni].astype(np.float64)
        pair_e = e_values[mi, ni]

        K, M, V = self.n_topics, cohort.n_patients, cohort.n_codes
        chain_thetas, chain_phis, chain_gammas, traces, acc_rates = [], [], [], [], []
        for c in range(self.chains):
            rng = derive_rng(self.seed, "pdm-chain", c)
            sampler = PdmSampler(
                pair_m=mi.astype(np.int64), pair_n=ni.astype(np.int64),
                y=pair_y.copy(), e=pair_e, n_patients=M, n_codes=V, n_topics=K,
                alpha=float(self.alpha), beta=float(self.beta),
                xi=float(self.xi), delta=float(self.delta),
            )
            theta0 = phi0 = None
            if self.init == "kmeans":
                theta0, phi0 = self._kmeans_init(cohort, e_values, c)
            sampler.init_state(rng, theta0=theta0, phi0=phi0)
            sampler.concentration = np.full(K, float(self.proposal_concentration))
            trace = np.empty(self.burn_in + self.samples)

            for sweep in range(self.burn_in):
                sampler.sweep(rng)
                trace[sweep] = sampler.log_likelihood()
                if (sweep + 1) % self.adapt_interval == 0:
                    sampler.adapt(self.target_acceptance)
            # reported acceptance rates cover the retained phase only
            sampler.accept_counts[:] = 0
            sampler.propose_counts[:] = 0

            theta_acc = np.zeros((M, K))
            phi_acc = np.zeros((K, V))
            gamma_acc = np.zeros(M)
            kept = 0
            for sweep in range(self.samples):
                sampler.sweep(rng)
                trace[self.burn_in + sweep] = sampler.log_likelihood()
                if sweep % self.thin == 0:
                    theta_acc += sampler.theta
                    phi_acc += sampler.phi
                    gamma_acc += sampler.gamma
                    kept += 1
            chain_thetas.append(theta_acc / kept)
            chain_phis.append(phi_acc / kept)
            chain_gammas.append(gamma_acc / kept)
            acc_rates.append(sampler.accept_counts / np.maximum(sampler.propose_counts, 1))
            traces.append(trace)

        theta = chain_thetas[0].copy()
        phi = chain_phis[0].copy()
        gamma = chain_gammas[0].copy()
        for i in range(1, self.chains):
            perm = greedy_align(chain_phis[0], chain_phis[i])
            theta += chain_thetas[i][:, perm]
            phi += chain_phis[i][perm]
            gamma += chain_gammas[i]
        theta /= self.chains
        phi /= self.chains
        gamma /= self.chains
        theta /= theta.sum(axis=1, keepdims=True)
        phi /= phi.sum(axis=1, keepdims=True)

        self.fit_ = TopicFit(
            theta=theta, phi=phi, loglik_traces=traces, model="pdm",
            patient_ids=tuple(cohort.patient_ids()), codes=tuple(cohort.vocabulary.codes),
            gamma=gamma, acceptance_rates=np.vstack(acc_rates),
        )
        self.theta_ = theta
        self.phi_ = phi
        self.gamma_ = gamma
        return self

    def patient_topic_posterior(self, cohort: Cohort, expected) -> np.ndarray:
        return patient_topic_posterior_pdm(self.fit_, cohort, expected)


def _expected_values(expected, cohort: Cohort) -> np.ndarray:
    if isinstance(expected, ExpectedCounts):
        values = expected.values
    else:
        values = np.maximum(np.asarray(expected, dtype=np.float64), EXPECTED_FLOOR)
    if values.shape != (cohort.n_patients, cohort.n_codes):
        raise DataError(
            f"expected counts shape {values.shape} does not match cohort "
            f"({cohort.n_patients} x {cohort.n_codes})"
        )
    return values


def patient_topic_posterior_pdm(
    fit: TopicFit, cohort: Cohort, expected, gamma: np.ndarray | None = None
) -> np.ndarray:
    """Normalized sum over diagnosed pairs of Poisson cluster responsibilities.

    For pair (m, n): p(z=k | y) is proportional to
    theta[m,k] * Poisson(y[m,n]; phi[k,n] * e[m,n] * gamma[m]).
    """
    if fit.theta.shape[0] != cohort.n_patients or fit.phi.shape[1] != cohort.n_codes:
        raise DataError("fit and cohort dimensions disagree")
    e_values = _expected_values(expected, cohort)
    if gamma is None:
        gamma = fit.gamma
    if gamma is None:
        raise DataError("patient multipliers are required (fit carries none)")
    mi, ni = np.nonzero(cohort.counts)
    y = cohort.counts[mi, ni].astype(np.float64)
    lam = np.maximum(fit.phi.T[ni] * (e_values[mi, ni] * gamma[mi])[:, None], 1e-300)
    logp = np.log(np.maximum(fit.theta[mi], 1e-300)) + y[:, None] * np.log(lam) - lam
    logp -= logp.max(axis=1, keepdims=True)
    resp = np.exp(logp)
    resp /= resp.sum(axis=1, keepdims=True)
    out = np.zeros_like(fit.theta)
    np.add.at(out, mi, resp)
    out /= out.sum(axis=1, keepdims=True)
    return out
