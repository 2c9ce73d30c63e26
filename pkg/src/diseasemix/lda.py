"""Collapsed Gibbs sampler for the multinomial topic model baseline.

Patients are documents, diagnosis occurrences are tokens (a count of c for
a code yields c tokens), topics are latent disease clusters. Theta and phi
are integrated out; the sampler walks the token assignments z and point
estimates are sample averages of the collapsed posterior predictive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from ._lda_kernel import lda_sweep
from ._rng import derive_rng
from .cohort import Cohort
from .errors import DataError
from .topics import TopicFit, greedy_align

__all__ = [
    "expand_tokens",
    "LdaState",
    "init_lda_state",
    "gibbs_sweep",
    "conditional_topic_probs",
    "LatentDirichletGibbs",
    "patient_topic_posterior",
    "log_likelihood",
]


def expand_tokens(cohort: Cohort) -> list[np.ndarray]:
    """Token (code-index) arrays per patient, in code order then repetition.

    Token order inside a patient is irrelevant to the model (exchangeable)
    but fixing it keeps runs reproducible.
    """
    return [np.repeat(np.arange(cohort.n_codes), cohort.counts[m]) for m in range(cohort.n_patients)]


@dataclass
class LdaState:
    """Assignments plus the three count tables kept in sync with them."""

    z: np.ndarray  # (T,) topic per token
    tokens: np.ndarray  # (T,) code index per token
    docs: np.ndarray  # (T,) patient index per token
    n_mk: np.ndarray  # (M, K) patient-topic counts
    n_kv: np.ndarray  # (K, V) topic-code counts
    n_k: np.ndarray  # (K,) topic totals

    def recount(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Rebuild all tables from z; used to check table integrity."""
        M, K = self.n_mk.shape
        V = self.n_kv.shape[1]
        n_mk = np.zeros((M, K), dtype=np.int64)
        n_kv = np.zeros((K, V), dtype=np.int64)
        np.add.at(n_mk, (self.docs, self.z), 1)
        np.add.at(n_kv, (self.z, self.tokens), 1)
        return n_mk, n_kv, n_kv.sum(axis=1)

    def consistent(self) -> bool:
        n_mk, n_kv, n_k = self.recount()
        return (
            np.array_equal(n_mk, self.n_mk)
            and np.array_equal(n_kv, self.n_kv)
            and np.array_equal(n_k, self.n_k)
        )


def init_lda_state(cohort: Cohort, n_topics: int, rng: np.random.Generator) -> LdaState:
    per_patient = expand_tokens(cohort)
    tokens = np.concatenate(per_patient) if per_patient else np.empty(0, dtype=np.int64)
    docs = np.repeat(np.arange(cohort.n_patients), cohort.counts.sum(axis=1))
    z = rng.integers(0, n_topics, size=tokens.size)
    state = LdaState(
        z=z.astype(np.int64),
        tokens=tokens.astype(np.int64),
        docs=docs.astype(np.int64),
        n_mk=np.zeros((cohort.n_patients, n_topics), dtype=np.int64),
        n_kv=np.zeros((n_topics, cohort.n_codes), dtype=np.int64),
        n_k=np.zeros(n_topics, dtype=np.int64),
    )
    np.add.at(state.n_mk, (state.docs, state.z), 1)
    np.add.at(state.n_kv, (state.z, state.tokens), 1)
    state.n_k[:] = state.n_kv.sum(axis=1)
    return state


def gibbs_sweep(state: LdaState, alpha: float, beta: float, rng: np.random.Generator) -> None:
    """Resample every token assignment once, in token order."""
    uniforms = rng.random(state.tokens.size)
    probs = np.empty(state.n_mk.shape[1])
    lda_sweep(
        state.z, state.tokens, state.docs, state.n_mk, state.n_kv, state.n_k,
        float(alpha), float(beta), uniforms, probs,
    )


def conditional_topic_probs(
    state: LdaState, alpha: float, beta: float, m: int, v: int
) -> np.ndarray:
    """Collapsed conditional for one token of code v in patient m.

    The token's current assignment must already be removed from the tables.
    p(z=k) is proportional to (n_mk[m,k]+alpha) * (n_kv[k,v]+beta) / (n_k[k]+V*beta),
    returned normalized.
    """
    V = state.n_kv.shape[1]
    weights = (state.n_mk[m] + alpha) * (state.n_kv[:, v] + beta) / (state.n_k + V * beta)
    return weights / weights.sum()


class LatentDirichletGibbs(BaseEstimator):
    """Collapsed Gibbs topic model over diagnosis tokens.

    Defaults follow the usual conventions for this family: alpha = 50/K,
    beta = 0.01, two chains with 500 burn-in sweeps and 1000 retained sweeps.
    Identical (cohort, parameters, seed) yields a bit-identical fit.
    """

    def __init__(self, n_topics: int = 20, alpha: float | None = None, beta: float = 0.01,
                 chains: int = 2, burn_in: int = 500, samples: int = 1000, thin: int = 1,
                 seed: int = 0):
        self.n_topics = n_topics
        self.alpha = alpha
        self.beta = beta
        self.chains = chains
        self.burn_in = burn_in
        self.samples = samples
        self.thin = thin
        self.seed = seed

    def _check_params(self):
        if self.n_topics < 1:
            raise DataError("n_topics must be >= 1")
        if self.chains < 1 or self.samples < 1 or self.thin < 1 or self.burn_in < 0:
            raise DataError("need chains >= 1, samples >= 1, thin >= 1, burn_in >= 0")
        alpha = 50.0 / self.n_topics if self.alpha is None else float(self.alpha)
        if alpha <= 0 or self.beta <= 0:
            raise DataError("alpha and beta must be positive")
        return alpha, float(self.beta)

    def fit(self, cohort: Cohort):
        alpha, beta = self._check_params()
        if cohort.n_patients == 0:
            raise DataError("cohort is empty")
        K, V, M = self.n_topics, cohort.n_codes, cohort.n_patients
        doc_lengths = cohort.counts.sum(axis=1).astype(np.float64)

        chain_thetas, chain_phis, traces = [], [], []
        for c in range(self.chains):
            rng = derive_rng(self.seed, "lda-chain", c)
            state = init_lda_state(cohort, K, rng)
            theta_acc = np.zeros((M, K))
            phi_acc = np.zeros((K, V))
            kept = 0
            trace = np.empty(self.burn_in + self.samples)
            for sweep in range(self.burn_in + self.samples):
                gibbs_sweep(state, alpha, beta, rng)
                theta_hat = (state.n_mk + alpha) / (doc_lengths[:, None] + K * alpha)
                phi_hat = (state.n_kv + beta) / (state.n_k[:, None] + V * beta)
                trace[sweep] = _token_loglik(cohort, theta_hat, phi_hat)
                if sweep >= self.burn_in and (sweep - self.burn_in) % self.thin == 0:
                    theta_acc += theta_hat
                    phi_acc += phi_hat
                    kept += 1
            chain_thetas.append(theta_acc / kept)
            chain_phis.append(phi_acc / kept)
            traces.append(trace)

        theta, phi = _average_aligned(chain_thetas, chain_phis)
        self.fit_ = TopicFit(
            theta=theta, phi=phi, loglik_traces=traces, model="lda",
            patient_ids=tuple(cohort.patient_ids()), codes=tuple(cohort.vocabulary.codes),
        )
        self.theta_ = theta
        self.phi_ = phi
        return self

    def patient_topic_posterior(self, cohort: Cohort) -> np.ndarray:
        return patient_topic_posterior(self.fit_, cohort)


def _average_aligned(chain_thetas, chain_phis) -> tuple[np.ndarray, np.ndarray]:
    """Align every chain to the first by profile matching, then average."""
    theta = chain_thetas[0].copy()
    phi = chain_phis[0].copy()
    for other_theta, other_phi in zip(chain_thetas[1:], chain_phis[1:]):
        perm = greedy_align(chain_phis[0], other_phi)
        theta += other_theta[:, perm]
        phi += other_phi[perm]
    theta /= len(chain_thetas)
    phi /= len(chain_phis)
    # renormalize away float drift so the simplex invariant holds exactly
    theta /= theta.sum(axis=1, keepdims=True)
    phi /= phi.sum(axis=1, keepdims=True)
    return theta, phi


def _token_loglik(cohort: Cohort, theta: np.ndarray, phi: np.ndarray) -> float:
    mix = theta @ phi
    mask = cohort.counts > 0
    return float((cohort.counts[mask] * np.log(mix[mask])).sum())


def patient_topic_posterior(fit: TopicFit, cohort: Cohort) -> np.ndarray:
    """Normalized sum over a patient's tokens of per-token topic responsibilities.

    For token of code v, p(z=k | v) is proportional to theta[m,k] * phi[k,v];
    rows of the result sum to one.
    """
    if fit.theta.shape[0] != cohort.n_patients or fit.phi.shape[1] != cohort.n_codes:
        raise DataError("fit and cohort dimensions disagree")
    M, K = fit.theta.shape
    out = np.empty((M, K))
    for m in range(M):
        resp = fit.theta[m][None, :] * fit.phi.T  # (V, K)
        resp /= resp.sum(axis=1, keepdims=True)
        row = cohort.counts[m] @ resp
        out[m] = row / row.sum()
    return out


def log_likelihood(fit: TopicFit, cohort: Cohort) -> float:
    """Sum over tokens of log sum_k theta[m,k] * phi[k,v]."""
    if fit.theta.shape[0] != cohort.n_patients or fit.phi.shape[1] != cohort.n_codes:
        raise DataError("fit and cohort dimensions disagree")
    return _token_loglik(cohort, fit.theta, fit.phi)
