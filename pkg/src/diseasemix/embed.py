"""Exact t-SNE over topic-space disease representations.

Each disease is a K-vector (a column of the topic-disease matrix); the
embedding maps all V of them to 2-D. The quadratic-cost exact formulation
is deliberate: V is a few hundred here, and exactness makes the gradient
testable against finite differences.
"""

from __future__ import annotations

import csv
import warnings

import numpy as np
from sklearn.base import BaseEstimator

from ._rng import derive_rng
from .errors import DataError, NumericalError
from .svgplot import scatter_svg
from .validation import as_float_matrix

__all__ = [
    "perplexity_calibration",
    "joint_probabilities",
    "kl_divergence",
    "tsne_gradient",
    "ExactTsne",
    "export_embedding",
]

_EPS = 1e-12


def perplexity_calibration(
    distances: np.ndarray, perplexity: float, tol: float = 1e-5, max_steps: int = 50
) -> tuple[float, np.ndarray]:
    """Find the Gaussian bandwidth whose conditional distribution has the
    requested perplexity (2^entropy), by bisection on the precision.

    Returns (sigma, probabilities). All-zero distances cannot be calibrated;
    they produce a uniform distribution and a warning.
    """
    d2 = np.asarray(distances, dtype=np.float64) ** 2
    if d2.size == 0:
        raise DataError("need at least one distance")
    if d2.max() == 0.0:
        warnings.warn("all distances are zero (duplicate points); using uniform affinities")
        return np.inf, np.full(d2.size, 1.0 / d2.size)

    target = np.log2(perplexity)

    def entropy_probs(beta: float):
        w = np.exp(-d2 * beta)
        total = w.sum()
        if total <= 0:
            # beta too large: all mass on the closest point(s)
            closest = d2 == d2.min()
            p = closest / closest.sum()
        else:
            p = w / total
        nz = p > 0
        h = -float(np.sum(p[nz] * np.log2(p[nz])))
        return h, p

    beta = 1.0
    lo, hi = 0.0, np.inf
    h, p = entropy_probs(beta)
    for _ in range(max_steps):
        if abs(2.0 ** h - perplexity) <= tol:
            break
        if h > target:  # too spread out: raise precision
            lo = beta
            beta = beta * 2.0 if hi == np.inf else 0.5 * (beta + hi)
        else:
            hi = beta
            beta = beta / 2.0 if lo == 0.0 else 0.5 * (beta + lo)
        h, p = entropy_probs(beta)
    sigma = float(np.sqrt(1.0 / (2.0 * beta)))
    return sigma, p


def joint_probabilities(X: np.ndarray, perplexity: float) -> np.ndarray:
    """Symmetrized affinities P with sum 1: (p(j|i) + p(i|j)) / (2V)."""
    V = X.shape[0]
    diff = X[:, None, :] - X[None, :, :]
    d = np.sqrt((diff ** 2).sum(axis=2))
    cond = np.zeros((V, V))
    idx = np.arange(V)
    for i in range(V):
        others = idx != i
        _, p = perplexity_calibration(d[i, others], perplexity)
        cond[i, others] = p
    P = (cond + cond.T) / (2.0 * V)
    return P


def _student_t_kernel(Y: np.ndarray) -> np.ndarray:
    diff = Y[:, None, :] - Y[None, :, :]
    num = 1.0 / (1.0 + (diff ** 2).sum(axis=2))
    np.fill_diagonal(num, 0.0)
    return num


def kl_divergence(P: np.ndarray, Y: np.ndarray) -> float:
    num = _student_t_kernel(Y)
    Q = num / num.sum()
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / np.maximum(Q[mask], _EPS))))


def tsne_gradient(P: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Analytic gradient of KL(P || Q) with Student-t low-dimensional affinities."""
    num = _student_t_kernel(Y)
    Q = num / num.sum()
    W = (P - Q) * num
    grad = 4.0 * ((W.sum(axis=1)[:, None] * Y) - (W @ Y))
    return grad


class ExactTsne(BaseEstimator):
    """Gradient-descent t-SNE with momentum, per-parameter gains and early
    exaggeration; deterministic under a fixed seed.

    The KL trace is recorded every 50 iterations against the un-exaggerated
    affinities, so values before and after the exaggeration switch are
    comparable.
    """

    def __init__(self, perplexity: float = 30.0, n_iter: int = 1000,
                 learning_rate: float = 200.0, early_exaggeration: float = 12.0,
                 exaggeration_iters: int = 250, momentum_initial: float = 0.5,
                 momentum_final: float = 0.8, momentum_switch: int = 250, seed: int = 0):
        self.perplexity = perplexity
        self.n_iter = n_iter
        self.learning_rate = learning_rate
        self.early_exaggeration = early_exaggeration
        self.exaggeration_iters = exaggeration_iters
        self.momentum_initial = momentum_initial
        self.momentum_final = momentum_final
        self.momentum_switch = momentum_switch
        self.seed = seed

    def fit_transform(self, X, y=None) -> np.ndarray:
        X = as_float_matrix(X)
        V = X.shape[0]
        if V < 4:
            raise DataError("need at least 4 points")
        if not self.perplexity > 1:
            raise DataError("perplexity must exceed 1")
        if self.perplexity >= (V - 1) / 3.0:
            raise DataError(f"perplexity must be below (V-1)/3 = {(V - 1) / 3:.2f}")
        if self.n_iter < 250:
            raise DataError("need at least 250 iterations")
        if not self.learning_rate > 0:
            raise DataError("learning_rate must be positive")

        rng = derive_rng(self.seed, "tsne")
        X = _jitter_duplicates(X, rng)
        P = joint_probabilities(X, self.perplexity)

        Y = rng.normal(0.0, 1e-4, size=(V, 2))
        inc = np.zeros_like(Y)
        gains = np.ones_like(Y)
        trace: list[tuple[int, float]] = []
        for t in range(self.n_iter):
            exaggerate = t < self.exaggeration_iters
            P_t = P * self.early_exaggeration if exaggerate else P
            grad = tsne_gradient(P_t, Y)
            if not np.all(np.isfinite(grad)):
                raise NumericalError(f"non-finite t-SNE gradient at iteration {t}")
            momentum = self.momentum_initial if t < self.momentum_switch else self.momentum_final
            same_sign = np.sign(grad) == np.sign(inc)
            gains = np.where(same_sign, gains * 0.8, gains + 0.2)
            np.maximum(gains, 0.01, out=gains)
            inc = momentum * inc - self.learning_rate * gains * grad
            Y = Y + inc
            Y = Y - Y.mean(axis=0)
            if (t + 1) % 50 == 0:
                trace.append((t + 1, kl_divergence(P, Y)))

        self.embedding_ = Y
        self.kl_trace_ = trace
        self.kl_divergence_ = kl_divergence(P, Y)
        return Y

    def kl_at(self, iteration: int) -> float:
        for it, kl in self.kl_trace_:
            if it == iteration:
                return kl
        raise DataError(f"no KL value recorded at iteration {iteration}")


def _jitter_duplicates(X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Perturb any row identical to an earlier one, to avoid zero distances."""
    _, first_idx, inverse = np.unique(X, axis=0, return_index=True, return_inverse=True)
    dup = np.ones(X.shape[0], dtype=bool)
    dup[first_idx[inverse] == np.arange(X.shape[0])] = False
    if dup.any():
        X = X.copy()
        X[dup] += rng.normal(0.0, 1e-10, size=(int(dup.sum()), X.shape[1]))
    return X


def export_embedding(embedding: np.ndarray, labels, csv_path, svg_path) -> None:
    """Write `code,x,y` rows and a labeled scatter SVG; both byte-stable."""
    embedding = as_float_matrix(embedding, "embedding")
    labels = list(labels)
    if len(labels) != embedding.shape[0]:
        raise DataError("labels length must match the number of embedded points")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["code", "x", "y"])
        for label, (x, y) in zip(labels, embedding):
            writer.writerow([label, repr(float(x)), repr(float(y))])
    scatter_svg(embedding, labels, svg_path)
