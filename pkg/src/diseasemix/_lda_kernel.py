"""Hot loop of the collapsed Gibbs sampler, jitted with numba.

The kernel consumes one pre-drawn uniform per token so all randomness stays
in the caller's numpy generator; given the same uniforms it is bit-exact.
"""

import numpy as np
from numba import njit

__all__ = ["lda_sweep"]


@njit(cache=True)
def lda_sweep(z, tokens, docs, n_mk, n_kv, n_k, alpha, beta, uniforms, probs):
    """One full sweep over all tokens, updating counts in place.

    probs is a scratch buffer of length K. For token i the conditional is
    (n_mk[m,k]+alpha) * (n_kv[k,v]+beta) / (n_k[k]+V*beta) with token i's
    current assignment removed from the tables.
    """
    K = n_mk.shape[1]
    V = n_kv.shape[1]
    vbeta = V * beta
    for i in range(tokens.shape[0]):
        m = docs[i]
        v = tokens[i]
        old = z[i]
        n_mk[m, old] -= 1
        n_kv[old, v] -= 1
        n_k[old] -= 1

        total = 0.0
        for k in range(K):
            p = (n_mk[m, k] + alpha) * (n_kv[k, v] + beta) / (n_k[k] + vbeta)
            probs[k] = p
            total += p
        r = uniforms[i] * total
        new = K - 1
        acc = 0.0
        for k in range(K):
            acc += probs[k]
            if r < acc:
                new = k
                break

        z[i] = new
        n_mk[m, new] += 1
        n_kv[new, v] += 1
        n_k[new] += 1
