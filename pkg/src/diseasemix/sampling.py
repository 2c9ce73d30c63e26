"""Metropolis-Hastings acceptance primitives shared by the samplers."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["MhDecision", "mh_accept_prob", "mh_decide"]


@dataclass(frozen=True)
class MhDecision:
    """Outcome of one accept/reject step.

    ``accepted`` holds exactly when log(uniform_draw) <= log_acceptance.
    """

    log_acceptance: float
    accepted: bool
    uniform_draw: float


def mh_accept_prob(
    log_p_current: float,
    log_p_proposed: float,
    log_q_forward: float = 0.0,
    log_q_backward: float = 0.0,
) -> float:
    """min(1, P(x*) Q(x|x*) / (P(x) Q(x*|x))) evaluated in log space.

    A proposal with density zero (log pdf of -inf) is never accepted.
    """
    if log_p_proposed == -math.inf:
        return 0.0
    log_ratio = (log_p_proposed + log_q_backward) - (log_p_current + log_q_forward)
    return min(1.0, math.exp(min(log_ratio, 0.0)))


def mh_decide(
    log_p_current: float,
    log_p_proposed: float,
    log_q_forward: float,
    log_q_backward: float,
    rng: np.random.Generator,
) -> MhDecision:
    """Draw the uniform and decide; one rng draw regardless of outcome."""
    u = float(rng.random())
    if log_p_proposed == -math.inf:
        log_acc = -math.inf
    else:
        log_acc = min(
            0.0, (log_p_proposed + log_q_backward) - (log_p_current + log_q_forward)
        )
    accepted = (math.log(u) <= log_acc) if u > 0.0 else True
    return MhDecision(log_acceptance=log_acc, accepted=accepted, uniform_draw=u)
