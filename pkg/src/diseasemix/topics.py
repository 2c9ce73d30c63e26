"""Topic-fit container, cross-chain alignment and CSV export/import.

Mixture components are only identified up to relabeling, so chains are
aligned to the first chain by greedy cosine matching of their disease
profiles before averaging.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

__all__ = [
    "TopicFit",
    "greedy_align",
    "write_theta_csv",
    "write_phi_csv",
    "write_diagnostics_csv",
    "write_gamma_csv",
    "write_acceptance_csv",
    "read_theta_csv",
    "read_phi_csv",
    "read_gamma_csv",
]


@dataclass
class TopicFit:
    """Posterior point estimates from one sampler run.

    ``theta`` is M x K (patients on the topic simplex), ``phi`` is K x V
    (topics on the disease simplex). ``loglik_traces`` has one array per
    chain with a value per sweep. ``gamma`` and ``acceptance_rates`` are
    only present for the Poisson model.
    """

    theta: np.ndarray
    phi: np.ndarray
    loglik_traces: list[np.ndarray]
    model: str
    patient_ids: tuple[str, ...]
    codes: tuple[str, ...]
    gamma: np.ndarray | None = None
    acceptance_rates: np.ndarray | None = None  # (chains, K)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, arr in (("theta", self.theta), ("phi", self.phi)):
            if arr.min() < 0:
                raise DataError(f"{name} entries must be >= 0")
            if np.max(np.abs(arr.sum(axis=1) - 1.0)) > 1e-9:
                raise DataError(f"{name} rows must sum to 1 within 1e-9")
        if self.theta.shape[1] != self.phi.shape[0]:
            raise DataError("theta and phi disagree on the number of topics")
        if len(self.patient_ids) != self.theta.shape[0]:
            raise DataError("patient_ids length does not match theta rows")
        if len(self.codes) != self.phi.shape[1]:
            raise DataError("codes length does not match phi columns")

    @property
    def n_topics(self) -> int:
        return self.phi.shape[0]


def greedy_align(reference_phi: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Permutation ``perm`` such that phi[perm[k]] is the best match for
    reference row k, chosen greedily by descending cosine similarity."""
    K = reference_phi.shape[0]
    ref = reference_phi / np.linalg.norm(reference_phi, axis=1, keepdims=True)
    oth = phi / np.linalg.norm(phi, axis=1, keepdims=True)
    sim = ref @ oth.T
    perm = np.full(K, -1, dtype=np.int64)
    used_ref = np.zeros(K, dtype=bool)
    used_oth = np.zeros(K, dtype=bool)
    for _ in range(K):
        masked = np.where(used_ref[:, None] | used_oth[None, :], -np.inf, sim)
        i, j = np.unravel_index(np.argmax(masked), masked.shape)
        perm[i] = j
        used_ref[i] = True
        used_oth[j] = True
    return perm


# ---------------------------------------------------------------------------
# CSV surfaces shared by both models


def write_theta_csv(path, fit: TopicFit) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_id", "topic", "weight"])
        for m, pid in enumerate(fit.patient_ids):
            for k in range(fit.n_topics):
                writer.writerow([pid, k, repr(float(fit.theta[m, k]))])


def write_phi_csv(path, fit: TopicFit) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["topic", "code", "weight"])
        for k in range(fit.n_topics):
            for v, code in enumerate(fit.codes):
                writer.writerow([k, code, repr(float(fit.phi[k, v]))])


def write_diagnostics_csv(path, fit: TopicFit) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["chain", "sweep", "log_likelihood"])
        for c, trace in enumerate(fit.loglik_traces):
            for s, value in enumerate(trace):
                writer.writerow([c, s, repr(float(value))])


def write_gamma_csv(path, fit: TopicFit) -> None:
    if fit.gamma is None:
        raise DataError("fit carries no patient multipliers")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_id", "gamma"])
        for pid, g in zip(fit.patient_ids, fit.gamma):
            writer.writerow([pid, repr(float(g))])


def write_acceptance_csv(path, fit: TopicFit) -> None:
    if fit.acceptance_rates is None:
        raise DataError("fit carries no acceptance rates")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["chain", "cluster", "rate"])
        for c in range(fit.acceptance_rates.shape[0]):
            for k in range(fit.acceptance_rates.shape[1]):
                writer.writerow([c, k, repr(float(fit.acceptance_rates[c, k]))])


def _read_long_csv(path, header, key_cols):
    rows = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        got = next(reader, None)
        if got != header:
            raise DataError(f"{path}: expected header {','.join(header)}")
        for row in reader:
            if len(row) != len(header):
                raise DataError(f"{path}:{reader.line_num}: expected {len(header)} fields")
            key = tuple(row[i] for i in key_cols)
            if key in rows:
                raise DataError(f"{path}:{reader.line_num}: duplicate entry {key}")
            rows[key] = float(row[-1])
    if not rows:
        raise DataError(f"{path}: empty file")
    return rows


def read_theta_csv(path) -> tuple[list[str], np.ndarray]:
    """Returns (patient ids in file order, M x K weight matrix)."""
    rows = _read_long_csv(path, ["patient_id", "topic", "weight"], (0, 1))
    ids = list(dict.fromkeys(key[0] for key in rows))
    K = max(int(key[1]) for key in rows) + 1
    theta = np.zeros((len(ids), K))
    index = {pid: m for m, pid in enumerate(ids)}
    for (pid, topic), weight in rows.items():
        theta[index[pid], int(topic)] = weight
    return ids, theta


def read_phi_csv(path) -> tuple[list[str], np.ndarray]:
    """Returns (codes in file order, K x V weight matrix)."""
    rows = _read_long_csv(path, ["topic", "code", "weight"], (0, 1))
    codes = list(dict.fromkeys(key[1] for key in rows))
    K = max(int(key[0]) for key in rows) + 1
    phi = np.zeros((K, len(codes)))
    index = {code: v for v, code in enumerate(codes)}
    for (topic, code), weight in rows.items():
        phi[int(topic), index[code]] = weight
    return codes, phi


def read_gamma_csv(path) -> dict[str, float]:
    rows = _read_long_csv(path, ["patient_id", "gamma"], (0,))
    return {key[0]: value for key, value in rows.items()}
