"""Patient subgrouping: k-means, Ward agglomeration and a CF-tree clusterer.

All three are implemented directly so behaviour is pinned: deterministic
seeding, documented tie-breaking (smallest indices win) and an explicit
empty-cluster repair for Lloyd iterations. Features are rows of the
patient-topic matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin

from ._rng import derive_rng
from .errors import DataError
from .validation import as_float_matrix

__all__ = [
    "SubgroupAssignment",
    "KMeansSubgrouper",
    "WardSubgrouper",
    "BirchSubgrouper",
    "ClusteringFeature",
    "sweep_subgroups",
    "SweepResult",
    "default_birch_threshold",
]


@dataclass(frozen=True)
class SubgroupAssignment:
    """Patient -> subgroup labels from one (algorithm, G) cell."""

    labels: np.ndarray
    n_groups: int
    algorithm: str
    objective: float | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.size == 0:
            raise DataError("assignment has no labels")
        if labels.min() < 0 or labels.max() >= self.n_groups:
            raise DataError("labels must lie in [0, n_groups)")

    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_groups)


# ---------------------------------------------------------------------------
# k-means


class KMeansSubgrouper(BaseEstimator, ClusterMixin):
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are repaired by moving the farthest point of the largest
    cluster into the empty one. ``inertia_history_`` records the objective
    after every iteration; it is non-increasing.
    """

    def __init__(self, n_groups: int = 2, seed: int = 0, max_iter: int = 300, tol: float = 1e-6):
        self.n_groups = n_groups
        self.seed = seed
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y=None):
        X = as_float_matrix(X)
        G = self.n_groups
        if G < 1 or G > X.shape[0]:
            raise DataError(f"n_groups must be in [1, {X.shape[0]}]")
        rng = derive_rng(self.seed, "kmeans")
        centroids = _kmeanspp_init(X, G, rng)
        labels = np.zeros(X.shape[0], dtype=np.int64)
        history = []
        for _ in range(self.max_iter):
            d2 = _sq_distances(X, centroids)
            labels = d2.argmin(axis=1)
            labels = _repair_empty(X, labels, centroids, G)
            new_centroids = np.vstack([X[labels == g].mean(axis=0) for g in range(G)])
            history.append(float(_sq_distances(X, new_centroids)[np.arange(X.shape[0]), labels].sum()))
            shift = np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max()
            centroids = new_centroids
            if shift < self.tol:
                break
        self.labels_ = labels
        self.centroids_ = centroids
        self.inertia_ = history[-1]
        self.inertia_history_ = history
        return self

    def assignment(self) -> SubgroupAssignment:
        return SubgroupAssignment(self.labels_, self.n_groups, "kmeans", self.inertia_)


def _sq_distances(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def _kmeanspp_init(X: np.ndarray, G: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centroids = np.empty((G, X.shape[1]))
    centroids[0] = X[rng.integers(n)]
    d2 = ((X - centroids[0]) ** 2).sum(axis=1)
    for g in range(1, G):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(d2 / total), rng.random(), side="right"))
            idx = min(idx, n - 1)
        centroids[g] = X[idx]
        d2 = np.minimum(d2, ((X - centroids[g]) ** 2).sum(axis=1))
    return centroids


def _repair_empty(X, labels, centroids, G) -> np.ndarray:
    labels = labels.copy()
    for g in range(G):
        if (labels == g).any():
            continue
        sizes = np.bincount(labels, minlength=G)
        donor = int(sizes.argmax())
        members = np.nonzero(labels == donor)[0]
        dist = ((X[members] - centroids[donor]) ** 2).sum(axis=1)
        labels[members[int(dist.argmax())]] = g
    return labels


# ---------------------------------------------------------------------------
# Ward agglomeration


class WardSubgrouper(BaseEstimator, ClusterMixin):
    """Agglomerative clustering under Ward's minimum-variance criterion.

    Merge cost is the SSE increase delta(A, B) = |A||B|/(|A|+|B|) ||cA-cB||^2,
    maintained with the Lance-Williams recurrence; ties go to the smallest
    pair of cluster slots, so the result is deterministic. ``merge_heights_``
    is non-decreasing.
    """

    def __init__(self, n_groups: int = 2):
        self.n_groups = n_groups

    def fit(self, X, y=None):
        X = as_float_matrix(X)
        n = X.shape[0]
        G = self.n_groups
        if G < 1 or G > n:
            raise DataError(f"n_groups must be in [1, {n}]")
        sizes = np.ones(n)
        members: list[list[int] | None] = [[i] for i in range(n)]
        centroids = X.copy()

        D = _sq_distances(X, X) * 0.5  # singleton Ward cost
        np.fill_diagonal(D, np.inf)
        D[np.tril_indices(n, -1)] = np.inf  # keep i < j only

        heights = []
        for _ in range(n - G):
            flat = int(np.argmin(D))
            i, j = divmod(flat, n)
            heights.append(float(D[i, j]))
            ni, nj = sizes[i], sizes[j]
            # Lance-Williams update of every remaining cluster's cost to (i U j)
            for c in range(n):
                if members[c] is None or c in (i, j):
                    continue
                nc = sizes[c]
                d_ic = D[min(i, c), max(i, c)]
                d_jc = D[min(j, c), max(j, c)]
                d_new = ((ni + nc) * d_ic + (nj + nc) * d_jc - nc * D[i, j]) / (ni + nj + nc)
                D[min(i, c), max(i, c)] = d_new
            centroids[i] = (ni * centroids[i] + nj * centroids[j]) / (ni + nj)
            sizes[i] = ni + nj
            members[i] = members[i] + members[j]
            members[j] = None
            D[j, :] = np.inf
            D[:, j] = np.inf

        labels = np.empty(n, dtype=np.int64)
        active = [m for m in members if m is not None]
        # label groups by their smallest point index for determinism
        for g, group in enumerate(sorted(active, key=min)):
            labels[group] = g
        self.labels_ = labels
        self.merge_heights_ = heights
        return self

    def assignment(self) -> SubgroupAssignment:
        return SubgroupAssignment(self.labels_, self.n_groups, "hierarchical")


# ---------------------------------------------------------------------------
# CF-tree clustering


@dataclass
class ClusteringFeature:
    """(count, linear sum, squared-norm sum) summary of a point set."""

    n: int
    ls: np.ndarray
    ss: float

    @classmethod
    def of_point(cls, x: np.ndarray) -> "ClusteringFeature":
        return cls(1, x.copy(), float(x @ x))

    def merged(self, other: "ClusteringFeature") -> "ClusteringFeature":
        return ClusteringFeature(self.n + other.n, self.ls + other.ls, self.ss + other.ss)

    def centroid(self) -> np.ndarray:
        return self.ls / self.n

    def radius(self) -> float:
        c = self.ls / self.n
        return float(np.sqrt(max(self.ss / self.n - c @ c, 0.0)))


@dataclass
class _Node:
    is_leaf: bool
    entries: list = field(default_factory=list)  # CFs (leaf) or (CF, child) pairs


class BirchSubgrouper(BaseEstimator, ClusterMixin):
    """Single-pass CF-tree build, then Ward over the leaf-entry centroids.

    Points absorb into the nearest leaf entry when the merged radius stays
    within ``threshold``; nodes split at ``branching_factor`` using the two
    farthest entries as seeds. Final labels come from the nearest merged
    centroid. With no explicit threshold, 0.25 x the mean pairwise distance
    of a 200-row sample is used.
    """

    def __init__(self, n_groups: int = 2, branching_factor: int = 50,
                 threshold: float | None = None):
        self.n_groups = n_groups
        self.branching_factor = branching_factor
        self.threshold = threshold

    def fit(self, X, y=None):
        X = as_float_matrix(X)
        n = X.shape[0]
        G = self.n_groups
        if G < 1 or G > n:
            raise DataError(f"n_groups must be in [1, {n}]")
        threshold = self.threshold
        if threshold is None:
            threshold = default_birch_threshold(X)
        if not threshold > 0:
            raise DataError("threshold must be > 0; the rows may be all identical")

        root = _Node(is_leaf=True)
        for x in X:
            overflow = _insert(root, x, threshold, self.branching_factor)
            if overflow:
                left, right = _split_node(root)
                root = _Node(is_leaf=False,
                             entries=[(_node_cf(left), left), (_node_cf(right), right)])

        leaf_cfs = _collect_leaf_cfs(root)
        if len(leaf_cfs) < G:
            raise DataError(
                f"only {len(leaf_cfs)} leaf entries for {G} groups; use a smaller threshold"
            )
        leaf_centroids = np.vstack([cf.centroid() for cf in leaf_cfs])
        ward = WardSubgrouper(n_groups=G).fit(leaf_centroids)
        weights = np.array([cf.n for cf in leaf_cfs], dtype=np.float64)
        finals = np.vstack([
            np.average(leaf_centroids[ward.labels_ == g], axis=0,
                       weights=weights[ward.labels_ == g])
            for g in range(G)
        ])
        self.labels_ = _sq_distances(X, finals).argmin(axis=1)
        self.centroids_ = finals
        self.n_leaf_entries_ = len(leaf_cfs)
        self.threshold_ = threshold
        return self

    def assignment(self) -> SubgroupAssignment:
        return SubgroupAssignment(self.labels_, self.n_groups, "birch")


def default_birch_threshold(X: np.ndarray, sample_size: int = 200) -> float:
    idx = np.unique(np.linspace(0, X.shape[0] - 1, min(sample_size, X.shape[0])).astype(int))
    S = X[idx]
    d2 = _sq_distances(S, S)
    iu = np.triu_indices(len(idx), 1)
    if iu[0].size == 0:
        return 0.0
    return 0.25 * float(np.sqrt(d2[iu]).mean())


def _node_cf(node: _Node) -> ClusteringFeature:
    cfs = node.entries if node.is_leaf else [cf for cf, _ in node.entries]
    total = cfs[0]
    for cf in cfs[1:]:
        total = total.merged(cf)
    return total


def _nearest(cfs: list[ClusteringFeature], x: np.ndarray) -> int:
    dists = [float(np.sum((cf.centroid() - x) ** 2)) for cf in cfs]
    return int(np.argmin(dists))


def _insert(node: _Node, x: np.ndarray, threshold: float, branching: int) -> bool:
    """Insert a point; returns True when the node now exceeds branching."""
    if node.is_leaf:
        if node.entries:
            i = _nearest(node.entries, x)
            merged = node.entries[i].merged(ClusteringFeature.of_point(x))
            if merged.radius() <= threshold:
                node.entries[i] = merged
                return False
        node.entries.append(ClusteringFeature.of_point(x))
        return len(node.entries) > branching
    i = _nearest([cf for cf, _ in node.entries], x)
    cf, child = node.entries[i]
    overflow = _insert(child, x, threshold, branching)
    if overflow:
        left, right = _split_node(child)
        node.entries[i] = (_node_cf(left), left)
        node.entries.insert(i + 1, (_node_cf(right), right))
    else:
        node.entries[i] = (cf.merged(ClusteringFeature.of_point(x)), child)
    return len(node.entries) > branching


def _split_node(node: _Node) -> tuple[_Node, _Node]:
    cfs = node.entries if node.is_leaf else [cf for cf, _ in node.entries]
    cents = np.vstack([cf.centroid() for cf in cfs])
    d2 = _sq_distances(cents, cents)
    a, b = np.unravel_index(int(np.argmax(d2)), d2.shape)
    left = _Node(is_leaf=node.is_leaf)
    right = _Node(is_leaf=node.is_leaf)
    for i, entry in enumerate(node.entries):
        to_left = d2[i, a] <= d2[i, b]
        (left if to_left else right).entries.append(entry)
    return left, right


def _collect_leaf_cfs(node: _Node) -> list[ClusteringFeature]:
    if node.is_leaf:
        return list(node.entries)
    out = []
    for _, child in node.entries:
        out.extend(_collect_leaf_cfs(child))
    return out


# ---------------------------------------------------------------------------
# the 2..6 sweep


@dataclass
class SweepResult:
    assignments: dict[tuple[str, int], SubgroupAssignment] = field(default_factory=dict)
    errors: dict[tuple[str, int], str] = field(default_factory=dict)


_ALGORITHMS = {
    "hierarchical": lambda G, seed: WardSubgrouper(n_groups=G),
    "kmeans": lambda G, seed: KMeansSubgrouper(n_groups=G, seed=seed),
    "birch": lambda G, seed: BirchSubgrouper(n_groups=G),
}


def sweep_subgroups(features, algorithms=("hierarchical", "kmeans", "birch"),
                    g_range=range(2, 7), seed: int = 0, n_jobs: int = 1) -> SweepResult:
    """Run every (algorithm, G) cell; per-cell failures are recorded and the
    sweep continues.

    Cells are independent, so with n_jobs > 1 they run on a thread pool;
    results are keyed by cell and identical to the sequential order.
    """
    X = as_float_matrix(features)
    for name in algorithms:
        if name not in _ALGORITHMS:
            raise DataError(f"unknown algorithm {name!r}; choose from {sorted(_ALGORITHMS)}")
    cells = [(name, int(G)) for name in algorithms for G in g_range]

    def run_cell(cell):
        name, G = cell
        try:
            return cell, _ALGORITHMS[name](G, seed).fit(X).assignment(), None
        except DataError as exc:
            return cell, None, str(exc)

    result = SweepResult()
    if n_jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            outcomes = list(pool.map(run_cell, cells))
    else:
        outcomes = [run_cell(cell) for cell in cells]
    for cell, assignment, error in outcomes:
        if assignment is not None:
            result.assignments[cell] = assignment
        else:
            result.errors[cell] = error
    return result
