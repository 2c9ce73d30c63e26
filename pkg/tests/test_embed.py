import numpy as np
import pytest

from diseasemix.embed import (
    ExactTsne,
    export_embedding,
    joint_probabilities,
    kl_divergence,
    perplexity_calibration,
    tsne_gradient,
)
from diseasemix.errors import DataError


def two_group_rows(seed=0, n=10, dims=5, separation=100.0):
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, 1.0, size=(n, dims))
    b = rng.normal(separation, 1.0, size=(n, dims))
    return np.vstack([a, b]), np.repeat([0, 1], n)


# ---------------------------------------------------------------------------
# calibration


def test_calibration_probs_sum_to_one():
    rng = np.random.default_rng(1)
    d = rng.uniform(0.1, 5.0, size=20)
    _, p = perplexity_calibration(d, 5.0)
    assert abs(p.sum() - 1.0) < 1e-12
    assert p.min() >= 0


def test_calibration_uniform_when_equal_distances():
    d = np.full(9, 2.5)
    sigma, p = perplexity_calibration(d, 9.0)  # perplexity = V - 1
    assert np.allclose(p, 1.0 / 9.0, atol=1e-12)
    entropy = -(p * np.log2(p)).sum()
    assert 2.0 ** entropy == pytest.approx(9.0, abs=1e-9)


def test_calibration_hits_target_entropy():
    """Scalar root-finding oracle: re-evaluate the entropy at the returned
    bandwidth and confirm 2^H equals the requested perplexity."""
    d = np.array([1.0, 10.0])
    target = 1.5
    sigma, p = perplexity_calibration(d, target)
    w = np.exp(-(d ** 2) / (2.0 * sigma ** 2))
    probs = w / w.sum()
    entropy = -(probs * np.log2(probs)).sum()
    assert 2.0 ** entropy == pytest.approx(target, abs=1e-5)
    assert np.allclose(p, probs, atol=1e-9)


def test_calibration_all_zero_distances_warns():
    with pytest.warns(UserWarning, match="duplicate"):
        _, p = perplexity_calibration(np.zeros(4), 2.0)
    assert np.allclose(p, 0.25)


def test_joint_probabilities_symmetric_simplex():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(12, 3))
    P = joint_probabilities(X, 3.0)
    assert np.allclose(P, P.T, atol=1e-15)
    assert P.min() >= 0
    assert P.sum() == pytest.approx(1.0, abs=1e-9)


# ---------------------------------------------------------------------------
# gradient and objective


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(6, 4))
    P = joint_probabilities(X, 1.5)
    Y = rng.normal(scale=0.5, size=(6, 2))
    grad = tsne_gradient(P, Y)
    step = 1e-5
    for i in range(6):
        for d in range(2):
            plus = Y.copy()
            minus = Y.copy()
            plus[i, d] += step
            minus[i, d] -= step
            numeric = (kl_divergence(P, plus) - kl_divergence(P, minus)) / (2 * step)
            denom = max(abs(numeric), abs(grad[i, d]), 1e-8)
            assert abs(grad[i, d] - numeric) / denom < 1e-4


def test_kl_translation_invariance():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(8, 3))
    P = joint_probabilities(X, 2.0)
    Y = rng.normal(size=(8, 2))
    shifted = Y + np.array([13.7, -2.9])
    assert kl_divergence(P, Y) == pytest.approx(kl_divergence(P, shifted), abs=1e-10)


# ---------------------------------------------------------------------------
# the full optimizer


def test_separable_groups_silhouette():
    from sklearn.metrics import silhouette_score

    X, labels = two_group_rows()
    tsne = ExactTsne(perplexity=5.0, n_iter=500, seed=0)
    Y = tsne.fit_transform(X)
    assert silhouette_score(Y, labels) > 0.5


def test_final_kl_below_exaggeration_phase():
    X, _ = two_group_rows(seed=5)
    tsne = ExactTsne(perplexity=5.0, n_iter=600, seed=1)
    tsne.fit_transform(X)
    assert tsne.kl_divergence_ < tsne.kl_at(250)


def test_deterministic_embedding():
    X, _ = two_group_rows(seed=6)
    a = ExactTsne(perplexity=4.0, n_iter=300, seed=7).fit_transform(X)
    b = ExactTsne(perplexity=4.0, n_iter=300, seed=7).fit_transform(X)
    assert np.array_equal(a, b)


def test_duplicate_rows_jittered_not_fatal():
    X = np.vstack([np.ones((3, 4)), np.zeros((3, 4)), np.full((3, 4), 2.0)])
    tsne = ExactTsne(perplexity=2.0, n_iter=260, seed=2)
    Y = tsne.fit_transform(X)
    assert np.all(np.isfinite(Y))


def test_parameter_validation():
    X, _ = two_group_rows()
    with pytest.raises(DataError, match="at least 4"):
        ExactTsne(perplexity=2.0).fit_transform(X[:3])
    with pytest.raises(DataError, match="perplexity"):
        ExactTsne(perplexity=((len(X) - 1) / 3.0) + 1).fit_transform(X)
    with pytest.raises(DataError, match="250"):
        ExactTsne(perplexity=3.0, n_iter=100).fit_transform(X)
    with pytest.raises(DataError, match="exceed 1"):
        ExactTsne(perplexity=0.5).fit_transform(X)


# ---------------------------------------------------------------------------
# export


def test_export_embedding_files(tmp_path):
    embedding = np.array([[0.0, 0.0], [1.0, 2.0], [-1.0, 0.5], [3.0, -2.0]])
    labels = ["a", "b", "c", "d"]
    csv_path = tmp_path / "emb.csv"
    svg_path = tmp_path / "emb.svg"
    export_embedding(embedding, labels, csv_path, svg_path)
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0] == "code,x,y"
    assert len(lines) - 1 == 4
    svg = svg_path.read_text()
    assert svg.count("<circle") == 4
    assert svg.count("<text") == 4

    # byte-identical re-export
    csv2 = tmp_path / "emb2.csv"
    svg2 = tmp_path / "emb2.svg"
    export_embedding(embedding, labels, csv2, svg2)
    assert csv2.read_bytes() == csv_path.read_bytes()
    assert svg2.read_bytes() == svg_path.read_bytes()


def test_export_rejects_mismatched_labels(tmp_path):
    with pytest.raises(DataError):
        export_embedding(np.zeros((3, 2)), ["a"], tmp_path / "x.csv", tmp_path / "x.svg")
