import numpy as np
import pytest

from tagpr.kmeans import kmeans


def test_inertia_non_increasing():
    X = np.random.default_rng(0).normal(size=(1000, 8))
    res = kmeans(X, 10, seed=1)
    assert all(b <= a + 1e-9 for a, b in zip(res.inertia_trace, res.inertia_trace[1:]))
    assert res.n_iter == len(res.inertia_trace)


def test_two_clouds_recovered_exactly():
    rng = np.random.default_rng(2)
    X = np.vstack([rng.normal(-10, 0.5, size=(50, 3)), rng.normal(10, 0.5, size=(50, 3))])
    res = kmeans(X, 2, seed=0)
    a = res.assignments
    assert len(set(a[:50])) == 1 and len(set(a[50:])) == 1 and a[0] != a[50]


def test_single_cluster_is_mean():
    X = np.random.default_rng(3).normal(size=(200, 5))
    res = kmeans(X, 1)
    assert np.max(np.abs(res.centroids[0] - X.mean(axis=0))) < 1e-12


def test_deterministic_and_errors():
    X = np.random.default_rng(4).normal(size=(60, 2))
    a, b = kmeans(X, 4, seed=7), kmeans(X, 4, seed=7)
    assert np.array_equal(a.assignments, b.assignments) and a.inertia_trace == b.inertia_trace
    with pytest.raises(ValueError):
        kmeans(np.zeros((5, 2)), 2)
    with pytest.raises(ValueError):
        kmeans(X, 0)
    with pytest.raises(ValueError):
        kmeans(X[0], 1)
