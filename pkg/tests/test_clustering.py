import numpy as np
import pytest

from group_transformer.core.clustering import (
    eigengap_k,
    extract_groups,
    label_propagation,
    spectral_clustering,
)
from group_transformer.core.errors import ClusteringError


def _partition(labels):
    """Labels as a set of frozensets so relabelings compare equal."""
    blocks = {}
    for node, label in enumerate(labels):
        blocks.setdefault(int(label), set()).add(node)
    return {frozenset(b) for b in blocks.values()}


def _block_affinity(rng, sizes, off_block=0.1):
    n = sum(sizes)
    A = np.triu(rng.uniform(0.0, off_block, (n, n)), 1)
    start = 0
    for size in sizes:
        block = slice(start, start + size)
        A[block, block] = np.triu(rng.uniform(0.8, 1.0, (size, size)), 1)
        start += size
    A = A + A.T
    perm = rng.permutation(n)
    A = A[np.ix_(perm, perm)]
    truth, start = [], 0
    inverse = np.argsort(perm)
    for size in sizes:
        truth.append(frozenset(int(inverse[i]) for i in range(start, start + size)))
        start += size
    return A, set(truth)


def _random_sizes(rng):
    sizes = []
    while True:
        size = int(rng.integers(2, 5))
        if sum(sizes) + size > 12:
            break
        sizes.append(size)
        if len(sizes) >= 2 and rng.random() < 0.3:
            break
    return sizes


def test_label_propagation_isolated_nodes_stay_apart():
    labels = label_propagation(np.zeros((4, 4)))
    np.testing.assert_array_equal(labels, [0, 1, 2, 3])
    assert extract_groups(labels) == []


def test_label_propagation_hand_case():
    A = np.zeros((3, 3))
    A[0, 1] = A[1, 0] = 0.9
    assert _partition(label_propagation(A)) == {frozenset({0, 1}), frozenset({2})}


def test_label_propagation_two_blocks():
    A = np.zeros((5, 5))
    A[:2, :2] = 0.9
    A[2:, 2:] = 0.9
    np.fill_diagonal(A, 0.0)
    assert _partition(label_propagation(A, seed=3)) == {frozenset({0, 1}), frozenset({2, 3, 4})}


@pytest.mark.parametrize("seed", range(200))
def test_label_propagation_recovers_random_blocks(seed):
    rng = np.random.default_rng(seed)
    A, truth = _block_affinity(rng, _random_sizes(rng))
    assert _partition(label_propagation(A, seed=seed)) == truth


@pytest.mark.parametrize("seed", range(200))
def test_spectral_recovers_random_blocks(seed):
    rng = np.random.default_rng(1000 + seed)
    sizes = _random_sizes(rng)
    A, truth = _block_affinity(rng, sizes)
    assert _partition(spectral_clustering(A, k=len(sizes), seed=seed)) == truth


@pytest.mark.parametrize("sizes", [(2, 3), (4, 4, 2), (3, 2, 2, 4)])
def test_spectral_eigengap_finds_exact_blocks(sizes):
    n = sum(sizes)
    A = np.zeros((n, n))
    start = 0
    for size in sizes:
        A[start : start + size, start : start + size] = 1.0
        start += size
    np.fill_diagonal(A, 0.0)
    labels = spectral_clustering(A)
    assert len(set(labels)) == len(sizes)
    expected, start = set(), 0
    for size in sizes:
        expected.add(frozenset(range(start, start + size)))
        start += size
    assert _partition(labels) == expected


def test_spectral_k_equal_n_gives_singletons():
    rng = np.random.default_rng(0)
    A = np.triu(rng.uniform(0.1, 1.0, (5, 5)), 1)
    A = A + A.T
    assert len(set(spectral_clustering(A, k=5))) == 5


def test_spectral_is_deterministic_per_seed():
    rng = np.random.default_rng(1)
    A = np.triu(rng.uniform(0.0, 1.0, (8, 8)), 1)
    A = A + A.T
    np.testing.assert_array_equal(spectral_clustering(A, k=3, seed=7), spectral_clustering(A, k=3, seed=7))


def test_spectral_isolated_nodes_are_singletons():
    A = np.zeros((4, 4))
    A[0, 1] = A[1, 0] = 1.0
    A[2, 3] = A[3, 2] = 1.0
    A[:, 3] = A[3, :] = 0.0
    labels = spectral_clustering(A, k=3)
    assert _partition(labels) == {frozenset({0, 1}), frozenset({2}), frozenset({3})}


def test_spectral_rejects_too_many_clusters():
    with pytest.raises(ClusteringError):
        spectral_clustering(np.ones((3, 3)) - np.eye(3), k=4)


def test_affinity_validation():
    with pytest.raises(ClusteringError, match="square"):
        label_propagation(np.zeros((2, 3)))
    with pytest.raises(ClusteringError, match="symmetric"):
        label_propagation(np.array([[0.0, 1.0], [0.0, 0.0]]))
    with pytest.raises(ClusteringError, match="negative"):
        spectral_clustering(np.array([[0.0, -1.0], [-1.0, 0.0]]))


def test_eigengap_picks_largest_gap():
    assert eigengap_k(np.array([1.0, 1.0, 0.2, 0.1])) == 2
    assert eigengap_k(np.array([0.5])) == 1


def test_extract_groups_examples():
    assert extract_groups([0, 0, 1]) == [frozenset({0, 1})]
    assert extract_groups([0, 0, 1, 1, 1]) == [frozenset({0, 1}), frozenset({2, 3, 4})]
    assert extract_groups([3, 1, 3], person_ids=[10, 20, 30]) == [frozenset({10, 30})]
    assert extract_groups([0, 1, 2]) == []
