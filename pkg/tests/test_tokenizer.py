import numpy as np
import pytest

from fedmim.errors import ContractViolation
from fedmim.tokenizer import Codebook, fit_codebook, inertia_trace, tokenize, tokenize_batch


def _clusters(seed=0):
    rng = np.random.default_rng(seed)
    centers = np.array([[0.0, 0.0], [5.0, 5.0], [-5.0, 5.0]])
    return np.concatenate([c + 0.1 * rng.standard_normal((20, 2)) for c in centers]), centers


def test_fit_recovers_separated_clusters():
    points, centers = _clusters()
    cb = fit_codebook(points, 3, iters=50, seed=0, restarts=2)
    assert cb.size == 3 and cb.patch_dim == 2
    for c in centers:
        assert np.min(np.linalg.norm(cb.centroids - c, axis=1)) < 0.2


def test_fit_is_seed_deterministic():
    points, _ = _clusters(1)
    a = fit_codebook(points, 4, iters=20, seed=7, restarts=2)
    b = fit_codebook(points, 4, iters=20, seed=7, restarts=2)
    assert np.array_equal(a.centroids, b.centroids)


def test_tokenize_nearest_and_tie_break():
    cb = Codebook(np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 3.0]]), iterations=0, inertia=0.0, seed=0)
    assert tokenize(np.array([1.9, 0.1]), cb) == 1
    assert tokenize(np.array([1.0, 0.0]), cb) == 0
    tokens = tokenize_batch(np.array([[[0.1, 2.9], [0.0, 0.0]]]), cb)
    assert tokens.shape == (1, 2)
    assert tokens.tolist() == [[2, 0]]


def test_tokenize_rejects_wrong_patch_size():
    cb = Codebook(np.eye(3), iterations=0, inertia=0.0, seed=0)
    with pytest.raises(ContractViolation):
        tokenize(np.zeros(4), cb)


def test_not_enough_distinct_patches():
    points = np.repeat(np.array([[1.0, 1.0], [2.0, 2.0]]), 10, axis=0)
    with pytest.raises(ValueError):
        fit_codebook(points, 3)


def test_codebook_validation():
    with pytest.raises(ContractViolation):
        Codebook(np.array([[1.0, 1.0]]), iterations=0, inertia=0.0, seed=0)
    with pytest.raises(ContractViolation):
        Codebook(np.array([[1.0, 1.0], [1.0, 1.0]]), iterations=0, inertia=0.0, seed=0)


def test_inertia_trace_improves():
    points, _ = _clusters(2)
    trace = inertia_trace(points, 3, iters=5, seed=0)
    assert len(trace) == 5
    assert trace[-1] <= trace[0] + 1e-9


def test_default_fit_is_close_to_many_restart_optimum():
    patches = np.random.default_rng(11).random((64, 4))
    cb = fit_codebook(patches, 4, seed=0)
    best = min(fit_codebook(patches, 4, seed=s, restarts=1).inertia for s in range(100))
    assert cb.inertia <= 1.05 * best
