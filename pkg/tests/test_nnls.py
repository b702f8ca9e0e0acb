import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import nnls as scipy_nnls

from dmri_microfit.nnls import NNLSError, nnls_solve


def objective(A, y, x, ridge):
    r = A @ x - y
    return float(r @ r + ridge * x @ x)


def projected_gradient(A, y, ridge, tol=1e-12, max_iter=200_000):
    """Accelerated projected gradient (FISTA with restart) on the ridge objective."""
    L = 2 * (np.linalg.norm(A, 2) ** 2 + ridge)
    x = np.zeros(A.shape[1])
    z, t = x.copy(), 1.0
    for _ in range(max_iter):
        g = 2 * (A.T @ (A @ z - y) + ridge * z)
        x_new = np.maximum(z - g / L, 0.0)
        if np.max(np.abs(x_new - x)) < tol:
            return x_new
        t_new = (1 + np.sqrt(1 + 4 * t * t)) / 2
        z = x_new + (t - 1) / t_new * (x_new - x)
        if objective(A, y, x_new, ridge) > objective(A, y, x, ridge):
            z, t_new = x_new.copy(), 1.0
        x, t = x_new, t_new
    return x


def test_separable_projection():
    assert np.allclose(nnls_solve(np.eye(2), [1.0, -1.0]), [1.0, 0.0])


def test_consistent_system_exact(rng):
    A = rng.normal(size=(30, 6))
    x_true = np.abs(rng.normal(size=6))
    assert np.allclose(nnls_solve(A, A @ x_true), x_true, atol=1e-10)


@pytest.mark.parametrize("seed", range(10))
def test_matches_projected_gradient_oracle(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(20, 8))
    y = rng.normal(size=20)
    x = nnls_solve(A, y, 0.01)
    x_pg = projected_gradient(A, y, 0.01)
    assert objective(A, y, x, 0.01) == pytest.approx(objective(A, y, x_pg, 0.01), abs=1e-8)
    assert np.all(x >= 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 25), st.integers(1, 10), st.floats(0.0, 1.0), st.integers(0, 10_000))
def test_kkt_conditions(m, n, ridge, seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(m, n))
    y = rng.normal(size=m)
    x, info = nnls_solve(A, y, ridge, return_info=True)
    g = info["gradient"]
    scale = 1 + np.abs(A).max() * (np.abs(y).max() + 1)
    assert np.all(x >= 0)
    assert np.all(g >= -1e-8 * scale)
    assert np.all(np.abs(g[x > 0]) <= 1e-8 * scale)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 25), st.integers(1, 10), st.floats(0.0, 1.0), st.integers(0, 10_000))
def test_agrees_with_scipy_on_augmented_system(m, n, ridge, seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(m, n))
    y = rng.normal(size=m)
    aug_A = np.vstack([A, np.sqrt(ridge) * np.eye(n)])
    aug_y = np.concatenate([y, np.zeros(n)])
    ref = scipy_nnls(aug_A, aug_y)[0]
    assert objective(A, y, nnls_solve(A, y, ridge), ridge) == pytest.approx(
        objective(A, y, ref, ridge), rel=1e-9, abs=1e-12)


def test_ridge_shrinks_solution(rng):
    A = rng.normal(size=(15, 5))
    y = A @ np.abs(rng.normal(size=5))
    assert np.linalg.norm(nnls_solve(A, y, 10.0)) < np.linalg.norm(nnls_solve(A, y, 0.0))


def test_negative_target_gives_zero(rng):
    A = np.abs(rng.normal(size=(10, 4)))
    assert np.array_equal(nnls_solve(A, -np.ones(10)), np.zeros(4))


def test_input_validation():
    with pytest.raises(NNLSError):
        nnls_solve(np.eye(3), np.ones(2))
    with pytest.raises(NNLSError):
        nnls_solve(np.eye(2), [np.nan, 1.0])
    with pytest.raises(NNLSError):
        nnls_solve(np.eye(2), [1.0, 1.0], ridge=-1.0)


def test_duplicate_columns_deterministic():
    A = np.array([[1.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    x1 = nnls_solve(A, [2.0, 1.0])
    assert np.array_equal(x1, nnls_solve(A, [2.0, 1.0]))
    assert x1[0] == pytest.approx(2.0) and x1[1] == 0.0
