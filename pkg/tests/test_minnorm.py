import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from align_lab.errors import ShapeError
from align_lab.minnorm import min_norm_factorization, norm_lower_bound_check
from align_lab.rng import rng


def nuclear(p):
    return float(np.sum(np.linalg.svd(p, compute_uv=False)))


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 6), st.integers(1, 6), st.integers(0, 3))
def test_factorization_reproduces_target_at_twice_nuclear_norm(seed, m, n, extra):
    g = rng(seed)
    p = g.normals(m, n)
    h = min(m, n) + extra
    fac = min_norm_factorization(p, g.orthonormal(h))
    assert np.allclose(fac.w2 @ fac.w1, p, atol=1e-10)
    assert fac.w1.shape == (h, n) and fac.w2.shape == (m, h)
    assert fac.norm_sum == pytest.approx(2 * nuclear(p), rel=1e-10)
    # balanced: W1 W1^T = W2^T W2
    assert np.allclose(fac.w1 @ fac.w1.T, fac.w2.T @ fac.w2, atol=1e-10)


def test_numerical_optimum_agrees():
    # independent route: minimise ||W1||^2 + ||W2||^2 + penalty * ||W2 W1 - P||^2 directly
    p = rng(1).normals(3, 3)
    g = rng(2)
    x0 = g.normals(18) * 0.5

    def f(z):
        w1, w2 = z[:9].reshape(3, 3), z[9:].reshape(3, 3)
        return np.sum(w1**2) + np.sum(w2**2) + 1e4 * np.sum((w2 @ w1 - p) ** 2)

    res = minimize(f, x0, method="BFGS", options={"gtol": 1e-10, "maxiter": 20000})
    assert res.fun == pytest.approx(2 * nuclear(p), rel=1e-3)
    assert min_norm_factorization(p).norm_sum == pytest.approx(res.fun, rel=1e-3)


def test_w_mid_validation():
    p = rng(3).normals(3, 2)
    with pytest.raises(ShapeError):
        min_norm_factorization(p, np.eye(1))
    with pytest.raises(ShapeError):
        min_norm_factorization(p, 2 * np.eye(2))
    with pytest.raises(ShapeError):
        min_norm_factorization(p, np.ones((2, 3)))


@pytest.mark.parametrize("seed", range(3))
def test_reparameterizations_never_undercut(seed):
    rep = norm_lower_bound_check(rng(seed).normals(4, 4), trials=300, seed=seed)
    assert rep.violations == 0
    assert rep.optimum == pytest.approx(rep.bound, rel=1e-10)
    assert rep.best_sampled >= rep.bound - 1e-8
    with pytest.raises(ValueError):
        norm_lower_bound_check(np.eye(2), trials=0)


def test_zero_target():
    fac = min_norm_factorization(np.zeros((2, 3)))
    assert fac.norm_sum == 0.0
