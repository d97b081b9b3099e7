import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from align_lab.alignment import AlignedBasis, aligned_init, find_condition
from align_lab.errors import CertificateError, InfeasibleError, PreconditionError, ShapeError
from align_lab.fastdyn import (
    SvState,
    admissible_sigmas,
    balanced_sigmas,
    convergence_certificate,
    equivalence_check,
    limit_solution,
    lr_bound,
    reduced_loss,
    sv_step,
    sv_trajectory,
)
from align_lab.network import Dataset, mse_loss
from align_lab.rng import rng


def test_lr_bound_reference_case():
    # (n ln2 / d) * sigma^2 l / lp^2 with d=3, n=1, sigma=1, l=1, lp=2
    got = lr_bound(np.ones((3, 1)), [1.0], [2.0], 1, 3)
    assert got == pytest.approx(math.log(2) / 12, rel=1e-15)
    assert got == pytest.approx(0.0578, abs=5e-5)


def test_lr_bound_takes_min_over_layers_and_indices():
    s = np.array([[1.0, 0.5], [0.2, 0.5]])
    lam, lp = np.array([1.0, 2.0]), np.array([1.0, 1.0])
    want = 4 * math.log(2) / 2 * min(0.2**2 * 1 / 1, 0.5**2 * 2 / 1)
    assert lr_bound(s, lam, lp, 4, 2) == pytest.approx(want, rel=1e-14)


def test_lr_bound_preconditions():
    with pytest.raises(PreconditionError, match="k=1"):
        lr_bound(np.array([[1.0, -0.1]]), [1.0, 1.0], [2.0, 2.0], 1, 1)
    with pytest.raises(PreconditionError, match="k=0"):
        lr_bound(np.array([[3.0]]), [1.0], [2.0], 1, 1)
    with pytest.raises(PreconditionError):
        lr_bound(np.array([[1.0]]), [0.0], [0.0], 1, 1)
    with pytest.raises(ShapeError):
        lr_bound(np.ones((2, 1)), [1.0], [2.0], 1, 3)


def test_state_validation():
    with pytest.raises(InfeasibleError, match="k=1"):
        SvState(np.ones((2, 2)), [1.0, 1.0], [1.0, 0.0], 0.1)
    SvState(np.ones((2, 2)), [1.0, 0.0], [1.0, 1.0], 0.1)
    with pytest.raises(InfeasibleError):
        SvState(np.ones((2, 1)), [1.0], [-1.0], 0.1)
    with pytest.raises(ShapeError):
        SvState(np.ones(3), [1.0], [1.0], 0.1)
    with pytest.raises(ShapeError):
        SvState(np.ones((2, 2)), [1.0], [1.0, 1.0], 0.1)


def test_sv_step_explicit_two_layers():
    s = np.array([[0.5, 0.2], [0.4, 0.3]])
    lp, lam, g = np.array([2.0, 1.0]), np.array([1.5, 0.5]), 0.1
    out = sv_step(SvState(s, lp, lam, g)).sigmas
    for k in range(2):
        resid = lp[k] - lam[k] * s[0, k] * s[1, k]
        assert out[0, k] == pytest.approx(s[0, k] + g * s[1, k] * resid, rel=1e-15)
        assert out[1, k] == pytest.approx(s[1, k] + g * s[0, k] * resid, rel=1e-15)


def test_sv_step_single_layer_is_linear_regression():
    s = np.array([[0.1, 0.7]])
    out = sv_step(SvState(s, [1.0, 2.0], [2.0, 1.0], 0.25)).sigmas
    assert np.allclose(out, [[0.1 + 0.25 * (1 - 0.2), 0.7 + 0.25 * (2 - 0.7)]])


def test_decay_case():
    # lp = 0, l > 0, sigma < 1, gamma < n / l: products decay monotonically to 0
    state = SvState(np.full((3, 1), 0.9), [0.0], [2.0], 0.4)
    p = sv_trajectory(state, 3000).products[:, 0]
    assert np.all(np.diff(p) < 0) and np.all(p > 0)
    assert p[-1] < 1e-2 * p[0]
    # single layer: exact geometric decay (1 - gamma l / n)^t
    one = sv_trajectory(SvState(np.array([[0.9]]), [0.0], [2.0], 0.4), 50).products[:, 0]
    assert np.allclose(one, 0.9 * 0.2 ** np.arange(51), rtol=1e-12, atol=0)


def certificate_state(seed, d, r, n):
    g = rng(seed)
    lam = g.uniforms(r, low=0.2, high=2.0)
    lp = g.uniforms(r, low=0.2, high=2.0)
    frac = g.uniforms(r, low=0.05, high=0.95)
    w = g.uniforms(d, r, low=0.5, high=1.5)
    w /= w.sum(axis=0)
    sig = (frac * lp / lam)[None, :] ** w
    gamma = lr_bound(sig, lam, lp, n, d)
    return SvState(sig, lp, lam, gamma / n)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 5), st.integers(1, 4), st.integers(1, 9),
       st.floats(0.05, 1.0))
def test_products_bounded_and_certificate_below_bound(seed, d, r, n, shrink):
    state = certificate_state(seed, d, r, n)
    state = SvState(state.sigmas, state.lambda_prime, state.lambda_, state.gamma_over_n * shrink)
    traj = sv_trajectory(state, 150)
    target = state.lambda_prime / state.lambda_
    p = traj.products
    assert np.all(p > 0)
    assert np.all(p <= target * (1 + 1e-12))
    assert np.all(np.diff(p, axis=0) >= 0)
    rep = convergence_certificate(traj)
    assert rep.products_bounded and rep.monotone
    assert rep.checked == r * 151


def test_certificate_refuses_large_step():
    state = certificate_state(1, 3, 2, 4)
    big = SvState(state.sigmas, state.lambda_prime, state.lambda_, state.gamma_over_n * 1.5)
    with pytest.raises(PreconditionError):
        convergence_certificate(sv_trajectory(big, 5))


def test_certificate_detects_violation():
    # a trajectory run with a tenth of the step size the claimed initial state promises
    claimed = certificate_state(2, 2, 1, 1)
    slow = SvState(claimed.sigmas, claimed.lambda_prime, claimed.lambda_, claimed.gamma_over_n * 0.1)
    traj = sv_trajectory(slow, 20)
    with pytest.raises(CertificateError) as err:
        convergence_certificate(traj, state0=claimed)
    assert err.value.k == 0


def aligned_problem_with_residual(seed, k=3, n=6, d=2):
    """Y = U diag(a) V^T X + Z with Z X^T = 0, so the optimum loss is ||Z||^2 / 2n > 0."""
    g = rng(seed)
    x = g.normals(k, n)
    u = g.orthonormal(k)
    evals, evecs = np.linalg.eigh(x @ x.T)
    v = evecs[:, ::-1]
    a = g.uniforms(k, low=0.5, high=2.0)
    null = np.linalg.svd(x)[2][k:].T
    z = g.normals(k, n - k) @ null.T
    y = u @ np.diag(a) @ v.T @ x + z
    return x, y


def test_reduced_loss_is_scaled_excess_loss():
    x, y = aligned_problem_with_residual(3)
    cond = find_condition(x, y, 3)
    assert cond is not None
    basis = AlignedBasis.from_condition(cond, [3, 3, 3])
    sig = balanced_sigmas(np.array([0.4, 0.3, 0.2]), 2)
    net = aligned_init(basis, list(sig))
    data = Dataset(x, y)
    best = np.linalg.lstsq(x.T, y.T, rcond=None)[0].T
    min_loss = np.sum((y - best @ x) ** 2) / (2 * x.shape[1])
    assert min_loss > 1e-3
    state = SvState(sig, cond.lambda_prime, cond.lambda_, 0.01)
    assert reduced_loss(state) == pytest.approx(x.shape[1] * (mse_loss(net, data) - min_loss), rel=1e-9)
    assert np.allclose(limit_solution(cond), best, atol=1e-10)


def test_limit_solution_rejects_infeasible():
    from align_lab.alignment import DataCondition
    cond = DataCondition(np.eye(2), np.eye(2), np.array([1.0, 1.0]), np.array([1.0, 0.0]), 2)
    with pytest.raises(InfeasibleError):
        limit_solution(cond)


def test_admissible_sigmas():
    s = admissible_sigmas([2.0, 1.0, 0.0], [1.0, 3.0, 0.0], 3, 0.5)
    assert s.shape == (3, 3)
    assert np.allclose(np.prod(s, axis=0), [0.25, 1.5, 0.0])
    with pytest.raises(ValueError):
        admissible_sigmas([1.0], [1.0], 2, 1.0)
    with pytest.raises(PreconditionError):
        admissible_sigmas([1.0], [-1.0], 2, 0.5)


def test_equivalence_small_instance():
    g = rng(4)
    x = g.normals(3, 5)
    cond = find_condition(x, x, 3)
    basis = AlignedBasis.from_condition(cond, [3, 4, 3], [g.orthonormal(4)])
    sig = admissible_sigmas(cond.lambda_, cond.lambda_prime, 2, 0.6)
    gamma = lr_bound(sig, cond.lambda_, cond.lambda_prime, 5, 2)
    assert equivalence_check(cond, basis, sig, gamma, 100, Dataset(x, x)) <= 1e-10
    with pytest.raises(ShapeError):
        equivalence_check(cond, basis, sig[:1], gamma, 3, Dataset(x, x))
