import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from align_lab.alignment import (
    AlignedBasis,
    aligned_init,
    check_sensing_condition,
    find_condition,
    rank1_aligned_init,
    strong_alignment_monitor,
    verify_condition,
)
from align_lab.errors import PreconditionError, ShapeError
from align_lab.fastdyn import admissible_sigmas, lr_bound
from align_lab.linalg import layer_adjacent_scores
from align_lab.network import Dataset, LinearNetwork, TrainConfig, train
from align_lab.rng import rng


def in_block_form(m, r, tol=1e-8):
    """Independent restatement: diagonal r x r corner, zero off-corner blocks."""
    scale = max(1.0, np.abs(m).max())
    corner = m[:r, :r]
    off = corner - np.diag(np.diag(corner))
    return (np.abs(off).max(initial=0) <= tol * scale
            and np.abs(m[:r, r:]).max(initial=0) <= tol * scale
            and np.abs(m[r:, :r]).max(initial=0) <= tol * scale)


def assert_condition(cond, x, y):
    u, v, r = cond.u, cond.v, cond.r
    assert np.allclose(u.T @ u, np.eye(u.shape[0]), atol=1e-10)
    assert np.allclose(v.T @ v, np.eye(v.shape[0]), atol=1e-10)
    yx = u.T @ y @ x.T @ v
    xx = v.T @ x @ x.T @ v
    assert in_block_form(yx, r) and in_block_form(xx, r)
    assert np.allclose(cond.lambda_prime, np.diag(yx)[:r])
    assert np.allclose(cond.lambda_, np.diag(xx)[:r])


def test_aligned_init_builds_products():
    g = rng(0)
    basis = AlignedBasis((g.orthonormal(3), g.orthonormal(4), g.orthonormal(2)))
    net = aligned_init(basis, [[3.0, 2.0, 1.0], [5.0, 4.0]])
    q0, q1, q2 = basis.q
    assert np.allclose(q1.T @ net.layers[0] @ q0, np.diag([3.0, 2.0, 1.0, 0.0])[:, :3])
    assert np.allclose(q2.T @ net.layers[1] @ q1, np.array([[5.0, 0, 0, 0], [0, 4.0, 0, 0]]))
    assert all(s.value == pytest.approx(1.0) for s in layer_adjacent_scores(net))
    with pytest.raises(ShapeError):
        aligned_init(basis, [[1.0, 2.0, 3.0]])
    with pytest.raises(ShapeError):
        aligned_init(basis, [[1.0, 2.0], [1.0, 2.0]])


def test_basis_must_be_orthonormal():
    with pytest.raises(ShapeError):
        AlignedBasis((np.eye(2), 2 * np.eye(2)))
    with pytest.raises(ShapeError):
        AlignedBasis((np.eye(2),))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 12), st.integers(0, 6))
def test_autoencoding_always_satisfies_condition(seed, k, extra):
    g = rng(seed)
    x = g.normals(k, k + extra)
    cond = find_condition(x, x, k)
    assert cond is not None
    assert_condition(cond, x, x)


def test_autoencoding_ill_conditioned_keeps_u_orthonormal():
    # cond(X) ~ 7e2: short columns of Y X^T V used to cost U 2e-10 orthonormality
    x = rng(59135).normals(11, 11)
    cond = find_condition(x, x, 11)
    assert cond is not None
    assert_condition(cond, x, x)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 12), st.integers(1, 12))
def test_factorization_always_satisfies_condition(seed, k, kd):
    g = rng(seed)
    y = g.normals(kd, k)
    x = np.eye(k)
    r = min(k, kd)
    cond = find_condition(x, y, r)
    assert cond is not None
    assert_condition(cond, x, y)


@pytest.mark.parametrize("k", [2, 4, 8])
def test_gaussian_square_data_fail_condition(k):
    misses = 0
    for seed in range(100):
        g = rng(seed)
        x, y = g.normals(k, k), g.normals(k, k)
        r = 1 + seed % k
        misses += find_condition(x, y, r) is None
    assert misses >= 99


def test_find_condition_validates_input():
    with pytest.raises(ShapeError):
        find_condition(np.eye(3), np.ones((3, 4)), 2)
    with pytest.raises(ShapeError):
        find_condition(np.eye(3), np.eye(3), 4)


def test_find_condition_repeated_eigenvalues_rank_deficient_block():
    # X = I, Y of rank one: the eigenspace of X X^T is fully degenerate
    g = rng(1)
    a, b = g.normals(4), g.normals(4)
    y = np.outer(a, b)
    cond = find_condition(np.eye(4), y, 4)
    assert cond is not None
    assert_condition(cond, np.eye(4), y)
    assert np.sum(np.abs(cond.lambda_prime) > 1e-10) == 1


def test_verify_condition_rejects_wrong_bases():
    g = rng(2)
    x = g.normals(4, 7)
    cond = find_condition(x, x, 4)
    assert verify_condition(cond.u, cond.v, x, x, 4)
    assert not verify_condition(g.orthonormal(4), cond.v, x, x, 4)
    with pytest.raises(ShapeError):
        verify_condition(cond.u, cond.v, x, x, 5)


def test_sensing_condition():
    g = rng(3)
    u, v = g.orthonormal(4), g.orthonormal(4)
    sensors = [u @ np.diag(g.normals(4)) @ v.T for _ in range(5)]
    found = check_sensing_condition(sensors)
    assert found is not None
    su, sv = found
    for m in sensors:
        d = su.T @ m @ sv
        assert np.abs(d - np.diag(np.diag(d))).max() < 1e-10
    assert check_sensing_condition([g.normals(4, 4) for _ in range(3)]) is None
    assert check_sensing_condition([np.eye(3), np.eye(3)]) is None


def test_rank1_init():
    net = rank1_aligned_init([3, 4, 2, 1], seed=5, scale=0.5)
    assert not np.any(net.layers[0])
    for w in net.layers[1:]:
        assert np.linalg.matrix_rank(w) == 1
        assert np.linalg.norm(w, 2) == pytest.approx(0.5)
    assert all(sc.value == pytest.approx(1.0) for sc in layer_adjacent_scores(net))
    same = rank1_aligned_init([3, 4, 2, 1], gen=rng(5), scale=0.5)
    assert all(np.array_equal(a, b) for a, b in zip(net.layers, same.layers))
    with pytest.raises(ShapeError):
        rank1_aligned_init([3, 2])


def condition_run(seed, steps=300):
    g = rng(seed)
    x = g.normals(5, 8)
    cond = find_condition(x, x, 5)
    dims = [5, 5, 5, 5]
    basis = AlignedBasis.from_condition(cond, dims, [g.orthonormal(5), g.orthonormal(5)])
    sig = admissible_sigmas(cond.lambda_, cond.lambda_prime, 3, 0.8)
    gamma = lr_bound(sig, cond.lambda_, cond.lambda_prime, 8, 3)
    cfg = TrainConfig(learning_rate=gamma, max_steps=steps, loss_stop=0.0, record_every=1,
                      keep_snapshots=True, measure=False)
    return basis, train(aligned_init(basis, list(sig)), Dataset(x, x), cfg)


@pytest.mark.parametrize("seed", range(5))
def test_condition_init_stays_strongly_aligned(seed):
    basis, trace = condition_run(seed)
    rep = strong_alignment_monitor(trace, basis)
    assert rep.first_flag is None
    assert rep.worst >= 1 - 1e-8
    assert len(rep.steps) == 301


def test_monitor_flags_broken_alignment():
    g = rng(9)
    basis = AlignedBasis(tuple(g.orthonormal(4) for _ in range(3)))
    net = aligned_init(basis, [[2.0, 1.5, 1.0, 0.5], [1.8, 1.2, 0.9, 0.3]])
    data = Dataset(g.normals(4, 6), g.normals(4, 6))
    trace = train(net, data, TrainConfig(learning_rate=0.02, max_steps=50, loss_stop=0.0, record_every=1,
                                         keep_snapshots=True, measure=False))
    rep = strong_alignment_monitor(trace, basis)
    assert rep.steps[0] == 0 and min(rep.adjacent[0] + rep.u_scores[0] + rep.v_scores[0]) > 1 - 1e-12
    assert rep.first_flag is not None and rep.first_flag > 0
    assert rep.worst < 1 - 1e-8


def test_monitor_needs_snapshots():
    basis, _ = condition_run(0, steps=2)
    g = rng(0)
    data = Dataset(g.normals(5, 8), g.normals(5, 8))
    net = LinearNetwork(tuple(np.eye(5) for _ in range(3)))
    trace = train(net, data, TrainConfig(learning_rate=0.01, max_steps=2, loss_stop=0.0))
    with pytest.raises(PreconditionError):
        strong_alignment_monitor(trace, basis)
