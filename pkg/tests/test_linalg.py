import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from align_lab.errors import EmptyRankError, NonFiniteError, ShapeError
from align_lab.linalg import (
    alignment_score,
    as_matrix,
    diag_embed,
    invariance_scores,
    is_diagonal,
    layer_adjacent_scores,
    matrices_align,
    orthonormality_error,
    svd,
)
from align_lab.rng import rng

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
matrices = st.tuples(st.integers(1, 7), st.integers(1, 7)).flatmap(
    lambda s: arrays(np.float64, s, elements=finite))


@settings(max_examples=200, deadline=None)
@given(matrices)
def test_svd_reconstructs_and_is_canonical(a):
    s = svd(a)
    assert s.u.shape == (a.shape[0], a.shape[0]) and s.v.shape == (a.shape[1], a.shape[1])
    assert len(s.sigma) == min(a.shape)
    assert np.all(s.sigma >= 0) and np.all(np.diff(s.sigma) <= 0)
    assert orthonormality_error(s.u) < 1e-10 and orthonormality_error(s.v) < 1e-10
    err = np.linalg.norm(s.reconstruct() - a)
    assert err <= 1e-10 * max(1.0, np.linalg.norm(a))


@settings(max_examples=100, deadline=None)
@given(matrices)
def test_svd_sign_convention(a):
    # U columns are normalised; paired V columns follow them, unpaired ones are normalised alone
    s = svd(a)
    q = len(s.sigma)
    for cols in (s.u, s.v[:, q:]):
        lead = np.argmax(np.abs(cols), axis=0)
        assert np.all(cols[lead, np.arange(cols.shape[1])] >= 0)


@pytest.mark.parametrize("shape", [(128, 128), (128, 17), (3, 128), (64, 64)])
def test_svd_reconstructs_large(shape):
    a = rng(shape[0] * 1000 + shape[1]).normals(*shape) * 10
    s = svd(a)
    assert np.linalg.norm(s.reconstruct() - a) <= 1e-10 * max(1.0, np.linalg.norm(a))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32), st.floats(0, 1e-3))
def test_is_diagonal_on_exact_diagonals(m, n, seed, tol):
    d = diag_embed(rng(seed).normals(min(m, n)) * 100, (m, n))
    assert is_diagonal(d, tol)


def test_svd_is_deterministic():
    a = rng(0).normals(5, 4)
    s1, s2 = svd(a), svd(a.copy())
    assert np.array_equal(s1.u, s2.u) and np.array_equal(s1.v, s2.v)


def test_as_matrix_rejects_bad_input():
    with pytest.raises(ShapeError):
        as_matrix(np.zeros(3))
    with pytest.raises(ShapeError):
        as_matrix(np.zeros((0, 2)))
    with pytest.raises(NonFiniteError):
        as_matrix([[1.0, np.nan]])


def test_diag_embed_rectangular():
    assert np.array_equal(diag_embed([1, 2], (3, 2)), [[1, 0], [0, 2], [0, 0]])
    assert np.array_equal(diag_embed([1, 2, 3], (2, 4)), [[1, 0, 0, 0], [0, 2, 0, 0]])


def test_score_identical_and_sign_flipped_bases():
    q = rng(1).orthonormal(5)
    sig = np.array([5.0, 4, 3, 2, 1])
    assert alignment_score(q, q, sig, sig).value == pytest.approx(1.0, abs=1e-14)
    flipped = q * np.array([1, -1, 1, -1, -1])
    assert alignment_score(q, flipped, sig, sig).value == pytest.approx(1.0, abs=1e-14)


def test_score_orthogonal_directions_is_zero():
    e = np.eye(4)
    sig = np.array([3.0, 2.0])
    assert alignment_score(e[:, :2], e[:, 2:], sig, sig).value == pytest.approx(0.0, abs=1e-15)


def test_score_groups_equal_singular_values():
    q = rng(2).orthonormal(4)
    rot = np.eye(4)
    c, s = np.cos(0.7), np.sin(0.7)
    rot[1:3, 1:3] = [[c, -s], [s, c]]
    sig = np.array([4.0, 2.0, 2.0 * (1 + 1e-10), 1.0])
    assert alignment_score(q, q @ rot, sig, sig).value == pytest.approx(1.0, abs=1e-12)
    # distinct values: the same rotation is a genuine misalignment
    sig2 = np.array([4.0, 3.0, 2.0, 1.0])
    assert alignment_score(q, q @ rot, sig2, sig2).value < 0.9


def test_score_symmetric():
    g = rng(3)
    a, b = g.orthonormal(5), g.orthonormal(5)
    sa, sb = np.array([5.0, 3, 3, 1, 0.5]), np.array([4.0, 2, 1, 1, 0.1])
    assert alignment_score(a, b, sa, sb).value == pytest.approx(alignment_score(b, a, sb, sa).value, abs=1e-14)


def test_score_respects_rank_threshold_and_cap():
    q = rng(4).orthonormal(4)
    r = rng(5).orthonormal(4)
    r[:, :2] = q[:, :2]
    sig = np.array([3.0, 2.0, 1e-13, 0.0])
    res = alignment_score(q, r, sig, sig)
    assert res.matched_rank == 2 and res.value == pytest.approx(1.0)
    assert alignment_score(q, r, [3.0, 2, 1, 1], [3.0, 2, 1, 1], max_rank=1).matched_rank == 1
    with pytest.raises(EmptyRankError):
        alignment_score(q, r, np.zeros(4), sig)


def test_score_shape_mismatch():
    with pytest.raises(ShapeError):
        alignment_score(np.eye(3), np.eye(4), [1.0], [1.0])


def test_matrices_align_zero_is_vacuous():
    assert matrices_align(np.zeros((3, 3)), rng(6).normals(3, 3)).value == 1.0


def test_matrices_align_product_chain():
    g = rng(7)
    q0, q1, q2 = g.orthonormal(3), g.orthonormal(3), g.orthonormal(3)
    a = q1 @ np.diag([3.0, 2, 1]) @ q0.T
    b = q2 @ np.diag([5.0, 4, 0.5]) @ q1.T
    # b's right factor is q1, a's left factor is q1
    assert matrices_align(b, a).value == pytest.approx(1.0, abs=1e-12)


def test_adjacent_and_invariance_scores_on_aligned_net():
    g = rng(8)
    qs = [g.orthonormal(4) for _ in range(4)]
    layers = [qs[i + 1] @ np.diag([4.0, 3, 2, 1]) @ qs[i].T for i in range(3)]
    adj = layer_adjacent_scores(layers)
    assert all(s.value == pytest.approx(1.0, abs=1e-12) for s in adj)
    inv = invariance_scores(layers, layers)
    assert all(u.value == pytest.approx(1.0) and v.value == pytest.approx(1.0) for u, v in inv)
    with pytest.raises(ShapeError):
        layer_adjacent_scores(layers[:1])
    with pytest.raises(ShapeError):
        invariance_scores(layers, layers[:2])


def test_is_diagonal_tolerance_scales_with_max_entry():
    m = np.diag([1e6, 1.0])
    m[0, 1] = 0.5
    assert is_diagonal(m, 1e-6)
    assert not is_diagonal(m, 1e-8)
    assert is_diagonal(np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]), 0.0)
