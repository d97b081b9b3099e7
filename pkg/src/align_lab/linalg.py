"""Dense linear-algebra kernel.

Matrices are plain 2-D ``float64`` numpy arrays. The SVD here is canonical
(sorted, nonnegative, sign-fixed) so that repeated runs compare cleanly;
alignment and invariance scores are built on top of it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DecompositionError, EmptyRankError, NonFiniteError, ShapeError

DEFAULT_RANK_TOL = 1e-10
GROUP_RTOL = 1e-8


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a finite 2-D float64 array (copying only if needed)."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return m


@dataclass(frozen=True)
class UsSvd:
    """``a == u @ diag_embed(sigma, a.shape) @ v.T`` with orthonormal ``u``, ``v``.

    ``sigma`` has ``min(m, n)`` entries. Entries may be negative and unordered
    in general; :func:`svd` returns the sorted, nonnegative representative.
    """

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return self.u @ diag_embed(self.sigma, (self.u.shape[0], self.v.shape[0])) @ self.v.T


@dataclass(frozen=True)
class AlignmentScore:
    value: float
    matched_rank: int


def diag_embed(values, shape) -> np.ndarray:
    """Place ``values`` on the main diagonal of a zero matrix of ``shape``."""
    out = np.zeros(shape)
    q = min(len(values), shape[0], shape[1])
    idx = np.arange(q)
    out[idx, idx] = np.asarray(values, dtype=np.float64)[:q]
    return out


def _fix_signs(cols: np.ndarray) -> np.ndarray:
    """Sign per column making its largest-magnitude entry positive.

    ``np.argmax`` returns the first maximum, which gives the lowest-row-index
    tie break.
    """
    if cols.shape[1] == 0:
        return np.ones(0)
    lead = np.argmax(np.abs(cols), axis=0)
    s = np.sign(cols[lead, np.arange(cols.shape[1])])
    s[s == 0] = 1.0
    return s


def svd(a) -> UsSvd:
    """Canonical full SVD: sigma descending and nonnegative, deterministic signs."""
    a = as_matrix(a)
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=True)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError(f"SVD failed for {a.shape} matrix: {exc}") from exc
    v = vt.T
    q = len(s)
    signs = _fix_signs(u[:, :q])
    u[:, :q] *= signs
    v[:, :q] *= signs
    # Unpaired null-space columns get the same convention independently.
    u[:, q:] *= _fix_signs(u[:, q:])
    v[:, q:] *= _fix_signs(v[:, q:])
    return UsSvd(u=u, sigma=s, v=v)


def orthonormality_error(q: np.ndarray) -> float:
    return float(np.max(np.abs(q.T @ q - np.eye(q.shape[1]))))


def _numerical_rank(sigma: np.ndarray, rank_tol: float) -> int:
    if len(sigma) == 0 or sigma[0] <= 0:
        return 0
    return int(np.sum(sigma > rank_tol * sigma[0]))


def _gap_after(sigma: np.ndarray, m: int) -> np.ndarray:
    """Boolean per position j < m-1: is sigma[j] distinct from sigma[j+1]?"""
    a, b = sigma[: m - 1], sigma[1:m]
    return np.abs(a - b) > GROUP_RTOL * np.maximum(np.abs(a), np.abs(b))


def alignment_score(left, right, sigma_left, sigma_right,
                    rank_tol: float = DEFAULT_RANK_TOL,
                    max_rank: Optional[int] = None) -> AlignmentScore:
    """Average cosine between corresponding singular directions of two bases.

    Only directions above ``rank_tol`` times the largest singular value on
    *both* sides are compared (optionally capped at ``max_rank``). Runs of
    (near-)equal singular values are compared as subspaces through their
    principal angles, since columns inside such a run are only defined up to
    rotation. A cut between positions j and j+1 is made only when both
    sigma vectors have a gap there, which keeps the score symmetric.
    """
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    sl = np.asarray(sigma_left, dtype=np.float64)
    sr = np.asarray(sigma_right, dtype=np.float64)
    if left.shape[0] != right.shape[0]:
        raise ShapeError(f"bases live in different spaces: {left.shape} vs {right.shape}")
    m = min(_numerical_rank(sl, rank_tol), _numerical_rank(sr, rank_tol),
            left.shape[1], right.shape[1])
    if max_rank is not None:
        m = min(m, int(max_rank))
    if m <= 0:
        raise EmptyRankError("no singular value above the rank threshold")

    cuts = _gap_after(sl, m) & _gap_after(sr, m)
    bounds = [0] + [j + 1 for j in np.flatnonzero(cuts)] + [m]
    total = 0.0
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        if hi - lo == 1:
            total += abs(float(left[:, lo] @ right[:, lo]))
        else:
            cosines = np.linalg.svd(left[:, lo:hi].T @ right[:, lo:hi], compute_uv=False)
            total += float(np.sum(np.clip(cosines, 0.0, 1.0)))
    value = min(max(total / m, 0.0), 1.0)
    return AlignmentScore(value=value, matched_rank=m)


def _pair_score(left_svd: UsSvd, left_mat, right_svd: UsSvd, right_mat,
                left_side: str, right_side: str, rank_tol, max_rank) -> AlignmentScore:
    # A zero matrix admits every orthonormal factor in some usSVD, so any
    # comparison involving one holds vacuously.
    if not np.any(left_mat) or not np.any(right_mat):
        return AlignmentScore(value=1.0, matched_rank=0)
    lb = left_svd.u if left_side == "u" else left_svd.v
    rb = right_svd.u if right_side == "u" else right_svd.v
    return alignment_score(lb, rb, left_svd.sigma, right_svd.sigma, rank_tol, max_rank)


def matrices_align(a, b, rank_tol: float = DEFAULT_RANK_TOL,
                   max_rank: Optional[int] = None) -> AlignmentScore:
    """Score for "``a`` is aligned with ``b``": right factor of a vs left factor of b."""
    a, b = as_matrix(a), as_matrix(b)
    return _pair_score(svd(a), a, svd(b), b, "v", "u", rank_tol, max_rank)


def layer_adjacent_scores(net, rank_tol: float = DEFAULT_RANK_TOL,
                          max_rank: Optional[int] = None) -> list[AlignmentScore]:
    """Entry i compares U of layer i with V of layer i+1 (1-based layers)."""
    layers = _layers_of(net)
    if len(layers) < 2:
        raise ShapeError("adjacent alignment needs at least two layers")
    svds = [svd(w) for w in layers]
    return [
        _pair_score(svds[i], layers[i], svds[i + 1], layers[i + 1], "u", "v", rank_tol, max_rank)
        for i in range(len(layers) - 1)
    ]


def invariance_scores(net_t, net_0, rank_tol: float = DEFAULT_RANK_TOL,
                      max_rank: Optional[int] = None) -> list[tuple[AlignmentScore, AlignmentScore]]:
    """Per layer, (U_t vs U_0, V_t vs V_0)."""
    lt, l0 = _layers_of(net_t), _layers_of(net_0)
    if len(lt) != len(l0) or any(a.shape != b.shape for a, b in zip(lt, l0)):
        raise ShapeError("networks have different architectures")
    out = []
    for wt, w0 in zip(lt, l0):
        st, s0 = svd(wt), svd(w0)
        out.append((
            _pair_score(st, wt, s0, w0, "u", "u", rank_tol, max_rank),
            _pair_score(st, wt, s0, w0, "v", "v", rank_tol, max_rank),
        ))
    return out


def is_diagonal(m, tol: float) -> bool:
    m = as_matrix(m)
    off = m.copy()
    q = min(m.shape)
    off[np.arange(q), np.arange(q)] = 0.0
    scale = max(1.0, float(np.max(np.abs(m))))
    return bool(np.all(np.abs(off) <= tol * scale))


def _layers_of(net) -> Sequence[np.ndarray]:
    return net.layers if hasattr(net, "layers") else list(net)
