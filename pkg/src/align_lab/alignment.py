"""Aligned initialisations and the data condition under which alignment survives training.

A network is built aligned as ``W_i = Q_i diag(sigma_i) Q_{i-1}^T``. Training
keeps every ``Q`` fixed exactly when orthonormal ``U = Q_d`` and ``V = Q_0``
bring ``U^T Y X^T V`` and ``V^T X X^T V`` into block form with a diagonal
``r x r`` top-left block and zero borders.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyRankError, PreconditionError, ShapeError
from .linalg import (
    DEFAULT_RANK_TOL,
    GROUP_RTOL,
    alignment_score,
    as_matrix,
    diag_embed,
    is_diagonal,
    layer_adjacent_scores,
    orthonormality_error,
    svd,
)
from .network import LinearNetwork, TrainTrace
from .rng import rng

ORTHO_TOL = 1e-10


@dataclass(frozen=True)
class AlignedBasis:
    """Orthonormal ``Q_0 .. Q_d``; layer i uses ``U_i = Q_i`` and ``V_i = Q_{i-1}``."""

    q: tuple

    def __post_init__(self):
        qs = tuple(as_matrix(m, f"Q_{i}") for i, m in enumerate(self.q))
        if len(qs) < 2:
            raise ShapeError("an aligned basis needs at least Q_0 and Q_1")
        for i, m in enumerate(qs):
            if m.shape[0] != m.shape[1] or orthonormality_error(m) > ORTHO_TOL:
                raise ShapeError(f"Q_{i} is not a square orthonormal matrix")
        object.__setattr__(self, "q", qs)

    @property
    def dims(self) -> list[int]:
        return [m.shape[0] for m in self.q]

    @classmethod
    def from_condition(cls, cond: "DataCondition", dims: Sequence[int],
                       interior: Optional[Sequence[np.ndarray]] = None) -> "AlignedBasis":
        """``Q_0 = V``, ``Q_d = U``; interior factors default to identity."""
        dims = list(dims)
        if dims[0] != cond.v.shape[0] or dims[-1] != cond.u.shape[0]:
            raise ShapeError(f"dims {dims} do not match the condition's U/V sizes")
        if interior is None:
            interior = [np.eye(k) for k in dims[1:-1]]
        return cls((cond.v, *interior, cond.u))


@dataclass(frozen=True)
class DataCondition:
    u: np.ndarray
    v: np.ndarray
    lambda_prime: np.ndarray
    lambda_: np.ndarray
    r: int


def aligned_init(basis: AlignedBasis, sigmas: Sequence) -> LinearNetwork:
    dims = basis.dims
    d = len(dims) - 1
    if len(sigmas) != d:
        raise ShapeError(f"need {d} sigma vectors, got {len(sigmas)}")
    layers = []
    for i in range(1, d + 1):
        s = np.asarray(sigmas[i - 1], dtype=np.float64).reshape(-1)
        q = min(dims[i], dims[i - 1])
        if len(s) != q:
            raise ShapeError(f"sigma vector {i} has {len(s)} entries, layer needs {q}")
        layers.append(basis.q[i] @ diag_embed(s, (dims[i], dims[i - 1])) @ basis.q[i - 1].T)
    return LinearNetwork(tuple(layers))


def condition_blocks(u, v, x, y):
    """``(U^T Y X^T V, V^T X X^T V)``."""
    u, v, x, y = (as_matrix(a) for a in (u, v, x, y))
    return u.T @ (y @ x.T) @ v, v.T @ (x @ x.T) @ v


def _block_form(m: np.ndarray, r: int, tol: float) -> bool:
    scale = max(1.0, float(np.max(np.abs(m))))
    top = m[:r, :r].copy()
    top[np.arange(r), np.arange(r)] = 0.0
    borders = [top, m[:r, r:], m[r:, :r]]
    return all(np.all(np.abs(b) <= tol * scale) for b in borders if b.size)


def verify_condition(u, v, x, y, r: int, tol: float = 1e-8) -> bool:
    """Top-left ``r x r`` block diagonal and zero borders for both data matrices."""
    yx, xx = condition_blocks(u, v, x, y)
    if not 1 <= r <= min(yx.shape):
        raise ShapeError(f"r={r} outside [1, {min(yx.shape)}]")
    return _block_form(yx, r, tol) and _block_form(xx, r, tol)


def _orthonormalise(vectors, basis, min_norm=1e-6):
    """Gram-Schmidt (two passes) of ``vectors`` against and onto ``basis``."""
    dim = basis.shape[0]
    out = basis
    added = []
    for vec in vectors:
        w = np.array(vec, dtype=np.float64)
        for _ in range(2):
            if out.shape[1]:
                w = w - out @ (out.T @ w)
        nrm = np.linalg.norm(w)
        if nrm > min_norm:
            w = w / nrm
            out = np.column_stack([out, w]) if out.shape[1] else w.reshape(dim, 1)
            added.append(w)
            if out.shape[1] == dim:
                break
    return added


def _complete(basis: np.ndarray, count: int) -> list:
    """First ``count`` standard-basis completions orthogonal to ``basis``."""
    dim = basis.shape[0]
    out = []
    cur = basis
    for i in range(dim):
        if len(out) == count:
            break
        got = _orthonormalise([np.eye(dim)[:, i]], cur)
        if got:
            out.append(got[0])
            cur = np.column_stack([cur, got[0]])
    return out


def find_condition(x, y, r: int, tol: float = 1e-8) -> Optional[DataCondition]:
    """Construct ``(U, V)`` satisfying the data condition, or return ``None``.

    Sound but incomplete when eigenvalues of ``X X^T`` repeat and the
    matching block of ``Y X^T`` is rank deficient; ``verify_condition`` is
    the ground truth either way.
    """
    x, y = as_matrix(x, "X"), as_matrix(y, "Y")
    if x.shape[1] != y.shape[1]:
        raise ShapeError("X and Y need the same number of samples")
    k0, kd = x.shape[0], y.shape[0]
    if not 1 <= r <= min(k0, kd):
        raise ShapeError(f"r={r} outside [1, {min(k0, kd)}]")
    xx, yx = x @ x.T, y @ x.T

    evals, evecs = np.linalg.eigh(xx)
    order = np.argsort(-evals, kind="stable")
    evals, v = np.clip(evals[order], 0.0, None), evecs[:, order]
    scale = max(float(evals[0]), np.finfo(float).tiny)

    # Rotate each (near-)degenerate eigenspace so its image under Y X^T has
    # orthogonal columns; V^T X X^T V stays diagonal.
    lo = 0
    for j in range(1, k0 + 1):
        if j == k0 or evals[j - 1] - evals[j] > GROUP_RTOL * scale:
            if j - lo > 1:
                _, _, rt = np.linalg.svd(yx @ v[:, lo:j])
                v[:, lo:j] = v[:, lo:j] @ rt.T
            lo = j

    c = yx @ v
    norms = np.linalg.norm(c, axis=0)
    c_zero = norms <= tol * max(1.0, float(np.max(np.abs(yx))))
    l_zero = evals <= GROUP_RTOL * scale
    category = np.where(~c_zero, 0, np.where(~l_zero, 1, 2))
    perm = np.argsort(category, kind="stable")
    v, c, c_zero = v[:, perm], c[:, perm], c_zero[perm]

    head = [j for j in range(r) if not c_zero[j]]
    b1 = np.column_stack([c[:, j] / np.linalg.norm(c[:, j]) for j in head]) if head else np.zeros((kd, 0))
    if head:
        # nearest orthonormal columns: short columns of c inherit eigenvector error
        p, _, qt = np.linalg.svd(b1, full_matrices=False)
        b1 = p @ qt
    rest = [c[:, j] for j in range(r, k0) if not c_zero[j]]
    b2 = _orthonormalise(rest, b1)
    known = np.column_stack([b1] + [w.reshape(kd, 1) for w in b2]) if b2 else b1
    fill = _complete(known, kd - known.shape[1])

    cols = []
    fill_iter = iter(fill)
    head_iter = iter(b1.T)
    for j in range(r):
        cols.append(next(head_iter) if not c_zero[j] else next(fill_iter, None))
    cols.extend(b2)
    cols.extend(fill_iter)
    if any(col is None for col in cols) or len(cols) != kd:
        return None
    u = np.column_stack(cols)
    if orthonormality_error(u) > 1e-8:
        return None
    if not verify_condition(u, v, x, y, r, tol):
        return None
    yx_b, xx_b = condition_blocks(u, v, x, y)
    return DataCondition(u=u, v=v, lambda_prime=np.diag(yx_b)[:r].copy(),
                         lambda_=np.diag(xx_b)[:r].copy(), r=r)


def check_sensing_condition(sensors, tol: float = 1e-8):
    """Shared ``(U, V)`` diagonalising every sensor, or ``None``."""
    sensors = [as_matrix(m, "sensor") for m in sensors]
    if not sensors:
        raise ShapeError("empty sensor list")
    for m in sensors:
        s = svd(m)
        sig = s.sigma
        gaps = np.abs(sig[:-1] - sig[1:]) > GROUP_RTOL * max(float(sig[0]), np.finfo(float).tiny)
        if np.all(gaps):
            break
    else:
        return None
    u, v = s.u, s.v
    if all(is_diagonal(u.T @ m @ v, tol) for m in sensors):
        return u, v
    return None


def rank1_aligned_init(dims: Sequence[int], seed: int = 0, scale: float = 1.0,
                       gen=None) -> LinearNetwork:
    """Rank-one aligned layers for a scalar-output network.

    ``W_i = s_i q_i q_{i-1}^T`` with unit directions drawn in order
    ``q_0, .., q_{d-1}`` (``q_d = [1]``); ``s_1 = 0`` and ``s_i = scale``
    for ``i >= 2`` so the later layers stay balanced.
    """
    dims = [int(k) for k in dims]
    if len(dims) < 2 or dims[-1] != 1:
        raise ShapeError("rank-one initialisation needs a scalar output (last dim 1)")
    gen = rng(seed) if gen is None else gen
    dirs = []
    for k in dims[:-1]:
        w = gen.normals(k)
        dirs.append(w / np.linalg.norm(w))
    dirs.append(np.ones(1))
    layers = []
    for i in range(1, len(dims)):
        s = 0.0 if i == 1 else scale
        layers.append(s * np.outer(dirs[i], dirs[i - 1]))
    return LinearNetwork(tuple(layers))


@dataclass
class MonitorReport:
    """Per recorded step: adjacent scores and fixed-factor scores per layer.

    ``u_scores[t][i]`` compares layer i+1's left factor with ``Q_{i+1}``,
    ``v_scores[t][i]`` its right factor with ``Q_i``. The first layer's V and
    last layer's U are the strong-alignment entries.
    """

    steps: list = field(default_factory=list)
    adjacent: list = field(default_factory=list)
    u_scores: list = field(default_factory=list)
    v_scores: list = field(default_factory=list)
    first_flag: Optional[int] = None
    worst: float = 1.0


def _basis_scores(w: np.ndarray, qu: np.ndarray, qv: np.ndarray, rank_tol, max_rank):
    if not np.any(w):
        return 1.0, 1.0
    d = np.diag(qu.T @ w @ qv)
    order = np.argsort(-np.abs(d), kind="stable")
    ref = np.abs(d)[order]
    s = svd(w)
    try:
        su = alignment_score(s.u, qu[:, order], s.sigma, ref, rank_tol, max_rank).value
        sv = alignment_score(s.v, qv[:, order], s.sigma, ref, rank_tol, max_rank).value
    except EmptyRankError:
        # Basis no longer carries any of the layer's energy.
        return 0.0, 0.0
    return su, sv


def strong_alignment_monitor(trace: TrainTrace, basis0: AlignedBasis, tol: float = 1e-8,
                             rank_tol: float = DEFAULT_RANK_TOL,
                             max_rank: Optional[int] = None) -> MonitorReport:
    """Check every recorded snapshot against the fixed aligned basis."""
    if len(trace.steps) and not trace.snapshots:
        raise PreconditionError("trace was recorded without layer snapshots")
    report = MonitorReport()
    for step, net in zip(trace.steps, trace.snapshots):
        adj = [s.value for s in layer_adjacent_scores(net, rank_tol, max_rank)] if net.depth > 1 else []
        us, vs = [], []
        for i, w in enumerate(net.layers, start=1):
            su, sv = _basis_scores(w, basis0.q[i], basis0.q[i - 1], rank_tol, max_rank)
            us.append(su)
            vs.append(sv)
        report.steps.append(step)
        report.adjacent.append(adj)
        report.u_scores.append(us)
        report.v_scores.append(vs)
        low = min(adj + us + vs)
        report.worst = min(report.worst, low)
        if report.first_flag is None and low < 1.0 - tol:
            report.first_flag = step
    return report
