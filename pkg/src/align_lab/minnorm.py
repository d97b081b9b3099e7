"""Two-layer factorizations ``W2 @ W1 = P`` of least total squared Frobenius norm."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ShapeError
from .linalg import as_matrix, diag_embed, orthonormality_error, svd
from .rng import rng


@dataclass(frozen=True)
class Factorization:
    w1: np.ndarray
    w2: np.ndarray
    norm_sum: float


def _norm_sum(w1, w2) -> float:
    return float(np.sum(w1 * w1) + np.sum(w2 * w2))


def min_norm_factorization(p, w_mid: Optional[np.ndarray] = None) -> Factorization:
    """``W1 = W S^(1/2) V^T`` and ``W2 = U S^(1/2) W^T`` from the SVD ``P = U S V^T``.

    The inner dimension is ``w_mid``'s size, at least ``min(P.shape)``; the
    default is the identity of that minimum size.
    """
    p = as_matrix(p, "P")
    s = svd(p)
    q = len(s.sigma)
    if w_mid is None:
        w_mid = np.eye(q)
    w_mid = as_matrix(w_mid, "w_mid")
    h = w_mid.shape[0]
    if w_mid.shape[1] != h or h < q:
        raise ShapeError(f"w_mid must be square of size >= {q}, got {w_mid.shape}")
    if orthonormality_error(w_mid) > 1e-10:
        raise ShapeError("w_mid is not orthonormal")
    root = np.sqrt(s.sigma)
    w1 = w_mid @ diag_embed(root, (h, p.shape[1])) @ s.v.T
    w2 = s.u @ diag_embed(root, (p.shape[0], h)) @ w_mid.T
    return Factorization(w1=w1, w2=w2, norm_sum=_norm_sum(w1, w2))


@dataclass
class LowerBoundReport:
    optimum: float
    bound: float
    best_sampled: float
    violations: int
    trials: int


def norm_lower_bound_check(p, trials: int = 1000, seed: int = 0, slack: float = 1e-8) -> LowerBoundReport:
    """Random invertible reparameterizations ``(W2 G, G^-1 W1)`` of the optimum.

    Counts samples whose norm sum falls below ``2 Tr(S) - slack``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    p = as_matrix(p, "P")
    opt = min_norm_factorization(p)
    bound = 2.0 * float(np.sum(svd(p).sigma))
    h = opt.w1.shape[0]
    gen = rng(seed)
    best, violations = np.inf, 0
    for _ in range(trials):
        g = np.eye(h) + gen.normals(h, h) * gen.uniforms(1, low=0.0, high=2.0)[0]
        if abs(np.linalg.det(g)) < 1e-8:
            continue
        w2 = opt.w2 @ g
        w1 = np.linalg.solve(g, opt.w1)
        total = _norm_sum(w1, w2)
        best = min(best, total)
        if total < bound - slack:
            violations += 1
    return LowerBoundReport(optimum=opt.norm_sum, bound=bound, best_sampled=float(best),
                            violations=violations, trials=trials)
