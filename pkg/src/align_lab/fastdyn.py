"""Singular-value dynamics of a strongly aligned network.

Once every layer is ``Q_i diag(sigma_i) Q_{i-1}^T`` and the data satisfy the
alignment condition, gradient descent only moves the top ``r`` diagonal
entries. Per index k the update is

    sigma_{i,k} += (gamma/n) * prod_{j != i} sigma_{j,k} * (lp_k - l_k * prod_j sigma_{j,k})

with ``l = diag(V^T X X^T V)`` and ``lp = diag(U^T Y X^T V)`` on the top block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .alignment import AlignedBasis, DataCondition, aligned_init
from .errors import CertificateError, DivergenceError, InfeasibleError, PreconditionError, ShapeError
from .linalg import diag_embed
from .network import Dataset, end_to_end, gd_step

ZERO_RTOL = 1e-12


def _zero_mask(v: np.ndarray) -> np.ndarray:
    return np.abs(v) <= ZERO_RTOL * max(1.0, float(np.max(np.abs(v))) if v.size else 1.0)


@dataclass(frozen=True)
class SvState:
    """``sigmas`` is a ``d x r`` table; row i holds layer i+1's top-r values.

    Indices with zero ``lambda_`` must also have zero ``lambda_prime``. The
    converse is allowed: those indices decay to zero.
    """

    sigmas: np.ndarray
    lambda_prime: np.ndarray
    lambda_: np.ndarray
    gamma_over_n: float

    def __post_init__(self):
        s = np.array(self.sigmas, dtype=np.float64)
        if s.ndim != 2 or s.shape[0] < 1 or s.shape[1] < 1:
            raise ShapeError(f"sigmas must be a d x r table, got shape {s.shape}")
        lp = np.asarray(self.lambda_prime, dtype=np.float64).reshape(-1)
        lam = np.asarray(self.lambda_, dtype=np.float64).reshape(-1)
        if len(lp) != s.shape[1] or len(lam) != s.shape[1]:
            raise ShapeError("lambda vectors must have r entries")
        if np.any(lam < -ZERO_RTOL * max(1.0, float(np.max(np.abs(lam))))):
            raise InfeasibleError("lambda entries must be nonnegative")
        bad = np.flatnonzero(_zero_mask(lam) & ~_zero_mask(lp))
        if len(bad):
            raise InfeasibleError(f"lambda is zero but lambda_prime is not at index k={int(bad[0])}")
        if not self.gamma_over_n >= 0:
            raise ValueError("gamma_over_n must be nonnegative")
        s.setflags(write=False)
        object.__setattr__(self, "sigmas", s)
        object.__setattr__(self, "lambda_prime", lp)
        object.__setattr__(self, "lambda_", lam)

    @property
    def d(self) -> int:
        return self.sigmas.shape[0]

    @property
    def r(self) -> int:
        return self.sigmas.shape[1]

    def products(self) -> np.ndarray:
        return np.prod(self.sigmas, axis=0)


def balanced_sigmas(values, d: int) -> np.ndarray:
    """Same top-r values on every layer."""
    return np.tile(np.asarray(values, dtype=np.float64).reshape(1, -1), (d, 1))


def sv_step(state: SvState) -> SvState:
    s = state.sigmas
    resid = state.lambda_prime - state.lambda_ * np.prod(s, axis=0)
    new = np.empty_like(s)
    for i in range(state.d):
        others = np.prod(np.delete(s, i, axis=0), axis=0)
        new[i] = s[i] + state.gamma_over_n * others * resid
    if not np.all(np.isfinite(new)):
        raise DivergenceError("singular-value update produced a non-finite value")
    return SvState(new, state.lambda_prime, state.lambda_, state.gamma_over_n)


@dataclass
class SvTrajectory:
    states: list = field(default_factory=list)
    products: np.ndarray = None

    def __len__(self):
        return len(self.states)


def sv_trajectory(state: SvState, steps: int) -> SvTrajectory:
    """``steps`` updates; ``products[t, k]`` is ``prod_i sigma_{i,k}`` after t steps."""
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    states = [state]
    for _ in range(steps):
        states.append(sv_step(states[-1]))
    return SvTrajectory(states=states, products=np.array([st.products() for st in states]))


def reduced_loss(state: SvState) -> float:
    """``(1/2) sum_k l_k (S_k - lp_k/l_k)^2`` over indices with ``l_k != 0``.

    Equals ``n`` times the squared loss minus its minimum, so it is
    monotone exactly when the network loss is.
    """
    lam, lp = state.lambda_, state.lambda_prime
    live = ~_zero_mask(lam)
    gap = state.products()[live] - lp[live] / lam[live]
    return float(0.5 * np.sum(lam[live] * gap * gap))


def limit_solution(cond: DataCondition) -> np.ndarray:
    """``U diag(lp/l) V^T``, zero on indices where ``l`` vanishes."""
    lam, lp = cond.lambda_, cond.lambda_prime
    zl = _zero_mask(lam)
    bad = np.flatnonzero(zl & ~_zero_mask(lp))
    if len(bad):
        raise InfeasibleError(f"lambda is zero but lambda_prime is not at index k={int(bad[0])}")
    ratio = np.zeros(len(lam))
    ratio[~zl] = lp[~zl] / lam[~zl]
    return cond.u @ diag_embed(ratio, (cond.u.shape[0], cond.v.shape[0])) @ cond.v.T


def lr_bound(sigmas0, lambda_, lambda_prime, n: float, d: int) -> float:
    """Largest step size with a linear-convergence guarantee.

    ``(n ln 2 / d) * min over k (l_k != 0) and layers i of sigma_{i,k}^2 l_k / lp_k^2``.
    """
    s = np.asarray(sigmas0, dtype=np.float64)
    if s.ndim == 1:
        s = s.reshape(1, -1)
    if s.shape[0] != d:
        raise ShapeError(f"sigma table has {s.shape[0]} layers, expected d={d}")
    lam = np.asarray(lambda_, dtype=np.float64).reshape(-1)
    lp = np.asarray(lambda_prime, dtype=np.float64).reshape(-1)
    if len(lam) != s.shape[1] or len(lp) != s.shape[1]:
        raise ShapeError("lambda vectors must have r entries")
    live = np.flatnonzero(~_zero_mask(lam))
    if not len(live):
        raise PreconditionError("no index with nonzero lambda; the bound is vacuous")
    best = math.inf
    for k in live:
        col = s[:, k]
        if np.any(col <= 0):
            raise PreconditionError(f"k={k}: initial singular values must be positive")
        if not np.prod(col) < lp[k] / lam[k]:
            raise PreconditionError(f"k={k}: initial product {np.prod(col)!r} is not below lp/l = {lp[k] / lam[k]!r}")
        best = min(best, float(np.min(col) ** 2 * lam[k] / lp[k] ** 2))
    return n * math.log(2.0) / d * best


def admissible_sigmas(lambda_, lambda_prime, d: int, fraction: float = 0.7) -> np.ndarray:
    """Balanced ``d x r`` table with product ``fraction * lp_k / l_k`` per index.

    Indices with zero ``l`` get zero. Every live ratio must be positive and
    ``0 < fraction < 1`` so that ``lr_bound`` accepts the result.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    lam = np.asarray(lambda_, dtype=np.float64).reshape(-1)
    lp = np.asarray(lambda_prime, dtype=np.float64).reshape(-1)
    if len(lam) != len(lp):
        raise ShapeError("lambda vectors must have the same length")
    live = ~_zero_mask(lam)
    vals = np.zeros(len(lam))
    ratio = lp[live] / lam[live]
    if np.any(ratio <= 0):
        k = int(np.flatnonzero(live)[np.argmax(ratio <= 0)])
        raise PreconditionError(f"k={k}: lp/l must be positive for a positive initialisation")
    vals[live] = (fraction * ratio) ** (1.0 / d)
    return balanced_sigmas(vals, d)


@dataclass
class CertificateReport:
    worst_ratio: float
    checked: int
    products_bounded: bool
    monotone: bool


def convergence_certificate(traj: SvTrajectory, state0: SvState | None = None) -> CertificateReport:
    """Check ``lp/l - S_t <= (lp/l - S_0) (1 - d eta S_0^(2 - 2/d))^t`` with ``eta = gamma l / n``.

    Refuses (precondition error) when the step size exceeds the bound.
    """
    state0 = traj.states[0] if state0 is None else state0
    d, gn = state0.d, state0.gamma_over_n
    limit = lr_bound(state0.sigmas, state0.lambda_, state0.lambda_prime, 1.0, d)
    if gn > limit * (1 + 1e-12):
        raise PreconditionError(f"gamma/n = {gn!r} exceeds the bound {limit!r}; certificate does not apply")
    lam, lp = state0.lambda_, state0.lambda_prime
    prods = traj.products
    worst, checked = 0.0, 0
    bounded, mono = True, True
    for k in np.flatnonzero(~_zero_mask(lam)):
        target = lp[k] / lam[k]
        s0 = prods[0, k]
        factor = 1.0 - d * gn * lam[k] * s0 ** (2.0 - 2.0 / d)
        slack = 1e-12 * max(1.0, abs(target))
        gap0 = target - s0
        for t in range(prods.shape[0]):
            gap = target - prods[t, k]
            env = gap0 * factor ** t
            if gap > env + slack:
                raise CertificateError(f"envelope violated at k={k}, t={t}: gap {gap!r} > {env!r}", k=int(k), t=t)
            if env > slack:
                worst = max(worst, gap / env)
            checked += 1
            if not (0 < prods[t, k] <= target + slack):
                bounded = False
            if t and prods[t, k] < prods[t - 1, k]:
                mono = False
    return CertificateReport(worst_ratio=worst, checked=checked, products_bounded=bounded, monotone=mono)


def _full_sigmas(table: np.ndarray, dims: Sequence[int]) -> list:
    out = []
    for i in range(1, len(dims)):
        q = min(dims[i], dims[i - 1])
        row = np.zeros(q)
        row[: table.shape[1]] = table[i - 1]
        out.append(row)
    return out


def equivalence_check(cond: DataCondition, basis: AlignedBasis, sigmas0, gamma: float,
                      steps: int, data: Dataset) -> float:
    """Max over steps of ``||end_to_end(full GD) - U diag(S_t) V^T||_F``.

    The full network starts at ``aligned_init(basis, sigmas0)`` with entries
    beyond the top r set to zero.
    """
    table = np.asarray(sigmas0, dtype=np.float64)
    dims = basis.dims
    if table.shape != (len(dims) - 1, cond.r):
        raise ShapeError(f"sigma table must be {(len(dims) - 1, cond.r)}, got {table.shape}")
    net = aligned_init(basis, _full_sigmas(table, dims))
    state = SvState(table, cond.lambda_prime, cond.lambda_, gamma / data.n)
    shape = (cond.u.shape[0], cond.v.shape[0])
    worst = 0.0
    for t in range(steps + 1):
        reduced = cond.u @ diag_embed(state.products(), shape) @ cond.v.T
        worst = max(worst, float(np.linalg.norm(end_to_end(net) - reduced)))
        if t < steps:
            net = gd_step(net, data, gamma)
            state = sv_step(state)
    return worst
