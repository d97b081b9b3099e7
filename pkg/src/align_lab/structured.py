"""Layers confined to a subspace spanned by orthogonal basis matrices.

A layer is ``sum_j c_j A_j``. The constructors here (Toeplitz, convolution,
sparse mask) all produce 0/1 indicators with disjoint supports, stored as a
label map: ``labels[p, q] = j`` when entry (p, q) belongs to ``A_j`` and -1
when it is fixed at zero. Layers are applied as sparse operators so a
784 x 784 convolution never has to be formed densely during training.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DivergenceError, RankError, ShapeError
from .linalg import DEFAULT_RANK_TOL, AlignmentScore, as_matrix, matrices_align
from .network import (
    DIVERGENCE_LOSS,
    Dataset,
    LinearNetwork,
    TrainConfig,
    TrainTrace,
    forward,
    gradient_factors,
    loss_and_gradients,
    output_loss_grad,
    run_training,
)

ORTHO_RTOL = 1e-10
SPARSE_MIN_ENTRIES = 4096


class LayerStructure:
    """Orthogonal basis ``A_1..A_r`` of a subspace of ``m x n`` matrices."""

    def __init__(self, shape, labels: Optional[np.ndarray] = None, basis=None):
        self.shape = (int(shape[0]), int(shape[1]))
        if (labels is None) == (basis is None):
            raise ValueError("give exactly one of labels or basis")
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != self.shape:
                raise ShapeError(f"label map {labels.shape} does not match {self.shape}")
            r = int(labels.max()) + 1
            if r < 1:
                raise ShapeError("structure has no free entries")
            counts = np.bincount(labels[labels >= 0], minlength=r)
            if np.any(counts == 0):
                raise ShapeError("every basis label must own at least one entry")
            self.labels = labels
            self._dense = None
            self.r = r
            self.norms_sq = counts.astype(np.float64)
            rows, cols = np.nonzero(labels >= 0)
            self._rows, self._cols = rows, cols
            self._lab = labels[rows, cols]
            self._indptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=self.shape[0]))])
        else:
            mats = np.stack([as_matrix(a, "basis matrix") for a in basis])
            if mats.shape[1:] != self.shape:
                raise ShapeError("basis matrices do not match the declared shape")
            gram = np.einsum("apq,bpq->ab", mats, mats)
            norms_sq = np.diag(gram).copy()
            if np.any(norms_sq <= 0):
                raise ShapeError("basis matrices must be nonzero")
            off = np.abs(gram - np.diag(norms_sq))
            if np.any(off > ORTHO_RTOL * np.sqrt(np.outer(norms_sq, norms_sq))):
                raise ShapeError("basis matrices are not pairwise orthogonal")
            if len(mats) > self.shape[0] * self.shape[1]:
                raise ShapeError("more basis matrices than entries")
            self.labels = None
            self._dense = mats
            self.r = len(mats)
            self.norms_sq = norms_sq

    @cached_property
    def basis(self) -> np.ndarray:
        """Dense ``r x m x n`` stack of the basis matrices."""
        if self._dense is not None:
            return self._dense
        out = np.zeros((self.r,) + self.shape)
        out[self._lab, self._rows, self._cols] = 1.0
        return out

    def inner(self, m) -> np.ndarray:
        """``<m, A_j>`` for every j."""
        m = as_matrix(m)
        if m.shape != self.shape:
            raise ShapeError(f"matrix {m.shape} does not match structure {self.shape}")
        if self.labels is None:
            return np.einsum("apq,pq->a", self._dense, m)
        return np.bincount(self._lab, weights=m[self._rows, self._cols], minlength=self.r)

    def inner_factors(self, b: np.ndarray, a: np.ndarray) -> np.ndarray:
        """``<b @ a.T, A_j>`` without forming the product."""
        if self.labels is None:
            return self.inner(b @ a.T)
        vals = np.einsum("es,es->e", b[self._rows], a[self._cols])
        return np.bincount(self._lab, weights=vals, minlength=self.r)

    def combine(self, coeffs) -> np.ndarray:
        c = np.asarray(coeffs, dtype=np.float64).reshape(-1)
        if len(c) != self.r:
            raise ShapeError(f"need {self.r} coefficients, got {len(c)}")
        if self.labels is None:
            return np.einsum("a,apq->pq", c, self._dense)
        out = np.zeros(self.shape)
        out[self._rows, self._cols] = c[self._lab]
        return out

    def operator(self, coeffs):
        """The layer as an operator supporting ``@`` and ``.T``."""
        c = np.asarray(coeffs, dtype=np.float64).reshape(-1)
        if self.labels is None or self.shape[0] * self.shape[1] < SPARSE_MIN_ENTRIES:
            return self.combine(c)
        return sp.csr_matrix((c[self._lab], self._cols, self._indptr), shape=self.shape)


@dataclass(frozen=True)
class StructuredLayer:
    structure: LayerStructure
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.float64).reshape(-1)
        if len(c) != self.structure.r:
            raise ShapeError(f"need {self.structure.r} coefficients, got {len(c)}")
        object.__setattr__(self, "coeffs", c)

    def materialize(self) -> np.ndarray:
        return self.structure.combine(self.coeffs)


def toeplitz_basis(k: int) -> LayerStructure:
    """Constant-diagonal indicators ordered by offset 0, +1, -1, +2, -2, ..."""
    if k < 1:
        raise ShapeError("k must be >= 1")
    i, j = np.indices((k, k))
    off = j - i
    labels = np.where(off > 0, 2 * off - 1, -2 * off)
    return LayerStructure((k, k), labels=labels)


def conv_basis(p: int, s: int) -> LayerStructure:
    """Single-filter ``s x s`` convolution on ``p x p`` images, stride 1, zero padding ``(s-1)/2``.

    Images are vectorised row-major. Filter entry ``(a, b)`` (label
    ``a*s + b``) links output pixel ``(i, j)`` to input pixel
    ``(i - a + h, j - b + h)`` with ``h = (s-1)/2``.
    """
    if s < 1 or s % 2 == 0:
        raise ShapeError("filter side must be odd")
    if s > p:
        raise ShapeError("filter larger than the image")
    h = (s - 1) // 2
    i, j = np.divmod(np.arange(p * p), p)
    di = i[:, None] - i[None, :] + h
    dj = j[:, None] - j[None, :] + h
    inside = (di >= 0) & (di < s) & (dj >= 0) & (dj < s)
    labels = np.where(inside, di * s + dj, -1)
    return LayerStructure((p * p, p * p), labels=labels)


def sparse_basis(mask) -> LayerStructure:
    """One indicator per allowed entry, numbered row-major."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ShapeError("mask must be 2-D")
    allowed = m != 0
    if not allowed.any():
        raise ShapeError("mask has no allowed entries")
    labels = np.full(m.shape, -1, dtype=np.int64)
    labels[allowed] = np.arange(int(allowed.sum()))
    return LayerStructure(m.shape, labels=labels)


def project(m, s: LayerStructure) -> np.ndarray:
    """Orthogonal projection ``sum_j <m, A_j> / ||A_j||^2 A_j``."""
    return s.combine(s.inner(m) / s.norms_sq)


def gd_scaled_project(m, s: LayerStructure) -> np.ndarray:
    """``sum_j <m, A_j> A_j``: what coefficient-space descent does to the matrix."""
    return s.combine(s.inner(m))


# -- training -------------------------------------------------------------------

class _OperatorChain:
    def __init__(self, ops):
        self.layers = ops
        self.depth = len(ops)


def structured_loss_grad(layers: Sequence[StructuredLayer], data: Dataset,
                         loss_kind: str = "mse") -> tuple[float, list[np.ndarray]]:
    """Loss and the gradient with respect to every layer's coefficients."""
    ops = [layer.structure.operator(layer.coeffs) for layer in layers]
    dims = [layers[0].structure.shape[1]] + [layer.structure.shape[0] for layer in layers]
    if any(layers[i].structure.shape[1] != dims[i] for i in range(len(layers))):
        raise ShapeError("structured layers are not chain compatible")
    if data.x.shape[0] != dims[0] or data.y.shape[0] != dims[-1]:
        raise ShapeError(f"data shapes X{data.x.shape}, Y{data.y.shape} do not match dims {dims}")
    out = data.x
    for op in ops:
        out = op @ out
    loss, dl_df = output_loss_grad(np.asarray(out), data.y, loss_kind)
    factors = gradient_factors(_OperatorChain(ops), data.x, dl_df)
    grads = [layer.structure.inner_factors(np.asarray(b), np.asarray(a)) / data.n
             for layer, (b, a) in zip(layers, factors)]
    return loss, grads


def structured_gd_step(layers: Sequence[StructuredLayer], data: Dataset, gamma: float,
                       loss_kind: str = "mse") -> list[StructuredLayer]:
    """``c_j <- c_j - gamma <dL/dW, A_j>`` for every layer at once."""
    if gamma < 0:
        raise ValueError("learning rate must be nonnegative")
    _, grads = structured_loss_grad(layers, data, loss_kind)
    return [StructuredLayer(layer.structure, layer.coeffs - gamma * g) for layer, g in zip(layers, grads)]


def projected_matrix_step(weights: Sequence[np.ndarray], structures: Sequence[LayerStructure],
                          data: Dataset, gamma: float, loss_kind: str = "mse") -> list[np.ndarray]:
    """Matrix-space update ``W <- W - gamma * gd_scaled_project(dL/dW)``."""
    net = LinearNetwork(tuple(weights))
    _, grads = loss_and_gradients(net, data, loss_kind)
    return [w - gamma * gd_scaled_project(g, s) for w, g, s in zip(net.layers, grads, structures)]


def train_structured(layers: Sequence[StructuredLayer], data: Dataset, config: TrainConfig,
                     loss_kind: str = "mse") -> TrainTrace:
    gamma = config.learning_rate
    structures = [layer.structure for layer in layers]

    def loss_grad(coeffs):
        return structured_loss_grad([StructuredLayer(s, c) for s, c in zip(structures, coeffs)],
                                    data, loss_kind)

    def update(coeffs, grads):
        return [c - gamma * g for c, g in zip(coeffs, grads)]

    def to_net(coeffs):
        return LinearNetwork(tuple(s.combine(c) for s, c in zip(structures, coeffs)))

    return run_training([layer.coeffs for layer in layers], loss_grad, update, to_net, config)


# -- diagnostics ----------------------------------------------------------------

@dataclass
class PinvReport:
    output_score: AlignmentScore
    input_score: AlignmentScore
    residual: float

    @property
    def min_score(self) -> float:
        return min(self.output_score.value, self.input_score.value)


def least_squares_map(x, y, tol: float = 1e-10) -> np.ndarray:
    """``Y X^T (X X^T)^{-1}`` through the eigendecomposition of ``X X^T``."""
    x, y = as_matrix(x, "X"), as_matrix(y, "Y")
    evals, evecs = np.linalg.eigh(x @ x.T)
    top = float(evals[-1])
    if top <= 0 or evals[0] <= tol * top:
        raise RankError(f"X X^T is singular to relative tolerance {tol} (smallest eigenvalue {evals[0]!r})")
    inv = (evecs / evals) @ evecs.T
    return y @ x.T @ inv


def pinv_alignment_check(net: LinearNetwork, data: Dataset, tol: float = 1e-10,
                         rank_tol: float = DEFAULT_RANK_TOL) -> PinvReport:
    """Scores for ``W_d^T`` aligned with P and P aligned with ``W_1^T``."""
    p = least_squares_map(data.x, data.y, tol)
    out_score = matrices_align(net.layers[-1].T, p, rank_tol)
    in_score = matrices_align(p, net.layers[0].T, rank_tol)
    residual = float(np.linalg.norm(data.y - forward(net, data.x)))
    return PinvReport(out_score, in_score, residual)


class Feasibility(str, enum.Enum):
    RULED_OUT = "ruled_out"
    NOT_RULED_OUT = "not_ruled_out"


def _choose2(m: int) -> int:
    return m * (m - 1) // 2 if m >= 2 else 0


def feasibility(r: int, k: int, n: int) -> Feasibility:
    """Ruled out when ``r < k - 1 - C(k - n, 2)`` (``C(m, 2) = 0`` for ``m < 2``)."""
    if min(r, k, n) < 1:
        raise ValueError("r, k and n must be >= 1")
    return Feasibility.RULED_OUT if r < k - 1 - _choose2(k - n) else Feasibility.NOT_RULED_OUT


@dataclass
class BatchResult:
    """Final state of independent runs trained side by side."""

    coeffs: list
    losses: np.ndarray
    steps: np.ndarray
    converged: np.ndarray

    def layers(self, structures: Sequence[LayerStructure], b: int) -> list[StructuredLayer]:
        return [StructuredLayer(s, c[b]) for s, c in zip(structures, self.coeffs)]


def train_structured_batch(structures: Sequence[LayerStructure], coeffs: Sequence[np.ndarray],
                           xs: np.ndarray, ys: np.ndarray, gamma: float, max_steps: int,
                           loss_stop: float) -> BatchResult:
    """Squared-loss coefficient descent on a batch of independent problems.

    ``coeffs[i]`` is ``(B, r_i)``; ``xs`` is ``(B, k_0, n)`` and ``ys``
    ``(B, k_d, n)``. Each problem stops at the first step whose loss is at
    most ``loss_stop``, matching :func:`train_structured` step for step.
    Runs a compiled loop over dense basis stacks, so it is meant for small
    layers.
    """
    from ._kernels import run_batch

    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    flat = [s.basis.reshape(s.r, -1) for s in structures]
    shapes = [s.shape for s in structures]
    final, steps, losses, status = run_batch(coeffs, flat, shapes, xs, ys, gamma, max_steps,
                                             loss_stop, DIVERGENCE_LOSS)
    if np.any(status < 0):
        b = int(np.flatnonzero(status < 0)[0])
        raise DivergenceError(f"batched run {b} diverged at step {steps[b]}", int(steps[b]))
    return BatchResult(coeffs=final, losses=losses, steps=steps, converged=status == 1)
