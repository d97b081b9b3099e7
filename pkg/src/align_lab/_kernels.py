"""Compiled inner loop for many small structured problems.

Layers are packed flat: layer i's coefficients occupy ``c[c_off[i]:c_off[i+1]]``
and its row-major basis stack ``basis[b_off[i]:b_off[i+1]]`` (``r_i x m_i n_i``).
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _matmul(a, a_off, m, k, b, b_off, n, out, o_off):
    # out (m x n) = a (m x k) @ b (k x n), all row-major in flat buffers
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[a_off + i * k + t] * b[b_off + t * n + j]
            out[o_off + i * n + j] = s


@njit(cache=True)
def _run_one(c, c_off, basis, b_off, rows, cols, x, y, rate, half_over_n,
             max_steps, loss_stop, div_loss):
    """Coefficient descent on one problem; ``c`` is updated in place.

    Returns ``(step, loss, status)`` with status 1 converged, 0 step cap
    reached, -1 diverged.
    """
    d = len(rows)
    n = x.shape[1]
    w_off = np.zeros(d + 1, dtype=np.int64)
    a_off = np.zeros(d + 1, dtype=np.int64)
    a_off[1] = cols[0] * n
    for i in range(d):
        w_off[i + 1] = w_off[i] + rows[i] * cols[i]
        a_off[i + 1] = a_off[i] + (cols[i] if i == 0 else rows[i - 1]) * n
    w = np.zeros(w_off[d])
    acts = np.zeros(a_off[d] + rows[d - 1] * n)
    xf = x.ravel()
    for p in range(cols[0] * n):
        acts[p] = xf[p]
    yf = y.ravel()
    kd = rows[d - 1]
    resid = np.zeros(kd * n)
    maxk = 0
    for i in range(d):
        maxk = max(maxk, rows[i], cols[i])
    back = np.zeros(maxk * n)
    back2 = np.zeros(maxk * n)
    grad = np.zeros(maxk * maxk)
    out_off = a_off[d]

    for step in range(max_steps + 1):
        for i in range(d):
            mn = rows[i] * cols[i]
            r = c_off[i + 1] - c_off[i]
            for p in range(mn):
                w[w_off[i] + p] = 0.0
            for j in range(r):
                cj = c[c_off[i] + j]
                base = b_off[i] + j * mn
                for p in range(mn):
                    w[w_off[i] + p] += cj * basis[base + p]
        for i in range(d):
            _matmul(w, w_off[i], rows[i], cols[i], acts, a_off[i], n, acts,
                    a_off[i + 1] if i < d - 1 else out_off)
        loss = 0.0
        for p in range(kd * n):
            e = acts[out_off + p] - yf[p]
            resid[p] = e
            loss += e * e
        loss *= half_over_n
        if not loss <= div_loss:
            return step, loss, -1
        if loss <= loss_stop:
            return step, loss, 1
        if step == max_steps:
            return step, loss, 0
        for p in range(kd * n):
            back[p] = resid[p]
        for i in range(d - 1, -1, -1):
            m, k = rows[i], cols[i]
            # grad = back (m x n) @ act_i^T (n x k)
            for a in range(m):
                for b in range(k):
                    s = 0.0
                    for t in range(n):
                        s += back[a * n + t] * acts[a_off[i] + b * n + t]
                    grad[a * k + b] = s
            if i > 0:
                # back <- W_i^T (k x m) @ back (m x n)
                for a in range(k):
                    for t in range(n):
                        s = 0.0
                        for b in range(m):
                            s += w[w_off[i] + b * k + a] * back[b * n + t]
                        back2[a * n + t] = s
                for p in range(k * n):
                    back[p] = back2[p]
            r = c_off[i + 1] - c_off[i]
            mn = m * k
            for j in range(r):
                s = 0.0
                base = b_off[i] + j * mn
                for p in range(mn):
                    s += basis[base + p] * grad[p]
                c[c_off[i] + j] -= rate * s
    return max_steps, 0.0, 0


def run_batch(coeffs, flat_bases, shapes, xs, ys, gamma, max_steps, loss_stop, div_loss):
    """Run every problem in turn; returns (final coeffs per layer, steps, losses, status)."""
    batch, n = xs.shape[0], xs.shape[2]
    sizes = [f.shape[0] for f in flat_bases]
    c_off = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    b_off = np.concatenate([[0], np.cumsum([f.size for f in flat_bases])]).astype(np.int64)
    basis = np.concatenate([np.ascontiguousarray(f, dtype=np.float64).ravel() for f in flat_bases])
    rows = np.array([s[0] for s in shapes], dtype=np.int64)
    cols = np.array([s[1] for s in shapes], dtype=np.int64)
    packed = np.concatenate([np.asarray(c, dtype=np.float64) for c in coeffs], axis=1)
    steps = np.zeros(batch, dtype=np.int64)
    losses = np.zeros(batch)
    status = np.zeros(batch, dtype=np.int64)
    for b in range(batch):
        c = packed[b].copy()
        st, loss, code = _run_one(c, c_off, basis, b_off, rows, cols,
                                  np.ascontiguousarray(xs[b], dtype=np.float64),
                                  np.ascontiguousarray(ys[b], dtype=np.float64),
                                  gamma / n, 0.5 / n, max_steps, loss_stop, div_loss)
        packed[b] = c
        steps[b], losses[b], status[b] = st, loss, code
    final = [packed[:, c_off[i]:c_off[i + 1]].copy() for i in range(len(sizes))]
    return final, steps, losses, status
