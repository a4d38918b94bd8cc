"""Compiled inner loops for belief propagation and edge statistics."""

import numba as nb
import numpy as np


@nb.njit(cache=True)
def _rescale(v, row, q):
    # divide a row by its max so long products neither underflow nor overflow
    m = 0.0
    for s in range(q):
        if v[row, s] > m:
            m = v[row, s]
    if m > 0.0:
        for s in range(q):
            v[row, s] /= m


@nb.njit(cache=True)
def bp_sweep_kernel(order, indptr, out_edges, labels, affinity, prior, msg, marg, damping):
    """One asynchronous sweep; vertices in ``order`` refresh all outgoing messages.

    ``prior[s]`` is proportional to ``gamma[s] * exp(-field[s])``. Cavity
    products come from prefix and suffix products over the incoming factors,
    each row rescaled to max 1, so exact zeros are kept without division.
    Returns the largest L1 change of any message and the first degenerate
    directed edge (or -1).
    """
    q = msg.shape[1]
    max_deg = 0
    for i in range(len(indptr) - 1):
        d = indptr[i + 1] - indptr[i]
        if d > max_deg:
            max_deg = d
    fac = np.empty((max_deg, q))
    pre = np.empty((max_deg + 1, q))
    suf = np.empty((max_deg + 1, q))
    new = np.empty(q)
    max_change = 0.0

    for i in order:
        start = indptr[i]
        deg = indptr[i + 1] - start
        for t in range(deg):
            e_in = out_edges[start + t] ^ 1
            a = labels[e_in >> 1]
            for s in range(q):
                acc = 0.0
                for r in range(q):
                    acc += msg[e_in, r] * affinity[a, r, s]
                fac[t, s] = acc
            _rescale(fac, t, q)
        for s in range(q):
            pre[0, s] = prior[s]
            suf[deg, s] = 1.0
        for t in range(deg):
            for s in range(q):
                pre[t + 1, s] = pre[t, s] * fac[t, s]
            _rescale(pre, t + 1, q)
        for t in range(deg - 1, -1, -1):
            for s in range(q):
                suf[t, s] = suf[t + 1, s] * fac[t, s]
            _rescale(suf, t, q)

        z = 0.0
        for s in range(q):
            z += pre[deg, s]
        if not z > 0.0:
            # contradictory evidence at vertex i; report via its first out-edge
            return max_change, out_edges[start] if deg > 0 else -1
        for s in range(q):
            marg[i, s] = pre[deg, s] / z

        for t in range(deg):
            e_out = out_edges[start + t]
            z = 0.0
            for s in range(q):
                new[s] = pre[t, s] * suf[t + 1, s]
                z += new[s]
            if not z > 0.0:
                return max_change, e_out
            change = 0.0
            for s in range(q):
                v = (1.0 - damping) * new[s] / z + damping * msg[e_out, s]
                change += abs(v - msg[e_out, s])
                msg[e_out, s] = v
            if change > max_change:
                max_change = change
    return max_change, -1


@nb.njit(cache=True)
def edge_overlap_kernel(msg, W_stack, labels):
    """``X[m] = psi^{i->j} W^a psi^{j->i}`` for every undirected edge ``m``."""
    n_edges = labels.shape[0]
    q = msg.shape[1]
    X = np.empty(n_edges)
    for m in range(n_edges):
        a = labels[m]
        acc = 0.0
        for s in range(q):
            ps = msg[2 * m, s]
            if ps == 0.0:
                continue
            row = 0.0
            for t in range(q):
                row += W_stack[a, s, t] * msg[2 * m + 1, t]
            acc += ps * row
        X[m] = acc
    return X


@nb.njit(cache=True)
def two_point_kernel(msg, affinity, labels, p):
    """Per-label sum over edges of the normalized two-point marginals, symmetrized."""
    q = msg.shape[1]
    M = np.zeros((p, q, q))
    joint = np.empty((q, q))
    for m in range(labels.shape[0]):
        a = labels[m]
        z = 0.0
        for s in range(q):
            for t in range(q):
                v = msg[2 * m, s] * affinity[a, s, t] * msg[2 * m + 1, t]
                joint[s, t] = v
                z += v
        if z <= 0.0:
            continue
        for s in range(q):
            for t in range(q):
                w = joint[s, t] / z
                M[a, s, t] += w
                M[a, t, s] += w
    return M
