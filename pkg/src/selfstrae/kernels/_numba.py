"""Compiled tree kernels.

Node layout used by every kernel: sentence ``s`` owns the node rows
``node_off[s]:node_off[s+1]``; its ``T`` leaves come first in token order and
its ``T-1`` internal nodes follow in merge order, so the last row of a span
is the root and every child row precedes its parent.
"""
import numpy as np
from numba import njit

from ._numpy import TIE_TOL


@njit(cache=True, nogil=True)
def _cosine_flat(a, b):
    dot = 0.0
    na = 0.0
    nb = 0.0
    for i in range(a.shape[0]):
        dot += a[i] * b[i]
        na += a[i] * a[i]
        nb += b[i] * b[i]
    if na == 0.0 or nb == 0.0:
        return 0.0, 1
    return dot / (np.sqrt(na) * np.sqrt(nb)), 0


@njit(cache=True, nogil=True)
def _cosine_channel(a, b, k, u):
    total = 0.0
    zeros = 0
    for c in range(k):
        dot = 0.0
        na = 0.0
        nb = 0.0
        for i in range(c * u, (c + 1) * u):
            dot += a[i] * b[i]
            na += a[i] * a[i]
            nb += b[i] * b[i]
        if na == 0.0 or nb == 0.0:
            zeros += 1
        else:
            total += dot / (np.sqrt(na) * np.sqrt(nb))
    return total / k, zeros


@njit(cache=True, nogil=True)
def _score(a, b, k, u, per_channel):
    if per_channel:
        return _cosine_channel(a, b, k, u)
    return _cosine_flat(a, b)


@njit(cache=True, nogil=True)
def _compose_row(lv, rv, Phi, phi, k, u, out):
    for c in range(k):
        base = c * u
        for j in range(u):
            acc = 0.0
            for i in range(u):
                acc += lv[base + i] * Phi[i, j]
            for i in range(u):
                acc += rv[base + i] * Phi[u + i, j]
            out[base + j] = acc + phi[j]


@njit(cache=True, nogil=True)
def adjacent_cosines(frontier, k, u, per_channel):
    n = frontier.shape[0]
    out = np.empty(max(n - 1, 0))
    zeros = 0
    for i in range(n - 1):
        s, z = _score(frontier[i], frontier[i + 1], k, u, per_channel)
        out[i] = s
        zeros += z
    return out, zeros


@njit(cache=True, nogil=True)
def induce_forest(leaves, leaf_off, Phi, phi, k, u, per_channel, up, left, right, parent, leaf_of):
    """Greedy adjacent merging for every sentence of a batch.

    Adjacent similarities are cached; a merge only refreshes the two pairs
    that touch the new parent. Returns the number of zero-norm encounters.
    """
    n_sent = leaf_off.shape[0] - 1
    zeros = 0
    node = 0
    for s in range(n_sent):
        a = leaf_off[s]
        T = leaf_off[s + 1] - a
        base = node
        for i in range(T):
            up[base + i, :] = leaves[a + i, :]
            left[base + i] = -1
            right[base + i] = -1
            parent[base + i] = -1
            leaf_of[base + i] = a + i
        frontier = np.empty(T, np.int64)
        for i in range(T):
            frontier[i] = base + i
        sims = np.empty(max(T - 1, 1))
        for i in range(T - 1):
            val, z = _score(up[base + i], up[base + i + 1], k, u, per_channel)
            sims[i] = val
            zeros += z
        n = T
        for step in range(T - 1):
            best_val = sims[0]
            for i in range(1, n - 1):
                if sims[i] > best_val:
                    best_val = sims[i]
            best = 0
            while sims[best] < best_val - TIE_TOL:
                best += 1
            p = base + T + step
            lnode = frontier[best]
            rnode = frontier[best + 1]
            _compose_row(up[lnode], up[rnode], Phi, phi, k, u, up[p])
            left[p] = lnode
            right[p] = rnode
            parent[p] = -1
            leaf_of[p] = -1
            parent[lnode] = p
            parent[rnode] = p
            frontier[best] = p
            for i in range(best + 1, n - 1):
                frontier[i] = frontier[i + 1]
            for i in range(best + 1, n - 2):
                sims[i] = sims[i + 1]
            n -= 1
            if best >= 1:
                val, z = _score(up[frontier[best - 1]], up[p], k, u, per_channel)
                sims[best - 1] = val
                zeros += z
            if best <= n - 2:
                val, z = _score(up[p], up[frontier[best + 1]], k, u, per_channel)
                sims[best] = val
                zeros += z
        node = base + 2 * T - 1
    return zeros


@njit(cache=True, nogil=True)
def compose_forward(leaves, left, right, leaf_of, Phi, phi, k, u, up):
    for n in range(left.shape[0]):
        if left[n] < 0:
            up[n, :] = leaves[leaf_of[n], :]
        else:
            _compose_row(up[left[n]], up[right[n]], Phi, phi, k, u, up[n])


@njit(cache=True, nogil=True)
def compose_backward(g_up, up, left, right, leaf_of, Phi, k, u, g_leaves, g_Phi, g_phi):
    """Accumulate into ``g_leaves``, ``g_Phi``, ``g_phi``; ``g_up`` is consumed."""
    for n in range(left.shape[0] - 1, -1, -1):
        if left[n] < 0:
            g_leaves[leaf_of[n], :] += g_up[n, :]
            continue
        lnode = left[n]
        rnode = right[n]
        for c in range(k):
            base = c * u
            for j in range(u):
                g = g_up[n, base + j]
                if g == 0.0:
                    continue
                g_phi[j] += g
                for i in range(u):
                    g_Phi[i, j] += up[lnode, base + i] * g
                    g_Phi[u + i, j] += up[rnode, base + i] * g
                    g_up[lnode, base + i] += Phi[i, j] * g
                    g_up[rnode, base + i] += Phi[u + i, j] * g


@njit(cache=True, nogil=True)
def decompose_forward(up, left, right, parent, Theta, theta, k, u, down):
    for n in range(left.shape[0] - 1, -1, -1):
        if parent[n] < 0:
            down[n, :] = up[n, :]
        if left[n] < 0:
            continue
        lnode = left[n]
        rnode = right[n]
        for c in range(k):
            base = c * u
            for j in range(2 * u):
                acc = 0.0
                for i in range(u):
                    acc += down[n, base + i] * Theta[i, j]
                acc += theta[j]
                if j < u:
                    down[lnode, base + j] = acc
                else:
                    down[rnode, base + j - u] = acc


@njit(cache=True, nogil=True)
def decompose_backward(g_down, down, left, right, parent, Theta, k, u, g_up, g_Theta, g_theta):
    """Children precede parents, so an ascending sweep sees complete child grads."""
    for n in range(left.shape[0]):
        if left[n] >= 0:
            lnode = left[n]
            rnode = right[n]
            for c in range(k):
                base = c * u
                for j in range(2 * u):
                    if j < u:
                        g = g_down[lnode, base + j]
                    else:
                        g = g_down[rnode, base + j - u]
                    if g == 0.0:
                        continue
                    g_theta[j] += g
                    for i in range(u):
                        g_Theta[i, j] += down[n, base + i] * g
                        g_down[n, base + i] += Theta[i, j] * g
        if parent[n] < 0:
            g_up[n, :] += g_down[n, :]


# -- dense softmax blocks --------------------------------------------------

@njit(cache=True, nogil=True)
def row_col_sums(P, row_sum, col_sum):
    """Row sums into ``row_sum``; column sums added to ``col_sum``."""
    n, m = P.shape
    for i in range(n):
        acc = 0.0
        for j in range(m):
            acc += P[i, j]
            col_sum[j] += P[i, j]
        row_sum[i] = acc


@njit(cache=True, nogil=True)
def contrastive_scale(P, inv_row, inv_col, r0, coef):
    """In place: ``P_ij <- coef * (P_ij * (inv_row_i + inv_col_j) - 2 [j == r0 + i])``."""
    n, m = P.shape
    for i in range(n):
        a = inv_row[i]
        for j in range(m):
            P[i, j] = coef * P[i, j] * (a + inv_col[j])
        P[i, r0 + i] -= 2.0 * coef
