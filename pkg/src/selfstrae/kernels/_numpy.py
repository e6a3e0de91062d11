"""Pure-numpy versions of the tree kernels (same signatures as ``_numba``).

Induction keeps the per-merge Python loop; the tree passes are vectorised
level by level (nodes of equal height, or equal depth, are processed in one
batched matmul).
"""
import numpy as np


# Scores within this distance of the best one count as tied (leftmost wins).
# Repeated tokens tie exactly in real arithmetic but their rounded cosines can
# differ in the last bit, which would otherwise make the choice arbitrary.
TIE_TOL = 1e-12


def leftmost_best(sims):
    """Index of the first score within ``TIE_TOL`` of the maximum."""
    sims = np.asarray(sims)
    return int(np.argmax(sims >= sims.max() - TIE_TOL))


def _cosine_rows(a, b, k, u, per_channel):
    """Row-wise similarity of two (n, E) blocks plus a zero-norm count."""
    if per_channel:
        a3 = a.reshape(-1, k, u)
        b3 = b.reshape(-1, k, u)
        na = np.sqrt(np.einsum("nci,nci->nc", a3, a3))
        nb = np.sqrt(np.einsum("nci,nci->nc", b3, b3))
        dot = np.einsum("nci,nci->nc", a3, b3)
        bad = (na == 0.0) | (nb == 0.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            cos = np.where(bad, 0.0, dot / (na * nb))
        return cos.sum(axis=1) / k, int(bad.sum())
    na = np.sqrt(np.einsum("ni,ni->n", a, a))
    nb = np.sqrt(np.einsum("ni,ni->n", b, b))
    dot = np.einsum("ni,ni->n", a, b)
    bad = (na == 0.0) | (nb == 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(bad, 0.0, dot / (na * nb))
    return cos, int(bad.sum())


def _compose_rows(lv, rv, Phi, phi, k, u):
    n = lv.shape[0]
    cat = np.concatenate([lv.reshape(n, k, u), rv.reshape(n, k, u)], axis=2)
    return (cat @ Phi + phi).reshape(n, k * u)


def adjacent_cosines(frontier, k, u, per_channel):
    if frontier.shape[0] < 2:
        return np.empty(0), 0
    return _cosine_rows(frontier[:-1], frontier[1:], k, u, per_channel)


def induce_forest(leaves, leaf_off, Phi, phi, k, u, per_channel, up, left, right, parent, leaf_of):
    zeros = 0
    node = 0
    for s in range(leaf_off.shape[0] - 1):
        a, b = int(leaf_off[s]), int(leaf_off[s + 1])
        T = b - a
        base = node
        up[base:base + T] = leaves[a:b]
        left[base:base + T] = -1
        right[base:base + T] = -1
        parent[base:base + T] = -1
        leaf_of[base:base + T] = np.arange(a, b)
        frontier = list(range(base, base + T))
        sims, z = _cosine_rows(up[base:base + T - 1], up[base + 1:base + T], k, u, per_channel)
        zeros += z
        sims = list(sims)
        for step in range(T - 1):
            best = leftmost_best(sims)
            p = base + T + step
            lnode, rnode = frontier[best], frontier[best + 1]
            up[p] = _compose_rows(up[lnode][None], up[rnode][None], Phi, phi, k, u)[0]
            left[p], right[p], parent[p], leaf_of[p] = lnode, rnode, -1, -1
            parent[lnode] = p
            parent[rnode] = p
            frontier[best:best + 2] = [p]
            del sims[best]
            if best >= 1:
                val, z = _cosine_rows(up[frontier[best - 1]][None], up[p][None], k, u, per_channel)
                sims[best - 1] = val[0]
                zeros += z
            if best <= len(frontier) - 2:
                val, z = _cosine_rows(up[p][None], up[frontier[best + 1]][None], k, u, per_channel)
                sims[best] = val[0]
                zeros += z
        node = base + 2 * T - 1
    return zeros


def _heights(left, right):
    h = np.zeros(left.shape[0], dtype=np.int64)
    for n in np.flatnonzero(left >= 0):
        h[n] = 1 + max(h[left[n]], h[right[n]])
    return h


def _depths(left, right, parent):
    d = np.zeros(left.shape[0], dtype=np.int64)
    for n in range(left.shape[0] - 1, -1, -1):
        if parent[n] >= 0:
            d[n] = d[parent[n]] + 1
    return d


def _groups(key, mask):
    idx = np.flatnonzero(mask)
    order = np.argsort(key[idx], kind="stable")
    idx = idx[order]
    vals = key[idx]
    cuts = np.flatnonzero(np.diff(vals)) + 1
    return np.split(idx, cuts) if idx.size else []


def compose_forward(leaves, left, right, leaf_of, Phi, phi, k, u, up):
    is_leaf = left < 0
    up[is_leaf] = leaves[leaf_of[is_leaf]]
    for nodes in _groups(_heights(left, right), ~is_leaf):
        up[nodes] = _compose_rows(up[left[nodes]], up[right[nodes]], Phi, phi, k, u)


def compose_backward(g_up, up, left, right, leaf_of, Phi, k, u, g_leaves, g_Phi, g_phi):
    is_leaf = left < 0
    for nodes in reversed(_groups(_heights(left, right), ~is_leaf)):
        n = nodes.shape[0]
        g = g_up[nodes].reshape(n, k, u)
        lv = up[left[nodes]].reshape(n, k, u)
        rv = up[right[nodes]].reshape(n, k, u)
        g_Phi[:u] += np.einsum("nci,ncj->ij", lv, g)
        g_Phi[u:] += np.einsum("nci,ncj->ij", rv, g)
        g_phi += g.sum(axis=(0, 1))
        np.add.at(g_up, left[nodes], (g @ Phi[:u].T).reshape(n, k * u))
        np.add.at(g_up, right[nodes], (g @ Phi[u:].T).reshape(n, k * u))
    np.add.at(g_leaves, leaf_of[is_leaf], g_up[is_leaf])


def decompose_forward(up, left, right, parent, Theta, theta, k, u, down):
    roots = parent < 0
    down[roots] = up[roots]
    for nodes in _groups(_depths(left, right, parent), left >= 0):
        n = nodes.shape[0]
        y = down[nodes].reshape(n, k, u) @ Theta + theta
        down[left[nodes]] = y[:, :, :u].reshape(n, k * u)
        down[right[nodes]] = y[:, :, u:].reshape(n, k * u)


def decompose_backward(g_down, down, left, right, parent, Theta, k, u, g_up, g_Theta, g_theta):
    for nodes in reversed(_groups(_depths(left, right, parent), left >= 0)):
        n = nodes.shape[0]
        gy = np.concatenate(
            [g_down[left[nodes]].reshape(n, k, u), g_down[right[nodes]].reshape(n, k, u)], axis=2
        )
        p = down[nodes].reshape(n, k, u)
        g_Theta += np.einsum("nci,ncj->ij", p, gy)
        g_theta += gy.sum(axis=(0, 1))
        g_down[nodes] += (gy @ Theta.T).reshape(n, k * u)
    roots = parent < 0
    g_up[roots] += g_down[roots]



def row_col_sums(P, row_sum, col_sum):
    row_sum[:] = P.sum(axis=1)
    col_sum += P.sum(axis=0)


def contrastive_scale(P, inv_row, inv_col, r0, coef):
    P *= inv_row[:, None] + inv_col[None, :]
    P *= coef
    rows = np.arange(P.shape[0])
    P[rows, r0 + rows] -= 2.0 * coef
