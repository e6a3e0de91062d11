"""Independent reference implementations used as test oracles.

Each one is a direct, slow transcription of the definition it checks and
shares no code with the package beyond the model primitives.
"""
import math

import numpy as np


def cosine(a, b):
    a, b = np.ravel(a), np.ravel(b)
    na, nb = math.sqrt(float(a @ a)), math.sqrt(float(b @ b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b) / (na * nb)


def brute_force_tree(leaves, compose_fn, transform=lambda x: x, tie_tol=1e-12):
    """Greedy merge recomputing every adjacent cosine from scratch each step.

    Scores within ``tie_tol`` of the maximum are ties, resolved leftmost.
    Returns ``(merges, ups)``: merges as (left_node, right_node) per step with
    leaves numbered 0..T-1 and step s creating node T+s; ups maps node ->
    upward vector.
    """
    T = len(leaves)
    frontier = [(i, np.asarray(v, dtype=np.float64)) for i, v in enumerate(leaves)]
    ups = {i: v for i, v in frontier}
    merges = []
    while len(frontier) > 1:
        scores = [transform(cosine(frontier[i][1], frontier[i + 1][1])) for i in range(len(frontier) - 1)]
        top = max(scores)
        best = next(i for i, s in enumerate(scores) if s >= top - tie_tol)
        (ln, lv), (rn, rv) = frontier[best], frontier[best + 1]
        node = T + len(merges)
        pv = compose_fn(lv, rv)
        merges.append((ln, rn))
        ups[node] = pv
        frontier[best:best + 2] = [(node, pv)]
    return merges, ups


def infonce_literal(up, down, tau):
    """Symmetric tempered InfoNCE written out term by term."""
    M = len(up)
    A = [[cosine(up[i], down[j]) for j in range(M)] for i in range(M)]
    total = 0.0
    for i in range(M):
        row = [math.exp(A[i][j] / tau) for j in range(M)]
        total += math.log(row[i] / sum(row))
    for j in range(M):
        col = [math.exp(A[i][j] / tau) for i in range(M)]
        total += math.log(col[j] / sum(col))
    return -total / (2 * M)


def cross_entropy_literal(logits, targets):
    total = 0.0
    for row, t in zip(logits, targets):
        m = max(row)
        z = sum(math.exp(x - m) for x in row)
        total += -(row[t] - m - math.log(z))
    return total / len(targets)


def average_ranks(x):
    """1-based ranks with ties given the mean of their positions."""
    order = sorted(range(len(x)), key=lambda i: x[i])
    ranks = [0.0] * len(x)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and x[order[j + 1]] == x[order[i]]:
            j += 1
        for t in range(i, j + 1):
            ranks[order[t]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_literal(a, b):
    ra, rb = average_ranks(a), average_ranks(b)
    n = len(a)
    ma, mb = sum(ra) / n, sum(rb) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(ra, rb))
    va = math.sqrt(sum((x - ma) ** 2 for x in ra))
    vb = math.sqrt(sum((y - mb) ** 2 for y in rb))
    return 100.0 * cov / (va * vb)


def adam_literal(p, g, m, v, t, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar-loop Adam step, written independently of the package."""
    p, g, m, v = (np.array(a, dtype=np.float64, copy=True).ravel() for a in (p, g, m, v))
    shape_out = p.shape
    t = t + 1
    for i in range(p.size):
        m[i] = b1 * m[i] + (1 - b1) * g[i]
        v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
        mh = m[i] / (1 - b1 ** t)
        vh = v[i] / (1 - b2 ** t)
        p[i] = p[i] - lr * mh / (math.sqrt(vh) + eps)
    return p.reshape(shape_out), m, v, t
