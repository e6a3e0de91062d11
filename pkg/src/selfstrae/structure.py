"""Greedy structure induction and the upward/downward tree passes."""
from __future__ import annotations

from collections import Counter, namedtuple
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import InputError, VocabError
from .model import ModelParams

# Diagnostic counters; "zero_norm" counts similarity evaluations that hit a
# zero vector and were scored as 0.
DIAGNOSTICS = Counter()

Leaf = namedtuple("Leaf", "position token_id")
Internal = namedtuple("Internal", "left right merge_step")


@dataclass(frozen=True)
class MergeTree:
    """Binary tree over one sentence.

    Nodes ``0..T-1`` are the leaves in token order; node ``T+s`` is the
    parent created by merge step ``s``. The root is therefore ``2T-2``.
    """

    left: np.ndarray
    right: np.ndarray
    token_ids: np.ndarray

    @property
    def sentence_len(self):
        return int(self.token_ids.shape[0])

    @property
    def root(self):
        return 2 * self.sentence_len - 2

    @property
    def n_nodes(self):
        return 2 * self.sentence_len - 1

    def is_leaf(self, node):
        return self.left[node] < 0

    def merge_step(self, node):
        return None if self.is_leaf(node) else int(node) - self.sentence_len

    @property
    def nodes(self):
        out = []
        for n in range(self.n_nodes):
            if self.is_leaf(n):
                out.append(Leaf(n, int(self.token_ids[n])))
            else:
                out.append(Internal(int(self.left[n]), int(self.right[n]), n - self.sentence_len))
        return out

    def span(self, node):
        """Half-open token range covered by ``node``."""
        if self.is_leaf(node):
            return int(node), int(node) + 1
        lo, _ = self.span(self.left[node])
        _, hi = self.span(self.right[node])
        return lo, hi

    def brackets(self):
        """Tuple form of the tree, e.g. ``(0, (1, 2))`` over token positions."""

        def rec(n):
            if self.is_leaf(n):
                return int(n)
            return (rec(self.left[n]), rec(self.right[n]))

        return rec(self.root)


@dataclass
class EncodedSentence:
    tree: MergeTree
    up: np.ndarray
    down: np.ndarray | None = None


@dataclass
class Forest:
    """Flat node arrays for a batch of trees (layout described in ``kernels._numba``)."""

    token_ids: np.ndarray
    leaf_off: np.ndarray
    left: np.ndarray
    right: np.ndarray
    parent: np.ndarray
    leaf_of: np.ndarray

    @property
    def n_sentences(self):
        return self.leaf_off.shape[0] - 1

    @property
    def n_leaves(self):
        return int(self.leaf_off[-1])

    @property
    def n_nodes(self):
        return self.left.shape[0]

    @property
    def lengths(self):
        return np.diff(self.leaf_off)

    @property
    def node_off(self):
        off = np.zeros(self.n_sentences + 1, dtype=np.int64)
        np.cumsum(2 * self.lengths - 1, out=off[1:])
        return off

    @property
    def leaf_nodes(self):
        """Node index of every leaf, in leaf (token) order."""
        out = np.empty(self.n_leaves, dtype=np.int64)
        nodes = np.flatnonzero(self.left < 0)
        out[self.leaf_of[nodes]] = nodes
        return out

    @property
    def internal_nodes(self):
        """Internal nodes, per sentence in merge order."""
        return np.flatnonzero(self.left >= 0)

    @property
    def roots(self):
        return np.flatnonzero(self.parent < 0)

    def tree(self, j):
        lo, hi = self.node_off[j], self.node_off[j + 1]
        shift = lo
        left = self.left[lo:hi].copy()
        right = self.right[lo:hi].copy()
        internal = left >= 0
        left[internal] -= shift
        right[internal] -= shift
        ids = self.token_ids[self.leaf_off[j]:self.leaf_off[j + 1]]
        return MergeTree(left, right, ids.copy())


def _as_rows(frontier):
    arr = np.asarray(frontier, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.reshape(arr.shape[0], -1)
    return arr


def adjacent_cosines(frontier, k=None, u=None, per_channel=False):
    """Cosines between neighbouring frontier entries (flattened unless ``per_channel``)."""
    rows = _as_rows(frontier)
    if rows.shape[0] < 2:
        raise InputError("adjacent_cosines needs at least two embeddings")
    if per_channel and (k is None or u is None):
        raise InputError("per-channel scoring needs k and u")
    k = k or 1
    u = u or rows.shape[1]
    out, zeros = kernels.adjacent_cosines(rows, k, u, per_channel)
    DIAGNOSTICS["zero_norm"] += zeros
    return np.asarray(out)


def _check_ids(params, ids, max_len=None):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.shape[0] == 0:
        raise InputError("cannot induce a tree over an empty sentence")
    if max_len is not None and ids.shape[0] > max_len:
        raise InputError(f"sentence of length {ids.shape[0]} exceeds max_len={max_len}")
    if ids.min() < 0 or ids.max() >= params.config.V:
        raise VocabError(f"token id outside [0, {params.config.V})")
    return ids


def _induce_chunk(params, leaves, leaf_off):
    c = params.config
    return kernels.induce(leaves, leaf_off, params.Phi, params.phi, c.k, c.u, c.merge_score == "channel")


def induce_batch(params: ModelParams, sentences, leaves=None, workers=1, max_len=None):
    """Induce trees for a batch; returns ``(forest, up)``.

    ``leaves`` overrides the embedding lookup (used when leaf embeddings are
    perturbed, e.g. by dropout). With ``workers > 1`` sentence chunks run on
    a thread pool and are joined back in input order.
    """
    sentences = [_check_ids(params, s, max_len) for s in sentences]
    if not sentences:
        raise InputError("empty batch")
    lengths = np.array([s.shape[0] for s in sentences], dtype=np.int64)
    leaf_off = np.zeros(len(sentences) + 1, dtype=np.int64)
    np.cumsum(lengths, out=leaf_off[1:])
    token_ids = np.concatenate(sentences)
    if leaves is None:
        leaves = params.Psi[token_ids]
    leaves = np.asarray(leaves, dtype=np.float64)

    if workers <= 1 or len(sentences) < 2 * workers:
        up, left, right, parent, leaf_of, zeros = _induce_chunk(params, leaves, leaf_off)
    else:
        bounds = np.linspace(0, len(sentences), workers + 1).astype(int)
        jobs = []
        for a, b in zip(bounds[:-1], bounds[1:]):
            sub_off = leaf_off[a:b + 1] - leaf_off[a]
            jobs.append((leaves[leaf_off[a]:leaf_off[b]], sub_off))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda job: _induce_chunk(params, *job), jobs))
        ups, lefts, rights, parents, leafs = [], [], [], [], []
        node_base = 0
        for (a, _), part in zip(zip(bounds[:-1], bounds[1:]), parts):
            p_up, p_left, p_right, p_parent, p_leaf, _ = part
            shift = lambda x: np.where(x >= 0, x + node_base, x)  # noqa: E731
            ups.append(p_up)
            lefts.append(shift(p_left))
            rights.append(shift(p_right))
            parents.append(shift(p_parent))
            leafs.append(np.where(p_leaf >= 0, p_leaf + leaf_off[a], p_leaf))
            node_base += p_up.shape[0]
        up = np.concatenate(ups)
        left, right = np.concatenate(lefts), np.concatenate(rights)
        parent, leaf_of = np.concatenate(parents), np.concatenate(leafs)
        zeros = sum(part[5] for part in parts)
    DIAGNOSTICS["zero_norm"] += zeros
    forest = Forest(token_ids, leaf_off, left, right, parent, leaf_of)
    return forest, up


def forest_up(params: ModelParams, forest: Forest, leaves=None):
    """Recompute upward embeddings over a fixed (frozen) structure."""
    c = params.config
    if leaves is None:
        leaves = params.Psi[forest.token_ids]
    return kernels.tree_up(leaves, forest.left, forest.right, forest.leaf_of, params.Phi, params.phi, c.k, c.u)


def forest_down(params: ModelParams, forest: Forest, up):
    c = params.config
    return kernels.tree_down(up, forest.left, forest.right, forest.parent, params.Theta, params.theta, c.k, c.u)


def induce(params: ModelParams, token_ids, max_len=None, leaves=None) -> EncodedSentence:
    """Greedy merge of the most similar adjacent pair until one node remains."""
    forest, up = induce_batch(params, [token_ids], leaves=leaves, max_len=max_len)
    return EncodedSentence(forest.tree(0), up)


def decode(params: ModelParams, enc: EncodedSentence) -> EncodedSentence:
    """Fill downward embeddings top-down; the root is shared with the encoder."""
    t = enc.tree
    parent = np.full(t.n_nodes, -1, dtype=np.int64)
    internal = np.flatnonzero(t.left >= 0)
    parent[t.left[internal]] = internal
    parent[t.right[internal]] = internal
    c = params.config
    down = kernels.tree_down(enc.up, t.left, t.right, parent, params.Theta, params.theta, c.k, c.u)
    return EncodedSentence(t, enc.up, down)


def to_bracket(tree: MergeTree, tokens) -> str:
    tokens = list(tokens)
    if len(tokens) != tree.sentence_len:
        raise InputError(f"got {len(tokens)} tokens for a tree over {tree.sentence_len}")

    def rec(n):
        if tree.is_leaf(n):
            return tokens[n]
        return f"({rec(tree.left[n])} {rec(tree.right[n])})"

    return rec(tree.root)
