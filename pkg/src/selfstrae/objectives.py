"""Training objectives: leaf cross-entropy, contrastive, CECO and StrCSE.

``build_loss`` records the full forward pass for a batch on a fresh tape and
returns the scalar loss reference; the ``loss_*`` helpers evaluate single
terms on plain arrays.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tape
from .errors import VocabError
from .model import ModelParams, Objective
from .structure import Forest, forest_down, induce_batch

DIAGNOSTICS = Counter()


@dataclass
class BatchNodes:
    """Node-aligned encoder/decoder views of a batch."""

    up: np.ndarray
    down: np.ndarray
    leaf_targets: np.ndarray  # token id per node, -1 on internal nodes
    internal_mask: np.ndarray
    sentence_spans: np.ndarray  # node offsets, length n_sentences + 1
    forest: Forest | None = None

    @property
    def M(self):
        return self.up.shape[0]

    @property
    def I(self):  # noqa: E743
        return int(self.internal_mask.sum())

    @property
    def leaf_nodes(self):
        return np.flatnonzero(~self.internal_mask)


def encode_batch(params: ModelParams, sentences, workers=1) -> BatchNodes:
    forest, up = induce_batch(params, sentences, workers=workers)
    down = forest_down(params, forest, up)
    targets = np.full(forest.n_nodes, -1, dtype=np.int64)
    leaves = forest.left < 0
    targets[leaves] = forest.token_ids[forest.leaf_of[leaves]]
    return BatchNodes(up, down, targets, ~leaves, forest.node_off, forest)


# -- graph pieces ----------------------------------------------------------

def _ce_term(tape, refs, params, forest, down, per_sentence=False, fused=True):
    leaf_down = tape.lookup(down, forest.leaf_nodes)
    tied = params.config.tied
    W = refs["Psi"] if tied else refs["Gamma"]
    weights = None
    if per_sentence:
        lengths = forest.lengths
        weights = np.repeat(1.0 / (lengths * len(lengths)), lengths)
    if fused:
        return tape.softmax_xent(leaf_down, W, forest.token_ids, weights, transpose=tied)
    logits = tape.linear(leaf_down, W, transpose=tied)
    return tape.nll(tape.log_softmax(logits), forest.token_ids, weights)


def _contrastive_term(tape, a, b, tau, fused=True):
    """Symmetric tempered InfoNCE between aligned rows of refs ``a`` and ``b``."""
    M = tape.value(a).shape[0]
    if M == 0:
        DIAGNOSTICS["contrastive_skipped"] += 1
        return None
    if fused:
        return tape.info_nce(tape.normalize(a), tape.normalize(b), tau)
    A = tape.cosine_matrix(a, b)
    rows = tape.diagonal(tape.log_softmax(A, axis=1, tau=tau))
    cols = tape.diagonal(tape.log_softmax(A, axis=0, tau=tau))
    return tape.scale(tape.sum(tape.add(rows, cols)), -1.0 / (2 * M))


def _encode_pass(tape, refs, params, sentences, leaves, forest=None, workers=1):
    c = params.config
    up_val = None
    if forest is None:
        forest, up_val = induce_batch(params, sentences, leaves=tape.value(leaves), workers=workers)
    up = tape.compose_tree(leaves, refs["Phi"], refs["phi"], forest, c.k, c.u, up=up_val)
    down = tape.decompose_tree(up, refs["Theta"], refs["theta"], forest, c.k, c.u)
    return forest, up, down


def dropout_masks(shape, p, seed):
    """Two independent inverted-dropout masks drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    if p == 0.0:
        return np.ones(shape), np.ones(shape)
    keep = 1.0 - p
    return tuple((rng.random(shape) < keep) / keep for _ in range(2))


@dataclass
class LossGraph:
    tape: Tape
    loss: int
    parts: dict = field(default_factory=dict)
    forests: list = field(default_factory=list)
    masks: tuple | None = None
    refs: dict = field(default_factory=dict)

    @property
    def value(self):
        return float(self.tape.value(self.loss))

    def backward(self):
        return self.tape.backward(self.loss)


def build_loss(
    params: ModelParams,
    sentences,
    objective=None,
    *,
    tau=None,
    dropout_p=None,
    seed=0,
    forests=None,
    masks=None,
    per_sentence_ce=False,
    fused=True,
    workers=1,
    dense_dtype=np.float64,
) -> LossGraph:
    """Record one batch's forward pass and loss on a new tape.

    ``forests`` freezes the tree structure (one per pass) and ``masks``
    freezes StrCSE dropout; both are returned on the graph so a caller can
    replay the exact same computation, e.g. for finite differences.
    """
    c = params.config
    objective = Objective.parse(objective or c.objective)
    tau = c.tau if tau is None else tau
    p = c.dropout_p if dropout_p is None else dropout_p
    sentences = [np.asarray(s, dtype=np.int64) for s in sentences]
    token_ids = np.concatenate(sentences)
    if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= c.V):
        raise VocabError(f"token id outside [0, {c.V})")

    tape = Tape(dense_dtype)
    refs = {name: tape.param(name, arr) for name, arr in params.as_dict().items()}
    leaves = tape.lookup(refs["Psi"], token_ids)
    parts = {}

    if objective is Objective.STRCSE:
        if masks is None:
            masks = dropout_masks(tape.value(leaves).shape, p, seed)
        frozen = forests or (None, None)
        out_forests = []
        downs = []
        ce_refs = []
        for mask, forest in zip(masks, frozen):
            dropped = tape.mul(leaves, tape.const(mask))
            forest, _, down = _encode_pass(tape, refs, params, sentences, dropped, forest, workers)
            out_forests.append(forest)
            downs.append(down)
            ce_refs.append(_ce_term(tape, refs, params, forest, down, per_sentence_ce, fused))
        ce = tape.scale(tape.add(*ce_refs), 0.5)
        a = tape.lookup(downs[0], out_forests[0].internal_nodes)
        b = tape.lookup(downs[1], out_forests[1].internal_nodes)
        cont = _contrastive_term(tape, a, b, tau, fused)
        forests_used = out_forests
    else:
        forest = forests[0] if forests else None
        forest, up, down = _encode_pass(tape, refs, params, sentences, leaves, forest, workers)
        forests_used = [forest]
        ce = cont = None
        if objective in (Objective.CE, Objective.CECO):
            ce = _ce_term(tape, refs, params, forest, down, per_sentence_ce, fused)
        if objective is Objective.CONTRASTIVE:
            cont = _contrastive_term(tape, up, down, tau, fused)
        elif objective is Objective.CECO:
            sel = forest.internal_nodes
            cont = _contrastive_term(tape, tape.lookup(up, sel), tape.lookup(down, sel), tau, fused)

    if ce is not None:
        parts["ce"] = float(tape.value(ce))
    if objective in (Objective.CONTRASTIVE, Objective.CECO, Objective.STRCSE):
        parts["contrastive"] = 0.0 if cont is None else float(tape.value(cont))

    if objective is Objective.CE:
        total = ce
    elif objective is Objective.CONTRASTIVE:
        total = cont if cont is not None else tape.scale(tape.sum(leaves), 0.0)
    else:
        total = tape.scale(ce if cont is None else tape.add(ce, cont), 0.5)
    return LossGraph(tape, total, parts, forests_used, masks, refs)


# -- value-level helpers ---------------------------------------------------

def loss_ce(logits, targets, weights=None) -> float:
    """Mean negative log-softmax probability of each target."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise VocabError(f"target outside [0, {V})")
    t = Tape()
    x = t.const(logits)
    return float(t.value(t.nll(t.log_softmax(x), targets, weights)))


def loss_contrastive(up, down, tau, fused=True) -> float:
    up = np.atleast_2d(np.asarray(up, dtype=np.float64))
    down = np.atleast_2d(np.asarray(down, dtype=np.float64))
    if up.shape != down.shape:
        raise ValueError(f"up/down shapes differ: {up.shape} vs {down.shape}")
    t = Tape()
    ref = _contrastive_term(t, t.const(up), t.const(down), tau, fused)
    return 0.0 if ref is None else float(t.value(ref))


def loss_ceco(batch: BatchNodes, logits, tau) -> float:
    """Half the leaf cross-entropy plus half the internal-node contrastive loss."""
    ce = loss_ce(logits, batch.leaf_targets[batch.leaf_nodes])
    sel = batch.internal_mask
    cont = loss_contrastive(batch.up[sel], batch.down[sel], tau) if sel.any() else 0.0
    if not sel.any():
        DIAGNOSTICS["contrastive_skipped"] += 1
    return 0.5 * (ce + cont)


def loss_strcse(params: ModelParams, sentences, tau=None, dropout_p=None, seed=0) -> float:
    graph = build_loss(params, sentences, Objective.STRCSE, tau=tau, dropout_p=dropout_p, seed=seed)
    return graph.value


# -- gradient verification -------------------------------------------------

@dataclass
class ObjectiveCheck:
    objective: Objective
    max_rel_err: float
    n_configs: int
    n_checked: int
    tol: float
    worst_config: int | None = None

    @property
    def passed(self):
        return bool(self.max_rel_err < self.tol)


def random_tiny_case(seed, V=20, k=4, u=3, max_len=6, objective=Objective.CECO):
    """A small random model and batch for finite-difference checks.

    Biases and weights are jittered away from their initial values so every
    term of the gradient is exercised; ``tied`` alternates with the seed.
    """
    from .model import ModelConfig, new_model

    rng = np.random.default_rng(seed)
    cfg = ModelConfig(V=V, E=k * u, k=k, u=u, tied=bool(seed % 2), tau=float(rng.uniform(0.5, 1.5)),
                      objective=objective, dropout_p=0.2)
    params = new_model(cfg, seed)
    params = params.replace_arrays({n: a + 0.1 * rng.normal(size=a.shape) for n, a in params.as_dict().items()})
    n_sent = int(rng.integers(1, 4))
    sentences = [rng.integers(0, V, int(rng.integers(1, max_len + 1))) for _ in range(n_sent)]
    if all(s.shape[0] == 1 for s in sentences):
        sentences[0] = rng.integers(0, V, max_len)
    return params, sentences


def check_objective_gradients(objective, n_configs=20, seed=0, tol=1e-5, h=1e-6, fused=True):
    """Finite-difference check of one objective over random tiny configs.

    Structure and dropout masks are frozen after the first forward pass,
    so the loss is a smooth function of the parameters being perturbed.
    """
    from .autograd import grad_check

    objective = Objective.parse(objective)
    worst, worst_cfg, checked = 0.0, None, 0
    for i in range(n_configs):
        params, sentences = random_tiny_case(seed * 1000 + i, objective=objective)
        graph = build_loss(params, sentences, objective, seed=i, fused=fused)

        def builder(arrays, graph=graph, params=params, sentences=sentences):
            g = build_loss(params.replace_arrays(arrays), sentences, objective,
                           forests=graph.forests, masks=graph.masks, fused=fused)
            return g.tape, g.loss

        report = grad_check(builder, params.as_dict(), h=h, tol=tol)
        checked += report.n_checked
        if report.max_rel_err >= worst:
            worst, worst_cfg = report.max_rel_err, i
    return ObjectiveCheck(objective, worst, n_configs, checked, tol, worst_cfg)
