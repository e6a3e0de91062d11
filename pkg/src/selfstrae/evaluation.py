"""Zero-shot pair evaluation and uniformity/alignment diagnostics."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist
from scipy.special import logsumexp
from scipy.stats import spearmanr

from .data import PairDataset, Tokenizer
from .errors import EvaluationError, UndefinedCorrelation
from .model import ModelParams
from .objectives import encode_batch
from .structure import induce_batch

RESULTS_COLUMNS = ("dataset", "objective", "k", "u", "seed", "score")


@dataclass
class EvalReport:
    dataset: str
    n_pairs: int
    spearman_x100: float
    skipped: int = 0
    meta: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def spearman(pred, gold) -> float:
    """Spearman correlation x100 (average ranks for ties)."""
    pred = np.asarray(pred, dtype=np.float64)
    gold = np.asarray(gold, dtype=np.float64)
    if pred.shape != gold.shape or pred.ndim != 1:
        raise EvaluationError(f"pred and gold must be equal-length vectors, got {pred.shape} and {gold.shape}")
    if pred.shape[0] < 2:
        raise EvaluationError("spearman needs at least 2 pairs")
    if np.all(pred == pred[0]):
        raise UndefinedCorrelation("predictions are constant; rank correlation is undefined")
    if np.all(gold == gold[0]):
        raise UndefinedCorrelation("gold scores are constant; rank correlation is undefined")
    return 100.0 * float(spearmanr(pred, gold).statistic)


def encode_texts(params: ModelParams, tokenizer: Tokenizer, texts, leaf_rows=False, workers=1):
    """Root embeddings for many texts; rows for texts with no tokens are ``None``.

    With ``leaf_rows`` a single-token text returns its raw embedding row
    (identical to the root of a one-leaf tree, so this only skips the call).
    """
    ids = [tokenizer.encode(t) for t in texts]
    keep = [i for i, s in enumerate(ids) if s.shape[0] > 0]
    out = [None] * len(texts)
    if not keep:
        return out
    if leaf_rows:
        single = [i for i in keep if ids[i].shape[0] == 1]
        for i in single:
            out[i] = params.Psi[ids[i][0]].copy()
        keep = [i for i in keep if ids[i].shape[0] > 1]
        if not keep:
            return out
    forest, up = induce_batch(params, [ids[i] for i in keep], workers=workers)
    roots = forest.node_off[1:] - 1
    for i, r in zip(keep, roots):
        out[i] = up[r]
    return out


def encode_text(params: ModelParams, tokenizer: Tokenizer, text):
    """Flattened upward root embedding of ``text`` (``None`` if it has no tokens)."""
    return encode_texts(params, tokenizer, [text])[0]


def _cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    if np.array_equal(a, b):
        return 1.0  # exact, so identical texts give identical scores
    return float(a @ b / (na * nb))


def predict_pairs(params, tokenizer, dataset: PairDataset, leaf_rows=False, workers=1):
    """Cosine per row, or ``nan`` where either side has no tokens."""
    texts = list(dict.fromkeys(dataset.text_a + dataset.text_b))
    vecs = dict(zip(texts, encode_texts(params, tokenizer, texts, leaf_rows, workers)))
    pred = np.full(len(dataset), np.nan)
    for i, (a, b) in enumerate(zip(dataset.text_a, dataset.text_b)):
        va, vb = vecs[a], vecs[b]
        if va is not None and vb is not None:
            pred[i] = _cosine(va, vb)
    return pred


def eval_pairs(params: ModelParams, tokenizer: Tokenizer, dataset: PairDataset, leaf_rows=False, workers=1) -> EvalReport:
    pred = predict_pairs(params, tokenizer, dataset, leaf_rows, workers)
    ok = ~np.isnan(pred)
    skipped = int((~ok).sum())
    if skipped * 2 > len(dataset):
        raise EvaluationError(f"{dataset.name}: {skipped} of {len(dataset)} rows have no tokens")
    score = spearman(pred[ok], dataset.gold[ok])
    return EvalReport(dataset.name, int(ok.sum()), score, skipped)


def _unit_rows(x):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def alignment(up, down) -> float:
    """Mean squared distance between normalised positive pairs."""
    a, b = _unit_rows(up), _unit_rows(down)
    if a.shape != b.shape:
        raise EvaluationError(f"up/down shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean(np.sum((a - b) ** 2, axis=1)))


def uniformity(points) -> float:
    """Log mean of exp(-2 * squared distance) over distinct pairs of normalised points."""
    x = _unit_rows(points)
    if x.shape[0] < 2:
        raise EvaluationError("uniformity needs at least 2 points")
    d2 = pdist(x, "sqeuclidean")
    return float(logsumexp(-2.0 * d2) - np.log(d2.shape[0]))


def uniformity_alignment(up, down):
    """``(uniformity, alignment)``; uniformity pools the up and down vectors."""
    up = np.atleast_2d(np.asarray(up, dtype=np.float64))
    down = np.atleast_2d(np.asarray(down, dtype=np.float64))
    return uniformity(np.vstack([up, down])), alignment(up, down)


def sample_nodes(params: ModelParams, sentences, n=2048, seed=0, workers=1):
    """Up/down embeddings of ``n`` nodes drawn without replacement from all nodes."""
    batch = encode_batch(params, sentences, workers=workers)
    rng = np.random.default_rng(seed)
    take = np.sort(rng.choice(batch.M, size=min(n, batch.M), replace=False))
    return batch.up[take], batch.down[take]


def append_results(path, dataset, objective, k, u, seed, score):
    """Append one row to the results table, writing the header for a new file."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(RESULTS_COLUMNS)
        w.writerow([dataset, objective, k, u, seed, repr(float(score))])
