"""Batching, Adam, and the epoch loop with metric logging and checkpoints."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import DEFAULT_MAX_LEN, AdamState, save_checkpoint
from .errors import ConfigError, NumericError
from .model import ModelConfig, ModelParams, Objective, new_model
from .objectives import build_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 15
    batch_size: int = 512
    tau: float = 1.2
    E: int = 256
    k: int = 128
    u: int = 2
    objective: Objective = Objective.CECO
    seed: int = 0
    max_len: int = DEFAULT_MAX_LEN
    dropout_p: float = 0.0
    tied: bool = False
    merge_score: str = "flat"
    per_sentence_ce: bool = False
    clip_norm: float | None = None
    workers: int = 1
    dense_dtype: str = "float64"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_dir: str | None = None
    metrics_path: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "objective", Objective.parse(self.objective))
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.max_len < 2:
            raise ConfigError(f"max_len must be >= 2, got {self.max_len}")
        if self.dense_dtype not in ("float64", "float32"):
            raise ConfigError(f"dense_dtype must be 'float64' or 'float32', got {self.dense_dtype!r}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.E != self.k * self.u:
            raise ConfigError(
                f"embedding size must equal k*u: E={self.E} but k*u={self.k}*{self.u}={self.k * self.u}"
            )

    def model_config(self, V) -> ModelConfig:
        return ModelConfig(
            V=V, E=self.E, k=self.k, u=self.u, tied=self.tied, tau=self.tau,
            objective=self.objective, dropout_p=self.dropout_p, merge_score=self.merge_score,
        )

    def to_dict(self):
        d = asdict(self)
        d["objective"] = self.objective.value
        return d

    @classmethod
    def from_dict(cls, d):
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown training option(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    def with_(self, **changes):
        return replace(self, **changes)


def make_batches(corpus, batch_size, seed, epoch):
    """Shuffle by ``(seed, epoch)`` and cut into contiguous chunks."""
    n = len(corpus)
    if n == 0:
        raise ConfigError("corpus is empty after filtering")
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [[corpus[i] for i in order[a:a + batch_size]] for a in range(0, n, batch_size)]


def adam_step(params: ModelParams, grads: dict, state: AdamState, lr: float):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``.

    The inputs are left untouched. A non-finite gradient aborts before any
    moment is updated.
    """
    names = params.names()
    for n in names:
        if not np.all(np.isfinite(grads[n])):
            raise NumericError(f"non-finite gradient in {n}")
    t = state.t + 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    arrays = params.as_dict()
    new_arrays, m_out, v_out = {}, {}, {}
    for n in names:
        g = grads[n]
        m = b1 * state.m[n] + (1.0 - b1) * g
        v = b2 * state.v[n] + (1.0 - b2) * (g * g)
        new_arrays[n] = arrays[n] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        m_out[n], v_out[n] = m, v
    new_state = AdamState(m_out, v_out, t, b1, b2, eps)
    return params.replace_arrays(new_arrays), new_state


def clip_gradients(grads, max_norm):
    """Scale all gradients together so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads, total
    scale = max_norm / total
    return {n: g * scale for n, g in grads.items()}, total


@dataclass
class TrainResult:
    params: ModelParams
    adam: AdamState
    metrics: list = field(default_factory=list)
    final_checkpoint: Path | None = None


class MetricsLog:
    """Per-epoch CSV: epoch, mean_loss, ce_part, contrastive_part, seconds, eval:<name>...

    The first line is a ``# config:`` comment holding the effective
    configuration as JSON.
    """

    def __init__(self, path, config: dict, eval_names):
        self.path = Path(path) if path else None
        self.columns = ["epoch", "mean_loss", "ce_part", "contrastive_part", "seconds"]
        self.columns += [f"eval:{n}" for n in eval_names]
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                fh.write("# config: " + json.dumps(config, sort_keys=True) + "\n")
                csv.writer(fh).writerow(self.columns)

    def append(self, row: dict):
        if not self.path:
            return
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(row.get(c)) for c in self.columns])


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def read_metrics(path):
    """Parse a metrics CSV back into ``(config, rows)``."""
    with open(path, newline="") as fh:
        first = fh.readline()
        config = json.loads(first[len("# config: "):]) if first.startswith("# config: ") else {}
        if not config:
            fh.seek(0)
        rows = []
        for r in csv.DictReader(fh):
            row = {k: (float(v) if v else None) for k, v in r.items()}
            row["epoch"] = int(row["epoch"])
            rows.append(row)
    return config, rows


def train(
    config: TrainConfig,
    corpus,
    V: int,
    eval_sets=None,
    vocab_fingerprint=None,
    init: ModelParams | None = None,
) -> TrainResult:
    """Run the epoch loop.

    ``eval_sets`` maps a name to ``callable(params) -> score``; each is run
    after every epoch and logged as an ``eval:<name>`` column.
    """
    eval_sets = dict(eval_sets or {})
    mcfg = config.model_config(V)
    params = init if init is not None else new_model(mcfg, config.seed)
    adam = AdamState.zeros_like(params, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    corpus = [np.asarray(s, dtype=np.int64) for s in corpus]
    if config.epochs > 0 and not corpus:
        raise ConfigError("corpus is empty after filtering")
    logger = MetricsLog(config.metrics_path, {**config.to_dict(), "V": V}, eval_sets)
    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    metrics = []

    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        total = ce_total = cont_total = 0.0
        weight = 0
        for b, batch in enumerate(make_batches(corpus, config.batch_size, config.seed, epoch)):
            graph = build_loss(
                params, batch, config.objective,
                tau=config.tau, dropout_p=config.dropout_p, seed=[config.seed, epoch, b],
                per_sentence_ce=config.per_sentence_ce, workers=config.workers,
                dense_dtype=config.dense_dtype,
            )
            loss = graph.value
            parts = graph.parts
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = graph.backward().params
            del graph
            if config.clip_norm is not None:
                grads, _ = clip_gradients(grads, config.clip_norm)
            try:
                params, adam = adam_step(params, grads, adam, config.lr)
            except NumericError as exc:
                raise NumericError(f"{exc} at epoch {epoch}, batch {b}") from None
            n = len(batch)
            total += loss * n
            weight += n
            ce_total += parts.get("ce", 0.0) * n
            cont_total += parts.get("contrastive", 0.0) * n
        row = {
            "epoch": epoch,
            "mean_loss": total / weight,
            "ce_part": ce_total / weight if config.objective is not Objective.CONTRASTIVE else None,
            "contrastive_part": cont_total / weight if config.objective is not Objective.CE else None,
            "seconds": round(time.perf_counter() - started, 3),
        }
        for name, fn in eval_sets.items():
            row[f"eval:{name}"] = fn(params)
        metrics.append(row)
        logger.append(row)
        log.info("epoch %d loss %.6f (%.1fs)", epoch, row["mean_loss"], row["seconds"])
        if ckpt_dir:
            save_checkpoint(ckpt_dir / f"epoch_{epoch:03d}.ssae", params, vocab_fingerprint, config.seed, adam)

    final = None
    if ckpt_dir:
        final = ckpt_dir / "final.ssae"
        save_checkpoint(final, params, vocab_fingerprint, config.seed, adam)
    return TrainResult(params, adam, metrics, final)
