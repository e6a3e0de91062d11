"""Acceptance criteria 1-9, one test each, each printing a PASS/FAIL line.

Criteria 6-8 read the desk-scale runs produced by ``scripts/desk_scale.sh``
(directory ``runs/`` or ``$SELFSTRAE_RUNS_DIR``): ``<objective>_s<seed>/``
with ``metrics.csv``, ``wall_seconds`` and ``checkpoints/final.ssae``. When
those runs are absent the criteria are reported as NOT RUN and skipped.

Run standalone with ``python tests/test_acceptance.py``.
"""
import math
import os
import struct
from pathlib import Path

import numpy as np
import pytest

from oracles import brute_force_tree
from selfstrae.data import Tokenizer, load_checkpoint, load_merges, load_pairs, load_vocab, save_checkpoint
from selfstrae.errors import CheckpointError
from selfstrae.evaluation import sample_nodes, uniformity, uniformity_alignment
from selfstrae.model import ModelConfig, ModelParams, compose, new_model, non_embedding_param_count
from selfstrae.objectives import build_loss, check_objective_gradients, loss_ce, loss_contrastive
from selfstrae.structure import induce, to_bracket
from selfstrae.trainer import TrainConfig, read_metrics, train

ROOT = Path(__file__).resolve().parent.parent
RUNS = Path(os.environ.get("SELFSTRAE_RUNS_DIR", ROOT / "runs"))
DATA = ROOT / "data"
SEEDS = (0, 1, 2, 3)

RESULTS = {}


def report(n, ok, detail):
    RESULTS[n] = ("PASS" if ok else "FAIL", detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


def not_run(n, why):
    RESULTS[n] = ("NOT RUN", why)
    pytest.skip(why)


def _run_dir(objective, seed):
    return RUNS / f"{objective}_s{seed}"


def _finished(objective, seed):
    d = _run_dir(objective, seed)
    return (d / "wall_seconds").exists() and (d / "metrics.csv").exists()


def _final_lee(objective, seed):
    _, rows = read_metrics(_run_dir(objective, seed) / "metrics.csv")
    return rows[-1]["eval:lee"]


# -- 1 -----------------------------------------------------------------------------------

def test_criterion_1_parameter_counts():
    table = {(8, 32): 4192, (32, 8): 280, (128, 2): 22, (256, 1): 7}
    got = {ku: non_embedding_param_count(*ku) for ku in table}
    ok = got == table and non_embedding_param_count(64, 4) == 76
    report(1, ok, f"counts {got}; (64,4) -> {non_embedding_param_count(64, 4)} (published 88, formula 4u^2+3u = 76)")


# -- 2 -----------------------------------------------------------------------------------

def test_criterion_2_gradient_correctness():
    lines, ok = [], True
    for fused in (True, False):
        for obj in ("ce", "contrastive", "ceco", "strcse"):
            r = check_objective_gradients(obj, n_configs=20, seed=0, tol=1e-5, fused=fused)
            ok &= r.passed and r.n_configs >= 20
            lines.append(f"{obj}{'' if fused else '/primitive'}={r.max_rel_err:.1e}")
    report(2, ok, "max rel err over 20 configs (V=20,k=4,u=3,T<=6): " + ", ".join(lines))


# -- 3 -----------------------------------------------------------------------------------

def test_criterion_3_structure_oracle():
    rng = np.random.default_rng(2024)
    k, u = 2, 3
    mismatches = ties = 0
    n_cases = 1200
    for case in range(n_cases):
        T = int(rng.integers(2, 13))
        cfg = ModelConfig(V=2, E=k * u, k=k, u=u)
        p = new_model(cfg, case)
        p = p.replace_arrays({**p.as_dict(), "phi": 0.2 * rng.normal(size=u)})
        frontier = rng.normal(size=(T, k * u))
        if case % 2:  # repeated embeddings give exactly tied adjacent cosines
            pool = frontier[: max(1, T // 3)]
            frontier = pool[rng.integers(0, len(pool), T)]
            ties += 1
        enc = induce(p, np.zeros(T, dtype=np.int64), leaves=frontier)
        got = [(int(enc.tree.left[T + s]), int(enc.tree.right[T + s])) for s in range(T - 1)]
        ref, _ = brute_force_tree(list(frontier.reshape(T, k, u)), lambda a, b: compose(p, a, b))
        mismatches += got != ref
    report(3, mismatches == 0, f"{n_cases} random frontiers of length 2-12 ({ties} with repeated embeddings), "
                               f"{mismatches} mismatches against the brute-force oracle")


# -- 4 -----------------------------------------------------------------------------------

def test_criterion_4_closed_forms():
    rng = np.random.default_rng(0)
    m1 = loss_contrastive(rng.normal(size=(1, 5)), rng.normal(size=(1, 5)), 1.2)
    m2 = loss_contrastive(np.eye(2), np.eye(2), 1.0)
    V = 97
    ce = loss_ce(np.zeros((4, V)), [0, 5, 50, 96])
    cfg = ModelConfig(V=20, E=12, k=4, u=3)
    p = new_model(cfg, 1)
    sents = [rng.integers(0, 20, n) for n in (3, 6, 1, 5)]
    g = build_loss(p, sents, "ceco")
    ceco_gap = abs(g.value - 0.5 * (g.parts["ce"] + g.parts["contrastive"]))
    ok = abs(m1) <= 1e-15 and abs(m2 - 0.3133) < 1e-4 and abs(ce - math.log(V)) <= 1e-12 and ceco_gap <= 1e-15
    report(4, ok, f"M=1 -> {m1:.1e}; M=2 identity -> {m2:.6f} (target 0.3133 +- 1e-4); "
                  f"uniform CE - ln V = {ce - math.log(V):.1e}; CECO - mean(parts) = {ceco_gap:.1e}")


# -- 5 -----------------------------------------------------------------------------------

def test_criterion_5_fig1_topology():
    G = np.array([[1.0, 0.4, 0.7], [0.4, 1.0, 0.6], [0.7, 0.6, 1.0]])
    X = np.linalg.cholesky(G)
    cfg = ModelConfig(V=3, E=3, k=1, u=3)
    arrays = new_model(cfg, 0).as_dict()
    arrays.update(Psi=X, Phi=np.vstack([np.zeros((3, 3)), np.eye(3)]), phi=np.zeros(3))
    enc = induce(ModelParams(cfg, **arrays), [0, 1, 2])
    out = to_bracket(enc.tree, ["w1", "w2", "w3"])
    report(5, out == "(w1 (w2 w3))", f"stub cosines (0.4, 0.6, then 0.7) induce {out}")


# -- 6-8 (desk-scale runs) ------------------------------------------------------------------

def _require_runs(n, objectives):
    missing = [f"{o}_s{s}" for o in objectives for s in SEEDS if not _finished(o, s)]
    if missing:
        not_run(n, f"desk-scale runs missing under {RUNS}: {', '.join(missing)} (run scripts/desk_scale.sh)")


def test_criterion_6_desk_scale_training():
    _require_runs(6, ["ceco"])
    budget = 4 * 3600
    walls, lee, mono, details = [], [], [], []
    tokens = None
    for s in SEEDS:
        d = _run_dir("ceco", s)
        config, rows = read_metrics(d / "metrics.csv")
        wall = int((d / "wall_seconds").read_text())
        losses = [r["mean_loss"] for r in rows]
        first5 = losses[:5]
        tol = 0.01 * first5[0]
        mono.append(len(rows) == 15 and all(b <= a + tol for a, b in zip(first5, first5[1:])))
        walls.append(wall)
        lee.append(rows[-1]["eval:lee"])
        details.append(f"s{s}: lee={rows[-1]['eval:lee']:.2f} wall={wall / 3600:.2f}h "
                       f"loss {losses[0]:.4f}->{losses[4]:.4f}->{losses[-1]:.4f}")
        assert (config["k"], config["u"], config["objective"], config["epochs"]) == (128, 2, "ceco", 15)
    best = max(lee)
    ok = all(w <= budget for w in walls) and all(mono) and best >= 25.0
    report(6, ok, f"best-of-4 Lee Spearman x100 = {best:.2f} (bar 25); "
                  f"max wall {max(walls) / 3600:.2f}h (bar 4h); first-5-epoch monotone: {mono}; " + "; ".join(details))


def test_criterion_7_objective_direction():
    _require_runs(7, ["ceco", "ce"])
    ceco = [_final_lee("ceco", s) for s in SEEDS]
    ce = [_final_lee("ce", s) for s in SEEDS]
    ok = np.mean(ceco) >= np.mean(ce)
    report(7, ok, f"mean Lee Spearman x100: CECO {np.mean(ceco):.2f} {np.round(ceco, 2).tolist()} vs "
                  f"CE {np.mean(ce):.2f} {np.round(ce, 2).tolist()}")


def _alignment_of(objective, seed, tok, sentences):
    ck = load_checkpoint(_run_dir(objective, seed) / "checkpoints" / "final.ssae")
    up, down = sample_nodes(ck.params, sentences, n=2048, seed=0)
    return uniformity_alignment(up, down)


def test_criterion_8_uniformity_alignment():
    same = np.tile([0.6, 0.8], (4, 1))
    u0, a0 = uniformity_alignment(same, same)
    anti = uniformity([[1.0, 0.0], [-1.0, 0.0]])
    constructed = (u0, a0) == (0.0, 0.0) and abs(anti + 8.0) < 1e-12
    if not (_finished("ceco", 0) and _finished("ce", 0)):
        RESULTS[8] = ("NOT RUN", f"constructed values ok={constructed}; runs ceco_s0/ce_s0 missing under {RUNS}")
        assert constructed
        pytest.skip(RESULTS[8][1])
    tok = Tokenizer(load_vocab(DATA / "vocab.txt"), load_merges(DATA / "merges.txt"))
    lee = load_pairs(DATA / "lee.tsv")
    texts = list(dict.fromkeys(lee.text_a + lee.text_b))
    sentences = [s for s in (tok.encode(t) for t in texts) if s.shape[0] > 0]
    u_ceco, a_ceco = _alignment_of("ceco", 0, tok, sentences)
    u_ce, a_ce = _alignment_of("ce", 0, tok, sentences)
    ok = constructed and a_ceco < a_ce
    report(8, ok, f"identical -> ({u0}, {a0}), antipodal uniformity {anti:.1f}; seed 0 on 2048 Lee nodes: "
                  f"alignment CECO {a_ceco:.4f} vs CE {a_ce:.4f} (uniformity {u_ceco:.3f} vs {u_ce:.3f})")


# -- 9 -----------------------------------------------------------------------------------

def test_criterion_9_determinism_and_persistence(tmp_path):
    rng = np.random.default_rng(0)
    corpus = [rng.integers(0, 60, int(rng.integers(2, 10))) for _ in range(80)]
    blobs = []
    for run in range(2):
        cfg = TrainConfig(E=12, k=4, u=3, batch_size=16, epochs=2, seed=5, workers=1,
                          checkpoint_dir=str(tmp_path / f"run{run}"))
        blobs.append(train(cfg, corpus, 60, vocab_fingerprint="fp").final_checkpoint.read_bytes())
    identical = blobs[0] == blobs[1]

    path = tmp_path / "run0" / "final.ssae"
    ck = load_checkpoint(path)
    resaved = tmp_path / "resaved.ssae"
    save_checkpoint(resaved, ck.params, ck.vocab_fingerprint, ck.seed, ck.adam)
    roundtrip = resaved.read_bytes() == blobs[0]

    raw = path.read_bytes()
    corrupt = {"truncated": raw[:-1], "magic": b"XXXX" + raw[4:],
               "version": raw[:4] + struct.pack("<I", 99) + raw[8:]}
    rejected = 0
    for name, blob in corrupt.items():
        bad = tmp_path / f"{name}.ssae"
        bad.write_bytes(blob)
        try:
            load_checkpoint(bad)
        except CheckpointError:
            rejected += 1
    ok = identical and roundtrip and rejected == len(corrupt)
    report(9, ok, f"two seeded runs bitwise identical: {identical}; load+save round trip bit-exact: {roundtrip}; "
                  f"corrupted files rejected: {rejected}/{len(corrupt)}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
