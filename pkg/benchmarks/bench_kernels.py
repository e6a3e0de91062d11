"""Compare the compiled (numba) and pure-numpy kernel backends.

    python benchmarks/bench_kernels.py [--sentences 512] [--repeat 3] [--json out.json]

Times greedy induction, the upward/downward tree passes with their
gradients, and the two contrastive block kernels on a synthetic batch with
the published layout (E=256, k=128, u=2) and a realistic length mix. Each
figure is the best of ``--repeat`` runs after one warm-up call (which also
triggers compilation). Outputs are checked to agree before timing.
"""
import argparse
import json
import platform
import time

import numpy as np

from selfstrae import kernels


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def synthetic_batch(n_sent, k, u, seed):
    rng = np.random.default_rng(seed)
    # sentence lengths roughly like the desk corpus: mean ~40 tokens, 2..128
    lengths = np.clip(rng.gamma(2.0, 20.0, n_sent).astype(int), 2, 128)
    off = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    E = k * u
    leaves = rng.normal(0, 0.1, (off[-1], E))
    Phi = rng.uniform(-1, 1, (2 * u, u))
    phi = np.zeros(u)
    Theta = rng.uniform(-1, 1, (u, 2 * u))
    theta = np.zeros(2 * u)
    return leaves, off, Phi, phi, Theta, theta


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--sentences", type=int, default=512)
    ap.add_argument("--k", type=int, default=128)
    ap.add_argument("--u", type=int, default=2)
    ap.add_argument("--block", type=int, default=1024, help="rows of the contrastive block")
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", default=None)
    args = ap.parse_args(argv)
    if not kernels._accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    k, u = args.k, args.u
    leaves, off, Phi, phi, Theta, theta = synthetic_batch(args.sentences, k, u, args.seed)
    ref = kernels.induce(leaves, off, Phi, phi, k, u, impl="numpy")
    got = kernels.induce(leaves, off, Phi, phi, k, u, impl="numba")
    assert all(np.array_equal(a, b) for a, b in zip(ref[1:5], got[1:5])), "backends disagree on trees"
    up, left, right, parent, leaf_of, _ = ref
    down = kernels.tree_down(up, left, right, parent, Theta, theta, k, u)
    g = np.random.default_rng(1).normal(size=up.shape)
    n_leaves = int(off[-1])

    I = up.shape[0] - n_leaves
    rows = min(args.block, I)
    rng = np.random.default_rng(2)
    S0 = rng.uniform(-1, 1, (rows, I)).astype(np.float32)
    inv_r = rng.random(rows) + 0.5
    inv_c = rng.random(I) + 0.5

    def sums(impl):
        S = S0.copy()
        kernels.contrastive_block_sums(S, 1.0, np.empty(rows), np.zeros(I), impl=impl)

    def scale(impl):
        S = S0.copy()
        kernels.contrastive_block_grad(S, 1.0, inv_r, inv_c, 0, 1e-3, impl=impl)

    cases = {
        "induce": lambda b: kernels.induce(leaves, off, Phi, phi, k, u, impl=b),
        "tree_up": lambda b: kernels.tree_up(leaves, left, right, leaf_of, Phi, phi, k, u, impl=b),
        "tree_up_grad": lambda b: kernels.tree_up_grad(g, up, left, right, leaf_of, Phi, k, u, n_leaves, impl=b),
        "tree_down": lambda b: kernels.tree_down(up, left, right, parent, Theta, theta, k, u, impl=b),
        "tree_down_grad": lambda b: kernels.tree_down_grad(g, down, left, right, parent, Theta, k, u, impl=b),
        "contrastive_block_sums": sums,
        "contrastive_block_grad": scale,
    }
    results = []
    print(f"batch: {args.sentences} sentences, {n_leaves} leaves, {up.shape[0]} nodes, E={k * u}; "
          f"contrastive block {rows}x{I}")
    print(f"{'kernel':<24}{'numpy (ms)':>12}{'numba (ms)':>12}{'speed-up':>10}")
    for name, fn in cases.items():
        t_np = best_of(lambda: fn("numpy"), args.repeat)
        t_nb = best_of(lambda: fn("numba"), args.repeat)
        results.append({"kernel": name, "numpy_s": t_np, "numba_s": t_nb, "speedup": t_np / t_nb})
        print(f"{name:<24}{1e3 * t_np:>12.1f}{1e3 * t_nb:>12.1f}{t_np / t_nb:>9.1f}x")
    if args.json:
        meta = {"python": platform.python_version(), "machine": platform.machine(),
                "sentences": args.sentences, "leaves": n_leaves, "k": k, "u": u}
        with open(args.json, "w") as fh:
            json.dump({"meta": meta, "results": results}, fh, indent=2)


if __name__ == "__main__":
    main()
