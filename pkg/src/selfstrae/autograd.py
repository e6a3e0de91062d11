"""Reverse-mode differentiation over a per-batch tape.

The tape is an append-only list of ``Entry(op, inputs, saved, output)``
records over a value store. Only the closed op set below is recordable;
each op has a hand-written adjoint in ``_ADJOINTS``. Tree structure is
decided outside the tape, so merge selection never receives gradient.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import NumericError, ShapeError, UsageError

OPS = (
    "lookup",
    "mul",
    "add",
    "scale",
    "sum",
    "mean",
    "compose_tree",
    "decompose_tree",
    "linear",
    "normalize",
    "cosine_matrix",
    "log_softmax",
    "diagonal",
    "nll",
    "info_nce",
    "softmax_xent",
)

_FAULTS: set = set()


@contextmanager
def inject_fault(*ops):
    """Negate the adjoint of the named ops while the context is active."""
    unknown = set(ops) - set(OPS)
    if unknown:
        raise UsageError(f"unknown op(s): {sorted(unknown)}")
    before = set(_FAULTS)
    _FAULTS.update(ops)
    try:
        yield
    finally:
        _FAULTS.clear()
        _FAULTS.update(before)


@dataclass
class Entry:
    op: str
    inputs: tuple
    saved: dict
    output: int


@dataclass
class Gradients:
    params: dict
    intermediates: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.params[name]


def _safe_norms(x):
    n = np.sqrt(np.einsum("ij,ij->i", x, x))
    return n, n > 0.0


def _normalize_rows(x):
    n, ok = _safe_norms(x)
    y = np.zeros_like(x)
    y[ok] = x[ok] / n[ok, None]
    return y, n, ok


def _normalize_adjoint(g, y, n, ok):
    gx = np.zeros_like(g)
    proj = np.einsum("ij,ij->i", y, g)
    gx[ok] = (g[ok] - y[ok] * proj[ok, None]) / n[ok, None]
    return gx


def _logsumexp(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)))


class Tape:
    """Value store plus op record.

    ``dense_dtype`` sets the precision of the large row-blocked products in
    ``info_nce`` and ``softmax_xent`` (float32 roughly halves their cost);
    everything else, including all accumulated gradients, stays float64.
    """

    def __init__(self, dense_dtype=np.float64):
        self.dense_dtype = np.dtype(dense_dtype)
        if self.dense_dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
            raise UsageError(f"dense_dtype must be float64 or float32, got {self.dense_dtype}")
        self.values = []
        self.entries = []
        self.needs_grad = []
        self.param_refs = {}

    # -- bookkeeping ---------------------------------------------------
    def _new(self, value, needs_grad):
        self.values.append(value)
        self.needs_grad.append(needs_grad)
        return len(self.values) - 1

    def param(self, name, value):
        if name in self.param_refs:
            raise UsageError(f"parameter {name!r} registered twice")
        ref = self._new(np.asarray(value, dtype=np.float64), True)
        self.param_refs[name] = ref
        return ref

    def const(self, value):
        return self._new(np.asarray(value, dtype=np.float64), False)

    def value(self, ref):
        return self.values[ref]

    def _record(self, op, inputs, out, saved=None):
        needs = any(self.needs_grad[i] for i in inputs)
        ref = self._new(out, needs)
        self.entries.append(Entry(op, tuple(inputs), saved or {}, ref))
        return ref

    # -- ops -----------------------------------------------------------
    def lookup(self, table, idx):
        """Row gather ``table[idx]`` (embedding lookup and node selection)."""
        idx = np.asarray(idx, dtype=np.int64)
        return self._record("lookup", (table,), self.values[table][idx], {"idx": idx})

    def mul(self, a, b):
        va, vb = self.values[a], self.values[b]
        if va.shape != vb.shape:
            raise ShapeError(f"mul shapes differ: {va.shape} vs {vb.shape}")
        return self._record("mul", (a, b), va * vb)

    def add(self, a, b):
        va, vb = self.values[a], self.values[b]
        if va.shape != vb.shape:
            raise ShapeError(f"add shapes differ: {va.shape} vs {vb.shape}")
        return self._record("add", (a, b), va + vb)

    def scale(self, a, c):
        return self._record("scale", (a,), self.values[a] * float(c), {"c": float(c)})

    def sum(self, a):
        return self._record("sum", (a,), np.asarray(self.values[a].sum()))

    def mean(self, a):
        return self._record("mean", (a,), np.asarray(self.values[a].mean()))

    def compose_tree(self, leaves, Phi, phi, forest, k, u, up=None):
        """Upward pass along a fixed merge schedule (channel-shared affine)."""
        if up is None:
            up = kernels.tree_up(
                self.values[leaves], forest.left, forest.right, forest.leaf_of,
                self.values[Phi], self.values[phi], k, u,
            )
        return self._record("compose_tree", (leaves, Phi, phi), up, {"forest": forest, "k": k, "u": u})

    def decompose_tree(self, up, Theta, theta, forest, k, u):
        """Downward pass; roots copy the upward root unchanged."""
        down = kernels.tree_down(
            self.values[up], forest.left, forest.right, forest.parent,
            self.values[Theta], self.values[theta], k, u,
        )
        return self._record("decompose_tree", (up, Theta, theta), down, {"forest": forest, "k": k, "u": u})

    def linear(self, x, W, transpose=False):
        vw = self.values[W]
        out = self.values[x] @ (vw.T if transpose else vw)
        return self._record("linear", (x, W), out, {"transpose": transpose})

    def normalize(self, x):
        y, n, ok = _normalize_rows(self.values[x])
        return self._record("normalize", (x,), y, {"n": n, "ok": ok})

    def cosine_matrix(self, a, b):
        an, na, oka = _normalize_rows(self.values[a])
        bn, nb, okb = _normalize_rows(self.values[b])
        saved = {"an": an, "na": na, "oka": oka, "bn": bn, "nb": nb, "okb": okb}
        return self._record("cosine_matrix", (a, b), an @ bn.T, saved)

    def log_softmax(self, x, axis=1, tau=1.0):
        z = self.values[x] / tau
        out = z - _logsumexp(z, axis)
        return self._record("log_softmax", (x,), out, {"axis": axis, "tau": float(tau)})

    def diagonal(self, a):
        return self._record("diagonal", (a,), np.diagonal(self.values[a]).copy())

    def nll(self, logp, targets, weights=None):
        """``-sum_i w_i * logp[i, t_i]``; uniform weights give the mean."""
        lp = self.values[logp]
        targets = np.asarray(targets, dtype=np.int64)
        n = lp.shape[0]
        if weights is None:
            weights = np.full(n, 1.0 / n) if n else np.zeros(0)
        weights = np.asarray(weights, dtype=np.float64)
        val = -np.sum(weights * lp[np.arange(n), targets])
        return self._record("nll", (logp,), np.asarray(val), {"targets": targets, "weights": weights})

    def info_nce(self, un, dn, tau, block=None):
        """Symmetric tempered InfoNCE over rows of two L2-normalised blocks.

        Equals ``-(1/2M) * [sum_i log softmax(A_i./tau)_i + sum_j log softmax(A_.j/tau)_j]``
        with ``A = un @ dn.T``, evaluated in row blocks so the ``M x M``
        similarity matrix is never held at once.
        """
        U, D = self.values[un], self.values[dn]
        M = U.shape[0]
        if block is None:
            block = max(64, int(2.0e7 // max(M, 1)))
        # |u.d| <= |u||d|, so one constant shift bounds every exponent by 0
        # and the sums need no running maximum.
        shift = float(np.sqrt(np.einsum("ij,ij->i", U, U).max()) * np.sqrt(np.einsum("ij,ij->i", D, D).max()) / tau)
        row_sum = np.empty(M)
        col_sum = np.zeros(M)
        dt = self.dense_dtype
        Uc, Dc = U.astype(dt, copy=False), D.astype(dt, copy=False)
        for r0 in range(0, M, block):
            S = Uc[r0:r0 + block] @ Dc.T
            S *= dt.type(1.0 / tau)
            kernels.contrastive_block_sums(S, shift, row_sum[r0:r0 + block], col_sum)
        lse_r = shift + np.log(row_sum)
        lse_c = shift + np.log(col_sum)
        diag = np.einsum("ij,ij->i", U, D) / tau
        val = -(np.sum(diag - lse_r) + np.sum(diag - lse_c)) / (2 * M)
        saved = {"inv_row": 1.0 / row_sum, "inv_col": 1.0 / col_sum, "shift": shift, "tau": float(tau), "block": block, "dtype": dt}
        return self._record("info_nce", (un, dn), np.asarray(val), saved)

    def softmax_xent(self, x, W, targets, weights=None, transpose=False, block=None):
        """``nll(log_softmax(linear(x, W)), targets, weights)`` in row blocks.

        Only per-row log-normalisers are kept, so the ``N x V`` logit matrix
        never exists in full; the adjoint recomputes each block.
        """
        X, Wv = self.values[x], self.values[W]
        Wm = Wv.T if transpose else Wv
        targets = np.asarray(targets, dtype=np.int64)
        n, V = X.shape[0], Wm.shape[1]
        if weights is None:
            weights = np.full(n, 1.0 / n) if n else np.zeros(0)
        weights = np.asarray(weights, dtype=np.float64)
        if block is None:
            block = max(16, int(2.0e7 // max(V, 1)))
        lse = np.empty(n)
        picked = np.empty(n)
        dt = self.dense_dtype
        Xc, Wc = X.astype(dt, copy=False), Wm.astype(dt, copy=False)
        for r0 in range(0, n, block):
            r1 = min(r0 + block, n)
            Z = Xc[r0:r1] @ Wc
            picked[r0:r1] = Z[np.arange(r1 - r0), targets[r0:r1]]
            mx = Z.max(axis=1)
            Z -= mx[:, None]
            np.exp(Z, out=Z)
            lse[r0:r1] = mx + np.log(Z.sum(axis=1, dtype=np.float64))
        val = -np.sum(weights * (picked - lse))
        saved = {"targets": targets, "weights": weights, "lse": lse, "transpose": transpose, "block": block, "dtype": dt}
        return self._record("softmax_xent", (x, W), np.asarray(val), saved)

    # -- reverse pass --------------------------------------------------
    def backward(self, loss, retain=False, seed=None):
        """Accumulate gradients of scalar ``loss`` in reverse tape order.

        ``seed`` supplies an explicit output cotangent, which turns the pass
        into a vector-Jacobian product for non-scalar outputs.
        """
        lv = self.values[loss]
        grads = [None] * len(self.values)
        if seed is not None:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != np.shape(lv):
                raise UsageError(f"seed shape {seed.shape} does not match output {np.shape(lv)}")
            grads[loss] = seed
        elif np.ndim(lv) != 0:
            raise UsageError(f"backward needs a scalar loss, got shape {np.shape(lv)}")
        else:
            grads[loss] = np.asarray(1.0)
        for entry in reversed(self.entries):
            g = grads[entry.output]
            if g is None:
                continue
            needs = tuple(self.needs_grad[i] for i in entry.inputs)
            in_grads = _ADJOINTS[entry.op](self, entry, g, needs)
            if entry.op in _FAULTS:
                in_grads = tuple(None if x is None else -x for x in in_grads)
            for ref, gi, need in zip(entry.inputs, in_grads, needs):
                if gi is None or not need:
                    continue
                if grads[ref] is None:
                    grads[ref] = np.array(gi, dtype=np.float64, copy=True)
                else:
                    grads[ref] += gi
            if not retain and entry.output not in self.param_refs.values():
                grads[entry.output] = None
        params = {}
        for name, ref in self.param_refs.items():
            params[name] = grads[ref] if grads[ref] is not None else np.zeros_like(self.values[ref])
        inter = {}
        if retain:
            inter = {i: g for i, g in enumerate(grads) if g is not None}
        return Gradients(params, inter)


# -- adjoint rules --------------------------------------------------------

def _adj_lookup(t, e, g, needs):
    table = t.values[e.inputs[0]]
    out = np.zeros_like(table)
    np.add.at(out, e.saved["idx"], g)
    return (out,)


def _adj_mul(t, e, g, needs):
    a, b = (t.values[i] for i in e.inputs)
    return (g * b if needs[0] else None, g * a if needs[1] else None)


def _adj_add(t, e, g, needs):
    return (g, g)


def _adj_scale(t, e, g, needs):
    return (g * e.saved["c"],)


def _adj_sum(t, e, g, needs):
    return (np.full_like(t.values[e.inputs[0]], float(g)),)


def _adj_mean(t, e, g, needs):
    x = t.values[e.inputs[0]]
    return (np.full_like(x, float(g) / max(x.size, 1)),)


def _adj_compose_tree(t, e, g, needs):
    f, k, u = e.saved["forest"], e.saved["k"], e.saved["u"]
    leaves, Phi = t.values[e.inputs[0]], t.values[e.inputs[1]]
    g_leaves, g_Phi, g_phi = kernels.tree_up_grad(
        g, t.values[e.output], f.left, f.right, f.leaf_of, Phi, k, u, leaves.shape[0]
    )
    return (g_leaves, g_Phi, g_phi)


def _adj_decompose_tree(t, e, g, needs):
    f, k, u = e.saved["forest"], e.saved["k"], e.saved["u"]
    Theta = t.values[e.inputs[1]]
    g_up, g_Theta, g_theta = kernels.tree_down_grad(
        g, t.values[e.output], f.left, f.right, f.parent, Theta, k, u
    )
    return (g_up, g_Theta, g_theta)


def _adj_linear(t, e, g, needs):
    x, W = (t.values[i] for i in e.inputs)
    if e.saved["transpose"]:
        gx = g @ W if needs[0] else None
        gW = g.T @ x if needs[1] else None
    else:
        gx = g @ W.T if needs[0] else None
        gW = x.T @ g if needs[1] else None
    return (gx, gW)


def _adj_normalize(t, e, g, needs):
    return (_normalize_adjoint(g, t.values[e.output], e.saved["n"], e.saved["ok"]),)


def _adj_cosine_matrix(t, e, g, needs):
    s = e.saved
    ga = _normalize_adjoint(g @ s["bn"], s["an"], s["na"], s["oka"]) if needs[0] else None
    gb = _normalize_adjoint(g.T @ s["an"], s["bn"], s["nb"], s["okb"]) if needs[1] else None
    return (ga, gb)


def _adj_log_softmax(t, e, g, needs):
    axis, tau = e.saved["axis"], e.saved["tau"]
    p = np.exp(t.values[e.output])
    return ((g - p * g.sum(axis=axis, keepdims=True)) / tau,)


def _adj_diagonal(t, e, g, needs):
    shape = t.values[e.inputs[0]].shape
    out = np.zeros(shape)
    n = min(shape)
    out[np.arange(n), np.arange(n)] = g
    return (out,)


def _adj_nll(t, e, g, needs):
    lp = t.values[e.inputs[0]]
    out = np.zeros_like(lp)
    n = lp.shape[0]
    out[np.arange(n), e.saved["targets"]] = -float(g) * e.saved["weights"]
    return (out,)


def _adj_info_nce(t, e, g, needs):
    U, D = (t.values[i] for i in e.inputs)
    s = e.saved
    tau, block, dt = s["tau"], s["block"], s["dtype"]
    Uc, Dc = U.astype(dt, copy=False), D.astype(dt, copy=False)
    M = U.shape[0]
    coef = float(g) / (2 * M * tau)
    gU = np.empty_like(U)
    gD = np.zeros_like(D)
    for r0 in range(0, M, block):
        r1 = min(r0 + block, M)
        G = Uc[r0:r1] @ Dc.T
        G *= dt.type(1.0 / tau)
        kernels.contrastive_block_grad(G, s["shift"], s["inv_row"][r0:r1], s["inv_col"], r0, coef)
        gU[r0:r1] = G @ Dc
        gD += G.T @ Uc[r0:r1]
    return (gU, gD)


def _adj_softmax_xent(t, e, g, needs):
    X, Wv = (t.values[i] for i in e.inputs)
    s = e.saved
    Wm = Wv.T if s["transpose"] else Wv
    targets, weights, lse, block, dt = s["targets"], s["weights"], s["lse"], s["block"], s["dtype"]
    Xc, Wc = X.astype(dt, copy=False), Wm.astype(dt, copy=False)
    n = X.shape[0]
    gX = np.empty_like(X)
    gWm = np.zeros(Wm.shape)
    for r0 in range(0, n, block):
        r1 = min(r0 + block, n)
        rows = np.arange(r1 - r0)
        scale = (float(g) * weights[r0:r1]).astype(dt)
        G = Xc[r0:r1] @ Wc
        G -= lse[r0:r1, None].astype(dt)
        np.exp(G, out=G)
        G *= scale[:, None]
        G[rows, targets[r0:r1]] -= scale
        gX[r0:r1] = G @ Wc.T
        gWm += Xc[r0:r1].T @ G
    return (gX if needs[0] else None, (gWm.T if s["transpose"] else gWm) if needs[1] else None)


_ADJOINTS = {
    "lookup": _adj_lookup,
    "mul": _adj_mul,
    "add": _adj_add,
    "scale": _adj_scale,
    "sum": _adj_sum,
    "mean": _adj_mean,
    "compose_tree": _adj_compose_tree,
    "decompose_tree": _adj_decompose_tree,
    "linear": _adj_linear,
    "normalize": _adj_normalize,
    "cosine_matrix": _adj_cosine_matrix,
    "log_softmax": _adj_log_softmax,
    "diagonal": _adj_diagonal,
    "nll": _adj_nll,
    "info_nce": _adj_info_nce,
    "softmax_xent": _adj_softmax_xent,
}
assert set(_ADJOINTS) == set(OPS)


# -- finite-difference verification --------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    failing_entries: list
    n_checked: int
    tol: float

    @property
    def passed(self):
        return bool(self.max_rel_err <= self.tol)


def grad_check(loss_builder, params, h=1e-6, tol=1e-5, names=None):
    """Compare analytic gradients with central differences, entry by entry.

    ``loss_builder(arrays) -> (tape, loss_ref)`` must be deterministic in
    ``arrays`` (freeze dropout masks and tree structure before calling).
    Relative error is ``|g - fd| / max(1, |fd|)``.
    """
    base = {n: np.array(a, dtype=np.float64, copy=True) for n, a in params.items()}
    tape, loss = loss_builder(base)
    analytic = tape.backward(loss).params
    names = list(base) if names is None else list(names)
    worst = 0.0
    failing = []
    checked = 0

    def evaluate(arrays, where):
        t, ref = loss_builder(arrays)
        val = float(t.value(ref))
        if not np.isfinite(val):
            raise NumericError(f"non-finite loss while perturbing {where}")
        return val

    for name in names:
        arr = base[name]
        flat = arr.reshape(-1)
        g = analytic.get(name, np.zeros_like(arr)).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = evaluate(base, f"{name}[{i}]")
            flat[i] = orig - h
            lo = evaluate(base, f"{name}[{i}]")
            flat[i] = orig
            fd = (hi - lo) / (2 * h)
            err = abs(g[i] - fd) / max(1.0, abs(fd))
            checked += 1
            if err > worst:
                worst = err
            if err > tol:
                failing.append((name, np.unravel_index(i, arr.shape), float(g[i]), fd))
    return GradCheckReport(worst, failing, checked, tol)


def _op_probe(op, rng):
    """Tiny random program applying exactly one op to parameter inputs."""
    from .structure import Forest

    k, u = 2, 2
    E = k * u
    forest = Forest(
        token_ids=np.array([0, 1, 2]),
        leaf_off=np.array([0, 3]),
        left=np.array([-1, -1, -1, 1, 0]),
        right=np.array([-1, -1, -1, 2, 3]),
        parent=np.array([4, 3, 3, 4, -1]),
        leaf_of=np.array([0, 1, 2, -1, -1]),
    )
    inputs = {
        "x": rng.normal(size=(3, E)),
        "y": rng.normal(size=(3, E)),
        "z": rng.normal(size=(5, E)),
        "A": rng.normal(size=(3, 3)),
        "P": rng.normal(size=(2 * u, u)),
        "p": rng.normal(size=u),
        "Q": rng.normal(size=(u, 2 * u)),
        "q": rng.normal(size=2 * u),
    }
    calls = {
        "lookup": lambda t, r: t.lookup(r["x"], [2, 0, 2]),
        "mul": lambda t, r: t.mul(r["x"], r["y"]),
        "add": lambda t, r: t.add(r["x"], r["y"]),
        "scale": lambda t, r: t.scale(r["x"], -1.7),
        "sum": lambda t, r: t.sum(r["x"]),
        "mean": lambda t, r: t.mean(r["x"]),
        "compose_tree": lambda t, r: t.compose_tree(r["x"], r["P"], r["p"], forest, k, u),
        "decompose_tree": lambda t, r: t.decompose_tree(r["z"], r["Q"], r["q"], forest, k, u),
        "linear": lambda t, r: t.linear(r["x"], r["y"], transpose=True),
        "normalize": lambda t, r: t.normalize(r["x"]),
        "cosine_matrix": lambda t, r: t.cosine_matrix(r["x"], r["y"]),
        "log_softmax": lambda t, r: t.log_softmax(r["x"], axis=0, tau=0.7),
        "diagonal": lambda t, r: t.diagonal(r["A"]),
        "nll": lambda t, r: t.nll(r["x"], [1, 0, 3]),
        "info_nce": lambda t, r: t.info_nce(r["x"], r["y"], 0.8, block=2),
        "softmax_xent": lambda t, r: t.softmax_xent(r["x"], r["y"], [1, 0, 2], [0.2, 0.5, 0.3], transpose=True, block=2),
    }
    return calls[op], inputs


def check_op_adjoints(ops=None, seed=0, h=1e-6):
    """Finite-difference check of each op in isolation; maps op -> max rel err.

    Each probe applies one op to parameter inputs and compares the
    vector-Jacobian product for a random cotangent with central differences
    of ``sum(cotangent * output)``, so a corrupted adjoint shows up only in
    its own probe.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for op in ops or OPS:
        call, inputs = _op_probe(op, rng)
        t = Tape()
        refs = {n: t.param(n, v) for n, v in inputs.items()}
        ref = call(t, refs)
        cot = rng.normal(size=np.shape(t.value(ref)))
        analytic = t.backward(ref, seed=cot).params

        def f(arrays):
            t2 = Tape()
            r2 = {n: t2.param(n, v) for n, v in arrays.items()}
            return float(np.sum(cot * t2.value(call(t2, r2))))

        worst = 0.0
        for name, arr in inputs.items():
            flat = arr.reshape(-1)
            g = analytic[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                hi = f(inputs)
                flat[i] = orig - h
                lo = f(inputs)
                flat[i] = orig
                fd = (hi - lo) / (2 * h)
                worst = max(worst, abs(g[i] - fd) / max(1.0, abs(fd)))
        out[op] = worst
    return out
