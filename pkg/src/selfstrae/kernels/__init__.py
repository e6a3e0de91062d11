"""Hot tree kernels with a compiled and a pure-numpy implementation.

The compiled path is used unless ``SELFSTRAE_NUMBA=0`` is set (see
``selfstrae._accel``). Every wrapper accepts ``impl=`` to force a backend,
which the tests and the benchmark use to compare the two.
"""
import importlib

import numpy as np

from .. import _accel
from . import _numpy

if _accel.USE_NUMBA:
    from . import _numba

    BACKEND = "numba"
    _default = _numba
else:  # pragma: no cover - exercised by running the suite with SELFSTRAE_NUMBA=0
    _numba = None
    BACKEND = "numpy"
    _default = _numpy


def get_impl(name=None):
    if name is None:
        return _default
    if name == "numpy":
        return _numpy
    if name == "numba":
        if not _accel.HAVE_NUMBA:
            raise RuntimeError("numba is not installed")
        return importlib.import_module(f"{__name__}._numba")
    raise ValueError(f"unknown kernel backend {name!r}")


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def adjacent_cosines(frontier, k, u, per_channel=False, impl=None):
    return get_impl(impl).adjacent_cosines(_f64(frontier), k, u, per_channel)


def induce(leaves, leaf_off, Phi, phi, k, u, per_channel=False, impl=None):
    """Run greedy merging over a batch; returns ``(up, left, right, parent, leaf_of, zeros)``."""
    leaf_off = _i64(leaf_off)
    n_sent = leaf_off.shape[0] - 1
    M = 2 * int(leaf_off[-1]) - n_sent
    E = leaves.shape[1]
    up = np.empty((M, E))
    left = np.empty(M, np.int64)
    right = np.empty(M, np.int64)
    parent = np.empty(M, np.int64)
    leaf_of = np.empty(M, np.int64)
    zeros = get_impl(impl).induce_forest(
        _f64(leaves), leaf_off, _f64(Phi), _f64(phi), k, u, per_channel, up, left, right, parent, leaf_of
    )
    return up, left, right, parent, leaf_of, int(zeros)


def tree_up(leaves, left, right, leaf_of, Phi, phi, k, u, impl=None):
    left, right, leaf_of = _i64(left), _i64(right), _i64(leaf_of)
    up = np.empty((left.shape[0], leaves.shape[1]))
    get_impl(impl).compose_forward(_f64(leaves), left, right, leaf_of, _f64(Phi), _f64(phi), k, u, up)
    return up


def tree_up_grad(g_up, up, left, right, leaf_of, Phi, k, u, n_leaves, impl=None):
    left, right, leaf_of = _i64(left), _i64(right), _i64(leaf_of)
    g_work = np.array(g_up, dtype=np.float64, copy=True, order="C")
    g_leaves = np.zeros((n_leaves, up.shape[1]))
    g_Phi = np.zeros((2 * u, u))
    g_phi = np.zeros(u)
    get_impl(impl).compose_backward(g_work, _f64(up), left, right, leaf_of, _f64(Phi), k, u, g_leaves, g_Phi, g_phi)
    return g_leaves, g_Phi, g_phi


def tree_down(up, left, right, parent, Theta, theta, k, u, impl=None):
    left, right, parent = _i64(left), _i64(right), _i64(parent)
    down = np.empty_like(up)
    get_impl(impl).decompose_forward(_f64(up), left, right, parent, _f64(Theta), _f64(theta), k, u, down)
    return down


def tree_down_grad(g_down, down, left, right, parent, Theta, k, u, impl=None):
    left, right, parent = _i64(left), _i64(right), _i64(parent)
    g_work = np.array(g_down, dtype=np.float64, copy=True, order="C")
    g_up = np.zeros_like(g_work)
    g_Theta = np.zeros((u, 2 * u))
    g_theta = np.zeros(2 * u)
    get_impl(impl).decompose_backward(g_work, _f64(down), left, right, parent, _f64(Theta), k, u, g_up, g_Theta, g_theta)
    return g_up, g_Theta, g_theta



def contrastive_block_sums(S, shift, row_sum, col_sum, impl=None):
    """Turn a block of tempered similarities into ``exp(S - shift)`` and accumulate its sums."""
    S -= S.dtype.type(shift)
    np.exp(S, out=S)
    get_impl(impl).row_col_sums(S, row_sum, col_sum)


def contrastive_block_grad(S, shift, inv_row, inv_col, r0, coef, impl=None):
    """Turn a block of tempered similarities into its rows of the InfoNCE gradient."""
    S -= S.dtype.type(shift)
    np.exp(S, out=S)
    get_impl(impl).contrastive_scale(S, inv_row.astype(S.dtype), inv_col.astype(S.dtype), int(r0), S.dtype.type(coef))
