"""Hot numeric kernels with a numba path and a pure-numpy path.

Every kernel exists twice: ``<name>_nb`` (``@njit`` loops) and
``<name>_np`` (vectorized numpy).  The public name is bound to one of the
two at import time.  Set ``SPD_DISABLE_NUMBA=1`` to force the numpy path;
it is also used automatically when numba cannot be imported.

All kernels operate on C-contiguous 2-D views; callers reshape.
"""
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dep in practice
    numba = None


def _flag(name):
    return os.environ.get(name, "").strip().lower() in ("1", "true", "yes", "on")


USE_NUMBA = numba is not None and not _flag("SPD_DISABLE_NUMBA")

if numba is not None:
    njit = numba.njit(cache=True, nogil=True)
else:  # pragma: no cover
    def njit(func):
        return func


# ---------------------------------------------------------------- softmax

def softmax_rows_np(x):
    z = x - x.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


@njit
def softmax_rows_nb(x):
    n, m = x.shape
    out = np.empty_like(x)
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(m):
            e = np.exp(x[i, j] - mx)
            out[i, j] = e
            s += e
        inv = 1.0 / s
        for j in range(m):
            out[i, j] *= inv
    return out


def softmax_rows_grad_np(y, gy):
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


@njit
def softmax_rows_grad_nb(y, gy):
    n, m = y.shape
    out = np.empty_like(y)
    for i in range(n):
        dot = 0.0
        for j in range(m):
            dot += gy[i, j] * y[i, j]
        for j in range(m):
            out[i, j] = y[i, j] * (gy[i, j] - dot)
    return out


# ------------------------------------------------------------- layer norm

def layer_norm_np(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


@njit
def layer_norm_nb(x, gain, bias, eps):
    n, d = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(n, dtype=x.dtype)
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        var /= d
        r = 1.0 / np.sqrt(var + eps)
        rstd[i] = r
        for j in range(d):
            h = (x[i, j] - mu) * r
            xhat[i, j] = h
            y[i, j] = h * gain[j] + bias[j]
    return y, xhat, rstd


def layer_norm_grad_np(gy, xhat, rstd, gain):
    ggain = (gy * xhat).sum(axis=0)
    gbias = gy.sum(axis=0)
    gh = gy * gain
    gx = (gh - gh.mean(axis=1, keepdims=True)
          - xhat * (gh * xhat).mean(axis=1, keepdims=True)) * rstd[:, None]
    return gx, ggain, gbias


@njit
def layer_norm_grad_nb(gy, xhat, rstd, gain):
    n, d = xhat.shape
    gx = np.empty_like(gy)
    ggain = np.zeros(d, dtype=gy.dtype)
    gbias = np.zeros(d, dtype=gy.dtype)
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            gh = gy[i, j] * gain[j]
            m1 += gh
            m2 += gh * xhat[i, j]
            ggain[j] += gy[i, j] * xhat[i, j]
            gbias[j] += gy[i, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            gx[i, j] = (gy[i, j] * gain[j] - m1 - xhat[i, j] * m2) * rstd[i]
    return gx, ggain, gbias


# ------------------------------------------------------ embedding scatter

def scatter_add_rows_np(n_rows, ids, g):
    out = np.zeros((n_rows, g.shape[1]), dtype=g.dtype)
    np.add.at(out, ids, g)
    return out


@njit
def scatter_add_rows_nb(n_rows, ids, g):
    out = np.zeros((n_rows, g.shape[1]), dtype=g.dtype)
    for i in range(ids.shape[0]):
        r = ids[i]
        for j in range(g.shape[1]):
            out[r, j] += g[i, j]
    return out


# ------------------------------------------------------------------ top-k

def topk_desc_np(scores, tie_key, k):
    """Indices of the ``k`` best scores, ties broken by ascending ``tie_key``."""
    order = np.lexsort((tie_key, -scores))
    return order[:k]


@njit
def _before(scores, tie_key, a, b):
    if scores[a] > scores[b]:
        return True
    if scores[a] < scores[b]:
        return False
    return tie_key[a] < tie_key[b]


@njit
def _sift_down(heap, size, pos, scores, tie_key):
    # min-heap on "worst first": root is the entry ranked last
    while True:
        left = 2 * pos + 1
        if left >= size:
            return
        worst = left
        right = left + 1
        if right < size and _before(scores, tie_key, heap[worst], heap[right]):
            worst = right
        if _before(scores, tie_key, heap[worst], heap[pos]):
            return
        tmp = heap[pos]
        heap[pos] = heap[worst]
        heap[worst] = tmp
        pos = worst


@njit
def topk_desc_nb(scores, tie_key, k):
    n = scores.shape[0]
    if k > n:
        k = n
    heap = np.empty(k, dtype=np.int64)
    for i in range(k):
        heap[i] = i
    for p in range(k // 2 - 1, -1, -1):
        _sift_down(heap, k, p, scores, tie_key)
    for i in range(k, n):
        if k > 0 and _before(scores, tie_key, i, heap[0]):
            heap[0] = i
            _sift_down(heap, k, 0, scores, tie_key)
    # heap-sort the survivors, worst extracted first
    out = np.empty(k, dtype=np.int64)
    size = k
    while size > 0:
        out[size - 1] = heap[0]
        size -= 1
        heap[0] = heap[size]
        _sift_down(heap, size, 0, scores, tie_key)
    return out


# ------------------------------------------------------------ segment max

def segment_max_np(values, owners, n_segments):
    out = np.full(n_segments, -np.inf, dtype=values.dtype)
    np.maximum.at(out, owners, values)
    return out


@njit
def segment_max_nb(values, owners, n_segments):
    out = np.full(n_segments, -np.inf, dtype=values.dtype)
    for i in range(values.shape[0]):
        o = owners[i]
        v, cur = values[i], out[o]
        out[o] = v if v > cur else cur  # branchless: owners are sorted but values are not
    return out


_NAMES = ("softmax_rows", "softmax_rows_grad", "layer_norm", "layer_norm_grad",
          "scatter_add_rows", "topk_desc", "segment_max")


def _bind(use_numba):
    suffix = "_nb" if use_numba else "_np"
    g = globals()
    for name in _NAMES:
        g[name] = g[name + suffix]


def backend():
    return "numba" if USE_NUMBA else "numpy"


_bind(USE_NUMBA)
