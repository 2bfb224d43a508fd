"""Dense tensors with tape-based reverse-mode differentiation.

Tensors wrap a numpy array.  Each differentiable op records its parents and
a closure mapping the upstream gradient to one gradient per parent.
:func:`backward` walks the graph once in reverse topological order and
accumulates into ``.grad`` of leaf tensors that require grad.

Training runs in float32; gradient checks cast a :class:`ParamStore` to
float64 with :meth:`ParamStore.astype`.  Ops never change dtype, so the
precision of a forward pass is the precision of its parameters.
"""
import hashlib
from contextlib import contextmanager

import numpy as np

from . import kernels
from .errors import ContractError, NumericError, ShapeError

TRAIN_DTYPE = np.float32
CHECK_DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the functional forms below are canonical
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ------------------------------------------------------------ constructors

def _seed_to_rng(seed):
    return np.random.default_rng(np.random.SeedSequence(int(seed)))


def init_tensor(shape, scheme, seed=0, dtype=TRAIN_DTYPE, requires_grad=True):
    """Create a parameter tensor.

    ``scheme`` is ``"xavier-uniform"``, ``("constant", c)`` or
    ``("normal", mean, std)``.  Xavier takes fan-in/fan-out from the last two
    dims; a vector uses its length for both.
    """
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeError(f"invalid shape {shape}")
    kind = scheme if isinstance(scheme, str) else scheme[0]
    if kind == "constant":
        data = np.full(shape, float(scheme[1]), dtype=np.float64)
    elif kind == "normal":
        _, mean, std = scheme
        data = _seed_to_rng(seed).normal(mean, std, size=shape)
    elif kind == "xavier-uniform":
        if len(shape) == 1:
            fan_in = fan_out = shape[0]
        else:
            fan_out, fan_in = shape[-2], shape[-1]
        a = np.sqrt(6.0 / (fan_in + fan_out))
        data = _seed_to_rng(seed).uniform(-a, a, size=shape)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return Tensor(data.astype(dtype), requires_grad=requires_grad)


class ParamStore:
    """Named parameters, iterated in lexicographic name order."""

    def __init__(self, rng_seed=0):
        self.rng_seed = int(rng_seed)
        self._params = {}

    def seed_for(self, name):
        h = hashlib.blake2b(f"{self.rng_seed}:{name}".encode(), digest_size=8)
        return int.from_bytes(h.digest(), "little")

    def create(self, name, shape, scheme, dtype=TRAIN_DTYPE):
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = init_tensor(shape, scheme, seed=self.seed_for(name), dtype=dtype)
        self._params[name] = t
        return t

    def add(self, name, tensor):
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def astype(self, dtype):
        out = ParamStore(self.rng_seed)
        for name, t in self.items():
            out.add(name, Tensor(t.data.astype(dtype)))
        return out

    def copy(self):
        return self.astype(self.dtype)

    @property
    def dtype(self):
        for t in self._params.values():
            return t.dtype
        return np.dtype(TRAIN_DTYPE)

    def num_elements(self, prefix=""):
        return sum(t.data.size for n, t in self._params.items() if n.startswith(prefix))


# --------------------------------------------------------- elementwise ops

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b):
    """Broadcasting elementwise product."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _node(ad * bd, (a, b), bw)


def hadamard(a, b):
    """Elementwise product of two same-shape tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard shape mismatch {a.shape} vs {b.shape}")
    return mul(a, b)


def scale(a, c):
    a = as_tensor(a)
    c = a.data.dtype.type(c)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def outer(u, v):
    """Rank-1 matrix ``u vᵀ`` from two vectors."""
    u, v = as_tensor(u), as_tensor(v)
    ud, vd = u.data, v.data

    def bw(g):
        return g @ vd, ud @ g

    return _node(np.outer(ud, vd), (u, v), bw)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    if _relu_probes is not None:
        _relu_probes.append(a.data.copy())
    return _node(np.where(mask, a.data, 0).astype(a.dtype, copy=False), (a,),
                 lambda g: (g * mask,))


# ------------------------------------------------------------- reductions

def sum_all(a):
    a = as_tensor(a)
    shape = a.shape
    return _node(np.asarray(a.data.sum()), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_axis(a, axis):
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _node(a.data.sum(axis=axis), (a,), bw)


def mean_axis(a, axis):
    a = as_tensor(a)
    n = a.shape[axis]
    return scale(sum_axis(a, axis), 1.0 / n)


# ------------------------------------------------------- shape & products

def matmul(a, b):
    """Batched matrix product following ``np.matmul`` broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if ad.ndim > 2 and bd.ndim == 2:
                # fold batch dims into rows: one GEMM instead of a batched one
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    if ad.ndim > 2 and bd.ndim == 2:
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + bd.shape[-1:])
    else:
        out = ad @ bd
    return _node(out, (a, b), bw)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def permute(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _node(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def transpose(a):
    a = as_tensor(a)
    axes = list(range(a.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(a, axes)


def take_rows(table, ids):
    """Gather along axis 0 of ``table``; ``ids`` may have any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    tshape = table.shape
    width = int(np.prod(tshape[1:], dtype=np.int64))

    def bw(g):
        flat = np.ascontiguousarray(g.reshape(-1, width))
        return (kernels.scatter_add_rows(tshape[0], ids.reshape(-1), flat).reshape(tshape),)

    return _node(table.data[ids], (table,), bw)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


# ------------------------------------------------------------ normalizers

def softmax_rows(a):
    """Softmax over the last axis (rows for a 2-D input)."""
    a = as_tensor(a)
    shape = a.shape
    x2 = np.ascontiguousarray(a.data.reshape(-1, shape[-1]))
    y2 = kernels.softmax_rows(x2)

    def bw(g):
        g2 = np.ascontiguousarray(g.reshape(-1, shape[-1]))
        return (kernels.softmax_rows_grad(y2, g2).reshape(shape),)

    return _node(y2.reshape(shape), (a,), bw)


def layer_norm(a, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean and unit variance, then affine."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm expects gain/bias of shape ({d},), "
                         f"got {gain.shape} and {bias.shape}")
    shape = a.shape
    x2 = np.ascontiguousarray(a.data.reshape(-1, d))
    y2, xhat, rstd = kernels.layer_norm(x2, gain.data, bias.data, a.dtype.type(eps))

    def bw(g):
        g2 = np.ascontiguousarray(g.reshape(-1, d))
        gx, gg, gb = kernels.layer_norm_grad(g2, xhat, rstd, gain.data)
        return gx.reshape(shape), gg, gb

    return _node(y2.reshape(shape), (a, gain, bias), bw)


# ---------------------------------------------------------------- backward

def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------- gradient check

_relu_probes = None


@contextmanager
def _record_relu_inputs():
    global _relu_probes
    prev = _relu_probes
    _relu_probes = []
    try:
        yield _relu_probes
    finally:
        _relu_probes = prev


def _signs(arrays):
    return [a > 0 for a in arrays]


def grad_check(forward_fn, params, probe_eps=1e-6, max_coords=None, seed=0,
               floor=1e-6, return_details=False):
    """Compare analytic gradients with central differences.

    ``forward_fn(params)`` must return a scalar Tensor built from ``params``.
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    Probes that flip the sign of any ReLU input are skipped, since the
    finite difference straddles a kink there.  ``max_coords`` samples that
    many coordinates (spread over every tensor); ``None`` checks all.
    """
    params.zero_grad()
    with _record_relu_inputs() as base_relu:
        loss = forward_fn(params)
    if not np.isfinite(loss.data).all():
        raise NumericError("non-finite loss in grad_check")
    backward(loss)
    base_signs = _signs(base_relu)

    coords = []
    for name, t in params.items():
        coords.extend((name, i) for i in range(t.data.size))
    if max_coords is not None and max_coords < len(coords):
        rng = np.random.default_rng(seed)
        # one coordinate per tensor first, the rest uniformly
        first = {}
        for c in coords:
            first.setdefault(c[0], c)
        pool = [c for c in coords if first[c[0]] != c]
        extra = max(0, max_coords - len(first))
        picks = rng.choice(len(pool), size=min(extra, len(pool)), replace=False)
        coords = list(first.values()) + [pool[i] for i in sorted(picks)]

    worst, skipped, checked = 0.0, 0, 0
    for name, i in coords:
        t = params[name]
        flat = t.data.reshape(-1)
        orig = flat[i]
        vals = []
        kinked = False
        for step in (probe_eps, -probe_eps):
            flat[i] = orig + step
            with _record_relu_inputs() as probe_relu:
                v = forward_fn(params).data
            vals.append(float(v))
            if any((s != p).any() for s, p in zip(base_signs, _signs(probe_relu))):
                kinked = True
        flat[i] = orig
        if kinked:
            skipped += 1
            continue
        if not all(np.isfinite(vals)):
            raise NumericError(f"non-finite loss while probing {name}[{i}]")
        numeric = (vals[0] - vals[1]) / (2 * probe_eps)
        analytic = 0.0 if t.grad is None else float(t.grad.reshape(-1)[i])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, err)
        checked += 1
    if return_details:
        return worst, {"checked": checked, "skipped_kinks": skipped}
    return worst
