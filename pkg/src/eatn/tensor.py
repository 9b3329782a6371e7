"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every primitive below records a node holding its inputs and a backward
closure.  Node ids come from a global monotone counter, so sorting reachable
nodes by id yields a valid topological order; :class:`Tape` is that order.
"""
from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError, DimensionError

_ids = itertools.count(1)
_local = threading.local()


def grad_enabled():
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording nodes (finite-difference probes, inference)."""
    old = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = old


@contextlib.contextmanager
def relu_patterns():
    """Collect the on/off pattern of every :func:`relu` evaluated inside the block.

    Finite-difference checks compare patterns on both sides of a probe to tell
    whether it straddles a kink.
    """
    old = getattr(_local, "patterns", None)
    seen = []
    _local.patterns = seen
    try:
        yield seen
    finally:
        _local.patterns = old


class Node:
    __slots__ = ("id", "op", "inputs", "backward")

    def __init__(self, op, inputs, backward):
        self.id = next(_ids)
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tensor:
    """A float64 array plus an optional gradient and its place on the tape."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) \
            else data.astype(np.float64, copy=False)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def node_id(self):
        return None if self.node is None else self.node.id

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self, grad=None):
        backward(self, grad)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; all route through the primitives below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, inputs, op, backward_fn):
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, backward_fn)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not match") from None


class Tape:
    """Nodes reachable from an output, in creation (topological) order."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out):
        seen = {}
        stack = [out.node] if out.node is not None else []
        while stack:
            node = stack.pop()
            if node.id in seen:
                continue
            seen[node.id] = node
            for t in node.inputs:
                if t.node is not None and t.node.id not in seen:
                    stack.append(t.node)
        return cls([seen[k] for k in sorted(seen)])


def _key(t):
    # leaves and produced tensors live in disjoint key spaces
    return ("n", t.node.id) if t.node is not None else ("l", id(t))


def gradients(out, wrt, grad=None):
    """Gradients of ``out`` with respect to each tensor in ``wrt``, as arrays.

    Does not touch ``.grad``; safe to call concurrently on separate graphs.
    """
    tape = Tape.from_output(out)
    if grad is None:
        grad = np.ones_like(out.data)
    acc = {_key(out): np.asarray(grad, dtype=np.float64)}
    for node in reversed(tape.nodes):
        g = acc.get(("n", node.id))
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = _key(t)
            acc[key] = acc[key] + gi if key in acc else gi
    return [acc.get(_key(t), np.zeros_like(t.data)) for t in wrt]


def backward(loss, grad=None):
    """Accumulate ``d loss / d leaf`` into ``leaf.grad`` for every tracked leaf."""
    if grad is None and loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_output(loss)
    leaves = {}
    for node in tape.nodes:
        for t in node.inputs:
            if t.node is None and t.requires_grad:
                leaves[id(t)] = t
    if loss.node is None and loss.requires_grad:
        leaves[id(loss)] = loss
    targets = list(leaves.values())
    for t, g in zip(targets, gradients(loss, targets, grad)):
        t.grad = g.copy() if t.grad is None else t.grad + g


# --------------------------------------------------------------------------
# primitives


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), "add",
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), "sub",
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), "mul",
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a, c):
    c = float(c)
    return _result(a.data * c, (a,), "scale", lambda g: (g * c,))


def relu(a):
    pos = a.data > 0
    seen = getattr(_local, "patterns", None)
    if seen is not None:
        seen.append(pos)
    return _result(np.where(pos, a.data, 0.0), (a,), "relu", lambda g: (np.where(pos, g, 0.0),))


def exp(a):
    out = np.exp(a.data)
    return _result(out, (a,), "exp", lambda g: (g * out,))


def log(a):
    ad = a.data
    return _result(np.log(ad), (a,), "log", lambda g: (g / ad,))


def mask_zero(a, mask):
    """Replace entries where ``mask`` is true by exactly 0; no gradient flows there."""
    keep = ~np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    return _result(np.where(keep, a.data, 0.0), (a,), "mask_zero",
                   lambda g: (np.where(keep, g, 0.0),))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape),
                _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape))

    return _result(ad @ bd, (a, b), "matmul", bw)


def reshape(a, shape):
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _result(out, (a,), "reshape", lambda g: (g.reshape(src),))


def transpose(a, axes):
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), "transpose", lambda g: (g.transpose(inv),))


def getitem(a, idx):
    src = a.shape

    def bw(g):
        out = np.zeros(src)
        np.add.at(out, idx, g)
        return (out,)

    return _result(a.data[idx], (a,), "getitem", bw)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat",
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def sum_(a, axis=None, keepdims=False):
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", bw)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def layer_norm(x, gain, offset, eps=1e-5):
    """Normalize over the last axis, then apply per-feature ``gain`` and ``offset``."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + offset.data

    def bw(g):
        gh = g * gd
        n = xd.shape[-1]
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
        return (gx, _unbroadcast(g * xhat, gd.shape), _unbroadcast(g, offset.shape))

    return _result(out, (x, gain, offset), "layer_norm", bw)


def masked_softmax(x, mask=None, axis=-1):
    """Softmax along ``axis`` with ``mask`` (true = forbidden) entries forced to 0.

    The row max is taken over allowed entries only.  Fully masked rows raise.
    """
    xd = x.data
    if mask is None:
        m = xd.max(axis=axis, keepdims=True)
        e = np.exp(xd - m)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        allowed = ~mask
        if not allowed.any(axis=axis).all():
            bad = np.argwhere(~allowed.any(axis=axis))[0]
            raise ContractError(f"masked_softmax: row {tuple(int(i) for i in bad)} is fully masked")
        m = np.where(allowed, xd, -np.inf).max(axis=axis, keepdims=True)
        e = np.where(allowed, np.exp(np.where(allowed, xd - m, 0.0)), 0.0)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _result(p, (x,), "masked_softmax", bw)


def log_softmax(x, axis=-1):
    xd = x.data
    m = xd.max(axis=axis, keepdims=True)
    z = xd - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _result(out, (x,), "log_softmax",
                   lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def conv2d(x, kernel, bias=None, tap_mask=None, backend=None):
    """Same-padded 2D convolution over a channels-last image ``x[..., H, W, C_in]``.

    ``kernel`` is ``[kh, kw, C_in, C_out]`` with odd ``kh, kw``.  Taps where
    ``tap_mask`` is false are skipped entirely and get an exact-zero gradient.
    """
    kh, kw, ci, co = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"conv2d kernel dims must be odd, got {kh}x{kw}")
    if x.shape[-1] != ci:
        raise DimensionError(f"conv2d: input channels {x.shape} vs kernel {kernel.shape}")
    if bias is None:
        bias = Tensor(np.zeros(co))
    if bias.shape != (co,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} vs C_out={co}")
    mask = np.ones((kh, kw), dtype=bool) if tap_mask is None else np.asarray(tap_mask, dtype=bool)
    if mask.shape != (kh, kw):
        raise DimensionError(f"conv2d: tap mask {mask.shape} vs kernel {kh}x{kw}")
    lead = x.shape[:-3]
    H, W = x.shape[-3], x.shape[-2]
    xd = x.data.reshape((-1, H, W, ci))
    wd = kernel.data
    out = kernels.conv2d_forward(xd, wd, bias.data, mask, backend)

    def bw(g):
        gx, gw, gb = kernels.conv2d_backward(xd, wd, mask, g.reshape(out.shape), backend)
        gw[~mask] = 0.0
        return gx.reshape(x.shape), gw, gb

    return _result(out.reshape(lead + (H, W, co)), (x, kernel, bias), "conv2d", bw)


def shift2d(x, down, right):
    """Translate ``x[..., H, W, C]`` by (down, right) pixels with zero fill."""
    H, W = x.shape[-3], x.shape[-2]
    out = np.zeros_like(x.data)
    out[..., down:, right:, :] = x.data[..., : H - down, : W - right, :]

    def bw(g):
        gi = np.zeros_like(g)
        gi[..., : H - down, : W - right, :] = g[..., down:, right:, :]
        return (gi,)

    return _result(out, (x,), "shift2d", bw)
