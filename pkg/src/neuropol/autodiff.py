"""Reverse-mode differentiation tape over float64 numpy arrays.

Small by design: only the primitives the operator network and the physics
loss need.  Values are eagerly computed; each op registers a closure that
routes the output gradient to its parents.  Gradients accumulate on leaves
until :func:`zero_grad` is called, so calling :func:`backward` twice doubles
them.

The spiking nonlinearity is handled by :func:`spike_threshold`: a hard
Heaviside forward with a fast-sigmoid surrogate derivative on the backward
pass (routed to both the input and the threshold, so thresholds are
learnable).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .wavelets import WaveletPlan


class AutodiffError(ValueError):
    pass


@dataclass(frozen=True)
class SurrogateSpec:
    """Fast-sigmoid surrogate: d/du H(u) ~ 1 / (k|u| + 1)^2."""

    kind: str = "fast_sigmoid"
    slope: float = 25.0

    def __post_init__(self):
        if self.kind != "fast_sigmoid":
            raise AutodiffError(f"unknown surrogate {self.kind!r}")
        if self.slope <= 0:
            raise AutodiffError("surrogate slope must be positive")

    def derivative(self, u: np.ndarray) -> np.ndarray:
        return 1.0 / (self.slope * np.abs(u) + 1.0) ** 2


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._vjp = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, grad={self.grad is not None})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), scale(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


def _make(value, parents, vjp) -> Tensor:
    out = Tensor(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make(a.value + b.value, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    def vjp(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)
    return _make(a.value * b.value, (a, b), vjp)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.value * c, (a,), lambda g: (g * c,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.value**2, (a,), lambda g: (2.0 * g * a.value,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    def vjp(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _make(a.value @ b.value, (a, b), vjp)


# ---------------------------------------------------------------------------
# Pointwise nonlinearities
# ---------------------------------------------------------------------------

def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.value)
    return _make(y, (a,), lambda g: (g * (1.0 - y**2),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    a = as_tensor(a)
    phi = ndtr(a.value)
    y = a.value * phi
    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a.value**2)
        return (g * (phi + a.value * pdf),)
    return _make(y, (a,), vjp)


ACTIVATIONS = {
    "tanh": tanh,
    "gelu": gelu,
    "relu": relu,
    "identity": lambda x: as_tensor(x),
}


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)
    return _make(a.value.sum(axis=axis), (a,), vjp)


def tmean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return scale(tsum(a, axis=axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def _is_basic_index(key) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, slice, type(Ellipsis))) for k in items)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic_index(key)
    def vjp(g):
        out = np.zeros(a.shape)
        if basic:
            out[key] = g  # basic indexing never aliases
        else:
            np.add.at(out, key, g)
        return (out,)
    return _make(a.value[key], (a,), vjp)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.value.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))
    return _make(np.concatenate([t.value for t in tensors], axis=axis), tensors, vjp)


# ---------------------------------------------------------------------------
# Channel-mixing contractions used by the operator network
# ---------------------------------------------------------------------------

def _channels_last(v):
    # (B, C, ...) -> (B*N, C) with N = trailing size
    B, C = v.shape[0], v.shape[1]
    return np.ascontiguousarray(np.moveaxis(v, 1, -1)).reshape(-1, C)


def _channels_first(flat, template_shape, out_channels):
    B = template_shape[0]
    lead = template_shape[2:]
    return np.moveaxis(flat.reshape((B,) + lead + (out_channels,)), -1, 1)


def channel_affine(x, w, b=None) -> Tensor:
    """Pointwise affine map over the channel axis: (B,C,...) x (C,O) -> (B,O,...)."""
    x, w = as_tensor(x), as_tensor(w)
    xv = x.value
    x_flat = _channels_last(xv)
    y_flat = x_flat @ w.value
    if b is not None:
        b = as_tensor(b)
        y_flat = y_flat + b.value
    y = _channels_first(y_flat, xv.shape, w.value.shape[1])
    parents = [x, w] if b is None else [x, w, b]
    def vjp(g):
        g_flat = _channels_last(g)
        gx = _channels_first(g_flat @ w.value.T, xv.shape, xv.shape[1])
        gw = x_flat.T @ g_flat
        if b is None:
            return gx, gw
        return gx, gw, g_flat.sum(axis=0)
    return _make(np.ascontiguousarray(y), parents, vjp)


def coeff_mix(x, w) -> Tensor:
    """Per-coefficient channel mixing: (B,C,K) x (C,O,K) -> (B,O,K)."""
    x, w = as_tensor(x), as_tensor(w)
    xk = np.ascontiguousarray(x.value.transpose(2, 0, 1))      # (K,B,C)
    wk = np.ascontiguousarray(w.value.transpose(2, 0, 1))      # (K,C,O)
    y = np.matmul(xk, wk).transpose(1, 2, 0)                    # (B,O,K)
    def vjp(g):
        gk = np.ascontiguousarray(g.transpose(2, 0, 1))         # (K,B,O)
        gx = np.matmul(gk, wk.transpose(0, 2, 1)).transpose(1, 2, 0)
        gw = np.matmul(xk.transpose(0, 2, 1), gk).transpose(1, 2, 0)
        return np.ascontiguousarray(gx), np.ascontiguousarray(gw)
    return _make(np.ascontiguousarray(y), (x, w), vjp)


# ---------------------------------------------------------------------------
# Linear maps with supplied adjoints (wavelets, interpolation, projections)
# ---------------------------------------------------------------------------

def linear_map(x, fwd, adj, out_note: str = "linmap") -> Tensor:
    """Apply a linear operator given as (forward, adjoint) array functions."""
    x = as_tensor(x)
    return _make(fwd(x.value), (x,), lambda g: (adj(g),))


def dwt_flat(x, plan: WaveletPlan) -> Tensor:
    """Multilevel analysis to the flat coefficient vector (trailing axes)."""
    return linear_map(x, plan.forward, plan.adjoint_forward)


def idwt_flat(c, plan: WaveletPlan) -> Tensor:
    """Synthesis back from the flat coefficient vector."""
    return linear_map(c, plan.inverse, plan.adjoint_inverse)


def sparse_map(x, mat, mat_t) -> Tensor:
    """out[..., i] = sum_j mat[i, j] x[..., j] for a scipy sparse matrix."""
    x = as_tensor(x)
    n_in = mat.shape[1]
    def fwd(v):
        lead = v.shape[:-1]
        flat = v.reshape(-1, n_in)
        return np.asarray((mat @ flat.T).T).reshape(lead + (mat.shape[0],))
    def adj(g):
        lead = g.shape[:-1]
        flat = g.reshape(-1, mat.shape[0])
        return np.asarray((mat_t @ flat.T).T).reshape(lead + (n_in,))
    return _make(fwd(x.value), (x,), lambda g: (adj(g),))


# ---------------------------------------------------------------------------
# Spiking threshold
# ---------------------------------------------------------------------------

def spike_threshold(x, threshold, surrogate: SurrogateSpec) -> Tensor:
    """Hard gate H(x - threshold) with a fast-sigmoid surrogate backward."""
    x, threshold = as_tensor(x), as_tensor(threshold)
    u = x.value - threshold.value
    y = (u >= 0.0).astype(np.float64)
    def vjp(g):
        s = g * surrogate.derivative(u)
        # -inf/+inf sentinels produce u = +-inf, where the surrogate is 0.
        s = np.where(np.isfinite(u), s, 0.0)
        return _unbroadcast(s, x.shape), _unbroadcast(-s, threshold.shape)
    return _make(y, (x, threshold), vjp)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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


def backward(loss: Tensor, leaves=None) -> dict:
    """Accumulate d(loss)/d(leaf) into each leaf's ``.grad``.

    Returns a mapping ``id(leaf) -> grad`` covering every requires-grad leaf
    reached from ``loss``; leaves passed explicitly but not reached get zeros.
    """
    if loss.value.size != 1:
        raise AutodiffError("backward needs a scalar loss")
    if not loss.requires_grad:
        grads = {}
        if leaves:
            for leaf in leaves:
                if leaf.grad is None:
                    leaf.grad = np.zeros(leaf.shape)
                grads[id(leaf)] = leaf.grad
        return grads
    order = _topo_order(loss)
    # Interior grads are scratch for this pass; leaf grads persist/accumulate.
    for node in order:
        if node._vjp is not None:
            node.grad = None
    local: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = local.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in local:
                local[pid] = local[pid] + pg
            else:
                local[pid] = pg
    grads = {}
    for node in order:
        if node._vjp is None and node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros(node.shape)
            grads[id(node)] = node.grad
    if leaves:
        for leaf in leaves:
            if id(leaf) not in grads:
                if leaf.grad is None:
                    leaf.grad = np.zeros(leaf.shape)
                grads[id(leaf)] = leaf.grad
    return grads


def zero_grad(leaves):
    for leaf in leaves:
        leaf.grad = None
