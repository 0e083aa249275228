"""Double-precision tensors with reverse-mode differentiation.

The op set is closed: every function below that builds a graph node carries
its own backward rule, and ``tests/test_numerics.py`` checks each one against
central differences. Broadcasting is restricted to three cases: a scalar
operand, an operand whose shape is a suffix of the other (bias addition), and
an operand of equal rank with size-1 axes (the result of a ``keepdims``
reduction). Anything else raises :class:`ShapeError`.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph construction in the current thread."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad=False, name=None, *, parents=(), backward_fn=None, op=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, other: matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes or None)

    @property
    def T(self):
        return permute(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op):
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)
    return Tensor(data, op=op)


# ---------------------------------------------------------------- broadcasting


def _check_broadcast(a, b):
    if a == b or a == () or b == ():
        return
    if len(a) != len(b):
        short, long_ = (a, b) if len(a) < len(b) else (b, a)
        if long_[len(long_) - len(short):] == short:
            return
    elif all(x == y or x == 1 or y == 1 for x, y in zip(a, b)):
        return
    raise ShapeError(f"incompatible shapes {a} and {b}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    return _node(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
        "div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a) -> Tensor:
    a = as_tensor(a)
    keep = a.data > 0
    return _node(np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,), "relu")


def _sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(a)) computed as -softplus(-a)."""
    a = as_tensor(a)
    z = a.data
    out = np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))
    return _node(out, (a,), lambda g: (g * _sigmoid(-z),), "log_sigmoid")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


# ---------------------------------------------------------------- shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _node(out, (a,), lambda g: (g.reshape(src),), "reshape")


def permute(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "permute")


def swap_last(a) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return permute(a, axes)


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack needs equal shapes, got {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _node(out, tuple(tensors), backward, "stack")


# ---------------------------------------------------------------- reductions


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """``a @ b`` for (..., n, k) @ (k, m) or batch-matched (..., n, k) @ (..., k, m)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError("matmul needs at least 1-d operands")
    if a.ndim == 1 and b.ndim == 2:
        if a.shape[0] != b.shape[0]:
            raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    elif b.ndim == 1:
        if a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    else:
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
        if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd)
            gb = np.tensordot(ad, g, axes=(tuple(range(ad.ndim - 1)), tuple(range(g.ndim))))
        elif ad.ndim == 1:
            ga = g @ bd.T
            gb = np.outer(ad, g)
        elif bd.ndim == 2:
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _node(out, (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    out = matmul(x, swap_last(weight))
    return add(out, bias) if bias is not None else out


# ---------------------------------------------------------------- normalisation


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    z = a.data
    if np.isnan(z).any():
        raise NumericError("NaN in softmax input")
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (a,), backward, "softmax")


def layernorm(x, gamma, beta, eps=1e-5) -> Tensor:
    """Normalise over the last axis, then apply the affine ``gamma``/``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(f"layernorm affine shape mismatch for input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def backward(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(xhat * gd + beta.data, (x, gamma, beta), backward, "layernorm")


# ---------------------------------------------------------------- spatial ops


def _batched(x):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (C,H,W) or (N,C,H,W), got {x.shape}")


def _correlate(x, w, padding):
    # x (N,C,H,W), w (O,C,k,k) -> (N,O,H',W')
    k = w.shape[-1]
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if k == 1:
        return np.einsum("nchw,oc->nohw", x, w[:, :, 0, 0], optimize=True)
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    return np.einsum("nchwij,ocij->nohw", win, w, optimize=True)


def conv2d(x, kernel, bias=None, padding=0) -> Tensor:
    """Stride-1 cross-correlation with zero padding.

    Accepts (C_in,H,W) or (N,C_in,H,W) input and a (C_out,C_in,k,k) kernel.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    xd, single = _batched(x.data)
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"kernel must be (C_out,C_in,k,k), got {kernel.shape}")
    if kernel.shape[1] != xd.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {xd.shape[1]}, kernel {kernel.shape[1]}")
    k = kernel.shape[-1]
    if xd.shape[2] + 2 * padding < k or xd.shape[3] + 2 * padding < k:
        raise ShapeError("conv2d kernel larger than padded input")
    wd = kernel.data
    out = _correlate(xd, wd, padding)
    parents = (x, kernel)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (kernel.shape[0],):
            raise ShapeError(f"conv2d bias must be ({kernel.shape[0]},), got {bias.shape}")
        out = out + bias.data[:, None, None]
        parents = (x, kernel, bias)

    def backward(g):
        g4 = g[None] if single else g
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        win = sliding_window_view(xp, g4.shape[2:], axis=(2, 3))
        gw = np.einsum("ncijhw,nohw->ocij", win, g4, optimize=True)
        flipped = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx = _correlate(g4, flipped, max(k - 1 - padding, 0))
        if padding > k - 1:
            crop = padding - (k - 1)
            gx = gx[:, :, crop:-crop, crop:-crop]
        if single:
            gx = gx[0]
        grads = [gx, gw]
        if len(parents) == 3:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _node(out[0] if single else out, parents, backward, "conv2d")


def avgpool2d(x, factor) -> Tensor:
    x = as_tensor(x)
    *lead, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"spatial dims {(h, w)} not divisible by pooling factor {factor}")
    if factor == 1:
        return x
    blocks = x.data.reshape(*lead, h // factor, factor, w // factor, factor)
    out = blocks.mean(axis=(-3, -1))
    scale = 1.0 / (factor * factor)

    def backward(g):
        return (np.repeat(np.repeat(g, factor, axis=-2), factor, axis=-1) * scale,)

    return _node(out, (x,), backward, "avgpool")


def upsample_nearest(x, factor) -> Tensor:
    x = as_tensor(x)
    if factor == 1:
        return x
    *lead, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)

    def backward(g):
        return (g.reshape(*lead, h, factor, w, factor).sum(axis=(-3, -1)),)

    return _node(out, (x,), backward, "upsample")


# ---------------------------------------------------------------- backward pass


def _topo_order(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Backpropagate from a scalar ``loss``.

    Leaf gradients are accumulated into ``leaf.grad``. Returns the gradients
    of named leaves reached from ``loss``; a loss that does not depend on any
    trainable leaf yields an empty map.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads = {id(loss): np.ones_like(loss.data)}
    named = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node.name is not None:
                named[node.name] = node.grad
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return named


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    tolerance: float
    passed: bool

    def __str__(self):
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} {self.op_name}: max rel err {self.max_rel_error:.3e} (tol {self.tolerance:.0e})"


def grad_check(
    fn: Callable[[Tensor], Tensor],
    point,
    eps: float = 1e-5,
    tolerance: float = 1e-4,
    op_name: str = "fn",
) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``fn`` at ``point`` with central differences."""
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    base = np.array(as_tensor(point).data, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    out = fn(x)
    if out.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(base.size):
            vals = []
            for sign in (1.0, -1.0):
                probe = base.copy().reshape(-1)
                probe[i] += sign * eps
                v = fn(Tensor(probe.reshape(base.shape))).item()
                if np.isnan(v):
                    raise NumericError(f"NaN in function output at coordinate {np.unravel_index(i, base.shape)}")
                vals.append(v)
            flat[i] = (vals[0] - vals[1]) / (2 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    worst = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(op_name, worst, tolerance, worst <= tolerance)


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: dict,
    eps: float = 1e-5,
    tolerance: float = 1e-4,
    op_name: str = "params",
) -> GradCheckReport:
    """Like :func:`grad_check` but perturbs existing leaf tensors in place.

    ``loss_fn`` is re-evaluated with every coordinate of every tensor in
    ``params`` nudged by +-eps; the tensors are restored afterwards.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    for p in params.values():
        p.grad = None
    backward(loss_fn())
    worst = 0.0
    with no_grad():
        for name, p in params.items():
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            original = p.data
            numeric = np.zeros(original.size)
            for i in range(original.size):
                vals = []
                for sign in (1.0, -1.0):
                    probe = original.copy().reshape(-1)
                    probe[i] += sign * eps
                    p.data = probe.reshape(original.shape)
                    v = loss_fn().item()
                    if np.isnan(v):
                        p.data = original
                        raise NumericError(f"NaN in function output at {name}{np.unravel_index(i, original.shape)}")
                    vals.append(v)
                numeric[i] = (vals[0] - vals[1]) / (2 * eps)
            p.data = original
            numeric = numeric.reshape(original.shape)
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
            if denom.size:
                worst = max(worst, float((np.abs(analytic - numeric) / denom).max()))
    return GradCheckReport(op_name, worst, tolerance, worst <= tolerance)
