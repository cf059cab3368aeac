"""Reverse-mode automatic differentiation over dense numpy arrays.

Every operation on :class:`Tensor` records the primitive applied, its parent
nodes and a vector-Jacobian closure. Calling :func:`backward` on a scalar loss
walks the recorded graph once, in reverse topological order, and accumulates
gradients into every node that requires them. The graph is rebuilt on each
forward pass (define-by-run), so control flow in model code needs no special
treatment.

All arrays are 32-bit floats by default (see ``DTYPE``); gradient checking may
temporarily elevate precision with :func:`use_dtype` to measure truncation
error of the finite-difference protocol rather than float32 rounding noise.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractViolation, NumericFailure

DTYPE = np.float32

# Finite checks run during backward; disable only for profiling experiments.
FINITE_CHECKS = True

_node_counter = itertools.count()


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    global DTYPE
    prev = DTYPE
    DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = prev


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode autodiff.

    ``parents`` and ``vjp`` together form one record of the computation: the
    vjp maps the output gradient to one gradient per parent. Leaf tensors
    (parameters, constants) have no vjp.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "vjp", "node_id")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), vjp: Callable | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.node_id = next(_node_counter)

    # -- introspection -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, op="detach")

    def zero_grad(self):
        self.grad = None

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        out_data = self.data + other.data
        return Tensor(out_data, op="add", parents=(self, other),
                      vjp=lambda g: (_unbroadcast(g, self.data.shape),
                                     _unbroadcast(g, other.data.shape)))

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other)
        return Tensor(self.data - other.data, op="sub", parents=(self, other),
                      vjp=lambda g: (_unbroadcast(g, self.data.shape),
                                     _unbroadcast(-g, other.data.shape)))

    def __rsub__(self, other):
        return _as_tensor(other).__sub__(self)

    def __mul__(self, other):
        other = _as_tensor(other)
        return Tensor(self.data * other.data, op="mul", parents=(self, other),
                      vjp=lambda g: (_unbroadcast(g * other.data, self.data.shape),
                                     _unbroadcast(g * self.data, other.data.shape)))

    __rmul__ = __mul__

    def __neg__(self):
        return Tensor(-self.data, op="neg", parents=(self,), vjp=lambda g: (-g,))

    def __truediv__(self, other):
        other = _as_tensor(other)
        inv = 1.0 / other.data
        return Tensor(self.data * inv, op="div", parents=(self, other),
                      vjp=lambda g: (_unbroadcast(g * inv, self.data.shape),
                                     _unbroadcast(-g * self.data * inv * inv, other.data.shape)))

    def __rtruediv__(self, other):
        return _as_tensor(other).__truediv__(self)

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise ContractViolation("tensor power supports scalar exponents only")
        out_data = self.data ** exponent
        return Tensor(out_data, op="pow", parents=(self,),
                      vjp=lambda g: (g * exponent * self.data ** (exponent - 1),))

    def __matmul__(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
            raise ContractViolation(f"matmul needs equal-rank >=2D operands, got {a.shape} @ {b.shape}")

        def vjp(g):
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            return ga, gb

        return Tensor(a @ b, op="matmul", parents=(self, other), vjp=vjp)

    def __getitem__(self, key):
        out_data = self.data[key]

        def vjp(g):
            full = np.zeros_like(self.data)
            np.add.at(full, key, g)
            return (full,)

        return Tensor(out_data, op="getitem", parents=(self,), vjp=vjp)

    # -- shape manipulation --------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return Tensor(self.data.reshape(shape), op="reshape", parents=(self,),
                      vjp=lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))
        return Tensor(self.data.transpose(axes), op="transpose", parents=(self,),
                      vjp=lambda g: (g.transpose(inverse),))

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, self.data.shape).copy(),)
            g_exp = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g_exp, self.data.shape).copy(),)

        return Tensor(out_data, op="sum", parents=(self,), vjp=vjp)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- elementwise ----------------------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)
        return Tensor(out_data, op="exp", parents=(self,), vjp=lambda g: (g * out_data,))

    def log(self):
        return Tensor(np.log(self.data), op="log", parents=(self,),
                      vjp=lambda g: (g / self.data,))

    def sqrt(self):
        out_data = np.sqrt(self.data)
        return Tensor(out_data, op="sqrt", parents=(self,),
                      vjp=lambda g: (g * 0.5 / out_data,))

    def tanh(self):
        out_data = np.tanh(self.data)
        return Tensor(out_data, op="tanh", parents=(self,),
                      vjp=lambda g: (g * (1.0 - out_data * out_data),))


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's original shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def constant(data) -> Tensor:
    return Tensor(data)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True, op="param")


def stop_gradient(x: Tensor) -> Tensor:
    """Treat ``x`` as a constant for all downstream gradients."""
    return Tensor(x.data, op="stop_gradient")


# -- fused primitives --------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        return ((g - inner) * out_data,)

    return Tensor(out_data, op="softmax", parents=(x,), vjp=vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True)) + m
    out_data = x.data - lse
    probs = np.exp(out_data)

    def vjp(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor(out_data, op="log_softmax", parents=(x,), vjp=vjp)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian error linear unit, x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(x.data / np.sqrt(np.asarray(2.0, dtype=x.data.dtype))))
    out_data = x.data * cdf
    pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)

    def vjp(g):
        return (g * (cdf + x.data * pdf),)

    return Tensor(out_data, op="gelu", parents=(x,), vjp=vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gamma.data + beta.data

    def vjp(g):
        reduce_axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=reduce_axes)
        dbeta = g.sum(axis=reduce_axes)
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        return dx, dgamma, dbeta

    return Tensor(out_data, op="layer_norm", parents=(x, gamma, beta), vjp=vjp)


def take_rows(x: Tensor, indices) -> Tensor:
    """Gather rows of a 2-D tensor (embedding-style lookup)."""
    idx = np.asarray(indices, dtype=np.int64)
    out_data = x.data[idx]

    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor(out_data, op="take_rows", parents=(x,), vjp=vjp)


def take_along(x: Tensor, indices: np.ndarray, axis: int = -1) -> Tensor:
    """Differentiable ``np.take_along_axis`` for 2-D inputs on the last axis."""
    if x.data.ndim != 2 or axis not in (-1, 1):
        raise ContractViolation("take_along supports 2-D inputs on the last axis")
    idx = np.asarray(indices, dtype=np.int64)
    out_data = np.take_along_axis(x.data, idx, axis=-1)

    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (np.arange(idx.shape[0])[:, None], idx), g)
        return (full,)

    return Tensor(out_data, op="take_along", parents=(x,), vjp=vjp)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: tuple[int, int] = (2, 2)) -> Tensor:
    """2-D convolution with 'same' padding: out spatial dim = ceil(in / stride).

    ``x`` is (C_in, H, W); ``weight`` is (C_out, C_in, kh, kw).
    """
    cin, h, w = x.data.shape
    cout, cin_w, kh, kw = weight.data.shape
    if cin != cin_w:
        raise ContractViolation(f"conv2d channel mismatch: input {cin}, weight {cin_w}")
    sh, sw = stride
    oh = -(-h // sh)
    ow = -(-w // sw)
    pad_h = max((oh - 1) * sh + kh - h, 0)
    pad_w = max((ow - 1) * sw + kw - w, 0)
    pads = ((0, 0), (pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2))
    xp = np.pad(x.data, pads)
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
    out_data = np.einsum("chwij,ocij->ohw", view, weight.data, optimize=True)
    if bias is not None:
        out_data = out_data + bias.data[:, None, None]

    def vjp(g):
        dw = np.einsum("chwij,ohw->ocij", view, g, optimize=True)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                contrib = np.einsum("ohw,oc->chw", g, weight.data[:, :, i, j], optimize=True)
                dxp[:, i:i + oh * sh:sh, j:j + ow * sw:sw] += contrib
        dx = dxp[:, pads[1][0]:pads[1][0] + h, pads[2][0]:pads[2][0] + w]
        if bias is not None:
            return dx, dw, g.sum(axis=(1, 2))
        return dx, dw

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor(out_data, op="conv2d", parents=parents, vjp=vjp)


# -- graph traversal ----------------------------------------------------------


def topo_order(root: Tensor) -> list[Tensor]:
    """Deterministic post-order of the recorded graph reachable from ``root``.

    Iterative DFS: graphs routinely exceed Python's recursion limit.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for parent in reversed(node.parents):
            if parent.node_id not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Iterable[tuple[str, Tensor]] = ()) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(node) into ``.grad`` for every node that needs it.

    ``loss`` must be scalar. Returns a name->gradient map for ``params``;
    parameters the loss never touched get explicit zero gradients.
    """
    if loss.data.size != 1:
        raise ContractViolation(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if FINITE_CHECKS and not np.all(np.isfinite(loss.data)):
        raise NumericFailure("non-finite loss value", node_id=loss.node_id, op=loss.op)

    order = topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.vjp is None or node.grad is None:
            continue
        grads = node.vjp(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if FINITE_CHECKS and not np.all(np.isfinite(g)):
                raise NumericFailure("non-finite gradient", node_id=node.node_id, op=node.op)
            if parent.grad is None:
                parent.grad = g.astype(parent.data.dtype, copy=True)
            else:
                parent.grad = parent.grad + g

    out: dict[str, np.ndarray] = {}
    for name, p in params:
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out


def zero_grads(params: Iterable[tuple[str, Tensor]]):
    for _, p in params:
        p.grad = None


# -- finite-difference checking ------------------------------------------------


def gradient_check(loss_fn: Callable[[], Tensor],
                   params: Sequence[tuple[str, Tensor]],
                   eps: float = 1e-3,
                   max_coords: int = 16,
                   rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` rebuilds the forward pass from the live ``params`` tensors, so
    perturbing a parameter in place and re-calling it yields the perturbed
    loss. For tensors larger than ``max_coords`` a seeded random subset of
    coordinates is probed. Returns the worst relative error seen.
    """
    rng = rng or np.random.default_rng(0)
    zero_grads(params)
    loss = loss_fn()
    analytic = backward(loss, params)

    worst = 0.0
    for name, p in params:
        n = p.data.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        for c in coords:
            where = np.unravel_index(int(c), p.data.shape)
            original = p.data[where]
            p.data[where] = original + eps
            up = loss_fn().item()
            p.data[where] = original - eps
            down = loss_fn().item()
            p.data[where] = original
            fd = (up - down) / (2.0 * eps)
            a = float(analytic[name][where])
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
            worst = max(worst, rel)
    return worst
