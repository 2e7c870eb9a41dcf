"""Dense tensors with reverse-mode automatic differentiation.

Data lives in row-major contiguous numpy arrays; every differentiable
operation records a node holding its inputs and a backward rule.  Calling
``backward`` on a scalar replays those rules in reverse execution order and
accumulates gradients into the ``grad`` slot of every tensor that requires
them.  The graph is discarded as it is consumed, so each forward pass pays
for exactly one backward pass.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class GraphError(RuntimeError):
    """Raised on autodiff misuse, e.g. backward from a non-scalar."""


_op_ids = itertools.count()

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class _Node:
    """Graph record: parents plus the rule mapping d(out) to d(inputs)."""

    __slots__ = ("oid", "op", "inputs", "rule")

    def __init__(self, op: str, inputs: Sequence["Tensor"], rule: Callable):
        self.oid = next(_op_ids)
        self.op = op
        self.inputs = inputs
        self.rule = rule


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.ascontiguousarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._node: Optional[_Node] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def permute(self, *axes):
        return permute(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self):
        backward(self)


def _needs_graph(*tensors: Tensor) -> bool:
    return any(t.requires_grad or t._node is not None for t in tensors)


def _attach(out: Tensor, op: str, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    if _needs_graph(*inputs):
        out._node = _Node(op, list(inputs), rule)
        out.name = out.name or op
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into t.grad for every reachable parameter.

    The root must be scalar.  Repeated calls (across fresh forward passes)
    accumulate; clear grads between steps.  Consumes the graph.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward root must be scalar, got shape {loss.data.shape}")
    if loss._node is None:
        if loss.requires_grad:
            g = np.ones_like(loss.data)
            loss.grad = g if loss.grad is None else loss.grad + g
        return

    # Collect reachable graph nodes, then replay in reverse execution order.
    nodes: list[Tensor] = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen or t._node is None:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._node.inputs)
    nodes.sort(key=lambda t: t._node.oid, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in nodes:
        g = grads.pop(id(t), None)
        node = t._node
        t._node = None
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.rule(g)):
            if gi is None:
                continue
            if inp._node is not None:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
            elif inp.requires_grad:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / linear algebra
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    return _attach(out, "add", (a, b),
                   lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    return _attach(out, "mul", (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.data.shape),
                              _unbroadcast(g * a.data, b.data.shape)))


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s)
    return _attach(out, "scale", (a,), lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product on the last two axes; leading axes must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul mismatch: {a.data.shape} @ {b.data.shape}")
    if a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def rule(g):
        return (g @ b.data.swapaxes(-1, -2), a.data.swapaxes(-1, -2) @ g)

    return _attach(out, "matmul", (a, b), rule)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    mask = x.data > 0
    return _attach(out, "relu", (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF form: x * Phi(x)."""
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = Tensor(x.data * phi)

    def rule(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (phi + x.data * pdf),)

    return _attach(out, "gelu", (x,), rule)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def rule(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _attach(out, "softmax", (x,), rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then affine.  gamma/beta are 1-D."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def rule(g):
        dg = (g * xhat).reshape(-1, x.data.shape[-1]).sum(axis=0)
        db = g.reshape(-1, x.data.shape[-1]).sum(axis=0)
        gg = g * gamma.data
        # d(xhat)/dx folded analytically: inv * (gg - mean(gg) - xhat*mean(gg*xhat))
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (gg - m1 - xhat * m2)
        return (dx, dg.astype(x.data.dtype), db.astype(x.data.dtype))

    return _attach(out, "layer_norm", (x, gamma, beta), rule)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return _attach(out, "reshape", (x,), lambda g: (g.reshape(x.data.shape),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    return _attach(out, "permute", (x,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _attach(out, "concat", tuple(tensors), rule)


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    if sum(sizes) != x.data.shape[axis]:
        raise ShapeError(f"split sizes {sizes} do not cover axis of length {x.data.shape[axis]}")
    outs = []
    start = 0
    for n in sizes:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, start + n)
        idx = tuple(idx)
        piece = Tensor(np.ascontiguousarray(x.data[idx]))

        def rule(g, idx=idx):
            full = np.zeros_like(x.data)
            full[idx] = g
            return (full,)

        outs.append(_attach(piece, "split", (x,), rule))
        start += n
    return outs


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx, x.data.shape).copy(),)

    return _attach(out, "sum", (x,), rule)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# convolution family
# ---------------------------------------------------------------------------

def _conv_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _im2col(xp: np.ndarray, k: int, s: int, oh: int, ow: int) -> np.ndarray:
    """(C, Hp, Wp) -> (C, k, k, oh, ow), one strided slice per kernel offset."""
    c = xp.shape[0]
    cols = np.empty((c, k, k, oh, ow), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i:i + s * oh:s, j:j + s * ow:s]
    return cols


def _col2im(cols: np.ndarray, shape: tuple, k: int, s: int, p: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add (C,k,k,oh,ow) back to (C,H,W)."""
    c, h, w = shape
    oh, ow = cols.shape[-2:]
    xp = np.zeros((c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, i:i + s * oh:s, j:j + s * ow:s] += cols[:, i, j]
    return xp[:, p:p + h, p:p + w] if p else xp


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D convolution, zero padded.  x: (Cin,H,W); w: (Cout, Cin/groups, k, k)."""
    cin, h, width = x.data.shape
    cout, cin_g, k, k2 = w.data.shape
    if k != k2:
        raise ShapeError("conv2d kernels must be square")
    if cin % groups or cout % groups or cin_g != cin // groups:
        raise ShapeError(f"conv2d grouping invalid: Cin={cin} Cout={cout} groups={groups} w={w.data.shape}")
    oh, ow = _conv_out(h, k, stride, padding), _conv_out(width, k, stride, padding)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d output collapses: input {h}x{width}, k={k} s={stride} p={padding}")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, oh, ow)
    colsg = cols.reshape(groups, cin_g, k, k, oh, ow)
    wg = w.data.reshape(groups, cout // groups, cin_g, k, k)
    y = np.einsum("goikl,giklhw->gohw", wg, colsg, optimize=True).reshape(cout, oh, ow)
    if bias is not None:
        y = y + bias.data[:, None, None]

    def rule(g):
        gg = g.reshape(groups, cout // groups, oh, ow)
        dw = np.einsum("gohw,giklhw->goikl", gg, colsg, optimize=True).reshape(w.data.shape)
        dx = None
        if x.requires_grad or x._node is not None:
            dcols = np.einsum("goikl,gohw->giklhw", wg, gg, optimize=True)
            dx = _col2im(dcols.reshape(cin, k, k, oh, ow), x.data.shape, k, stride, padding)
        if bias is None:
            return (dx, dw)
        return (dx, dw, g.sum(axis=(1, 2)))

    inputs = (x, w) if bias is None else (x, w, bias)
    return _attach(Tensor(y), "conv2d", inputs, rule)


def conv2d_transposed(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
                      stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution: the exact adjoint of conv2d(k, stride, padding).

    x: (Cin,H,W); w: (Cin, Cout, k, k); output (Cout, (H-1)*s - 2p + k, ...).
    """
    cin, h, width = x.data.shape
    cin_w, cout, k, k2 = w.data.shape
    if k != k2:
        raise ShapeError("conv2d_transposed kernels must be square")
    if cin_w != cin:
        raise ShapeError(f"conv2d_transposed channel mismatch: x has {cin}, w expects {cin_w}")
    oh = (h - 1) * stride - 2 * padding + k
    ow = (width - 1) * stride - 2 * padding + k
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d_transposed output collapses: input {h}x{width}, k={k} s={stride} p={padding}")

    dcols = np.einsum("iokl,ihw->oklhw", w.data, x.data, optimize=True)
    y = _col2im(dcols, (cout, oh, ow), k, stride, padding)
    if bias is not None:
        y = y + bias.data[:, None, None]

    def rule(g):
        gp = np.pad(g, ((0, 0), (padding, padding), (padding, padding))) if padding else g
        gcols = _im2col(gp, k, stride, h, width)
        dx = np.einsum("iokl,oklhw->ihw", w.data, gcols, optimize=True)
        dw = np.einsum("ihw,oklhw->iokl", x.data, gcols, optimize=True)
        if bias is None:
            return (dx, dw)
        return (dx, dw, g.sum(axis=(1, 2)))

    inputs = (x, w) if bias is None else (x, w, bias)
    return _attach(Tensor(y), "conv2d_transposed", inputs, rule)


def avg_pool2d(x: Tensor, k: int, stride: Optional[int] = None) -> Tensor:
    """Non-padded average pooling over (C,H,W)."""
    s = stride or k
    c, h, w = x.data.shape
    oh, ow = _conv_out(h, k, s, 0), _conv_out(w, k, s, 0)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"avg_pool2d output collapses: {h}x{w} with k={k} s={s}")
    cols = _im2col(x.data, k, s, oh, ow)
    out = Tensor(cols.mean(axis=(1, 2)))

    def rule(g):
        gcols = np.broadcast_to(g[:, None, None] / (k * k), (c, k, k, oh, ow))
        return (_col2im(np.ascontiguousarray(gcols), x.data.shape, k, s, 0),)

    return _attach(out, "avg_pool2d", (x,), rule)


def first_nonfinite(loss: Tensor) -> Optional[str]:
    """Name of the earliest-executed graph tensor holding NaN/Inf, if any."""
    found: list[tuple[int, str]] = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if not np.isfinite(t.data).all():
            oid = t._node.oid if t._node is not None else -1
            found.append((oid, t.name or "<input>"))
        if t._node is not None:
            stack.extend(t._node.inputs)
    if not found:
        return None
    return min(found)[1]
