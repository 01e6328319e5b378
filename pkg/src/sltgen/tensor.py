"""Dense float64 tensors with reverse-mode differentiation.

The operator set is deliberately small and closed: matmul, add, sub,
multiply, conv2d, relu, tanh, batchnorm, nearest-neighbour 2x upsampling,
reshape, mean, sum, square and sqrt.  Every network in this package
compiles to these primitives, which keeps the gradient surface easy to
audit: each operator's backward rule is a few lines next to its forward.

Graphs are recorded dynamically: calling an operator on `Tensor` inputs
appends a node holding the saved forward values and a closure that routes
the output gradient to the parents.  `Tensor.backward()` walks the tape
once in reverse topological order.  All arithmetic is float64 and free of
hidden nondeterminism, so identical inputs reproduce identical outputs
and gradients bit for bit.

Broadcasting is intentionally restricted: elementwise operators demand
equal shapes, except that add/sub accept a 1-D per-channel (or
per-feature) vector against a 2-D or 4-D operand, and multiply accepts a
scalar against anything.  Everything else must reshape explicitly.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operator inputs have incompatible or invalid shapes."""


def _as_array(value) -> np.ndarray:
    return np.array(value, dtype=np.float64)


class Tensor:
    """A float64 array plus an optional gradient tape node."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...],
                 backward: Callable[[], None] | None) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            # Dead branch for the tape: no closure, no parent links, so
            # constant subgraphs are garbage collected eagerly.
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def grad_or_zeros(self) -> np.ndarray:
        """Gradient after backward; zeros when the loss never saw this tensor."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar. Visits each tape node exactly once."""
        if self.data.size != 1:
            raise ShapeError(
                f"backward requires a scalar, got shape {self.data.shape}")
        if not self.requires_grad:
            raise ValueError(
                "backward on a tensor with no differentiable inputs")
        order = _toposort(self)
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return multiply(self, _lift(other))

    def __rmul__(self, other):
        return multiply(_lift(other), self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __neg__(self):
        return multiply(self, Tensor(-1.0))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    def reshape(self, shape):
        return reshape(self, shape)

    def mean(self, axis=None):
        return mean(self, axis)

    def sum(self, axis=None):
        return sum_(self, axis)

    def square(self):
        return square(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)


def _lift(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative DFS; recursion would overflow on long op chains.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, child_idx = stack.pop()
        if child_idx == 0:
            if id(node) in visited:
                continue
            visited.add(id(node))
        if child_idx < len(node._parents):
            stack.append((node, child_idx + 1))
            child = node._parents[child_idx]
            if id(child) not in visited:
                stack.append((child, 0))
        else:
            order.append(node)
    return order


def gradients(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Run backward from `loss` and return one gradient per parameter.

    Parameters that do not participate in the loss get exact zeros.
    """
    loss.backward()
    return [p.grad_or_zeros() for p in params]


# -- elementwise and reduction operators -------------------------------


def _expand_vector(op: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Broadcast a 1-D per-channel vector against a 2-D or 4-D operand."""
    if a.ndim == 2 and b.shape == (a.shape[1],):
        return b[None, :]
    if a.ndim == 4 and b.shape == (a.shape[1],):
        return b[None, :, None, None]
    raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum an output gradient down to a broadcast operand's shape."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    if len(shape) == 1:
        if g.ndim == 2 and g.shape[1] == shape[0]:
            return g.sum(axis=0)
        if g.ndim == 4 and g.shape[1] == shape[0]:
            return g.sum(axis=(0, 2, 3))
    raise ShapeError(f"cannot reduce gradient {g.shape} to {shape}")


def _addlike(op: str, a: Tensor, b: Tensor, sign: float) -> Tensor:
    if a.data.shape == b.data.shape:
        data = a.data + sign * b.data
    elif b.data.ndim == 1:
        data = a.data + sign * _expand_vector(op, a.data, b.data)
    elif b.data.ndim == 0:
        data = a.data + sign * b.data
    elif a.data.ndim == 0 and op == "sub":
        data = a.data - b.data
    else:
        raise ShapeError(f"{op}: cannot combine shapes {a.data.shape} and {b.data.shape}")
    out = Tensor._from_op(data, (a, b), None)

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(sign * _reduce_to(g, b.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; the second operand may be a per-channel vector or scalar."""
    return _addlike("add", a, b, 1.0)


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise difference with the same shape rules as add."""
    return _addlike("sub", a, b, -1.0)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product. Shapes must match exactly, or one side is scalar."""
    if a.data.shape != b.data.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ShapeError(
            f"multiply: cannot combine shapes {a.data.shape} and {b.data.shape}")
    data = a.data * b.data
    out = Tensor._from_op(data, (a, b), None)

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_reduce_to(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g * a.data, b.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul: expected 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions disagree, {a.data.shape} vs {b.data.shape}")
    out = Tensor._from_op(a.data @ b.data, (a, b), None)

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    out._backward = backward if out.requires_grad else None
    return out


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at zero is zero."""
    keep = x.data > 0.0
    out = Tensor._from_op(np.where(keep, x.data, 0.0), (x,), None)

    def backward():
        x._accumulate(out.grad * keep)

    out._backward = backward if out.requires_grad else None
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor._from_op(y, (x,), None)

    def backward():
        x._accumulate(out.grad * (1.0 - y * y))

    out._backward = backward if out.requires_grad else None
    return out


def square(x: Tensor) -> Tensor:
    out = Tensor._from_op(x.data * x.data, (x,), None)

    def backward():
        x._accumulate(out.grad * 2.0 * x.data)

    out._backward = backward if out.requires_grad else None
    return out


def sqrt(x: Tensor) -> Tensor:
    """Elementwise square root.

    The backward rule floors the denominator so a gradient at an exact
    zero stays finite instead of dividing by zero; forward values are
    untouched.
    """
    y = np.sqrt(x.data)
    out = Tensor._from_op(y, (x,), None)

    def backward():
        x._accumulate(out.grad / (2.0 * np.maximum(y, 1e-12)))

    out._backward = backward if out.requires_grad else None
    return out


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = x.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"reshape: {err}") from None
    out = Tensor._from_op(data, (x,), None)

    def backward():
        x._accumulate(out.grad.reshape(x.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


def mean(x: Tensor, axis=None) -> Tensor:
    """Mean over all elements (axis=None) or over the leading axis (axis=0)."""
    if axis not in (None, 0):
        raise ShapeError("mean: only full reduction or axis=0 is supported")
    if axis is None:
        n = x.data.size
        out = Tensor._from_op(np.asarray(x.data.mean()), (x,), None)

        def backward():
            x._accumulate(np.full(x.data.shape, float(out.grad) / n))
    else:
        if x.data.ndim < 1 or x.data.shape[0] < 1:
            raise ShapeError("mean: axis=0 requires a non-empty leading axis")
        n = x.data.shape[0]
        out = Tensor._from_op(x.data.mean(axis=0), (x,), None)

        def backward():
            x._accumulate(np.broadcast_to(out.grad / n, x.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


def sum_(x: Tensor, axis=None) -> Tensor:
    """Sum over all elements (axis=None) or over the leading axis (axis=0)."""
    if axis not in (None, 0):
        raise ShapeError("sum: only full reduction or axis=0 is supported")
    if axis is None:
        out = Tensor._from_op(np.asarray(x.data.sum()), (x,), None)

        def backward():
            x._accumulate(np.full(x.data.shape, float(out.grad)))
    else:
        out = Tensor._from_op(x.data.sum(axis=0), (x,), None)

        def backward():
            x._accumulate(np.broadcast_to(out.grad, x.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


# -- structured operators ----------------------------------------------


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input with an OCHW kernel.

    No kernel flip. The output size (H + 2*padding - kh) / stride + 1 must
    be integral; fractional sizes are rejected rather than floored.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(
            f"conv2d: expected 4-D input and kernel, got {x.data.shape} and {w.data.shape}")
    batch, cin, height, width = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ShapeError(
            f"conv2d: input channels {cin} do not match kernel channels {cin_w}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: bad stride={stride} or padding={padding}")
    span_h = height + 2 * padding - kh
    span_w = width + 2 * padding - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} stride {stride} padding {padding} does not "
            f"tile input {height}x{width} to an integral output size")
    out_h = span_h // stride + 1
    out_w = span_w // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # (B, C, out_h, out_w, kh, kw) view; strided slicing applies the stride.
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    data = np.einsum("bcxyij,ocij->boxy", windows, w.data, optimize=True)
    out = Tensor._from_op(data, (x, w), None)

    def backward():
        g = out.grad
        if w.requires_grad:
            w._accumulate(np.einsum("boxy,bcxyij->ocij", g, windows, optimize=True))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    patch = np.einsum("boxy,oc->bcxy", g, w.data[:, :, i, j])
                    gxp[:, :, i:i + stride * out_h:stride,
                        j:j + stride * out_w:stride] += patch
            if padding:
                gxp = gxp[:, :, padding:padding + height, padding:padding + width]
            x._accumulate(gxp)

    out._backward = backward if out.requires_grad else None
    return out


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling by 2 along the trailing two axes."""
    if x.data.ndim < 2:
        raise ShapeError(
            f"upsample_nearest2x: need at least 2 dimensions, got {x.data.shape}")
    data = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)
    out = Tensor._from_op(data, (x,), None)

    def backward():
        g = out.grad
        lead = x.data.shape[:-2]
        h, w = x.data.shape[-2], x.data.shape[-1]
        folded = g.reshape(*lead, h, 2, w, 2)
        x._accumulate(folded.sum(axis=(-3, -1)))

    out._backward = backward if out.requires_grad else None
    return out


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, *, eps: float = 1e-5,
              mean_stat: np.ndarray | None = None,
              var_stat: np.ndarray | None = None) -> Tensor:
    """Per-channel normalisation with affine output.

    Without `mean_stat`/`var_stat` this normalises by the batch statistics
    (population variance) and differentiates through them; with both
    supplied, they are treated as constants.  Input is (N, C) or
    (N, C, H, W); gamma and beta are (C,).  The eps term is the only guard
    against a zero-variance channel, plus a hard floor so the division
    can never hit exactly zero.
    """
    if x.data.ndim == 2:
        axes: tuple[int, ...] = (0,)
        cshape = (1, x.data.shape[1])
    elif x.data.ndim == 4:
        axes = (0, 2, 3)
        cshape = (1, x.data.shape[1], 1, 1)
    else:
        raise ShapeError(f"batchnorm: expected 2-D or 4-D input, got {x.data.shape}")
    channels = x.data.shape[1]
    if gamma.data.shape != (channels,) or beta.data.shape != (channels,):
        raise ShapeError(
            f"batchnorm: gamma/beta must be ({channels},), got "
            f"{gamma.data.shape} and {beta.data.shape}")

    fixed = mean_stat is not None or var_stat is not None
    if fixed:
        if mean_stat is None or var_stat is None:
            raise ShapeError("batchnorm: fixed statistics need both mean and variance")
        mu = np.asarray(mean_stat, dtype=np.float64)
        var = np.asarray(var_stat, dtype=np.float64)
        if mu.shape != (channels,) or var.shape != (channels,):
            raise ShapeError(
                f"batchnorm: fixed statistics must be ({channels},)")
    else:
        if x.data.shape[0] < 2:
            raise ShapeError("batchnorm: batch statistics need batch size >= 2")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)

    denom = np.maximum(np.sqrt(var + eps), 1e-30)
    xhat = (x.data - mu.reshape(cshape)) / denom.reshape(cshape)
    data = gamma.data.reshape(cshape) * xhat + beta.data.reshape(cshape)
    out = Tensor._from_op(data, (x, gamma, beta), None)

    def backward():
        g = out.grad
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if x.requires_grad:
            scale = gamma.data.reshape(cshape) / denom.reshape(cshape)
            if fixed:
                x._accumulate(g * scale)
            else:
                g_mean = g.mean(axis=axes).reshape(cshape)
                gx_mean = (g * xhat).mean(axis=axes).reshape(cshape)
                x._accumulate(scale * (g - g_mean - xhat * gx_mean))

    out._backward = backward if out.requires_grad else None
    return out


# -- gradient checking ---------------------------------------------------


def finite_difference_gradient(f: Callable[[np.ndarray], float],
                               x0: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, element by element.

    Evaluates the forward path only, so it stays independent of the
    backward rules it is used to check.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    flat = grad.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += step
        xm[i] -= step
        flat[i] = (f(xp.reshape(x0.shape)) - f(xm.reshape(x0.shape))) / (2.0 * step)
    return grad


def assert_gradients_close(analytic: np.ndarray, numeric: np.ndarray,
                           rtol: float = 1e-4, atol: float = 1e-7) -> None:
    """Per-element |a - n| <= atol + rtol * |n|, with a readable failure."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    if analytic.shape != numeric.shape:
        raise AssertionError(
            f"gradient shape mismatch: {analytic.shape} vs {numeric.shape}")
    err = np.abs(analytic - numeric) - (atol + rtol * np.abs(numeric))
    if np.any(err > 0):
        worst = np.unravel_index(int(np.argmax(err)), analytic.shape)
        raise AssertionError(
            f"gradient mismatch at {worst}: analytic={analytic[worst]!r} "
            f"numeric={numeric[worst]!r}")
