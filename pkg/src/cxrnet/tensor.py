"""Dense n-dimensional tensors with reverse-mode automatic differentiation.

The compute graph is dynamic: every differentiable op links its output back
to its inputs and attaches a closure that propagates the upstream gradient.
``backward()`` on a scalar walks the graph once in reverse topological order.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

DEFAULT_DTYPE = np.float32

_state = threading.local()


def _flags():
    if not hasattr(_state, "grad_enabled"):
        _state.grad_enabled = True
        _state.reference_kernels = False
    return _state


def is_grad_enabled() -> bool:
    return _flags().grad_enabled


@contextmanager
def no_grad():
    """Disable graph recording (inference / numeric-differentiation passes)."""
    st = _flags()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


@contextmanager
def reference_kernels():
    """Force sequential-summation reference kernels (bit-exact vs loop oracles)."""
    st = _flags()
    prev = st.reference_kernels
    st.reference_kernels = True
    try:
        yield
    finally:
        st.reference_kernels = prev


def _as_float_array(data) -> np.ndarray:
    a = np.asarray(data)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(DEFAULT_DTYPE)
    return a


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_float_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._prev: tuple = ()
        self._backward = None
        self._backward_done = False

    # ---- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad=False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad)

    @staticmethod
    def ones(shape, dtype=DEFAULT_DTYPE, requires_grad=False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=dtype), requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # ---- graph plumbing --------------------------------------------------------

    def add_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            # Force C order: backward rules may hand over transposed views, and
            # downstream flat indexing assumes row-major layout.
            self.grad = np.array(g, dtype=self.data.dtype, copy=True, order="C")
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor with requires_grad set.

        The receiver must hold exactly one element; a second backward over the
        same recorded graph is an error (the graph is consumed).
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if self._backward_done:
            raise RuntimeError("backward already ran on this graph; rebuild the forward pass first")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
            # Dismantle the graph as the sweep consumes it: backward closures
            # capture their own output tensor, and without this the resulting
            # reference cycles keep every intermediate buffer alive until a
            # full garbage-collection pass.
            node._backward = None
            node._prev = ()
        self._backward_done = True

    # ---- elementwise arithmetic --------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        _check_broadcast(self.shape, other.shape)
        out = _node(self.data + other.data, (self, other))

        def _bw():
            if self.requires_grad:
                self.add_grad(unbroadcast(out.grad, self.shape))
            if other.requires_grad:
                other.add_grad(unbroadcast(out.grad, other.shape))

        out._backward = _bw
        return out

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        _check_broadcast(self.shape, other.shape)
        out = _node(self.data - other.data, (self, other))

        def _bw():
            if self.requires_grad:
                self.add_grad(unbroadcast(out.grad, self.shape))
            if other.requires_grad:
                other.add_grad(unbroadcast(-out.grad, other.shape))

        out._backward = _bw
        return out

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        other = self._coerce(other)
        _check_broadcast(self.shape, other.shape)
        out = _node(self.data * other.data, (self, other))

        def _bw():
            if self.requires_grad:
                self.add_grad(unbroadcast(out.grad * other.data, self.shape))
            if other.requires_grad:
                other.add_grad(unbroadcast(out.grad * self.data, other.shape))

        out._backward = _bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        _check_broadcast(self.shape, other.shape)
        out = _node(self.data / other.data, (self, other))

        def _bw():
            if self.requires_grad:
                self.add_grad(unbroadcast(out.grad / other.data, self.shape))
            if other.requires_grad:
                other.add_grad(unbroadcast(-out.grad * self.data / (other.data**2), other.shape))

        out._backward = _bw
        return out

    def __neg__(self):
        out = _node(-self.data, (self,))

        def _bw():
            if self.requires_grad:
                self.add_grad(-out.grad)

        out._backward = _bw
        return out

    # ---- matmul ------------------------------------------------------------------

    def __matmul__(self, other):
        return matmul(self, other)

    # ---- shape ops -----------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _node(self.data.reshape(shape), (self,))

        def _bw():
            if self.requires_grad:
                self.add_grad(out.grad.reshape(self.shape))

        out._backward = _bw
        return out

    def transpose(self, axes) -> "Tensor":
        axes = tuple(axes)
        out = _node(np.transpose(self.data, axes), (self,))
        inverse = tuple(np.argsort(axes))

        def _bw():
            if self.requires_grad:
                self.add_grad(np.transpose(out.grad, inverse))

        out._backward = _bw
        return out

    # ---- reductions -----------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = _node(self.data.sum(axis=axis, keepdims=keepdims), (self,))

        def _bw():
            if self.requires_grad:
                g = out.grad
                if not keepdims and axis is not None:
                    g = np.expand_dims(g, axis)
                self.add_grad(np.broadcast_to(g, self.shape).astype(self.data.dtype))

        out._backward = _bw
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # ---- pointwise nonlinear ----------------------------------------------------------

    def exp(self) -> "Tensor":
        out = _node(np.exp(self.data), (self,))

        def _bw():
            if self.requires_grad:
                self.add_grad(out.grad * out.data)

        out._backward = _bw
        return out

    def log(self) -> "Tensor":
        out = _node(np.log(self.data), (self,))

        def _bw():
            if self.requires_grad:
                self.add_grad(out.grad / self.data)

        out._backward = _bw
        return out

    def sqrt(self) -> "Tensor":
        out = _node(np.sqrt(self.data), (self,))

        def _bw():
            if self.requires_grad:
                self.add_grad(out.grad * 0.5 / out.data)

        out._backward = _bw
        return out

    def clip(self, lo: float, hi: float) -> "Tensor":
        out = _node(np.clip(self.data, lo, hi), (self,))
        mask = (self.data >= lo) & (self.data <= hi)

        def _bw():
            if self.requires_grad:
                self.add_grad(out.grad * mask)

        out._backward = _bw
        return out


def _node(data: np.ndarray, parents: tuple) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = parents
    return out


def _check_broadcast(a_shape: tuple, b_shape: tuple) -> None:
    try:
        np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ValueError(f"shapes {a_shape} and {b_shape} are not broadcast-compatible") from None


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with recorded backward dA = g.Bᵀ, dB = Aᵀ.g."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    if _flags().reference_kernels:
        result = _matmul_sequential(a.data, b.data)
    else:
        result = a.data @ b.data
    out = _node(result, (a, b))

    def _bw():
        if a.requires_grad:
            a.add_grad(out.grad @ b.data.T)
        if b.requires_grad:
            b.add_grad(a.data.T @ out.grad)

    out._backward = _bw
    return out


def _matmul_sequential(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Accumulate strictly in k order so every output element sees the same
    # float-addition sequence as the naive triple loop with an inner k loop.
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.result_type(a, b))
    for k in range(a.shape[1]):
        out += np.multiply.outer(a[:, k], b[k, :])
    return out


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _bw():
        pieces = np.split(out.grad, splits, axis=axis)
        for t, g in zip(tensors, pieces):
            if t.requires_grad:
                t.add_grad(g)

    out._backward = _bw
    return out


# ---- row-major index arithmetic -------------------------------------------------


def flat_index(coords: tuple, shape: tuple) -> int:
    """Row-major flat offset of a coordinate tuple (last axis has stride 1)."""
    return int(np.ravel_multi_index(coords, shape))


def unflatten_index(index: int, shape: tuple) -> tuple:
    return tuple(int(c) for c in np.unravel_index(index, shape))


# ---- numeric differentiation ------------------------------------------------------


def grad_check(f, x: Tensor, eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients of f at x.

    ``f`` must return a scalar Tensor.  The analytic gradient comes from one
    recorded backward pass; the numeric one perturbs each coordinate of ``x``
    by ±eps with the graph disabled.
    """
    x.requires_grad = True
    x.grad = None
    loss = f(x)
    if loss.data.size != 1:
        raise ValueError(f"grad_check requires a scalar-valued function, got shape {loss.data.shape}")
    loss.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else np.array(x.grad, dtype=np.float64)

    x.data = np.ascontiguousarray(x.data)  # in-place perturbation needs a real view
    numeric = np.zeros(x.data.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(x).item()
            flat[i] = orig - eps
            lo = f(x).item()
            flat[i] = orig
            num_flat[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
