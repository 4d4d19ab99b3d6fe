"""A small reverse-mode autodiff engine over numpy arrays.

Only the operations the surfel networks need are provided. Every op records
its parents and a closure mapping the output gradient to parent gradients;
``Tensor.backward`` walks the graph in reverse topological order.
"""

from __future__ import annotations

import contextlib

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
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
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self):
        return mul(tsum(self), 1.0 / self.data.size)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _operands(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a, b) -> Tensor:
    """2-D matrix product."""
    a, b = _operands(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T if a.requires_grad else None,
                                                     a.data.T @ g if b.requires_grad else None))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return _make(out, (a,), lambda g: (g * (out > 0),))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _make(out, (a,), lambda g: (g * out * (1 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),))


def tabs(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), back)


def cumsum(a: Tensor, axis: int) -> Tensor:
    def back(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _make(np.cumsum(a.data, axis=axis), (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    dtype = np.result_type(*[t.dtype for t in tensors])
    out = np.concatenate([t.data.astype(dtype, copy=False) for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def getitem(a: Tensor, idx) -> Tensor:
    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), back)


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows ``a[index]`` for an integer index array of any shape."""
    index = np.asarray(index)

    def back(g):
        full = np.zeros_like(a.data)
        flat = g.reshape((-1,) + a.shape[1:])
        np.add.at(full, index.reshape(-1), flat)
        return (full,)

    return _make(a.data[index], (a,), back)


def index_update(base: Tensor, rows: np.ndarray, values: Tensor) -> Tensor:
    """Functional ``base[rows] = values`` with unique ``rows``."""
    base, values = as_tensor(base), as_tensor(values)
    out = base.data.copy()
    out[rows] = values.data

    def back(g):
        gb = g.copy()
        gb[rows] = 0
        return gb, g[rows]

    return _make(out, (base, values), back)


def _im2col(xp: np.ndarray, H: int, W: int) -> np.ndarray:
    """(C, H+2, W+2) padded input -> (C*9, H*W) patch matrix, rows ordered (c, dy, dx)."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))  # (C, H, W, 3, 3)
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(-1, H * W)


def conv2d_3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-padded 3x3 convolution. x: (C, H, W); w: (O, C, 3, 3); b: (O,)."""
    C, H, W = x.shape
    O = w.shape[0]
    if w.shape[1] != C:
        raise ValueError(f"conv channel mismatch {w.shape} vs input {x.shape}")
    cols = _im2col(np.pad(x.data, ((0, 0), (1, 1), (1, 1))), H, W)
    wm = w.data.reshape(O, -1)
    out = wm @ cols + b.data[:, None]

    def back(g):
        g2 = g.reshape(O, -1)
        gcols = (wm.T @ g2).reshape(C, 3, 3, H, W)
        gxp = np.zeros((C, H + 2, W + 2), dtype=gcols.dtype)
        for dy in range(3):
            for dx in range(3):
                gxp[:, dy:dy + H, dx:dx + W] += gcols[:, dy, dx]
        return gxp[:, 1:-1, 1:-1], (g2 @ cols.T).reshape(w.shape), g2.sum(axis=1)

    return _make(out.reshape(O, H, W), (x, w, b), back)


def avgpool2(x: Tensor) -> Tensor:
    """2x2 average pooling with edge replication for odd sizes. (C, H, W)."""
    C, H, W = x.shape
    H2, W2 = (H + 1) // 2, (W + 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 2 * H2 - H), (0, 2 * W2 - W)), mode="edge")
    out = xp.reshape(C, H2, 2, W2, 2).mean(axis=(2, 4))

    def back(g):
        gp = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
        gx = gp[:, :H, :W].copy()
        # fold the replicated edge back onto its source row/column
        if 2 * H2 > H:
            gx[:, H - 1, :] += gp[:, H, :W]
        if 2 * W2 > W:
            gx[:, :, W - 1] += gp[:, :H, W]
            if 2 * H2 > H:
                gx[:, H - 1, W - 1] += gp[:, H, W]
        return (gx,)

    return _make(out, (x,), back)


def upsample_nearest(x: Tensor, factor: int, size: tuple[int, int]) -> Tensor:
    """Nearest upsampling by ``factor`` then crop to ``size``. (C, h, w)."""
    C, h, w = x.shape
    H, W = size
    up = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)[:, :H, :W]

    def back(g):
        full = np.zeros((C, h * factor, w * factor), dtype=g.dtype)
        full[:, :H, :W] = g
        return (full.reshape(C, h, factor, w, factor).sum(axis=(2, 4)),)

    return _make(up, (x,), back)
