"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every learned quantity in the pipeline lives in a :class:`Tensor`. Ops build a
reverse-mode graph on the fly; calling :func:`backward` on a scalar output
accumulates gradients into every ``requires_grad`` ancestor. All analytic
backward passes are verified against central finite differences in the test
suite.

Storage is numpy float64 throughout. Graph construction and backward are
single-threaded per graph; tensors are treated as immutable once created
(parameter updates happen only through :class:`Adam` on leaf buffers).
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """N-d float64 array, optionally a node of a reverse-mode graph.

    Attributes:
        data: the value, row-major float64 ndarray.
        requires_grad: whether backward should populate ``grad``.
        grad: accumulated gradient, same shape as ``data``, or None.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tensor_slice(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Build an op output; constants short-circuit out of the graph."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(data, (a, b), bwd)


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), bwd)


def divide(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(data, (a, b), bwd)


def scale(x, s: float) -> Tensor:
    x = as_tensor(x)
    s = float(s)
    data = x.data * s

    def bwd(g):
        return (g * s,)

    return _make(data, (x,), bwd)


def power(x, p: float) -> Tensor:
    """Elementwise x**p for a fixed real exponent."""
    x = as_tensor(x)
    p = float(p)
    data = x.data**p

    def bwd(g):
        return (g * p * x.data ** (p - 1.0),)

    return _make(data, (x,), bwd)


def exp(x) -> Tensor:
    x = as_tensor(x)
    data = np.exp(x.data)

    def bwd(g):
        return (g * data,)

    return _make(data, (x,), bwd)


def log(x) -> Tensor:
    x = as_tensor(x)
    data = np.log(x.data)

    def bwd(g):
        return (g / x.data,)

    return _make(data, (x,), bwd)


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    data = np.sqrt(x.data)

    def bwd(g):
        return (g * 0.5 / data,)

    return _make(data, (x,), bwd)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0.0
    data = np.where(mask, x.data, 0.0)

    def bwd(g):
        return (g * mask,)

    return _make(data, (x,), bwd)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # stable in both tails
    data = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                    np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))

    def bwd(g):
        return (g * data * (1.0 - data),)

    return _make(data, (x,), bwd)


# -- linear algebra -----------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _make(data, (a, b), bwd)


def outer_product(u, v) -> Tensor:
    u, v = as_tensor(u), as_tensor(v)
    if u.ndim != 1 or v.ndim != 1:
        raise ShapeError(f"outer_product needs 1-d operands, got {u.shape} and {v.shape}")
    data = np.outer(u.data, v.data)

    def bwd(g):
        return g @ v.data, g.T @ u.data

    return _make(data, (u, v), bwd)


# -- shape manipulation --------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(x.shape),)

    return _make(data, (x,), bwd)


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    data = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def bwd(g):
        return (np.transpose(g, inv),)

    return _make(data, (x,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), bwd)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def tensor_slice(x, key) -> Tensor:
    x = as_tensor(x)
    data = x.data[key]
    if np.isscalar(data) or data.ndim == 0:
        data = np.asarray(data, dtype=np.float64)

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _make(data, (x,), bwd)


# -- reductions -----------------------------------------------------------


def tensor_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, x.shape).copy(),)

    return _make(np.asarray(data, dtype=np.float64), (x,), bwd)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        n = x.shape[axis]
    return scale(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(x, axis: int = -1) -> Tensor:
    """Row-stochastic softmax along ``axis``, stabilized by max subtraction."""
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise ValueError("softmax input must be finite")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _make(data, (x,), bwd)


def global_max_pool(x) -> Tensor:
    """Per-channel spatial maximum of a C x H x W map.

    The gradient routes to a single argmax cell per channel (first occurrence
    in row-major order when tied).
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"global_max_pool needs C x H x W input, got {x.shape}")
    c, h, w = x.shape
    flat = x.data.reshape(c, h * w)
    idx = flat.argmax(axis=1)
    data = flat[np.arange(c), idx]

    def bwd(g):
        gx = np.zeros((c, h * w), dtype=np.float64)
        gx[np.arange(c), idx] = g
        return (gx.reshape(c, h, w),)

    return _make(data, (x,), bwd)


def avg_pool2d(x, factor: int) -> Tensor:
    """Non-overlapping mean pooling of a C x H x W map by an integer factor."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"avg_pool2d needs C x H x W input, got {x.shape}")
    c, h, w = x.shape
    f = int(factor)
    if f == 1:
        return x
    if h % f or w % f:
        raise ShapeError(f"avg_pool2d factor {f} does not divide spatial dims {(h, w)}")
    data = x.data.reshape(c, h // f, f, w // f, f).mean(axis=(2, 4))

    def bwd(g):
        g4 = g[:, :, None, :, None] / (f * f)
        return (np.broadcast_to(g4, (c, h // f, f, w // f, f)).reshape(c, h, w).copy(),)

    return _make(data, (x,), bwd)


# -- convolution ----------------------------------------------------------


def _im2col(xp: np.ndarray, k: int, oh: int, ow: int) -> np.ndarray:
    # (C, k, k, OH, OW) windows -> (OH*OW, C*k*k)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    # win: (C, OH, OW, k, k)
    col = win.transpose(1, 2, 0, 3, 4).reshape(oh * ow, -1)
    return np.ascontiguousarray(col)


def conv2d(x, kernel, bias, padding: int) -> Tensor:
    """2-d cross-correlation with bias over a C x H x W map.

    kernel is C_out x C_in x k x k with odd k; ``padding`` cells of zeros are
    added on each spatial border. Differentiable w.r.t. all three inputs.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.ndim != 3:
        raise ShapeError(f"conv2d input must be C x H x W, got {x.shape}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be Cout x Cin x k x k, got {kernel.shape}")
    cout, cin, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square with odd size, got {kernel.shape}")
    if x.shape[0] != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    p = int(padding)
    _, h, w = x.shape
    oh, ow = h + 2 * p - k + 1, w + 2 * p - k + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}, kernel {k}, padding {p}")

    xp = np.pad(x.data, ((0, 0), (p, p), (p, p)))
    col = _im2col(xp, k, oh, ow)  # (OH*OW, Cin*k*k)
    w2d = kernel.data.reshape(cout, -1)  # (Cout, Cin*k*k)
    out = (col @ w2d.T + bias.data).T.reshape(cout, oh, ow)

    def bwd(g):
        g2d = g.reshape(cout, oh * ow).T  # (OH*OW, Cout)
        gw = (g2d.T @ col).reshape(kernel.shape)
        gb = g2d.sum(axis=0)
        gcol = g2d @ w2d  # (OH*OW, Cin*k*k)
        gxp = np.zeros_like(xp)
        gcol5 = gcol.reshape(oh, ow, cin, k, k)
        for di in range(k):
            for dj in range(k):
                gxp[:, di:di + oh, dj:dj + ow] += gcol5[:, :, :, di, dj].transpose(2, 0, 1)
        gx = gxp[:, p:p + h, p:p + w] if p else gxp
        return gx.copy(), gw, gb

    return _make(out, (x, kernel, bias), bwd)


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def bwd(g):
        gg = (g * xhat).sum(axis=tuple(range(g.ndim - 1)))
        gb = g.sum(axis=tuple(range(g.ndim - 1)))
        gh = g * gain.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(data, (x, gain, bias), bwd)


# -- backward -------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Gradients accumulate into ``grad`` of every ``requires_grad`` node in the
    graph; repeated calls without ``zero_grad`` keep accumulating.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any requires_grad tensor")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    # local gradients flowing along graph edges for this sweep
    flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flow.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            acc = flow.get(id(p))
            flow[id(p)] = pg if acc is None else acc + pg


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# -- optimizer ------------------------------------------------------------


class Adam:
    """Adam with optional decoupled weight decay over a named parameter dict.

    Moment buffers are float64 and serialize bit-exactly through checkpoints.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 3e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * update

    def zero_grad(self) -> None:
        zero_grads(self.params.values())
