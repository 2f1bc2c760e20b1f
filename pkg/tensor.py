"""
Dense tensors with a recorded reverse-mode tape.

Every network building block used by the shape-completion network, the fusion
module and the detection heads lives here with a hand-written backward:

- Elementwise: add, sub, mul, div, power, exp, log, relu, sigmoid, smooth_l1
- Reductions: sum, mean, max_over, pooled_descriptors, channel_pool
- Structure: reshape, transpose, concat, take
- Spatial: conv2d, tconv2d, batchnorm2d, avg_pool2d, bilinear_sample
- Pillars: masked_max, scatter_to_grid
- Dense: matmul, linear, mlp

Arithmetic runs in 64-bit ("verify" precision) unless `precision("float32")`
is active. `gradcheck` compares the tape against central differences.
"""
import logging
from contextlib import contextmanager
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

_DTYPES = {'float64': np.float64, 'float32': np.float32}
_state = {'dtype': np.float64}

LOG_EPS = 1e-12


def default_dtype():
    """dtype new tensors are created with."""
    return _state['dtype']


def set_precision(name: str) -> None:
    """Switch the default dtype ('float64' to verify, 'float32' for speed)."""
    if name not in _DTYPES:
        raise ValueError(f"Unknown precision '{name}', expected one of {sorted(_DTYPES)}")
    _state['dtype'] = _DTYPES[name]


@contextmanager
def precision(name: str):
    """Temporarily switch the default dtype."""
    previous = _state['dtype']
    set_precision(name)
    try:
        yield
    finally:
        _state['dtype'] = previous


class Tensor:
    """N-dimensional array with an optional gradient buffer.

    Leaves created with ``requires_grad=True`` accumulate ``grad`` across
    ``backward`` calls until ``zero_grad``. Results of operations remember
    their parents and a closure mapping the output gradient to parent
    gradients.
    """
    # ndarray (op) Tensor defers to the Tensor's reflected operator.
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 _parents: Tuple['Tensor', ...] = (), _backward: Optional[Callable] = None,
                 op: str = 'leaf', _owned: bool = False):
        if _owned and isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data
        else:
            self.data = np.array(data, dtype=default_dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float('nan')

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> 'Tensor':
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        """Reverse-mode accumulation from a scalar into every leaf on the tape."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        if not self._parents:
            raise RuntimeError("backward() called on a tensor with no recorded forward graph")

        order: List[Tensor] = []
        seen = set()
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
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: TensorLike) -> Tensor:
    """Wrap arrays and scalars as constant tensors."""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=default_dtype()))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    data = np.asarray(data)
    if not any(p.requires_grad for p in parents):
        return Tensor(data, op=op, _owned=True)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op, _owned=True)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------
# Elementwise
# ---------------------------

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _result(a.data + b.data, (a, b), backward, 'add')


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _result(a.data - b.data, (a, b), backward, 'sub')


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    """Element-wise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _result(a.data * b.data, (a, b), backward, 'mul')


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return _result(a.data / b.data, (a, b), backward, 'div')


def power(a: TensorLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = np.power(a.data, exponent)

    def backward(g):
        if exponent == 0:
            return (np.zeros_like(a.data),)
        return (g * exponent * np.power(a.data, exponent - 1),)
    return _result(out, (a,), backward, 'pow')


def exp(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)
    return _result(out, (a,), backward, 'exp')


def log(a: TensorLike, eps: float = LOG_EPS) -> Tensor:
    """Natural log with the argument clamped at ``eps``."""
    a = as_tensor(a)
    clamped = np.maximum(a.data, eps)

    def backward(g):
        return (np.where(a.data > eps, g / clamped, 0.0),)
    return _result(np.log(clamped), (a,), backward, 'log')


def relu(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def backward(g):
        return (g * mask,)
    return _result(np.where(mask, a.data, 0.0).astype(a.data.dtype), (a,), backward, 'relu')


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a: TensorLike) -> Tensor:
    """Logistic function, evaluated without overflow for large |x|."""
    a = as_tensor(a)
    out = _stable_sigmoid(a.data).astype(a.data.dtype)

    def backward(g):
        return (g * out * (1.0 - out),)
    return _result(out, (a,), backward, 'sigmoid')


def log_sigmoid(a: TensorLike) -> Tensor:
    """log σ(x) computed from the logit, so saturated negatives keep their gradient."""
    a = as_tensor(a)
    out = (-np.logaddexp(0.0, -a.data)).astype(a.data.dtype)

    def backward(g):
        return (g * _stable_sigmoid(-a.data),)
    return _result(out, (a,), backward, 'log_sigmoid')


def smooth_l1(a: TensorLike, delta: float) -> Tensor:
    """0.5·x²/δ for |x| < δ, |x| − δ/2 otherwise."""
    a = as_tensor(a)
    absx = np.abs(a.data)
    inner = absx < delta
    out = np.where(inner, 0.5 * a.data * a.data / delta, absx - 0.5 * delta)

    def backward(g):
        return (g * np.where(inner, a.data / delta, np.sign(a.data)),)
    return _result(out.astype(a.data.dtype), (a,), backward, 'smooth_l1')


# ---------------------------
# Reductions and structure
# ---------------------------

def tensor_sum(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _result(np.asarray(out), (a,), backward, 'sum')


def tensor_mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tensor_sum(a, axis, keepdims), 1.0 / count)


def max_over(a: TensorLike, axis) -> Tensor:
    """Maximum along one axis or a tuple of axes; gradient goes to the first arg-max."""
    a = as_tensor(a)
    axes = tuple(np.atleast_1d(axis) % a.ndim)
    keep = [i for i in range(a.ndim) if i not in axes]
    moved = np.transpose(a.data, keep + list(axes))
    kept_shape = moved.shape[:len(keep)]
    flat = moved.reshape(kept_shape + (-1,))
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, idx[..., None], g[..., None], axis=-1)
        dmoved = dflat.reshape(moved.shape)
        return (np.transpose(dmoved, np.argsort(keep + list(axes))),)
    return _result(out, (a,), backward, 'max')


def reshape(a: TensorLike, shape) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g.reshape(a.shape),)
    return _result(a.data.reshape(shape), (a,), backward, 'reshape')


def transpose(a: TensorLike, axes) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inverse),)
    return _result(np.transpose(a.data, axes), (a,), backward, 'transpose')


def concat(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, 'concat')


def concat_channels(tensors: Sequence[TensorLike]) -> Tensor:
    """Stack (C_i, H, W) maps into (ΣC_i, H, W), preserving order."""
    shapes = {tuple(as_tensor(t).shape[1:]) for t in tensors}
    if len(shapes) != 1:
        raise ValueError(f"concat_channels needs equal spatial dims, got {sorted(shapes)}")
    return concat(tensors, axis=0)


def take(a: TensorLike, index: np.ndarray, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in backward."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        da = np.zeros_like(a.data)
        moved = np.moveaxis(da, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (da,)
    return _result(np.take(a.data, index, axis=axis), (a,), backward, 'take')


# ---------------------------
# Dense layers
# ---------------------------

def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return g @ b.data.T, a.data.T @ g
    return _result(a.data @ b.data, (a, b), backward, 'matmul')


def linear(x: TensorLike, w: TensorLike, b: Optional[TensorLike] = None) -> Tensor:
    """x (N, in) @ w (in, out) + b (out,)."""
    out = matmul(x, w)
    return add(out, b) if b is not None else out


def mlp(x: TensorLike, layers: Sequence[Tuple[Tensor, Tensor]], activation: str = 'relu') -> Tensor:
    """Stack of linear layers with ``activation`` between them (none after the last)."""
    acts = {'relu': relu, 'sigmoid': sigmoid, 'none': lambda t: t}
    if activation not in acts:
        raise ValueError(f"Unknown activation '{activation}'")
    h = as_tensor(x)
    for i, (w, b) in enumerate(layers):
        h = linear(h, w, b)
        if i < len(layers) - 1:
            h = acts[activation](h)
    return h


# ---------------------------
# Spatial kernels on (C, H, W)
# ---------------------------

def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride][:, :ho, :wo]
    return win.transpose(0, 3, 4, 1, 2)


def conv2d(x: TensorLike, w: TensorLike, b: Optional[TensorLike] = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x (C, H, W) with w (O, C, k, k)."""
    x, w = as_tensor(x), as_tensor(w)
    c, h, wd = x.shape
    o, cw, k, k2 = w.shape
    if cw != c or k != k2:
        raise ValueError(f"conv2d weight {w.shape} does not match input channels {c}")
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(wd, k, stride, pad)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d output would be empty for input {x.shape}, kernel {k}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _windows(xp, k, stride, ho, wo).reshape(c * k * k, ho * wo)
    w2 = w.data.reshape(o, c * k * k)
    out = (w2 @ cols).reshape(o, ho, wo)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[:, None, None]
        parents.append(b)

    def backward(g):
        g2 = g.reshape(o, ho * wo)
        dw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(c, k, k, ho, wo)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
            dx = dxp[:, pad:pad + h, pad:pad + wd] if pad else dxp
        grads = [dx, dw]
        if b is not None:
            grads.append(g2.sum(axis=1))
        return tuple(grads)
    return _result(out, parents, backward, 'conv2d')


def tconv2d(x: TensorLike, w: TensorLike, b: Optional[TensorLike] = None, stride: int = 1) -> Tensor:
    """Transposed convolution of x (C_in, H, W) with w (C_in, C_out, k, k).

    Output spatial size is (H − 1)·stride + k; with the same weight array it
    is the adjoint of ``conv2d`` at zero padding.
    """
    x, w = as_tensor(x), as_tensor(w)
    cin, h, wd = x.shape
    cw, cout, k, k2 = w.shape
    if cw != cin or k != k2:
        raise ValueError(f"tconv2d weight {w.shape} does not match input channels {cin}")
    ho, wo = (h - 1) * stride + k, (wd - 1) * stride + k
    w2 = w.data.reshape(cin, cout * k * k)
    x2 = x.data.reshape(cin, h * wd)
    cols = (w2.T @ x2).reshape(cout, k, k, h, wd)
    out = np.zeros((cout, ho, wo), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i:i + stride * h:stride, j:j + stride * wd:stride] += cols[:, i, j]
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[:, None, None]
        parents.append(b)

    def backward(g):
        dcols = np.empty((cout, k, k, h, wd), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                dcols[:, i, j] = g[:, i:i + stride * h:stride, j:j + stride * wd:stride]
        dcols = dcols.reshape(cout * k * k, h * wd)
        dx = (w2 @ dcols).reshape(x.shape) if x.requires_grad else None
        dw = (x2 @ dcols.T).reshape(w.shape) if w.requires_grad else None
        grads = [dx, dw]
        if b is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)
    return _result(out, parents, backward, 'tconv2d')


def batchnorm2d(x: TensorLike, gamma: TensorLike, beta: TensorLike,
                running_mean: np.ndarray, running_var: np.ndarray,
                training: bool = True, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation of x (C, H, W).

    Training mode normalises with the map's own statistics and updates the
    running buffers in place; eval mode uses the running buffers.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[0]
    n = x.data[0].size
    if training:
        if n < 2:
            raise ValueError("batchnorm2d in training mode needs at least 2 spatial elements")
        mu = x.data.mean(axis=(1, 2))
        var = x.data.var(axis=(1, 2))
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu
        running_var *= (1.0 - momentum)
        running_var += momentum * var * n / (n - 1)
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(c, 1, 1)) * inv_std.reshape(c, 1, 1)
    out = gamma.data.reshape(c, 1, 1) * xhat + beta.data.reshape(c, 1, 1)

    def backward(g):
        dgamma = (g * xhat).sum(axis=(1, 2))
        dbeta = g.sum(axis=(1, 2))
        dxhat = g * gamma.data.reshape(c, 1, 1)
        if training:
            dx = (inv_std.reshape(c, 1, 1) / n) * (
                n * dxhat
                - dxhat.sum(axis=(1, 2), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(1, 2), keepdims=True))
        else:
            dx = dxhat * inv_std.reshape(c, 1, 1)
        return dx, dgamma, dbeta
    return _result(out.astype(x.data.dtype), (x, gamma, beta), backward, 'batchnorm2d')


def avg_pool2d(x: TensorLike, kernel: int) -> Tensor:
    """Non-overlapping average pooling; H and W must divide by ``kernel``."""
    x = as_tensor(x)
    c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ValueError(f"avg_pool2d kernel {kernel} does not divide spatial dims {(h, w)}")
    out = x.data.reshape(c, h // kernel, kernel, w // kernel, kernel).mean(axis=(2, 4))

    def backward(g):
        up = np.repeat(np.repeat(g, kernel, axis=1), kernel, axis=2)
        return (up / (kernel * kernel),)
    return _result(out, (x,), backward, 'avg_pool2d')


def pooled_descriptors(x: TensorLike) -> Tuple[Tensor, Tensor]:
    """(mean over H·W, max over H·W), each of shape (C,)."""
    x = as_tensor(x)
    return tensor_mean(x, axis=(1, 2)), max_over(x, (1, 2))


def channel_pool(x: TensorLike) -> Tuple[Tensor, Tensor]:
    """(mean over C, max over C), each of shape (H, W)."""
    x = as_tensor(x)
    return tensor_mean(x, axis=0), max_over(x, 0)


def bilinear_sample(x: TensorLike, uv: np.ndarray) -> Tensor:
    """Sample x (C, H, W) at continuous (row, col) positions uv (N, 2).

    Integer positions are cell centres. Neighbours outside the map read 0.
    Returns (N, C).
    """
    x = as_tensor(x)
    c, h, w = x.shape
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    u0 = np.floor(uv[:, 0]).astype(np.int64)
    v0 = np.floor(uv[:, 1]).astype(np.int64)
    du = uv[:, 0] - u0
    dv = uv[:, 1] - v0
    corners = []
    for ou, ov, weight in ((0, 0, (1 - du) * (1 - dv)), (1, 0, du * (1 - dv)),
                           (0, 1, (1 - du) * dv), (1, 1, du * dv)):
        ui, vi = u0 + ou, v0 + ov
        inside = (ui >= 0) & (ui < h) & (vi >= 0) & (vi < w) & (weight > 0)
        corners.append((np.clip(ui, 0, h - 1), np.clip(vi, 0, w - 1), np.where(inside, weight, 0.0)))
    out = np.zeros((uv.shape[0], c), dtype=x.data.dtype)
    for ui, vi, weight in corners:
        out += weight[:, None] * x.data[:, ui, vi].T

    def backward(g):
        dx = np.zeros_like(x.data)
        for ui, vi, weight in corners:
            np.add.at(dx, (slice(None), ui, vi), (weight[:, None] * g).T)
        return (dx,)
    return _result(out, (x,), backward, 'bilinear_sample')


# ---------------------------
# Pillar kernels
# ---------------------------

def masked_max(x: TensorLike, mask: np.ndarray) -> Tensor:
    """Max over axis 1 of x (P, N, C), ignoring slots where mask (P, N) is False."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    filled = np.where(mask[..., None], x.data, -np.inf)
    idx = np.argmax(filled, axis=1)
    out = np.take_along_axis(x.data, idx[:, None, :], axis=1)[:, 0, :]
    empty = ~mask.any(axis=1)
    if empty.any():
        out = out.copy()
        out[empty] = 0.0

    def backward(g):
        g = np.where(empty[:, None], 0.0, g)
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, idx[:, None, :], g[:, None, :], axis=1)
        return (dx,)
    return _result(out, (x,), backward, 'masked_max')


def scatter_to_grid(x: TensorLike, coords: np.ndarray, shape: Tuple[int, int]) -> Tensor:
    """Place pillar vectors x (P, C) at unique cells coords (P, 2) of a (C, *shape) canvas."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ValueError(f"scatter_to_grid expects (P, C) pillar vectors, got {x.shape}")
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    canvas = np.zeros((x.shape[1],) + tuple(shape), dtype=x.data.dtype)
    if x.shape[0]:
        canvas[:, coords[:, 0], coords[:, 1]] = x.data.T

    def backward(g):
        return (g[:, coords[:, 0], coords[:, 1]].T.copy(),)
    return _result(canvas, (x,), backward, 'scatter')


# ---------------------------
# Verification
# ---------------------------

def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """‖a − n‖ / max(‖a‖ + ‖n‖, 1e-12)."""
    num = np.linalg.norm(np.ravel(analytic) - np.ravel(numeric))
    den = max(np.linalg.norm(np.ravel(analytic)) + np.linalg.norm(np.ravel(numeric)), 1e-12)
    return float(num / den)


def numeric_gradient(fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-5,
                     indices: Optional[np.ndarray] = None) -> np.ndarray:
    """Central differences of scalar fn() with respect to entries of ``tensor``.

    Only the flat ``indices`` are perturbed when given; other entries stay 0.
    """
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        flat[i] = orig + h
        plus = fn().item()
        flat[i] = orig - h
        minus = fn().item()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * h)
    return grad


def gradcheck(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5) -> float:
    """Worst relative error between tape gradients and central differences.

    ``fn`` must rebuild the graph from the current contents of ``tensors``.
    Run under ``precision("float64")``.
    """
    for t in tensors:
        t.zero_grad()
    fn().backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    worst = 0.0
    for t, a in zip(tensors, analytic):
        n = numeric_gradient(fn, t, h)
        err = relative_error(a, n)
        logger.debug(f"gradcheck {t.name or t.shape}: relative error {err:.3e}")
        worst = max(worst, err)
    return worst
