"""A small tape-based reverse-mode differentiation engine over numpy arrays.

Tensors wrap an ndarray. While a :class:`Tape` is active, every primitive whose
inputs require gradients appends a node (output, inputs, backward closure) to
the tape; :func:`backward` replays the nodes in reverse. Image tensors use the
NCHW layout.

    >>> w = Tensor(np.array([1.0, 2.0]), requires_grad=True, name="w")
    >>> with Tape() as tape:
    ...     loss = sum_(square(w))
    >>> backward(tape, loss, {"w": w})["w"]
    array([2., 4.])
"""

import threading
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import gaussian


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


@dataclass
class Node:
    op: str
    out: Tensor
    inputs: tuple
    backward: object


@dataclass
class Tape:
    """Ordered record of executed primitives. Use as a context manager."""

    nodes: list = field(default_factory=list)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)


_local = threading.local()


def _stack():
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape():
    tapes = _stack()
    return tapes[-1] if tapes else None


class no_grad:
    """Suspend recording for the enclosed block."""

    def __enter__(self):
        self._saved = list(_stack())
        _stack().clear()

    def __exit__(self, *exc):
        _stack().extend(self._saved)
        return False


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _pair(a, b):
    """Coerce two operands to tensors; a bare constant takes the tensor operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return _as_tensor(a), _as_tensor(b)


def _check_finite(op, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: non-finite value in output")


def _emit(op, data, inputs, backward_fn):
    _check_finite(op, data)
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(op, out, tuple(inputs), backward_fn))
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary_shapes(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------------
# elementwise

def add(a, b):
    a, b = _pair(a, b)
    _binary_shapes("add", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", a.data + b.data, (a, b), back)


def sub(a, b):
    a, b = _pair(a, b)
    _binary_shapes("sub", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", a.data - b.data, (a, b), back)


def mul(a, b):
    a, b = _pair(a, b)
    _binary_shapes("mul", a, b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", a.data * b.data, (a, b), back)


def div(a, b):
    a, b = _pair(a, b)
    _binary_shapes("div", a, b)
    if np.any(b.data == 0):
        raise NumericError("div: division by zero")
    out = a.data / b.data

    def back(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _emit("div", out, (a, b), back)


def scale(x, c):
    c = float(c)

    def back(g):
        return (g * c,)

    return _emit("scale", x.data * x.data.dtype.type(c), (x,), back)


def square(x):
    def back(g):
        return (2.0 * g * x.data,)

    return _emit("square", x.data * x.data, (x,), back)


def sqrt(x):
    if np.any(x.data < 0):
        raise NumericError("sqrt: negative input")
    out = np.sqrt(x.data)

    def back(g):
        return (g * 0.5 / out,)

    return _emit("sqrt", out, (x,), back)


def log(x):
    if np.any(x.data <= 0):
        raise NumericError("log: non-positive input")

    def back(g):
        return (g / x.data,)

    return _emit("log", np.log(x.data), (x,), back)


def softplus(x):
    d = x.data
    out = np.logaddexp(0.0, d).astype(d.dtype, copy=False)

    def back(g):
        return (g * (0.5 * (1.0 + np.tanh(0.5 * d))),)

    return _emit("softplus", out, (x,), back)


def relu(x):
    mask = x.data > 0

    def back(g):
        # subgradient 0 at exactly 0
        return (g * mask,)

    return _emit("relu", np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), back)


def clip(x, lo, hi):
    """Value clipping; gradient is zero wherever the clamp is active."""
    inside = (x.data >= lo) & (x.data <= hi)

    def back(g):
        return (g * inside,)

    return _emit("clip", np.clip(x.data, lo, hi), (x,), back)


def normal_cdf(x):
    """Phi applied elementwise, differentiable."""
    out = gaussian.normal_cdf(x.data)
    out = np.asarray(out, dtype=x.dtype)

    def back(g):
        return (g * gaussian.normal_cdf_grad(x.data).astype(x.dtype, copy=False),)

    return _emit("normal_cdf", out, (x,), back)


# ----------------------------------------------------------------------------
# reductions and reshaping

def sum_(x, axis=None):
    def back(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).astype(x.dtype),)

    return _emit("sum", np.asarray(x.data.sum(axis=axis)), (x,), back)


def mean(x, axis=None):
    n = x.data.size if axis is None else x.shape[axis]

    def back(g):
        g = g / n
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).astype(x.dtype),)

    return _emit("mean", np.asarray(x.data.mean(axis=axis)), (x,), back)


def reshape(x, shape):
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None

    def back(g):
        return (g.reshape(x.shape),)

    return _emit("reshape", out, (x,), back)


def flatten(x, start=1):
    """Collapse every axis from ``start`` on into one."""
    return reshape(x, x.shape[:start] + (-1,))


def index(x, key):
    """``x[key]``; fancy indices accumulate gradients with ``np.add.at``."""
    out = x.data[key]

    def back(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, key, g)
        return (grad,)

    return _emit("index", np.array(out), (x,), back)


def take(x, indices):
    """Gather rows ``x[indices]`` along axis 0."""
    indices = np.asarray(indices, dtype=np.intp)
    return index(x, indices)


# ----------------------------------------------------------------------------
# linear algebra

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return _emit("matmul", a.data @ b.data, (a, b), back)


def gram(z):
    """Batched transpose-matmul: (N, s, c) -> (N, c, c) with out[n] = z[n]^T z[n].

    A rank-2 input (s, c) yields a single (c, c) matrix.
    """
    if z.ndim not in (2, 3):
        raise ShapeError(f"gram: expected rank 2 or 3, got shape {z.shape}")
    zt = np.swapaxes(z.data, -1, -2)

    def back(g):
        return (z.data @ (g + np.swapaxes(g, -1, -2)),)

    return _emit("gram", zt @ z.data, (z,), back)


# ----------------------------------------------------------------------------
# convolutional ops (NCHW)

def _im2col(xp, kh, kw, stride, ho, wo):
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    n, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def conv2d(x, w, b=None, stride=1, padding=0):
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input spatial size {(h, wd)} too small for kernel {(kh, kw)}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = w.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)
    inputs = (x, w) if b is None else (x, w, b)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = (g2.T @ cols).reshape(w.shape)
        dx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
            dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    return _emit("conv2d", out, inputs, back)


def maxpool2d(x, kernel=2, stride=None):
    """Max pooling without padding; ties route the gradient to the first maximum."""
    stride = stride or kernel
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected NCHW input, got {x.shape}")
    n, c, h, wd = x.shape
    ho = (h - kernel) // stride + 1
    wo = (wd - kernel) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"maxpool2d: input spatial size {(h, wd)} smaller than kernel {kernel}")
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def back(g):
        dx = np.zeros_like(x.data)
        for k in range(kernel * kernel):
            i, j = divmod(k, kernel)
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * (arg == k)
        return (dx,)

    return _emit("maxpool2d", np.ascontiguousarray(out), (x,), back)


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray


def batchnorm(x, gamma, beta, stats, training, momentum=0.1, eps=1e-5, update_stats=True):
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes with batch statistics and (optionally) folds them into
    ``stats`` with the given momentum, using the unbiased variance. Eval mode is
    the affine map defined by the running statistics.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm: input {x.shape} with gamma {gamma.shape}, beta {beta.shape}")
    shape = (1, -1, 1, 1)
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if update_stats:
            unbiased = var * (m / max(m - 1, 1))
            stats.mean[...] = (1 - momentum) * stats.mean + momentum * mu
            stats.var[...] = (1 - momentum) * stats.var + momentum * unbiased
    else:
        m = None
        mu, var = stats.mean.astype(x.dtype), stats.var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def back(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data.reshape(shape)
        if training:
            dx = (inv_std.reshape(shape) / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3)).reshape(shape)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape))
        else:
            dx = dxhat * inv_std.reshape(shape)
        return dx, dgamma, dbeta

    return _emit("batchnorm", out.astype(x.dtype, copy=False), (x, gamma, beta), back)


# ----------------------------------------------------------------------------
# backward pass

def backward(tape, loss, wrt=None):
    """Gradients of the scalar ``loss`` with respect to the tensors in ``wrt``.

    ``wrt`` maps names to leaf tensors; tensors the loss does not depend on get
    zero gradients. Without ``wrt``, every leaf on the tape that requires grad
    is returned, keyed by its name (or ``id`` when unnamed).
    """
    if loss.data.size != 1:
        raise TapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    produced = {id(node.out) for node in tape.nodes}
    if id(loss) not in produced:
        raise TapeError("backward: loss was not produced under this tape")

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key not in produced:
                leaves[key] = inp
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=inp.dtype)

    if wrt is None:
        return {(t.name if t.name is not None else key): grads[key] for key, t in leaves.items()}
    return {name: grads.get(id(t), np.zeros_like(t.data)) for name, t in wrt.items()}


# ----------------------------------------------------------------------------
# finite-difference verification

@dataclass
class GradCheckReport:
    max_rel_error: float
    tol_rel: float
    n_checked: int
    failures: list

    @property
    def passed(self):
        return self.max_rel_error < self.tol_rel


def grad_check(fn, point, tol_rel=1e-4, n_coords=None, seed=0):
    """Compare the tape gradient of scalar ``fn(Tensor)`` with central differences.

    Uses a per-coordinate step h = 1e-5 * (1 + |x_i|). When ``n_coords`` is set,
    that many coordinates are sampled. The relative error per coordinate is
    |a - n| / max(|a|, |n|, floor), where floor = 1e-8 * max(1, max|a|) keeps
    round-off on vanishing coordinates from dominating. The report holds the
    worst coordinate.
    """
    x0 = np.array(point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True, name="x")
    with Tape() as tape:
        out = fn(x)
    analytic = backward(tape, out, {"x": x})["x"].reshape(-1)

    flat = x0.reshape(-1)
    coords = np.arange(flat.size)
    if n_coords is not None and n_coords < flat.size:
        coords = np.random.default_rng(seed).choice(flat.size, size=n_coords, replace=False)

    floor = 1e-8 * max(1.0, float(np.max(np.abs(analytic))) if analytic.size else 1.0)
    worst, failures = 0.0, []
    for i in coords:
        h = 1e-5 * (1.0 + abs(flat[i]))
        plus, minus = flat.copy(), flat.copy()
        plus[i] += h
        minus[i] -= h
        with no_grad():
            fp = fn(Tensor(plus.reshape(x0.shape))).item()
            fm = fn(Tensor(minus.reshape(x0.shape))).item()
        numeric = (fp - fm) / (2 * h)
        rel = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), floor)
        worst = max(worst, rel)
        if rel >= tol_rel:
            failures.append((int(i), float(analytic[i]), float(numeric), float(rel)))
    return GradCheckReport(worst, tol_rel, len(coords), failures)
