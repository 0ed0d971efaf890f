"""Small reverse-mode autodiff engine over float64 numpy arrays.

Only what the operator and the training loss need is implemented: broadcasting
arithmetic, reductions, reshapes/slices, the activations, an affine layer and
real FFTs. A graph is recorded on every forward pass and released by
:meth:`Tensor.backward`; calling ``backward`` twice on the same graph raises.

Complex spectra are stored as real tensors with a trailing axis of size 2
holding ``(real, imag)`` pairs.
"""

from __future__ import annotations

import contextlib
import functools
import math
import threading

import numpy as np
from scipy.special import ndtr

from .errors import ContractError, InvalidLengthError, ShapeError

DTYPE = np.float64
_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (inference, validation)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """n-d float64 array that records the operations applied to it."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_op", "_freed")

    # make ``ndarray <op> Tensor`` defer to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, _parents=(), _grad_fn=None, _op=""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if (requires_grad and not _parents) else None
        self._parents = tuple(_parents)
        self._grad_fn = _grad_fn
        self._op = _op
        self._freed = False

    # ------------------------------------------------------------------ basics
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
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # ------------------------------------------------------------- arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    # --------------------------------------------------------------- autodiff
    def backward(self):
        """Back-propagate from this scalar into every ``requires_grad`` leaf.

        Leaf gradients accumulate into ``.grad``; the graph is released afterwards.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._freed:
            raise ContractError("graph already consumed by a previous backward()")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor with requires_grad")

        order = _topological(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad += g
                continue
            parent_grads = node._grad_fn(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if not node.is_leaf:
                node._parents = ()
                node._grad_fn = None
                node._freed = True


def _topological(root):
    order, seen = [], set()
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


class Parameter(Tensor):
    """Named trainable leaf tensor."""

    __slots__ = ("name", "trainable")

    def __init__(self, name, data, trainable=True):
        super().__init__(np.array(data, dtype=DTYPE, copy=True), requires_grad=True)
        self.name = name
        self.trainable = trainable

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, grad_fn, op):
    if not grad_enabled() or not any(p.requires_grad for p in parents):
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _grad_fn=grad_fn, _op=op)


# ------------------------------------------------------------------ elementwise
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), grad_fn, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def grad_fn(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), grad_fn, "div")


def power(a, p):
    if isinstance(p, Tensor):
        raise TypeError("only constant exponents are supported")
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def square(a):
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def abs_(a):
    ad = a.data
    return _make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def _sigmoid_np(z):
    # split by sign so neither branch overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    x = as_tensor(x)
    out = _sigmoid_np(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    x = as_tensor(x)
    xd = x.data
    cdf = ndtr(xd)
    out = xd * cdf

    def grad_fn(g):
        d = np.square(xd)
        d *= -0.5
        np.exp(d, out=d)
        d *= _INV_SQRT_2PI
        d *= xd
        d += cdf
        d *= g
        return (d,)

    return _make(out, (x,), grad_fn, "gelu")


def clip(x, lo, hi):
    """Hard clamp; the gradient is zero wherever the clamp is active."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


# ------------------------------------------------------------------ reductions
def tsum(x, axis=None, keepdims=False):
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (x,), grad_fn, "sum")


def mean(x, axis=None, keepdims=False):
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


# ------------------------------------------------------------------ structure
def reshape(x, shape):
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=None):
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x, idx):
    shape = x.shape

    basic = all(isinstance(i, (slice, int, type(Ellipsis), type(None)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def grad_fn(g):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), grad_fn, "getitem")


def stack(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def grad_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tuple(tensors), grad_fn, "stack")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    cuts = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(out, tuple(tensors), grad_fn, "concat")


def pad_axis(x, axis, after):
    """Zero-pad ``after`` entries at the end of ``axis``."""
    axis = axis % x.ndim
    widths = [(0, 0)] * x.ndim
    widths[axis] = (0, after)
    n = x.shape[axis]
    sl = tuple(slice(0, n) if i == axis else slice(None) for i in range(x.ndim))
    return _make(np.pad(x.data, widths), (x,), lambda g: (g[sl],), "pad")


# ------------------------------------------------------------------ linear algebra
def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), grad_fn, "matmul")


def affine(x, W, b=None):
    """``x @ W + b`` applied over the last axis of ``x`` (any leading shape)."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"affine: input {x.shape} incompatible with weight {W.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ShapeError(f"affine: bias {b.shape} does not match weight {W.shape}")
    xd, Wd = x.data, W.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ Wd
    if b is not None:
        out += b.data
    out = out.reshape(lead + (Wd.shape[1],))

    def grad_fn(g):
        g2 = g.reshape(-1, Wd.shape[1])
        gx = (g2 @ Wd.T).reshape(xd.shape) if x.requires_grad else None
        gW = x2.T @ g2 if W.requires_grad else None
        if b is None:
            return gx, gW
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gW, gb

    parents = (x, W) if b is None else (x, W, b)
    return _make(out, parents, grad_fn, "affine")


# ------------------------------------------------------------------ spectra
def _pairs(z):
    return np.stack([z.real, z.imag], axis=-1)


def _complex(p):
    return p[..., 0] + 1j * p[..., 1]


def n_bins(n):
    return n // 2 + 1


def rfft(x, n=None, axis=-1):
    """Unnormalized real forward DFT along ``axis``.

    Returns the ``n//2 + 1`` non-negative-frequency bins as ``(real, imag)``
    pairs appended on a new trailing axis; the transformed axis keeps its
    position with the bin count as its extent.
    """
    x = as_tensor(x)
    axis = axis % x.ndim
    extent = x.shape[axis]
    if n is None:
        n = extent
    if n <= 0:
        raise InvalidLengthError("rfft length must be positive")
    if extent != n:
        raise InvalidLengthError(f"rfft: axis extent {extent} != n={n}")
    spec = np.fft.rfft(x.data, n=n, axis=axis)
    out = _pairs(spec)

    def grad_fn(g):
        gz = _complex(g).copy()
        hi = n_bins(n) if n % 2 else n // 2
        sl = [slice(None)] * gz.ndim
        sl[axis] = slice(1, hi)
        gz[tuple(sl)] *= 0.5
        return (n * np.fft.irfft(gz, n=n, axis=axis),)

    return _make(out, (x,), grad_fn, "rfft")


def irfft(X, n, axis=-2):
    """Inverse of :func:`rfft` with ``1/n`` normalization.

    ``X`` carries ``(real, imag)`` pairs on its trailing axis; ``axis`` names the
    bin axis in that layout (default: the one just before the pairs). The
    imaginary parts of the DC and Nyquist bins are ignored so the output is real.
    """
    X = as_tensor(X)
    if n <= 0:
        raise InvalidLengthError("irfft length must be positive")
    if X.shape[-1] != 2:
        raise ShapeError("irfft expects (real, imag) pairs on the last axis")
    axis = axis % X.ndim
    if axis == X.ndim - 1:
        raise ShapeError("bin axis cannot be the pair axis")
    if X.shape[axis] != n_bins(n):
        raise InvalidLengthError(f"irfft: {X.shape[axis]} bins given, n={n} needs {n_bins(n)}")
    out = np.fft.irfft(_complex(X.data), n=n, axis=axis)

    def grad_fn(g):
        gs = np.fft.rfft(g, axis=axis) * (2.0 / n)
        sl = [slice(None)] * gs.ndim
        sl[axis] = 0
        gs[tuple(sl)] = gs[tuple(sl)].real * 0.5
        if n % 2 == 0:
            sl[axis] = n // 2
            gs[tuple(sl)] = gs[tuple(sl)].real * 0.5
        return (_pairs(gs),)

    return _make(out, (X,), grad_fn, "irfft")


def mode_mix(X, R):
    """Per-mode complex channel mixing ``Y[..., k, o] = sum_i X[..., k, i] R[k, i, o]``.

    ``X`` is ``(..., m, C_in, 2)`` and ``R`` is ``(m, C_in, C_out, 2)``.
    """
    X, R = as_tensor(X), as_tensor(R)
    if R.ndim != 4 or X.shape[-3:-1] != R.shape[:2]:
        raise ShapeError(f"mode_mix: spectrum {X.shape} incompatible with weights {R.shape}")
    m, ci, co = R.shape[0], R.shape[1], R.shape[2]
    lead = X.shape[:-3]
    # (m, N, C_in) so each mode is one complex GEMM
    Xc = np.moveaxis(_complex(X.data).reshape((-1, m, ci)), 1, 0)
    Rc = _complex(R.data)
    Y = np.moveaxis(Xc @ Rc, 0, 1).reshape(lead + (m, co))

    def grad_fn(g):
        gc = np.moveaxis(_complex(g).reshape((-1, m, co)), 1, 0)
        gX = gR = None
        if X.requires_grad:
            gX = _pairs(np.moveaxis(gc @ np.swapaxes(Rc.conj(), 1, 2), 0, 1).reshape(lead + (m, ci)))
        if R.requires_grad:
            gR = _pairs(np.swapaxes(Xc.conj(), 1, 2) @ gc)
        return gX, gR

    return _make(_pairs(Y), (X, R), grad_fn, "mode_mix")


@functools.lru_cache(maxsize=32)
def _partial_dft(n, m):
    """Stacked real matrices for the first ``m`` rfft bins of a length-``n`` signal.

    Returns ``fwd`` of shape ``(2m, n)`` and ``inv`` of shape ``(n, 2m)``; rows
    of ``fwd`` and columns of ``inv`` interleave (real, imag) per bin.
    """
    k = np.arange(m)[:, None]
    t = np.arange(n)[None, :]
    theta = 2.0 * np.pi * k * t / n
    fwd = np.empty((2 * m, n))
    fwd[0::2], fwd[1::2] = np.cos(theta), -np.sin(theta)
    weight = np.full(m, 2.0)
    weight[0] = 1.0
    if n % 2 == 0 and m > n // 2:
        weight[n // 2] = 1.0
    inv = np.empty((n, 2 * m))
    inv[:, 0::2] = (weight[:, None] * np.cos(theta)).T / n
    inv[:, 1::2] = (-weight[:, None] * np.sin(theta)).T / n
    inv[:, 1] = 0.0
    fwd.setflags(write=False)
    inv.setflags(write=False)
    return fwd, inv


def _time_major(x):
    B, n, C = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(n, B * C)


def _bins_major(Y):
    B, m, C, _ = Y.shape
    return np.ascontiguousarray(Y.transpose(1, 3, 0, 2)).reshape(2 * m, B * C)


def rfft_modes(x, m):
    """First ``m`` bins of :func:`rfft` along axis 1 of a ``(B, n, C)`` tensor.

    Equivalent to ``rfft(x, axis=1)[:, :m]`` but costs O(n m) per channel.
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError("rfft_modes expects a (batch, time, channel) tensor")
    B, n, C = x.shape
    if not 0 < m <= n_bins(n):
        raise InvalidLengthError(f"{m} modes requested from a length-{n} signal")
    fwd, _ = _partial_dft(n, m)
    out = (fwd @ _time_major(x.data)).reshape(m, 2, B, C).transpose(2, 0, 3, 1)

    def grad_fn(g):
        gx = fwd.T @ _bins_major(g)
        return (gx.reshape(n, B, C).transpose(1, 0, 2),)

    return _make(np.ascontiguousarray(out), (x,), grad_fn, "rfft_modes")


def irfft_modes(Y, n):
    """Inverse transform of ``m`` low bins with all higher bins taken as zero.

    Equivalent to zero-padding ``Y`` to ``n//2 + 1`` bins along axis 1 and
    calling :func:`irfft`.
    """
    Y = as_tensor(Y)
    if Y.ndim != 4 or Y.shape[-1] != 2:
        raise ShapeError("irfft_modes expects a (batch, mode, channel, 2) tensor")
    B, m, C, _ = Y.shape
    if not 0 < m <= n_bins(n):
        raise InvalidLengthError(f"{m} modes do not fit a length-{n} signal")
    _, inv = _partial_dft(n, m)
    out = (inv @ _bins_major(Y.data)).reshape(n, B, C).transpose(1, 0, 2)

    def grad_fn(g):
        gY = (inv.T @ _time_major(g)).reshape(m, 2, B, C).transpose(2, 0, 3, 1)
        return (np.ascontiguousarray(gY),)

    return _make(np.ascontiguousarray(out), (Y,), grad_fn, "irfft_modes")


def rfft_direct(x, n=None):
    """O(n^2) reference DFT over the last axis, returned as complex numbers."""
    x = np.asarray(x, dtype=DTYPE)
    n = x.shape[-1] if n is None else n
    if n <= 0:
        raise InvalidLengthError("length must be positive")
    k = np.arange(n_bins(n))[:, None]
    t = np.arange(n)[None, :]
    basis = np.exp(-2j * np.pi * k * t / n)
    return x @ basis.T


# ------------------------------------------------------------------ grad checking
def numerical_grad(f, arrays, h=1e-6):
    """Central finite differences of scalar ``f(*arrays)`` w.r.t. each array."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*arrays)
            flat[i] = orig - h
            fm = f(*arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


def check_grad(fn, arrays, h=1e-6):
    """Compare autodiff and finite-difference gradients of ``fn``.

    ``fn`` maps Tensors to a scalar Tensor. Returns the worst relative error
    over the inputs.
    """
    arrays = [np.array(a, dtype=DTYPE) for a in arrays]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    fn(*leaves).backward()
    analytic = [leaf.grad for leaf in leaves]
    numeric = numerical_grad(lambda *xs: fn(*[Tensor(x) for x in xs]).item(), arrays, h)
    return max(relative_error(ga, gn) for ga, gn in zip(analytic, numeric))
