"""
Minimal dense tensor with tape-based reverse-mode differentiation.

Tensors hold float64 numpy arrays. Operations performed while a :class:`Tape`
is active are recorded on it when at least one operand is tracked (a leaf
with ``requires_grad=True`` or the output of an earlier recorded op).
Calling :meth:`Tape.backward` walks the nodes in reverse order.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    >>> tape.backward(loss)[w].data
    array([[2., 4.]])
"""

import threading

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, NumericError, ValidationError

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("out", "parents", "backward_fn", "kind")

    def __init__(self, out, parents, backward_fn, kind):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.kind = kind


class Tape:
    """Ordered record of operations; create one per training step."""

    def __init__(self):
        self.nodes = []
        self.leaves = {}

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def _tracks(self, t):
        return t._tape is self or (t.requires_grad and t._node is None)

    def backward(self, loss, inputs=None):
        """Return ``{leaf: gradient Tensor}``.

        With ``inputs`` given, exactly those tensors are keyed; tensors the
        loss does not depend on get zero gradients.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not self._tracks(p):
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        targets = inputs if inputs is not None else list(self.leaves.values())
        out = {}
        for t in targets:
            if not t.requires_grad:
                raise ContractError("requested gradient of a tensor with requires_grad=False")
            g = grads.get(id(t))
            out[t] = Tensor(np.zeros_like(t.data) if g is None else g)
        return out


class no_tape:
    """Context in which no operation is recorded."""

    def __enter__(self):
        _tape_stack().append(None)

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._tape = None
        self._node = None

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = arr if arr.dtype == np.float64 else arr.astype(np.float64)
        t.requires_grad = False
        t._tape = None
        t._node = None
        return t

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
    def tape_id(self):
        return self._node

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor._wrap(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def _record(kind, data, parents, backward_fn):
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is None:
        return out
    tracked = False
    for p in parents:
        if p._tape is tape:
            tracked = True
        elif p.requires_grad and p._node is None:
            tape.leaves.setdefault(id(p), p)
            tracked = True
    if not tracked:
        return out
    out._tape = tape
    out._node = len(tape.nodes)
    out.requires_grad = True
    tape.nodes.append(_Node(out, parents, backward_fn, kind))
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not align") from None


# -- elementwise ---------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _record("div", out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)))


def neg(a):
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore"):
        out = np.log(ad)
    return _record("log", out, (a,), lambda g: (g / ad,))


def square(a):
    a = as_tensor(a)
    ad = a.data
    return _record("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _record("sqrt", out, (a,), lambda g: (0.5 * g / out,))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a):
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def bw(g):
        return (g * (cdf + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)),)

    return _record("gelu", out, (a,), bw)


# -- shape ---------------------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape).copy()
    except ValueError:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None):
    """Permute axes; the default swaps the last two."""
    a = as_tensor(a)
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _record("transpose", out, (a,), lambda g: (g.transpose(inv),))


def take(a, idx):
    """Indexing (basic or fancy); the result is a copy."""
    a = as_tensor(a)
    shape = a.shape
    out = np.array(a.data[idx], dtype=np.float64)

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _record("take", out, (a,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record("concat", out, tuple(tensors),
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"stack: incompatible shapes {[t.shape for t in tensors]}") from None
    n = len(tensors)
    return _record("stack", out, tuple(tensors),
                   lambda g: tuple(np.squeeze(p, axis=axis) for p in np.split(g, n, axis=axis)))


# -- reductions ----------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


# -- linear algebra ------------------------------------------------------------

def matmul(a, b):
    """Matrix product over the last two axes; leading axes of ``a`` batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record("matmul", out, (a, b), bw)


# -- normalisation and losses ----------------------------------------------------

def softmax_rows(a):
    """Softmax over the last axis, stabilised by subtracting the row max."""
    a = as_tensor(a)
    # max propagates NaN, so checking the row maxima covers every entry
    rmax = a.data.max(axis=-1, keepdims=True)
    if np.isnan(rmax).any():
        raise NumericError("softmax_rows: NaN in input")
    out = np.subtract(a.data, rmax)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record("softmax", out, (a,), bw)


def log_softmax(a):
    a = as_tensor(a)
    if np.isnan(a.data).any():
        raise NumericError("log_softmax: NaN in input")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(out)
    return _record("log_softmax", out, (a,),
                   lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm(a, gain, bias, eps=1e-5):
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: feature size {d} vs gain {gain.shape} / bias {bias.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead)
        g_bias = g.sum(axis=lead)
        gx = g * gd
        g_in = inv * (gx - gx.mean(axis=-1, keepdims=True)
                      - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return g_in, g_gain, g_bias

    return _record("layer_norm", out, (a, gain, bias), bw)


def _check_targets(targets, shape):
    t = targets.data
    if t.shape != shape:
        raise DimensionError(f"cross_entropy: targets {t.shape} vs predictions {shape}")
    if (t < -1e-12).any() or np.abs(t.sum(axis=-1) - 1.0).max() > 1e-6:
        raise ValidationError("cross_entropy: every target row must be a distribution")


def cross_entropy(x, targets, from_logits=False):
    """Batch mean of ``-sum_c y_c log p_c``.

    ``x`` holds probabilities (e.g. the distance softmax) unless
    ``from_logits`` is set, in which case a log-softmax is applied first.
    """
    x, targets = as_tensor(x), as_tensor(targets)
    if x.ndim != 2:
        raise DimensionError(f"cross_entropy expects B x C input, got {x.shape}")
    _check_targets(targets, x.shape)
    if from_logits:
        return -(log_softmax(x) * targets).sum() * (1.0 / x.shape[0])
    return _prob_ce(x, targets)


def _prob_ce(p, targets):
    # zero-weight classes contribute nothing, so 0 * log 0 == 0
    pd, yd = p.data, targets.data
    b = pd.shape[0]
    mask = yd != 0
    with np.errstate(divide="ignore"):
        logp = np.where(mask, np.log(np.where(mask, pd, 1.0)), 0.0)
    out = np.asarray(-(yd * logp).sum() / b)

    def bw(g):
        gp = np.where(mask, -yd / np.where(mask, pd, 1.0), 0.0) * (g / b)
        return gp, -logp * (g / b)

    return _record("cross_entropy", out, (p, targets), bw)


def pairwise_sq_dist(a, b):
    """Squared Euclidean distances between rows of ``a`` (M x D) and ``b`` (N x D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"pairwise_sq_dist: shapes {a.shape} and {b.shape} do not align")
    aa = square(a).sum(axis=1, keepdims=True)
    bb = square(b).sum(axis=1, keepdims=True)
    return aa + transpose(bb) - 2.0 * matmul(a, transpose(b))


# -- top-level helpers ---------------------------------------------------------

def backward(loss, inputs=None):
    """Backpropagate ``loss`` on the tape it was recorded on."""
    loss = as_tensor(loss)
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ContractError("loss is not on an active tape")
    return loss._tape.backward(loss, inputs)


def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` at ``x``; ``x`` is restored."""
    if h <= 0:
        raise ContractError("finite_diff_grad: h must be positive")
    x = x if isinstance(x, Tensor) else Tensor(x)
    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    grad = np.empty_like(flat)
    with no_tape():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(as_tensor(f(x)).data.reshape(-1)[0])
            flat[i] = orig - h
            fm = float(as_tensor(f(x)).data.reshape(-1)[0])
            flat[i] = orig
            grad[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad.reshape(x.shape))


def relative_error(a, b, floor=1e-6):
    """Max elementwise ``|a-b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a)
    b = np.asarray(b.data if isinstance(b, Tensor) else b)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / scale).max()) if a.size else 0.0
