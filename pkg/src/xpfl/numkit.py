"""Dense float64 tensors with a reverse-mode gradient tape.

Usage::

    w = Tensor(np.zeros((3, 2)), requires_grad=True)
    with GradTape() as tape:
        loss = nk.sum(nk.matmul(x, w))
    tape.backward(loss)
    w.grad  # d loss / d w

Operations record onto the innermost active tape whenever one of their
inputs requires a gradient. A tape can be replayed once.
"""

from __future__ import annotations

import threading

import numpy as np

from . import kernels


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ValueError):
    """A scalar parameter is outside its valid range."""


class UsageError(RuntimeError):
    """API used out of order (e.g. backward on a foreign tape)."""


_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_tape", "_node")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._tape = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def node_id(self):
        return self._node

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Op:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class GradTape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.ops = []
        self._tensors = {}
        self._next = 0
        self._used = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def _id_for(self, t):
        if t._tape is self and t._node is not None:
            return t._node
        if not t.requires_grad:
            return None
        t._tape, t._node = self, self._next
        self._tensors[self._next] = t
        self._next += 1
        return t._node

    def tracks(self, t):
        return t.requires_grad or (t._tape is self and t._node is not None)

    def record(self, inputs, output, backward):
        ids = tuple(self._id_for(t) for t in inputs)
        output._tape, output._node = self, self._next
        self._tensors[self._next] = output
        self._next += 1
        self.ops.append(_Op(ids, output._node, backward))

    def backward(self, loss):
        """Fill ``.grad`` on every tensor that ``loss`` depends on."""
        if self._used:
            raise UsageError("tape already replayed; record a new forward pass")
        if not isinstance(loss, Tensor) or loss._tape is not self or loss._node is None:
            raise UsageError("loss was not produced under this tape")
        if loss.data.size != 1:
            raise UsageError(f"loss must be scalar, got shape {loss.shape}")
        self._used = True
        grads = {loss._node: np.ones_like(loss.data)}
        for op in reversed(self.ops):
            g = grads.pop(op.output, None)
            if g is None:
                continue
            self._tensors[op.output].grad = g
            in_grads = op.backward(g)
            for nid, ig in zip(op.inputs, in_grads):
                if nid is None or ig is None:
                    continue
                if nid in grads:
                    grads[nid] = grads[nid] + ig
                else:
                    grads[nid] = ig
        # whatever is left are leaves
        for nid, g in grads.items():
            self._tensors[nid].grad = g
        return {nid: t.grad for nid, t in self._tensors.items() if t.grad is not None}


def _track(*inputs):
    tape = active_tape()
    if tape is None:
        return None
    if any(tape.tracks(t) for t in inputs):
        return tape
    return None


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(a, b, fwd, bwd):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(fwd(a.data, b.data))
    except ValueError as exc:
        raise DimensionError(f"cannot combine shapes {a.shape} and {b.shape}") from exc
    tape = _track(a, b)
    if tape is not None:
        def backward(g):
            ga, gb = bwd(g, a.data, b.data, out.data)
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        tape.record((a, b), out, backward)
    return out


def add(a, b):
    return _binary(a, b, np.add, lambda g, x, y, o: (g, g))


def sub(a, b):
    return _binary(a, b, np.subtract, lambda g, x, y, o: (g, -g))


def mul(a, b):
    return _binary(a, b, np.multiply, lambda g, x, y, o: (g * y, g * x))


def div(a, b):
    return _binary(a, b, np.divide, lambda g, x, y, o: (g / y, -g * x / (y * y)))


def matmul(a, b):
    """Matrix product; leading axes of either operand broadcast as batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))
    tape = _track(a, b)
    if tape is not None:
        def backward(g):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        tape.record((a, b), out, backward)
    return out


def _unary(x, value, dfn):
    x = as_tensor(x)
    out = Tensor(value(x.data))
    tape = _track(x)
    if tape is not None:
        tape.record((x,), out, lambda g: (dfn(g, x.data, out.data),))
    return out


def relu(x):
    return _unary(x, lambda v: np.maximum(v, 0.0), lambda g, v, o: g * (v > 0))


def exp(x):
    return _unary(x, np.exp, lambda g, v, o: g * o)


def log(x):
    return _unary(x, np.log, lambda g, v, o: g / v)


def tanh(x):
    return _unary(x, np.tanh, lambda g, v, o: g * (1.0 - o * o))


def square(x):
    return _unary(x, np.square, lambda g, v, o: 2.0 * g * v)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = Tensor(np.sum(x.data, axis=axis, keepdims=keepdims))
    tape = _track(x)
    if tape is not None:
        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).copy(),)
        tape.record((x,), out, backward)
    return out


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape):
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape))
    tape = _track(x)
    if tape is not None:
        tape.record((x,), out, lambda g: (g.reshape(x.shape),))
    return out


def transpose(x, axes):
    x = as_tensor(x)
    out = Tensor(np.transpose(x.data, axes))
    tape = _track(x)
    if tape is not None:
        inv = np.argsort(axes)
        tape.record((x,), out, lambda g: (np.transpose(g, inv),))
    return out


def broadcast_to(x, shape):
    x = as_tensor(x)
    out = Tensor(np.broadcast_to(x.data, shape).copy())
    tape = _track(x)
    if tape is not None:
        tape.record((x,), out, lambda g: (_unbroadcast(g, x.shape),))
    return out


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    tape = _track(*tensors)
    if tape is not None:
        bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

        def backward(g):
            return tuple(np.split(g, bounds, axis=axis))
        tape.record(tuple(tensors), out, backward)
    return out


def gather(x, index, axis=1):
    """``np.take_along_axis`` over ``axis`` with index broadcast over trailing dims."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    idx = index.reshape(index.shape + (1,) * (x.ndim - index.ndim))
    out = Tensor(np.take_along_axis(x.data, idx, axis=axis))
    tape = _track(x)
    if tape is not None:
        def backward(g):
            gx = np.zeros_like(x.data)
            full_idx = np.broadcast_to(idx, g.shape)
            # np.put_along_axis overwrites; repeated indices need accumulation
            grids = list(np.indices(g.shape, sparse=True))
            grids[axis] = full_idx
            np.add.at(gx, tuple(grids), g)
            return (gx,)
        tape.record((x,), out, backward)
    return out


def _check_tau(tau):
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")


def _softmax_np(z, axis=-1):
    e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(x, tau=1.0, axis=-1):
    _check_tau(tau)
    x = as_tensor(x)
    out = Tensor(_softmax_np(x.data / tau, axis=axis))
    tape = _track(x)
    if tape is not None:
        def backward(g):
            s = out.data
            return ((s * (g - np.sum(g * s, axis=axis, keepdims=True))) / tau,)
        tape.record((x,), out, backward)
    return out


def softmax_tau(z, tau):
    """exp(z_i/tau) / sum_j exp(z_j/tau), stabilised by max subtraction."""
    return softmax(z, tau=tau, axis=-1)


def log_softmax(x, tau=1.0, axis=-1):
    _check_tau(tau)
    x = as_tensor(x)
    z = x.data / tau
    zs = z - np.max(z, axis=axis, keepdims=True)
    out = Tensor(zs - np.log(np.sum(np.exp(zs), axis=axis, keepdims=True)))
    tape = _track(x)
    if tape is not None:
        def backward(g):
            s = np.exp(out.data)
            return ((g - s * np.sum(g, axis=axis, keepdims=True)) / tau,)
        tape.record((x,), out, backward)
    return out


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)
    tape = _track(x, gamma, beta)
    if tape is not None:
        def backward(g):
            gxhat = g * gamma.data
            gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
            return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)
        tape.record((x, gamma, beta), out, backward)
    return out


def cross_entropy(logits, labels):
    """Mean of -log softmax(logits)[label] over the batch."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    z = logits.data
    if z.ndim == 1:
        z = z[None, :]
        labels = labels.reshape(1)
    if z.shape[0] != labels.shape[0]:
        raise DimensionError(f"{z.shape[0]} logit rows vs {labels.shape[0]} labels")
    zs = z - z.max(axis=1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    rows = np.arange(z.shape[0])
    out = Tensor(-logp[rows, labels].mean())
    tape = _track(logits)
    if tape is not None:
        def backward(g):
            d = np.exp(logp)
            d[rows, labels] -= 1.0
            return ((g * d / z.shape[0]).reshape(logits.shape),)
        tape.record((logits,), out, backward)
    return out


def conv2d(x, w, b=None, pad=1):
    """Stride-1 2-D convolution. x: (B, C, H, W); w: (O, C, kh, kw); b: (O,)."""
    x, w = as_tensor(x), as_tensor(w)
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    Ho, Wo = H + 2 * pad - kh + 1, W + 2 * pad - kw + 1
    cols = kernels.im2col(x.data, kh, kw, pad)  # (B, Ho*Wo, C*kh*kw)
    wm = w.data.reshape(O, -1)
    y = cols @ wm.T  # (B, Ho*Wo, O)
    if b is not None:
        b = as_tensor(b)
        y = y + b.data
    out = Tensor(np.ascontiguousarray(y.transpose(0, 2, 1)).reshape(B, O, Ho, Wo))
    inputs = (x, w) if b is None else (x, w, b)
    tape = _track(*inputs)
    if tape is not None:
        def backward(g):
            gm = g.reshape(B, O, Ho * Wo).transpose(0, 2, 1)  # (B, Ho*Wo, O)
            gw = np.einsum("bpo,bpk->ok", gm, cols).reshape(w.shape)
            gcols = gm @ wm
            gx = kernels.col2im(gcols, x.shape, kh, kw, pad)
            if b is None:
                return gx, gw
            return gx, gw, gm.sum(axis=(0, 1))
        tape.record(inputs, out, backward)
    return out


def maxpool2d(x, k=2):
    """Non-overlapping k x k max pooling on (B, C, H, W)."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    if H % k or W % k:
        raise DimensionError(f"maxpool2d: spatial dims {H}x{W} not divisible by {k}")
    win = x.data.reshape(B, C, H // k, k, W // k, k).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(B, C, H // k, W // k, k * k)
    arg = win.argmax(axis=-1)
    out = Tensor(np.take_along_axis(win, arg[..., None], axis=-1)[..., 0])
    tape = _track(x)
    if tape is not None:
        def backward(g):
            gw = np.zeros_like(win)
            np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
            gw = gw.reshape(B, C, H // k, W // k, k, k).transpose(0, 1, 2, 4, 3, 5)
            return (gw.reshape(B, C, H, W),)
        tape.record((x,), out, backward)
    return out


# ---------------------------------------------------------------------------
# plain-array utilities


def kl_divergence(p, q):
    """sum p_i log(p_i / q_i) in nats; 0 log 0 = 0 and q clamped at 1e-12."""
    p = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64)
    q = np.asarray(q.data if isinstance(q, Tensor) else q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError(f"kl_divergence shape mismatch: {p.shape} vs {q.shape}")
    q = np.maximum(q, 1e-12)
    nz = p > 0
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz]))))


def cosine_weight(a, b):
    """(1 + cos(a, b)) / 2, falling back to 0.5 when either vector is zero."""
    a = np.ravel(np.asarray(a, dtype=np.float64))
    b = np.ravel(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise DimensionError(f"cosine_weight length mismatch: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.5
    cos = float(np.dot(a, b) / (na * nb))
    return min(1.0, max(0.0, (1.0 + cos) / 2.0))


def make_rng(seed, *stream):
    """Generator for (seed, stream...) -- identical sequence on every platform."""
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF,
                                spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.PCG64(ss))


def numeric_grad(f, x, eps=1e-5):
    """Central finite differences of scalar ``f`` at array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g
