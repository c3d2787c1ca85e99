"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every value is a Tensor wrapping a float64 ndarray.  Operations record a
closure that scatters the output gradient back to their parents; calling
``backward()`` on a scalar loss runs the closures in reverse topological
order.  Wrapping code in ``no_grad()`` skips all recording, so the same
forward functions serve training and inference.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable gradient recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("tensor values must be finite")
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward_fn = backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.data.shape}")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def parameter(data, rng: np.random.Generator | None = None, scale: float | None = None) -> Tensor:
    """Create a trainable tensor; `data` may be a shape when rng is given."""
    if rng is not None:
        shape = tuple(data)
        if scale is None:
            fan_in = shape[0] if len(shape) == 1 else int(np.prod(shape[:-1]))
            scale = 1.0 / np.sqrt(max(fan_in, 1))
        data = rng.uniform(-scale, scale, size=shape)
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def zero_all(params: dict) -> None:
    for p in params.values():
        p.grad = None


def _toposort(root: Tensor) -> list:
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    return order


def _accum(t: Tensor, g: np.ndarray):
    # grads are never mutated in place, so aliasing a view here is safe
    t.grad = g if t.grad is None else t.grad + g


def _result(data, parents, backward_fn) -> Tensor:
    # fast path: op outputs skip the finiteness scan (inputs and parameters
    # are validated at construction; training loops check losses and grads)
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(data, dtype=np.float64)
    t.grad = None
    t.requires_grad = req
    t._parents = tuple(p for p in parents if p.requires_grad) if req else ()
    t._backward_fn = backward_fn if req else None
    return t


# -- arithmetic -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _result(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _result(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(out, (a, b), bw)


def matmul(x: Tensor, w: Tensor) -> Tensor:
    """x: (..., Cin) @ w: (Cin, Cout) -> (..., Cout)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.shape[-1] != w.data.shape[0]:
        raise ValueError(
            f"matmul shape mismatch: input has {x.data.shape[-1]} channels, "
            f"weight expects {w.data.shape[0]}")
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, x.data.shape[-1])
    out = (x2 @ w.data).reshape(lead + (w.data.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, w.data.shape[1])
        if x.requires_grad:
            _accum(x, (g2 @ w.data.T).reshape(x.data.shape))
        if w.requires_grad:
            _accum(w, x2.T @ g2)

    return _result(out, (x, w), bw)


def pow_const(x: Tensor, p: float) -> Tensor:
    x = as_tensor(x)
    out = x.data ** p

    def bw(g):
        _accum(x, g * p * x.data ** (p - 1.0))

    return _result(out, (x,), bw)


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        _accum(x, g * 2.0 * x.data)

    return _result(x.data * x.data, (x,), bw)


def absolute(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        _accum(x, g * np.sign(x.data))

    return _result(np.abs(x.data), (x,), bw)


# -- reductions -------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.data.shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(ge, x.data.shape).copy())

    return _result(out, (x,), bw)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    n = x.data.size / max(out.size, 1)

    def bw(g):
        if axis is None:
            _accum(x, np.broadcast_to(g / n, x.data.shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(ge / n, x.data.shape).copy())

    return _result(out, (x,), bw)


# -- nonlinearities ----------------------------------------------------------

def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)

    def bw(g):
        _accum(x, g * (1.0 - out * out))

    return _result(out, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(g):
        _accum(x, g * out * (1.0 - out))

    return _result(out, (x,), bw)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)

    def bw(g):
        _accum(x, g * (x.data > 0.0))

    return _result(out, (x,), bw)


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    x = as_tensor(x)
    out = np.where(x.data > 0.0, x.data, alpha * x.data)

    def bw(g):
        _accum(x, g * np.where(x.data > 0.0, 1.0, alpha))

    return _result(out, (x,), bw)


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def bw(g):
        _accum(x, g * out)

    return _result(out, (x,), bw)


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.log(x.data)

    def bw(g):
        _accum(x, g / x.data)

    return _result(out, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(x, out * (g - dot))

    return _result(out, (x,), bw)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray,
                          weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean cross-entropy between row softmax of `logits` and integer
    targets; `weights` (same length as targets) masks or reweights rows."""
    logits = as_tensor(logits)
    n_cls = logits.data.shape[-1]
    flat = logits.data.reshape(-1, n_cls)
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    if tgt.shape[0] != flat.shape[0]:
        raise ValueError(f"targets length {tgt.shape[0]} != logits rows {flat.shape[0]}")
    if weights is None:
        w = np.ones(flat.shape[0])
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if w.shape[0] != flat.shape[0]:
            raise ValueError(f"weights length {w.shape[0]} != logits rows {flat.shape[0]}")
    w_total = w.sum()
    if w_total <= 0:
        raise ValueError("cross-entropy weights must not sum to zero")
    z = flat - flat.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1)) + flat.max(axis=1)
    picked = flat[np.arange(flat.shape[0]), tgt]
    out = np.asarray(((logsum - picked) * w).sum() / w_total)

    def bw(g):
        sm = np.exp(flat - logsum[:, None])
        sm[np.arange(flat.shape[0]), tgt] -= 1.0
        sm *= (w / w_total)[:, None]
        _accum(logits, (float(g) * sm).reshape(logits.data.shape))

    return _result(out, (logits,), bw)


# -- shape & indexing --------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        _accum(x, g.reshape(x.data.shape))

    return _result(x.data.reshape(shape), (x,), bw)


def concat(parts, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def bw(g):
        offset = 0
        for p, s in zip(parts, sizes):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + s)
                _accum(p, g[tuple(idx)])
            offset += s

    return _result(out, tuple(parts), bw)


def slice_axis(x: Tensor, axis: int, start: int, stop: int, step: int = 1) -> Tensor:
    x = as_tensor(x)
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop, step)
    idx = tuple(idx)
    out = x.data[idx]

    def bw(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        _accum(x, full)

    return _result(out, (x,), bw)


def pad_axis(x: Tensor, axis: int, before: int, after: int) -> Tensor:
    x = as_tensor(x)
    pads = [(0, 0)] * x.data.ndim
    pads[axis] = (before, after)
    out = np.pad(x.data, pads)

    def bw(g):
        idx = [slice(None)] * g.ndim
        idx[axis] = slice(before, before + x.data.shape[axis])
        _accum(x, g[tuple(idx)])

    return _result(out, (x,), bw)


def reverse_axis(x: Tensor, axis: int) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        _accum(x, np.flip(g, axis=axis))

    return _result(np.flip(x.data, axis=axis), (x,), bw)


def repeat_axis(x: Tensor, repeats: int, axis: int) -> Tensor:
    """Nearest-neighbour upsampling: each slice along `axis` repeated `repeats` times."""
    x = as_tensor(x)
    out = np.repeat(x.data, repeats, axis=axis)

    def bw(g):
        shape = list(x.data.shape)
        shape.insert(axis + 1, repeats)
        _accum(x, g.reshape(shape).sum(axis=axis + 1))

    return _result(out, (x,), bw)


def conv1d_core(x: Tensor, w: Tensor, b: Tensor, *, stride: int, dilation: int,
                pad_before: int, pad_after: int) -> Tensor:
    """Fused 1-D convolution primitive: x (B, T, Cin), w (K, Cin, Cout).

    Computed as one GEMM over gathered tap windows; the backward scatters
    through the same tap layout.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    k, c_in, c_out = w.data.shape
    if x.data.shape[-1] != c_in:
        raise ValueError(f"conv1d channel mismatch: input {x.data.shape[-1]}, weight {c_in}")
    xp = np.pad(x.data, ((0, 0), (pad_before, pad_after), (0, 0)))
    batch, t_pad, _ = xp.shape
    span = (k - 1) * dilation + 1
    if t_pad < span:
        raise ValueError(f"padded length {t_pad} shorter than kernel span {span}")
    t_out = (t_pad - span) // stride + 1
    need = (t_out - 1) * stride + 1
    # (B, T', Cin, K) tap view, then (B*T_out, K*Cin) for a single GEMM
    view = np.lib.stride_tricks.sliding_window_view(xp, span, axis=1)[:, :need:stride]
    taps = view[..., ::dilation]
    cols = np.ascontiguousarray(np.swapaxes(taps, 2, 3)).reshape(batch * t_out, k * c_in)
    w2 = w.data.reshape(k * c_in, c_out)
    out = (cols @ w2 + b.data).reshape(batch, t_out, c_out)

    def bw(g):
        g2 = g.reshape(batch * t_out, c_out)
        if w.requires_grad:
            _accum(w, (cols.T @ g2).reshape(k, c_in, c_out))
        if b.requires_grad:
            _accum(b, g2.sum(axis=0))
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(batch, t_out, k, c_in)
            gxp = np.zeros_like(xp)
            for j in range(k):
                start = j * dilation
                gxp[:, start:start + need:stride] += gcols[:, :, j]
            _accum(x, gxp[:, pad_before:pad_before + x.data.shape[1]])

    return _result(out, (x, w, b), bw)


def upsample_zeros(x: Tensor, factor: int, axis: int = 1) -> Tensor:
    """Insert factor-1 zeros after every element along `axis` (stride transposed conv)."""
    x = as_tensor(x)
    shape = list(x.data.shape)
    shape[axis] *= factor
    out = np.zeros(shape, dtype=np.float64)
    idx = [slice(None)] * len(shape)
    idx[axis] = slice(0, None, factor)
    idx = tuple(idx)
    out[idx] = x.data

    def bw(g):
        _accum(x, g[idx])

    return _result(out, (x,), bw)
