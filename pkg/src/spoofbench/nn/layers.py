"""Neural layer inventory built from autodiff primitives.

Sequence tensors are shaped (batch, time, channels).  Parameters live in
plain dicts of named Tensors; layer functions take the tensors they need
explicitly, so the same code path serves training, inference, and
finite-difference verification.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, w), b)


def init_affine(params: dict, prefix: str, fan_in: int, fan_out: int,
                rng: np.random.Generator, zero: bool = False):
    if zero:
        params[prefix + "/W"] = T.parameter(np.zeros((fan_in, fan_out)))
    else:
        params[prefix + "/W"] = T.parameter((fan_in, fan_out), rng=rng)
    params[prefix + "/b"] = T.parameter(np.zeros(fan_out))


def init_conv(params: dict, prefix: str, kernel: int, c_in: int, c_out: int,
              rng: np.random.Generator, zero: bool = False):
    if zero:
        params[prefix + "/W"] = T.parameter(np.zeros((kernel, c_in, c_out)))
    else:
        scale = 1.0 / np.sqrt(kernel * c_in)
        params[prefix + "/W"] = T.parameter((kernel, c_in, c_out), rng=rng, scale=scale)
    params[prefix + "/b"] = T.parameter(np.zeros(c_out))


def conv1d(x: Tensor, w: Tensor, b: Tensor, *, stride: int = 1, dilation: int = 1,
           padding: str = "same") -> Tensor:
    """1-D convolution over (B, T, Cin) with weight (K, Cin, Cout).

    padding: "same" (T_out = ceil(T/stride)), "causal" (left pad only,
    stride must be 1) or "valid".
    """
    k = w.data.shape[0]
    t_in = x.data.shape[1]
    span = (k - 1) * dilation
    if padding == "causal":
        if stride != 1:
            raise ValueError("causal convolution requires stride 1")
        before, after = span, 0
    elif padding == "same":
        t_out = -(-t_in // stride)
        total = max((t_out - 1) * stride + span + 1 - t_in, 0)
        before, after = total // 2, total - total // 2
    elif padding == "valid":
        if t_in < span + 1:
            raise ValueError(f"input length {t_in} shorter than kernel span {span + 1}")
        before = after = 0
    else:
        raise ValueError(f"unknown padding mode '{padding}'")
    return T.conv1d_core(x, w, b, stride=stride, dilation=dilation,
                         pad_before=before, pad_after=after)


def conv1d_transpose(x: Tensor, w: Tensor, b: Tensor, *, stride: int) -> Tensor:
    """Stride-s upsampling transposed convolution; output length = T * stride."""
    up = T.upsample_zeros(x, stride, axis=1)
    return conv1d(up, w, b, stride=1, dilation=1, padding="same")


def gated(x_filter: Tensor, x_gate: Tensor) -> Tensor:
    return T.mul(T.tanh(x_filter), T.sigmoid(x_gate))


def init_lstm(params: dict, prefix: str, c_in: int, hidden: int, rng: np.random.Generator):
    params[prefix + "/Wx"] = T.parameter((c_in, 4 * hidden), rng=rng)
    params[prefix + "/Wh"] = T.parameter((hidden, 4 * hidden), rng=rng)
    bias = np.zeros(4 * hidden)
    bias[hidden:2 * hidden] = 1.0  # forget-gate bias
    params[prefix + "/b"] = T.parameter(bias)


def lstm(x: Tensor, wx: Tensor, wh: Tensor, b: Tensor, *, reverse: bool = False) -> Tensor:
    """Unidirectional LSTM over (B, T, Cin) -> (B, T, H)."""
    hidden = wh.data.shape[0]
    if reverse:
        x = T.reverse_axis(x, 1)
    batch, t_in, _ = x.data.shape
    h = T.constant(np.zeros((batch, hidden)))
    c = T.constant(np.zeros((batch, hidden)))
    outs = []
    for t in range(t_in):
        xt = T.reshape(T.slice_axis(x, 1, t, t + 1), (batch, -1))
        h, c = lstm_cell(xt, h, c, wx, wh, b)
        outs.append(T.reshape(h, (batch, 1, hidden)))
    y = T.concat(outs, axis=1)
    if reverse:
        y = T.reverse_axis(y, 1)
    return y


def lstm_cell(xt: Tensor, h: Tensor, c: Tensor, wx: Tensor, wh: Tensor, b: Tensor):
    hidden = wh.data.shape[0]
    gates = T.add(T.add(T.matmul(xt, wx), T.matmul(h, wh)), b)
    i = T.sigmoid(T.slice_axis(gates, 1, 0, hidden))
    f = T.sigmoid(T.slice_axis(gates, 1, hidden, 2 * hidden))
    g = T.tanh(T.slice_axis(gates, 1, 2 * hidden, 3 * hidden))
    o = T.sigmoid(T.slice_axis(gates, 1, 3 * hidden, 4 * hidden))
    c_new = T.add(T.mul(f, c), T.mul(i, g))
    h_new = T.mul(o, T.tanh(c_new))
    return h_new, c_new


def bilstm(x: Tensor, params: dict, prefix: str) -> Tensor:
    fwd = lstm(x, params[prefix + "/fwd/Wx"], params[prefix + "/fwd/Wh"], params[prefix + "/fwd/b"])
    bwd = lstm(x, params[prefix + "/bwd/Wx"], params[prefix + "/bwd/Wh"], params[prefix + "/bwd/b"],
               reverse=True)
    return T.concat([fwd, bwd], axis=2)


def init_bilstm(params: dict, prefix: str, c_in: int, hidden: int, rng: np.random.Generator):
    init_lstm(params, prefix + "/fwd", c_in, hidden, rng)
    init_lstm(params, prefix + "/bwd", c_in, hidden, rng)


def init_batchnorm(params: dict, buffers: dict, prefix: str, channels: int):
    params[prefix + "/gamma"] = T.parameter(np.ones(channels))
    params[prefix + "/beta"] = T.parameter(np.zeros(channels))
    buffers[prefix + "/running_mean"] = np.zeros(channels)
    buffers[prefix + "/running_var"] = np.ones(channels)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, buffers: dict, prefix: str, *,
              training: bool, momentum: float = 0.1, eps: float = 1e-5,
              update_running: bool = True) -> Tensor:
    """Batch normalization over all axes but the last (channel) axis.

    In inference mode this is a fixed per-channel affine map using the
    running statistics.
    """
    axes = tuple(range(x.data.ndim - 1))
    if training:
        mu = T.tmean(x, axis=axes, keepdims=True)
        var = T.tmean(T.square(T.sub(x, mu)), axis=axes, keepdims=True)
        if update_running:
            rm, rv = buffers[prefix + "/running_mean"], buffers[prefix + "/running_var"]
            buffers[prefix + "/running_mean"] = (1 - momentum) * rm + momentum * mu.data.reshape(-1)
            buffers[prefix + "/running_var"] = (1 - momentum) * rv + momentum * var.data.reshape(-1)
        inv = T.pow_const(T.add(var, eps), -0.5)
        norm = T.mul(T.sub(x, mu), inv)
    else:
        rm = buffers[prefix + "/running_mean"]
        rv = buffers[prefix + "/running_var"]
        norm = T.mul(T.sub(x, T.constant(rm)), T.constant(1.0 / np.sqrt(rv + eps)))
    return T.add(T.mul(norm, gamma), beta)


def feedback_dropout_mask(n: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Per-position keep mask: entries are 0 with probability `rate`, else 1."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1], got {rate}")
    return (rng.random(n) >= rate).astype(np.float64)


def layer_forward(kind: str, params: dict, inputs, **opts) -> Tensor:
    """Uniform dispatcher over the layer inventory, keyed by layer kind."""
    x = inputs
    if kind == "affine":
        return affine(x, params["W"], params["b"])
    if kind == "conv1d":
        return conv1d(x, params["W"], params["b"],
                      stride=opts.get("stride", 1), dilation=opts.get("dilation", 1),
                      padding=opts.get("padding", "same"))
    if kind == "conv1d_transpose":
        return conv1d_transpose(x, params["W"], params["b"], stride=opts.get("stride", 2))
    if kind == "gated":
        xf, xg = inputs
        return gated(xf, xg)
    if kind == "lstm":
        return lstm(x, params["Wx"], params["Wh"], params["b"],
                    reverse=opts.get("reverse", False))
    if kind == "bilstm":
        return bilstm(x, params, "bi")
    if kind == "batchnorm":
        return batchnorm(x, params["gamma"], params["beta"], opts["buffers"], opts["prefix"],
                         training=opts.get("training", True),
                         update_running=opts.get("update_running", False))
    if kind == "tanh":
        return T.tanh(x)
    if kind == "sigmoid":
        return T.sigmoid(x)
    if kind == "leaky_relu":
        return T.leaky_relu(x, opts.get("alpha", 0.2))
    if kind == "softmax":
        return T.softmax(x, axis=opts.get("axis", -1))
    if kind == "feedback_dropout":
        mask = opts["mask"]
        return T.mul(x, T.constant(mask))
    raise ValueError(f"unknown layer kind '{kind}'")
