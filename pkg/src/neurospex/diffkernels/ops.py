"""Differentiable kernels.

Every op takes and returns :class:`Tensor`. Array layouts follow the
``(..., channels, time)`` convention: any number of leading batch axes, then
channels, then time. Each op's backward closure returns one gradient per
parent (``None`` where a parent needs none).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_result

LN_EPS = 1e-5


def _pair(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        return as_tensor(a), as_tensor(b)
    if not isinstance(a, Tensor):
        a = as_tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = as_tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "multiply")

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), backward, "mul")


multiply = mul


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data / b.data, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def log(a: Tensor) -> Tensor:
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def log10(a: Tensor) -> Tensor:
    scale = 1.0 / np.log(10.0)
    return make_result(np.log10(a.data), (a,), lambda g: (g * scale / a.data,), "log10")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return make_result(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Parametric ReLU with one learnable slope per channel (axis -2)."""
    if x.ndim < 2 or slope.shape != (x.shape[-2],):
        raise ValueError(f"prelu: slope shape {slope.shape} does not match channels of {x.shape}")
    a = slope.data[:, None]
    pos = x.data > 0
    out = np.where(pos, x.data, a * x.data)

    def backward(g):
        gx = np.where(pos, g, a * g)
        gs = None
        if slope.requires_grad:
            neg_part = np.where(pos, 0, x.data * g)
            gs = neg_part.reshape(-1, *neg_part.shape[-2:]).sum(axis=(0, 2))
        return gx, gs

    return make_result(out, (x, slope), backward, "prelu")


# -- reductions and shape ----------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return make_result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    return make_result(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),), "swapaxes")


def getitem(x: Tensor, idx) -> Tensor:
    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return make_result(np.array(x.data[idx]), (x,), backward, "getitem")


def crop(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``[start, stop)`` of the last (time) axis."""
    if not 0 <= start <= stop <= x.shape[-1]:
        raise ValueError(f"crop: [{start}, {stop}) outside time length {x.shape[-1]}")

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        return (gx,)

    return make_result(x.data[..., start:stop].copy(), (x,), backward, "crop")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ValueError(f"concat: {exc} (shapes {[t.shape for t in tensors]})") from None
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, tuple(tensors), backward, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data @ b.data, (a, b), backward, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_result(s, (x,), backward, "softmax")


# -- affine maps and normalization ------------------------------------------

def linear_map(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``weight @ x + bias`` acting on the channel axis.

    ``x`` may be a vector ``[C_in]`` or ``[..., C_in, T]`` (a 1x1 convolution).
    """
    x = as_tensor(x)
    c_out, c_in = weight.shape
    if x.ndim == 1:
        if x.shape[0] != c_in:
            raise ValueError(f"linear_map: weight {weight.shape} vs input {x.shape}")
        out = weight.data @ x.data
        if bias is not None:
            out = out + bias.data

        def backward(g):
            gx = weight.data.T @ g if x.requires_grad else None
            gw = np.outer(g, x.data) if weight.requires_grad else None
            return (gx, gw) + ((g,) if bias is not None else ())
    else:
        if x.shape[-2] != c_in:
            raise ValueError(f"linear_map: weight {weight.shape} vs input channels {x.shape}")
        out = np.matmul(weight.data, x.data)
        if bias is not None:
            out = out + bias.data[:, None]

        def backward(g):
            gx = np.matmul(weight.data.T, g) if x.requires_grad else None
            gw = None
            if weight.requires_grad:
                g2 = np.moveaxis(g, -2, 0).reshape(c_out, -1)
                x2 = np.moveaxis(x.data, -2, 0).reshape(c_in, -1)
                gw = g2 @ x2.T
            res = (gx, gw)
            if bias is not None:
                res = res + (g.reshape(-1, c_out, g.shape[-1]).sum(axis=(0, 2)),)
            return res

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "linear_map")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize across channels (axis -2) at every time step, then apply a per-channel affine."""
    c = x.shape[-2]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs channels {c}")
    mu = x.data.mean(axis=-2, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data[:, None] * xhat + beta.data[:, None]

    def backward(g):
        gxhat = g * gamma.data[:, None]
        gx = inv * (gxhat - gxhat.mean(axis=-2, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-2, keepdims=True))
        flat = lambda a: a.reshape(-1, c, a.shape[-1]).sum(axis=(0, 2))  # noqa: E731
        return gx, flat(g * xhat), flat(g)

    return make_result(out, (x, gamma, beta), backward, "layer_norm")


# -- convolutions ------------------------------------------------------------

def _as_batched(x: np.ndarray):
    lead = x.shape[:-2]
    return x.reshape((-1,) + x.shape[-2:]), lead


def conv1d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    pad_left: int = 0,
    pad_right: int = 0,
    dilation: int = 1,
) -> Tensor:
    """Cross-correlation of ``[..., C_in, T]`` with ``[C_out, C_in, K]``."""
    if weight.ndim != 3:
        raise ValueError(f"conv1d: weight must be [C_out, C_in, K], got {weight.shape}")
    c_out, c_in, k = weight.shape
    if x.ndim < 2 or x.shape[-2] != c_in:
        raise ValueError(f"conv1d: input channels {x.shape[-2] if x.ndim >= 2 else x.shape} != weight C_in {c_in}")
    if k < 1 or stride < 1 or dilation < 1:
        raise ValueError("conv1d: kernel, stride and dilation must be >= 1")
    span = dilation * (k - 1) + 1
    t = x.shape[-1]
    if t + pad_left + pad_right < span:
        raise ValueError(f"conv1d: padded length {t + pad_left + pad_right} shorter than kernel span {span}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"conv1d: bias shape {bias.shape} != ({c_out},)")

    xb, lead = _as_batched(x.data)
    n = xb.shape[0]
    xp = np.pad(xb, ((0, 0), (0, 0), (pad_left, pad_right)))
    t_out = (xp.shape[-1] - span) // stride + 1
    cols = sliding_window_view(xp, span, axis=-1)[:, :, : (t_out - 1) * stride + 1 : stride, ::dilation]
    # cols: [N, C_in, T_out, K] -> [N, T_out, C_in*K]
    cols = np.ascontiguousarray(cols.transpose(0, 2, 1, 3)).reshape(n, t_out, c_in * k)
    wmat = weight.data.reshape(c_out, c_in * k)
    out = np.swapaxes(cols @ wmat.T, 1, 2)
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(lead + (c_out, t_out))

    def backward(g):
        gb = g.reshape(n, c_out, t_out)
        gx = gw = gbias = None
        if weight.requires_grad:
            gw = (np.swapaxes(gb, 1, 2).reshape(-1, c_out).T @ cols.reshape(-1, c_in * k)).reshape(weight.shape)
        if x.requires_grad:
            gcols = (np.swapaxes(gb, 1, 2) @ wmat).reshape(n, t_out, c_in, k)
            gxp = np.zeros_like(xp)
            stop = (t_out - 1) * stride + 1
            for j in range(k):
                off = j * dilation
                gxp[:, :, off : off + stop : stride] += np.swapaxes(gcols[:, :, :, j], 1, 2)
            gx = gxp[:, :, pad_left : pad_left + t].reshape(x.shape)
        if bias is not None:
            gbias = gb.sum(axis=(0, 2))
        return (gx, gw, gbias) if bias is not None else (gx, gw)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv1d")


def depthwise_conv1d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    pad_left: int = 0,
    pad_right: int = 0,
    dilation: int = 1,
) -> Tensor:
    """Per-channel convolution ``[..., C, T]`` with ``[C, K]``; must preserve length."""
    c, k = weight.shape
    if x.ndim < 2 or x.shape[-2] != c:
        raise ValueError(f"depthwise_conv1d: weight {weight.shape} vs input {x.shape}")
    if pad_left + pad_right != dilation * (k - 1):
        raise ValueError(
            f"depthwise_conv1d: pads ({pad_left}, {pad_right}) do not preserve length for "
            f"kernel {k} with dilation {dilation}"
        )
    t = x.shape[-1]
    pad = [(0, 0)] * (x.ndim - 1) + [(pad_left, pad_right)]
    xp = np.pad(x.data, pad)
    out = np.zeros_like(x.data)
    for j in range(k):
        off = j * dilation
        out += weight.data[:, j, None] * xp[..., off : off + t]
    if bias is not None:
        out += bias.data[:, None]

    def backward(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(weight.data) if weight.requires_grad else None
        for j in range(k):
            off = j * dilation
            if gxp is not None:
                gxp[..., off : off + t] += weight.data[:, j, None] * g
            if gw is not None:
                gw[:, j] = (g * xp[..., off : off + t]).reshape(-1, c, t).sum(axis=(0, 2))
        gx = gxp[..., pad_left : pad_left + t] if gxp is not None else None
        if bias is None:
            return gx, gw
        return gx, gw, g.reshape(-1, c, t).sum(axis=(0, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "depthwise_conv1d")


# -- time-axis resampling and synthesis --------------------------------------

def interpolation_matrix(t_in: int, t_out: int, dtype=np.float64) -> np.ndarray:
    """Endpoint-aligned linear interpolation weights ``[t_in, t_out]``.

    Positions are computed with integer arithmetic, so the first and last
    output columns pick exactly one input column each.
    """
    j = np.arange(t_out)
    num = j * (t_in - 1)
    i0 = num // (t_out - 1)
    frac = (num % (t_out - 1)) / (t_out - 1)
    i1 = np.minimum(i0 + 1, t_in - 1)
    w = np.zeros((t_in, t_out), dtype=dtype)
    w[i0, j] += 1.0 - frac
    w[i1, j] += frac
    return w


def linear_interpolate_time(x: Tensor, t_out: int) -> Tensor:
    t_in = x.shape[-1]
    if t_in < 2 or t_out < 2:
        raise ValueError(f"linear_interpolate_time: need T_in >= 2 and t_out >= 2, got {t_in} -> {t_out}")
    if t_out == t_in:
        return make_result(x.data.copy(), (x,), lambda g: (g,), "interp")
    j = np.arange(t_out)
    num = j * (t_in - 1)
    i0 = num // (t_out - 1)
    frac = ((num % (t_out - 1)) / (t_out - 1)).astype(x.dtype)
    i1 = np.minimum(i0 + 1, t_in - 1)
    out = x.data[..., i0] * (1 - frac) + x.data[..., i1] * frac
    w = interpolation_matrix(t_in, t_out, dtype=x.dtype)

    def backward(g):
        return (g @ w.T,)

    return make_result(out, (x,), backward, "interp")


def overlap_add(frames: Tensor, hop: int) -> Tensor:
    """Sum ``[..., L, T_frames]`` frames placed every ``hop`` samples."""
    length, n_frames = frames.shape[-2:]
    if not 1 <= hop <= length:
        raise ValueError(f"overlap_add: hop must be in [1, {length}], got {hop}")
    t_out = (n_frames - 1) * hop + length
    lead = frames.shape[:-2]
    out = np.zeros(lead + (t_out,), dtype=frames.dtype)
    starts = hop * np.arange(n_frames)
    for j in range(length):
        out[..., starts + j] += frames.data[..., j, :]

    def backward(g):
        gf = np.empty_like(frames.data)
        for j in range(length):
            gf[..., j, :] = g[..., starts + j]
        return (gf,)

    return make_result(out, (frames,), backward, "overlap_add")


def frame_split(x: np.ndarray, length: int, hop: int) -> np.ndarray:
    """Rectangular analysis frames ``[..., L, T_frames]`` (no padding)."""
    view = sliding_window_view(x, length, axis=-1)[..., ::hop, :]
    return np.swapaxes(view, -1, -2).copy()


# -- attention ---------------------------------------------------------------

def multi_head_attention(q_in: Tensor, kv_in: Tensor, heads: int, params: dict) -> Tensor:
    """Scaled dot-product attention over the time axis.

    ``q_in`` is ``[..., D_q, T_q]``, ``kv_in`` is ``[..., D_kv, T_kv]``.
    ``params`` holds ``wq, bq, wk, bk, wv, bv, wo, bo`` with projection
    weights shaped ``[D_model, D_in]`` and ``wo`` shaped ``[D_out, D_model]``.
    Returns ``[..., D_out, T_q]``. No positional encoding is added.
    """
    d_model = params["wq"].shape[0]
    if d_model % heads:
        raise ValueError(f"multi_head_attention: model dim {d_model} not divisible by {heads} heads")
    if q_in.shape[:-2] != kv_in.shape[:-2]:
        raise ValueError(f"multi_head_attention: batch shapes differ {q_in.shape} vs {kv_in.shape}")
    d_head = d_model // heads
    lead = q_in.shape[:-2]
    t_q, t_kv = q_in.shape[-1], kv_in.shape[-1]

    q = linear_map(q_in, params["wq"], params["bq"])
    k = linear_map(kv_in, params["wk"], params["bk"])
    v = linear_map(kv_in, params["wv"], params["bv"])
    q = reshape(q, lead + (heads, d_head, t_q))
    k = reshape(k, lead + (heads, d_head, t_kv))
    v = reshape(v, lead + (heads, d_head, t_kv))
    scores = mul(matmul(swapaxes(q, -1, -2), k), 1.0 / np.sqrt(d_head))  # [..., H, T_q, T_kv]
    weights = softmax(scores, axis=-1)
    ctx = matmul(v, swapaxes(weights, -1, -2))  # [..., H, d_head, T_q]
    ctx = reshape(ctx, lead + (d_model, t_q))
    return linear_map(ctx, params["wo"], params["bo"])
