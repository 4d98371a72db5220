"""Differentiable array operations used by the network.

Every op takes and returns ``Tensor`` values, computes its forward result
with numpy and registers a vector-Jacobian closure on the active tape.
Index-producing helpers (``topk_rows``) return plain integer arrays and
carry no gradient. All ops are deterministic: identical inputs give
bitwise-identical outputs.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .tensor import ShapeError, Tensor, apply_op, as_tensor

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise & reductions


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return apply_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return apply_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return apply_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return apply_op(-a.data, (a,), lambda g: (-g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return apply_op(np.where(mask, x.data, 0), (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
    return apply_op(out, (x,), lambda g: (g * (cdf + x.data * pdf),))


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return apply_op(s, (x,), lambda g: (g * s * (1.0 - s),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return apply_op(
        np.asarray(x.data.mean()),
        (x,),
        lambda g: (np.broadcast_to(g / n, x.shape).astype(x.data.dtype),),
    )


def sum_all(x: Tensor) -> Tensor:
    return apply_op(
        np.asarray(x.data.sum()),
        (x,),
        lambda g: (np.broadcast_to(g, x.shape).astype(x.data.dtype),),
    )


def mean_axis(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    return apply_op(
        x.data.mean(axis=axis),
        (x,),
        lambda g: (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),),
    )


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return apply_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return apply_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return apply_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


def expand_spatial(x: Tensor, hw) -> Tensor:
    """Broadcast a (B, C) vector to a constant (B, C, H, W) map."""
    h, w = hw
    out = np.broadcast_to(x.data[:, :, None, None], x.shape + (h, w)).copy()
    return apply_op(out, (x,), lambda g: (g.sum(axis=(2, 3)),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return apply_op(np.matmul(a.data, b.data), (a, b), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x: (..., in_features) @ weight: (out, in) -> (..., out), plus bias."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"linear: last axis of input is {x.shape[-1]}, weight expects {weight.shape[1]}"
        )
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        g2 = g.reshape(-1, weight.shape[0])
        x2 = x.data.reshape(-1, weight.shape[1])
        gw = g2.T @ x2
        gx = (g2 @ weight.data).reshape(x.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return apply_op(out, inputs, vjp)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Numerically stable softmax over the final axis; slices sum to 1."""
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError("softmax_lastdim: last dimension must be non-empty")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return ((g - inner) * y,)

    return apply_op(y, (x,), vjp)


# ---------------------------------------------------------------------------
# normalization


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = 1, eps: float = 1e-5) -> Tensor:
    """Normalize over one axis (channels by default) with affine scale/shift."""
    n = x.shape[axis]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(
            f"layer_norm: gamma/beta must have shape ({n},) for axis {axis} of {x.shape}"
        )
    bshape = [1] * x.ndim
    bshape[axis] = n
    gam = gamma.data.reshape(bshape)
    mu = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = gam * xhat + beta.data.reshape(bshape)

    reduce_axes = tuple(i for i in range(x.ndim) if i != axis)

    def vjp(g):
        dgamma = (g * xhat).sum(axis=reduce_axes)
        dbeta = g.sum(axis=reduce_axes)
        dxhat = g * gam
        inner = (dxhat * xhat).mean(axis=axis, keepdims=True)
        dx = inv_std * (dxhat - dxhat.mean(axis=axis, keepdims=True) - xhat * inner)
        return dx, dgamma, dbeta

    return apply_op(out, (x, gamma, beta), vjp)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """2-D batch normalization over (batch, height, width) per channel.

    In training mode batch statistics normalize the input and the running
    buffers are updated in place; in eval mode the running buffers are used.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm: expected a 4-D map, got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,):
        raise ShapeError(f"batch_norm: gamma has shape {gamma.shape}, expected ({c},)")
    axes = (0, 2, 3)
    gam = gamma.data.reshape(1, c, 1, 1)
    bet = beta.data.reshape(1, c, 1, 1)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var.reshape(1, c, 1, 1) + eps)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv_std
    out = gam * xhat + bet

    def vjp(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gam
        if training:
            m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
            sum_dxhat = dxhat.sum(axis=axes, keepdims=True)
            sum_dxhat_xhat = (dxhat * xhat).sum(axis=axes, keepdims=True)
            dx = inv_std * (dxhat - sum_dxhat / m - xhat * sum_dxhat_xhat / m)
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return apply_op(out, (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# convolution


def _conv_out_size(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int,
            out_h: int, out_w: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, out_h, out_w), dtype=xp.dtype)
    for i in range(kh):
        hi = i * dilation
        for j in range(kw):
            wj = j * dilation
            cols[:, :, i, j] = xp[:, :, hi:hi + (out_h - 1) * stride + 1:stride,
                                  wj:wj + (out_w - 1) * stride + 1:stride]
    return cols


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation (no kernel flip) with stride/padding/dilation/groups.

    x: (B, Cin, H, W); weight: (Cout, Cin/groups, kh, kw); output spatial size
    follows floor((n + 2p - d*(k-1) - 1)/s) + 1.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input/weight, got {x.shape} / {weight.shape}")
    if stride < 1 or dilation < 1:
        raise ShapeError("conv2d: stride and dilation must be >= 1")
    b, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if cin % groups or cout % groups:
        raise ShapeError(
            f"conv2d: channel axes (Cin={cin}, Cout={cout}) not divisible by groups={groups}"
        )
    if cin_g != cin // groups:
        raise ShapeError(
            f"conv2d: weight channel axis is {cin_g}, expected Cin/groups = {cin // groups}"
        )
    out_h = _conv_out_size(h, kh, stride, padding, dilation)
    out_w = _conv_out_size(w, kw, stride, padding, dilation)
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} (dilation {dilation}) does not fit the padded "
            f"{h}x{w} input along the height/width axes"
        )

    xp = x.data if padding == 0 else np.pad(
        x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, dilation, out_h, out_w)
    k_flat = cin_g * kh * kw
    cols2 = cols.reshape(b, groups, k_flat, out_h * out_w)
    w2 = weight.data.reshape(groups, cout // groups, k_flat)
    out = np.matmul(w2, cols2).reshape(b, cout, out_h, out_w)
    if bias is not None:
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias has shape {bias.shape}, expected ({cout},)")
        out = out + bias.data.reshape(1, cout, 1, 1)

    def vjp(g):
        g2 = g.reshape(b, groups, cout // groups, out_h * out_w)
        gw = np.matmul(g2, cols2.transpose(0, 1, 3, 2)).sum(axis=0).reshape(weight.shape)
        gcols = np.matmul(w2.transpose(0, 2, 1), g2)
        gcols = gcols.reshape(b, cin, kh, kw, out_h, out_w)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            hi = i * dilation
            for j in range(kw):
                wj = j * dilation
                gxp[:, :, hi:hi + (out_h - 1) * stride + 1:stride,
                    wj:wj + (out_w - 1) * stride + 1:stride] += gcols[:, :, i, j]
        gx = gxp if padding == 0 else gxp[:, :, padding:padding + h, padding:padding + w]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return apply_op(out, inputs, vjp)


def transposed_conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Transposed 2-D convolution (the adjoint of conv2d as a forward map).

    x: (B, Cin, H, W); weight: (Cin, Cout, kh, kw); output spatial size is
    (n - 1) * stride - 2 * padding + k.
    """
    if stride < 1:
        raise ShapeError("transposed_conv2d: stride must be >= 1")
    b, cin, h, w = x.shape
    wcin, cout, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(
            f"transposed_conv2d: input channel axis is {cin}, weight expects {wcin}"
        )
    full_h = (h - 1) * stride + kh
    full_w = (w - 1) * stride + kw
    out_h = full_h - 2 * padding
    out_w = full_w - 2 * padding
    if out_h < 1 or out_w < 1:
        raise ShapeError("transposed_conv2d: padding exceeds the produced output extent")

    # out[b, o, ki + i*s, kj + j*s] += x[b, i', i, j] * w[i', o, ki, kj]
    contrib = np.einsum("bihw,iojk->bojkhw", x.data, weight.data)
    full = np.zeros((b, cout, full_h, full_w), dtype=contrib.dtype)
    for ki in range(kh):
        for kj in range(kw):
            full[:, :, ki:ki + (h - 1) * stride + 1:stride,
                 kj:kj + (w - 1) * stride + 1:stride] += contrib[:, :, ki, kj]
    out = full[:, :, padding:padding + out_h, padding:padding + out_w]
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    def vjp(g):
        gfull = np.zeros((b, cout, full_h, full_w), dtype=g.dtype)
        gfull[:, :, padding:padding + out_h, padding:padding + out_w] = g
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(weight.data)
        for ki in range(kh):
            for kj in range(kw):
                gslice = gfull[:, :, ki:ki + (h - 1) * stride + 1:stride,
                               kj:kj + (w - 1) * stride + 1:stride]
                gx += np.einsum("bohw,io->bihw", gslice, weight.data[:, :, ki, kj])
                gw[:, :, ki, kj] = np.einsum("bihw,bohw->io", x.data, gslice)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return apply_op(out, inputs, vjp)


# ---------------------------------------------------------------------------
# pooling


def pool(x: Tensor, kind: str) -> Tensor:
    """Reduce a (B, C, H, W) map.

    global_avg / global_max collapse H, W to 1x1 per channel;
    spatial_channel_avg / spatial_channel_max collapse C to 1 per pixel.
    Max ties resolve to the lowest linear index.
    """
    if x.ndim != 4:
        raise ShapeError(f"pool: expected a 4-D map, got shape {x.shape}")
    b, c, h, w = x.shape
    if kind == "global_avg":
        out = x.data.mean(axis=(2, 3), keepdims=True)
        return apply_op(
            out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape).astype(x.dtype),)
        )
    if kind == "global_max":
        flat = x.data.reshape(b, c, h * w)
        idx = flat.argmax(axis=2)
        out = np.take_along_axis(flat, idx[:, :, None], axis=2).reshape(b, c, 1, 1)

        def vjp_gmax(g):
            gx = np.zeros_like(flat)
            np.put_along_axis(gx, idx[:, :, None], g.reshape(b, c, 1), axis=2)
            return (gx.reshape(x.shape),)

        return apply_op(out, (x,), vjp_gmax)
    if kind == "spatial_channel_avg":
        out = x.data.mean(axis=1, keepdims=True)
        return apply_op(
            out, (x,), lambda g: (np.broadcast_to(g / c, x.shape).astype(x.dtype),)
        )
    if kind == "spatial_channel_max":
        idx = x.data.argmax(axis=1)
        out = np.take_along_axis(x.data, idx[:, None], axis=1)

        def vjp_cmax(g):
            gx = np.zeros_like(x.data)
            np.put_along_axis(gx, idx[:, None], g, axis=1)
            return (gx,)

        return apply_op(out, (x,), vjp_cmax)
    raise ShapeError(f"pool: unknown kind {kind!r}")


# ---------------------------------------------------------------------------
# resampling


def _bilinear_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    """Row-stochastic interpolation matrix mapping n_in samples to n_out
    (half-pixel-center alignment)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1:
        m[:, 0] = 1.0
        return m.astype(dtype)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    i0f = np.floor(src)
    frac = src - i0f
    i0 = np.clip(i0f.astype(int), 0, n_in - 1)
    i1 = np.clip(i0f.astype(int) + 1, 0, n_in - 1)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(dtype)


def bilinear_resize(x: Tensor, out_hw) -> Tensor:
    """Bilinear resampling of a (B, C, H, W) map to a new spatial size."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize: expected a 4-D map, got shape {x.shape}")
    out_h, out_w = out_hw
    _, _, h, w = x.shape
    ry = _bilinear_matrix(out_h, h, x.data.dtype)
    rx = _bilinear_matrix(out_w, w, x.data.dtype)
    out = np.einsum("ph,bchw->bcpw", ry, x.data)
    out = np.einsum("qw,bcpw->bcpq", rx, out)

    def vjp(g):
        gx = np.einsum("ph,bcpq->bchq", ry, g)
        gx = np.einsum("qw,bchq->bchw", rx, gx)
        return (gx,)

    return apply_op(out, (x,), vjp)


# ---------------------------------------------------------------------------
# indexing


def topk_rows(scores, k: int) -> np.ndarray:
    """Indices of the k largest entries per row of an (M, N) score matrix.

    Ties break toward the lower column index; each row is ordered by
    descending score then ascending index, so results are deterministic and
    prefixes are nested as k grows.
    """
    data = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    if data.ndim != 2:
        raise ShapeError(f"topk_rows: expected a 2-D score matrix, got shape {data.shape}")
    n = data.shape[1]
    if not 1 <= k <= n:
        raise ShapeError(f"topk_rows: k={k} out of range [1, {n}]")
    order = np.argsort(-data, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)


def gather_rows(source: Tensor, indices: np.ndarray) -> Tensor:
    """out[i, j, ...] = source[indices[i, j], ...] (a pure copy)."""
    indices = np.asarray(indices)
    m = source.shape[0]
    bad = (indices < 0) | (indices >= m)
    if bad.any():
        pos = np.argwhere(bad)[0]
        raise IndexError(
            f"gather_rows: row {pos[0]} holds index {int(indices[tuple(pos)])}, "
            f"valid range is [0, {m})"
        )
    out = source.data[indices]

    def vjp(g):
        gs = np.zeros_like(source.data)
        np.add.at(gs, indices, g)
        return (gs,)

    return apply_op(out, (source,), vjp)


def gather_rows_batched(source: Tensor, indices: np.ndarray) -> Tensor:
    """Per-batch gather: out[b, i, j, ...] = source[b, indices[b, i, j], ...]."""
    indices = np.asarray(indices)
    b, m = source.shape[0], source.shape[1]
    bad = (indices < 0) | (indices >= m)
    if bad.any():
        pos = np.argwhere(bad)[0]
        raise IndexError(
            f"gather_rows_batched: batch {pos[0]} row {pos[1]} holds index "
            f"{int(indices[tuple(pos)])}, valid range is [0, {m})"
        )
    batch_idx = np.arange(b).reshape((b,) + (1,) * (indices.ndim - 1))
    out = source.data[batch_idx, indices]

    def vjp(g):
        gs = np.zeros_like(source.data)
        np.add.at(gs, (batch_idx, indices), g)
        return (gs,)

    return apply_op(out, (source,), vjp)


# attach operator sugar
Tensor.__add__ = add
Tensor.__radd__ = add
Tensor.__sub__ = sub
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = mul
Tensor.__rmul__ = mul
Tensor.__neg__ = neg
Tensor.__matmul__ = matmul
