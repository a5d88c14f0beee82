"""Layer primitives: grouped 2-D convolution, batch normalization, activations,
pooling and fully-connected layers, each with an explicit backward pass.

Every forward takes an optional :class:`MacCounter`. Convolution and linear
layers count multiply-accumulates from the layer geometry (padding zeros count,
bias does not); everything else books per-element work under ``aux_ops``.

Convolutions are lowered to im2col + matmul with a fixed left-to-right
accumulation over the shared axis (see ``ordered_matmul``): adding a
zero-weight term is then an exact no-op, so a grouped convolution equals the
same convolution with a block-diagonal dense weight bit for bit, and gathered
sparse execution at k=E reproduces dense execution bit for bit. Batch
normalization supports an optional per-(sample, channel) membership mask so
that statistics can be restricted to the slices a sparse pass actually
executed; ``mask=None`` is the ordinary full-batch case and follows the exact
same arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np
from numba import njit, prange

# the built-in layer is always available and keeps the import quiet
numba.config.THREADING_LAYER = "workqueue"

# aux cost constants (per element)
BN_AUX_PER_ELEM = 2  # normalize + affine
RELU_AUX_PER_ELEM = 1
TANH_AUX_PER_ELEM = 1
SOFTMAX_AUX_PER_ELEM = 3  # exp, accumulate, divide


@dataclass
class MacCounter:
    """Accumulates multiply-accumulate counts over one forward pass.

    ``conv_macs``/``linear_macs`` follow the layer-geometry formulas;
    ``aux_ops`` holds BN/activation/pooling/gating element operations.
    Counters from parallel passes merge by addition.
    """

    conv_macs: int = 0
    linear_macs: int = 0
    aux_ops: int = 0

    def reset(self) -> None:
        self.conv_macs = 0
        self.linear_macs = 0
        self.aux_ops = 0

    def merge(self, other: "MacCounter") -> None:
        self.conv_macs += other.conv_macs
        self.linear_macs += other.linear_macs
        self.aux_ops += other.aux_ops

    @property
    def total(self) -> int:
        return self.conv_macs + self.linear_macs + self.aux_ops


@dataclass
class Conv2dParams:
    weight: np.ndarray  # (C_out, C_in/groups, p, p)
    bias: Optional[np.ndarray] = None  # (C_out,)
    stride: int = 1
    padding: int = 0
    groups: int = 1


@dataclass
class BatchNorm2dParams:
    gamma: np.ndarray  # (C,)
    beta: np.ndarray  # (C,)
    running_mean: np.ndarray  # (C,)
    running_var: np.ndarray  # (C,)
    eps: float = 1e-5
    momentum: float = 0.1


@njit(cache=True, parallel=True)
def _mm_shared_kernel(w, cols, out):  # w (O,K), cols (B,K,L), out (B,O,L) zeroed
    b_n, k_n, l_n = cols.shape
    o_n = w.shape[0]
    for bo in prange(b_n * o_n):
        b = bo // o_n
        o = bo % o_n
        row = out[b, o]
        cb = cols[b]
        for k in range(k_n):
            wok = w[o, k]
            ck = cb[k]
            for l in range(l_n):
                row[l] += wok * ck[l]


@njit(cache=True, parallel=True)
def _mm_batched_kernel(w, cols, out):  # w (B,O,K), cols (B,K,L), out (B,O,L) zeroed
    b_n, k_n, l_n = cols.shape
    o_n = w.shape[1]
    for bo in prange(b_n * o_n):
        b = bo // o_n
        o = bo % o_n
        row = out[b, o]
        wb = w[b, o]
        cb = cols[b]
        for k in range(k_n):
            wok = wb[k]
            ck = cb[k]
            for l in range(l_n):
                row[l] += wok * ck[l]


def ordered_matmul(w: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """(O,K) @ (B,K,L) -> (B,O,L) with left-to-right accumulation over K.

    Every output element is one scalar chain over k in index order, so terms
    with a zero factor leave the sum bitwise unchanged and repeated calls are
    bitwise identical (threads split whole output rows only).
    """
    out = np.zeros((cols.shape[0], w.shape[0], cols.shape[2]), dtype=cols.dtype)
    _mm_shared_kernel(np.ascontiguousarray(w), np.ascontiguousarray(cols), out)
    return out


def ordered_matmul_batched(w: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """(B,O,K) @ (B,K,L) -> (B,O,L); same accumulation contract as ordered_matmul."""
    out = np.zeros((cols.shape[0], w.shape[1], cols.shape[2]), dtype=cols.dtype)
    _mm_batched_kernel(np.ascontiguousarray(w), np.ascontiguousarray(cols), out)
    return out


def conv_out_size(extent: int, kernel: int, stride: int, padding: int) -> int:
    out = (extent + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ValueError(
            f"kernel larger than padded input: extent {extent}, kernel {kernel}, "
            f"stride {stride}, padding {padding}"
        )
    return out


def im2col(x: np.ndarray, p: int, stride: int, padding: int):
    """Lower (N,C,H,W) to (N, C*p*p, Ho*Wo) patch columns."""
    n, c, h, w = x.shape
    ho = conv_out_size(h, p, stride, padding)
    wo = conv_out_size(w, p, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (p, p), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N, C, Ho, Wo, p, p)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * p * p, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def col2im(grad_cols: np.ndarray, x_shape, p: int, stride: int, padding: int, ho: int, wo: int):
    """Adjoint of :func:`im2col`: scatter-add patch columns back to (N,C,H,W)."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    gx = np.zeros((n, c, hp, wp), dtype=grad_cols.dtype)
    gc = grad_cols.reshape(n, c, p, p, ho, wo)
    for i in range(p):
        for j in range(p):
            gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gc[:, :, i, j]
    if padding:
        gx = gx[:, :, padding : hp - padding, padding : wp - padding]
    return gx


def conv_mac_count(c_in: int, c_out: int, p: int, ho: int, wo: int, groups: int) -> int:
    return (c_in // groups) * c_out * p * p * ho * wo


def conv2d_forward(x: np.ndarray, params: Conv2dParams, counter: Optional[MacCounter] = None):
    """Grouped 2-D convolution. Returns (y, cache) with y of shape (N, C_out, Ho, Wo)."""
    n, c_in, h, w = x.shape
    c_out, c_in_g, p, p2 = params.weight.shape
    if p != p2:
        raise ValueError(f"non-square kernel {params.weight.shape}")
    g = params.groups
    if c_in % g or c_out % g:
        raise ValueError(f"channels ({c_in} in, {c_out} out) not divisible by groups={g}")
    if c_in_g != c_in // g:
        raise ValueError(
            f"weight expects {c_in_g} channels per group, input provides {c_in // g}"
        )
    cols, ho, wo = im2col(x, p, params.stride, params.padding)
    if g == 1:
        out = ordered_matmul(params.weight.reshape(c_out, -1), cols)  # (N, C_out, L)
    else:
        og = c_out // g
        kg = c_in_g * p * p
        out = np.empty((n, c_out, ho * wo), dtype=x.dtype)
        for gi in range(g):
            wg = params.weight[gi * og : (gi + 1) * og].reshape(og, kg)
            out[:, gi * og : (gi + 1) * og] = ordered_matmul(wg, cols[:, gi * kg : (gi + 1) * kg])
    y = out.reshape(n, c_out, ho, wo)
    if params.bias is not None:
        y = y + params.bias[None, :, None, None]
    if counter is not None:
        counter.conv_macs += n * conv_mac_count(c_in, c_out, p, ho, wo, g)
        if params.bias is not None:
            counter.aux_ops += n * c_out * ho * wo
    cache = (x.shape, cols, params, ho, wo)
    return y, cache


def conv2d_backward(grad_out: np.ndarray, cache):
    """Returns (grad_x, grad_weight, grad_bias); grad_bias is None for bias-free layers."""
    x_shape, cols, params, ho, wo = cache
    n = x_shape[0]
    c_out, c_in_g, p, _ = params.weight.shape
    g = params.groups
    if grad_out.shape != (n, c_out, ho, wo):
        raise ValueError(f"grad shape {grad_out.shape} does not match output ({n},{c_out},{ho},{wo})")
    go = grad_out.reshape(n, c_out, ho * wo)
    grad_b = go.sum(axis=(0, 2)) if params.bias is not None else None
    kg = c_in_g * p * p
    if g == 1:
        w2 = params.weight.reshape(c_out, kg)
        grad_w = np.matmul(go, cols.transpose(0, 2, 1)).sum(axis=0)
        grad_cols = np.matmul(w2.T, go)
    else:
        og = c_out // g
        grad_w = np.empty((c_out, kg), dtype=grad_out.dtype)
        grad_cols = np.empty_like(cols)
        for gi in range(g):
            sl_o = slice(gi * og, (gi + 1) * og)
            sl_k = slice(gi * kg, (gi + 1) * kg)
            wg = params.weight[sl_o].reshape(og, kg)
            grad_w[sl_o] = np.matmul(go[:, sl_o], cols[:, sl_k].transpose(0, 2, 1)).sum(axis=0)
            grad_cols[:, sl_k] = np.matmul(wg.T, go[:, sl_o])
    grad_x = col2im(grad_cols, x_shape, p, params.stride, params.padding, ho, wo)
    return grad_x, grad_w.reshape(params.weight.shape), grad_b


def _bn_stats(x: np.ndarray, mask_f: np.ndarray, cnt: np.ndarray):
    """Per-channel mean and population variance over mask members."""
    denom = np.maximum(cnt, 1.0)
    xm = x * mask_f
    mu = xm.sum(axis=(0, 2, 3)) / denom
    d = (x - mu[None, :, None, None]) * mask_f
    var = (d * d).sum(axis=(0, 2, 3)) / denom
    return mu, var, d


def batchnorm2d_forward(
    x: np.ndarray,
    params: BatchNorm2dParams,
    counter: Optional[MacCounter] = None,
    training: bool = True,
    sample_mask: Optional[np.ndarray] = None,
    update_running: Optional[bool] = None,
):
    """Channel-wise batch normalization.

    ``sample_mask`` is an optional (N, C) boolean: statistics are computed over
    member (sample, channel) slices only and non-member slices are zeroed in
    the output. ``None`` means all slices participate. In training mode the
    batch mean and population variance are used and running statistics of
    member channels are updated in place (``update_running`` defaults to the
    training flag); inference mode normalizes with the running statistics.
    """
    n, c, h, w = x.shape
    if update_running is None:
        update_running = training
    if sample_mask is None:
        mask_f = np.ones((n, c), dtype=x.dtype)
    else:
        if sample_mask.shape != (n, c):
            raise ValueError(f"sample_mask shape {sample_mask.shape} != ({n},{c})")
        mask_f = sample_mask.astype(x.dtype)
    cnt = mask_f.sum(axis=0) * (h * w)  # member elements per channel
    members = int(round(float(cnt.sum())))
    if counter is not None:
        counter.aux_ops += BN_AUX_PER_ELEM * members
    mask4 = mask_f[:, :, None, None]

    if training:
        active = cnt > 0
        if np.any(active & (cnt < 2)):
            raise ValueError("batch too small for batch statistics")
        mu, var, d = _bn_stats(x, mask4, cnt)
        inv = 1.0 / np.sqrt(var + params.eps)
        y = (params.gamma[None, :, None, None] * (d * inv[None, :, None, None])
             + params.beta[None, :, None, None]) * mask4
        if update_running:
            idx = np.flatnonzero(active)
            m = params.momentum
            params.running_mean[idx] = (1.0 - m) * params.running_mean[idx] + m * mu[idx]
            params.running_var[idx] = (1.0 - m) * params.running_var[idx] + m * var[idx]
        cache = ("train", d, inv, mask4, cnt, params)
        return y, cache

    inv = 1.0 / np.sqrt(params.running_var + params.eps)
    xhat = (x - params.running_mean[None, :, None, None]) * inv[None, :, None, None] * mask4
    y = params.gamma[None, :, None, None] * xhat + params.beta[None, :, None, None]
    y = y * mask4
    cache = ("eval", xhat, inv, mask4, None, params)
    return y, cache


def batchnorm2d_backward(grad_out: np.ndarray, cache):
    """Returns (grad_x, grad_gamma, grad_beta).

    In training mode the gradient accounts for the dependence of the batch
    mean and variance on x (over mask members); running-stat updates are not
    differentiated.
    """
    mode, d_or_xhat, inv, mask4, cnt, params = cache
    g = grad_out * mask4
    if mode == "eval":
        xhat = d_or_xhat
        grad_gamma = (g * xhat).sum(axis=(0, 2, 3))
        grad_beta = g.sum(axis=(0, 2, 3))
        grad_x = g * (params.gamma * inv)[None, :, None, None] * mask4
        return grad_x, grad_gamma, grad_beta

    d = d_or_xhat
    denom = np.maximum(cnt, 1.0)
    xhat = d * inv[None, :, None, None]
    grad_gamma = (g * xhat).sum(axis=(0, 2, 3))
    grad_beta = g.sum(axis=(0, 2, 3))
    dxhat = g * params.gamma[None, :, None, None]
    dvar = (dxhat * d).sum(axis=(0, 2, 3)) * (-0.5) * inv**3
    dmu = -(dxhat.sum(axis=(0, 2, 3)) * inv) + dvar * (-2.0 / denom) * d.sum(axis=(0, 2, 3))
    grad_x = (
        dxhat * inv[None, :, None, None]
        + d * (dvar * 2.0 / denom)[None, :, None, None]
        + (dmu / denom)[None, :, None, None]
    ) * mask4
    return grad_x, grad_gamma, grad_beta


def relu(x: np.ndarray, counter: Optional[MacCounter] = None):
    if counter is not None:
        counter.aux_ops += RELU_AUX_PER_ELEM * x.size
    mask = x > 0
    return np.where(mask, x, np.zeros((), dtype=x.dtype)), mask


def relu_backward(grad_out: np.ndarray, mask: np.ndarray):
    return np.where(mask, grad_out, np.zeros((), dtype=grad_out.dtype))


def tanh(x: np.ndarray, counter: Optional[MacCounter] = None):
    if counter is not None:
        counter.aux_ops += TANH_AUX_PER_ELEM * x.size
    y = np.tanh(x)
    return y, y


def tanh_backward(grad_out: np.ndarray, y: np.ndarray):
    return grad_out * (1.0 - y * y)


def softmax(x: np.ndarray, axis: int = -1, counter: Optional[MacCounter] = None):
    if x.shape[axis] == 0:
        raise ValueError("softmax over empty axis")
    if counter is not None:
        counter.aux_ops += SOFTMAX_AUX_PER_ELEM * x.size
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return y, (y, axis)


def softmax_backward(grad_out: np.ndarray, cache):
    y, axis = cache
    dot = (grad_out * y).sum(axis=axis, keepdims=True)
    return y * (grad_out - dot)


def maxpool2d(
    x: np.ndarray,
    kernel: int = 3,
    stride: int = 2,
    padding: int = 1,
    counter: Optional[MacCounter] = None,
):
    """Max pooling; ties go to the first window position (row-major)."""
    n, c, h, w = x.shape
    ho = conv_out_size(h, kernel, stride, padding)
    wo = conv_out_size(w, kernel, stride, padding)
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    else:
        xp = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride].reshape(n, c, ho, wo, kernel * kernel)
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    if counter is not None:
        counter.aux_ops += n * c * ho * wo * kernel * kernel
    cache = (x.shape, arg, kernel, stride, padding, ho, wo)
    return y, cache


def maxpool2d_backward(grad_out: np.ndarray, cache):
    x_shape, arg, kernel, stride, padding, ho, wo = cache
    n, c, h, w = x_shape
    gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=grad_out.dtype)
    ni, ci, hi, wi = np.ogrid[:n, :c, :ho, :wo]
    rows = hi * stride + arg // kernel
    cols = wi * stride + arg % kernel
    np.add.at(gxp, (ni, ci, rows, cols), grad_out)
    if padding:
        gxp = gxp[:, :, padding : padding + h, padding : padding + w]
    return gxp


def global_avg_pool(x: np.ndarray, counter: Optional[MacCounter] = None):
    n, c, h, w = x.shape
    if counter is not None:
        counter.aux_ops += x.size
    return x.mean(axis=(2, 3)), (x.shape,)


def global_avg_pool_backward(grad_out: np.ndarray, cache):
    (x_shape,) = cache
    n, c, h, w = x_shape
    return np.broadcast_to(grad_out[:, :, None, None] / (h * w), x_shape).astype(
        grad_out.dtype, copy=True
    )


def linear(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None,
           counter: Optional[MacCounter] = None):
    """Fully connected layer: x (N, in) @ weight (out, in)^T + bias."""
    n, d_in = x.shape
    d_out, d_in_w = weight.shape
    if d_in != d_in_w:
        raise ValueError(f"extent mismatch: input {x.shape} vs weight {weight.shape}")
    y = x @ weight.T
    if bias is not None:
        y = y + bias[None, :]
    if counter is not None:
        counter.linear_macs += n * d_in * d_out
        if bias is not None:
            counter.aux_ops += n * d_out
    return y, (x, weight, bias is not None)


def linear_backward(grad_out: np.ndarray, cache):
    x, weight, has_bias = cache
    grad_x = grad_out @ weight
    grad_w = grad_out.T @ x
    grad_b = grad_out.sum(axis=0) if has_bias else None
    return grad_x, grad_w, grad_b
