"""Conditionally executed grouped-convolution bottleneck block.

The block is the classic 1x1 reduce -> 3x3 grouped -> 1x1 expand residual
bottleneck with E parallel channel groups of width d. A question-conditioned
gate controller weighs the groups; group outputs are scaled by their
normalized gate weight just before the expand convolution.

Three execution paths:

* ``block_forward_dense``    - all E groups run, outputs scaled by the gates.
* ``block_forward_sparse``   - only the per-sample top-k groups run. Weight
  rows/columns and batch-norm parameters of the selected channels are gathered
  into contiguous per-sample buffers so the convolutions do only k/E of the
  dense work (counted as such); batch-norm statistics are taken over exactly
  the (sample, channel) slices that executed.
* ``block_forward_masked``   - reference for verifying the sparse path: dense
  execution with non-selected gate weights zeroed and batch-norm statistics
  restricted to the same slices the sparse path uses.

Each forward returns (y, decision, cache); the matching backward consumes the
cache and produces gradients for the input, the question vector, and every
parameter (non-executed groups get exact zeros in sparse mode).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import gate, ops
from .gate import GateControllerParams
from .ops import BatchNorm2dParams, Conv2dParams, MacCounter
from .tensor import gather_channels_per_sample


@dataclass
class GatedBlockParams:
    conv_reduce: Conv2dParams  # C_in -> E*d, 1x1
    bn_reduce: BatchNorm2dParams
    conv_conv: Conv2dParams  # E*d -> E*d, 3x3, groups=E, stride s
    bn_mid: BatchNorm2dParams
    conv_expand: Conv2dParams  # E*d -> C_out, 1x1
    bn_expand: BatchNorm2dParams
    shortcut_conv: Optional[Conv2dParams]  # 1x1 stride s when C_in != C_out or s != 1
    shortcut_bn: Optional[BatchNorm2dParams]
    controller: Optional[GateControllerParams]  # None for an ungated block
    cardinality: int  # E
    width: int  # d
    k: int  # active experts in sparse mode

    @property
    def mid_channels(self) -> int:
        return self.cardinality * self.width


def _he_conv(rng, c_out, c_in_g, p, dtype):
    fan_in = c_in_g * p * p
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in_g, p, p)).astype(dtype)


def _bn(c, dtype, eps=1e-5, momentum=0.1):
    return BatchNorm2dParams(
        gamma=np.ones(c, dtype=dtype),
        beta=np.zeros(c, dtype=dtype),
        running_mean=np.zeros(c, dtype=dtype),
        running_var=np.ones(c, dtype=dtype),
        eps=eps,
        momentum=momentum,
    )


def init_gated_block(
    rng: np.random.Generator,
    c_in: int,
    c_out: int,
    cardinality: int,
    width: int,
    stride: int,
    k: int,
    q_dim: int = 0,
    gate_hidden: int = 0,
    gated: bool = True,
    dtype=np.float64,
) -> GatedBlockParams:
    mid = cardinality * width
    controller = None
    if gated:
        controller = gate.init_gate_controller(
            rng, n_features=c_in, q_dim=q_dim, hidden=gate_hidden, n_experts=cardinality,
            dtype=dtype,
        )
    shortcut_conv = shortcut_bn = None
    if c_in != c_out or stride != 1:
        shortcut_conv = Conv2dParams(_he_conv(rng, c_out, c_in, 1, dtype), stride=stride)
        shortcut_bn = _bn(c_out, dtype)
    return GatedBlockParams(
        conv_reduce=Conv2dParams(_he_conv(rng, mid, c_in, 1, dtype)),
        bn_reduce=_bn(mid, dtype),
        conv_conv=Conv2dParams(_he_conv(rng, mid, width, 3, dtype), stride=stride,
                               padding=1, groups=cardinality),
        bn_mid=_bn(mid, dtype),
        conv_expand=Conv2dParams(_he_conv(rng, c_out, mid, 1, dtype)),
        bn_expand=_bn(c_out, dtype),
        shortcut_conv=shortcut_conv,
        shortcut_bn=shortcut_bn,
        controller=controller,
        cardinality=cardinality,
        width=width,
        k=k,
    )


def flatten_regions(x: np.ndarray) -> np.ndarray:
    """(N,C,H,W) feature map to (N, H*W, C) region features for the controller."""
    n, c, h, w = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(n, h * w, c)


def _unflatten_regions(grad_regions: np.ndarray, shape) -> np.ndarray:
    n, c, h, w = shape
    return np.ascontiguousarray(grad_regions.reshape(n, h, w, c).transpose(0, 3, 1, 2))


def _channel_index(selected: np.ndarray, width: int) -> np.ndarray:
    """Expand per-sample expert indices (N,k) to their channel indices (N, k*width)."""
    n, k = selected.shape
    return (selected[:, :, None] * width + np.arange(width)[None, None, :]).reshape(n, k * width)


def _selection_channel_mask(chan_idx: np.ndarray, mid: int) -> np.ndarray:
    n = chan_idx.shape[0]
    mask = np.zeros((n, mid), dtype=bool)
    mask[np.arange(n)[:, None], chan_idx] = True
    return mask


def _run_controller(x, q, params, k, counter):
    v_img = flatten_regions(x)
    decision, g_cache = gate.gate_forward(v_img, q, params.controller, k, counter)
    return decision, g_cache


# ---------------------------------------------------------------------------
# Reference execution: dense, or dense with masked gates + masked statistics
# ---------------------------------------------------------------------------


def _forward_reference(x, q, params, counter, training, selection, k=None):
    """Dense pipeline; with ``selection`` it becomes the masked oracle."""
    n = x.shape[0]
    mid = params.mid_channels
    d = params.width

    decision = g_cache = None
    if params.controller is not None:
        decision, g_cache = _run_controller(x, q, params, k or params.k, counter)

    bn_mask = None
    if selection is not None:
        chan_idx = _channel_index(selection, d)
        bn_mask = _selection_channel_mask(chan_idx, mid)

    t1c, red_cache = ops.conv2d_forward(x, params.conv_reduce, counter)
    t1n, bnr_cache = ops.batchnorm2d_forward(t1c, params.bn_reduce, counter, training,
                                             sample_mask=bn_mask)
    t1a, relu1 = ops.relu(t1n, counter)

    t2c, mid_cache = ops.conv2d_forward(t1a, params.conv_conv, counter)
    t2n, bnm_cache = ops.batchnorm2d_forward(t2c, params.bn_mid, counter, training,
                                             sample_mask=bn_mask)
    t2a, relu2 = ops.relu(t2n, counter)

    if params.controller is not None:
        g_used = decision.g_norm
        if selection is not None:
            ind = np.zeros_like(g_used)
            ind[np.arange(n)[:, None], selection] = 1.0
            g_used = g_used * ind
        scale = np.repeat(g_used, d, axis=1)[:, :, None, None]
        t2s = t2a * scale
        if counter is not None:
            counter.aux_ops += t2a.size
    else:
        g_used = scale = None
        t2s = t2a

    y0c, exp_cache = ops.conv2d_forward(t2s, params.conv_expand, counter)
    y0n, bne_cache = ops.batchnorm2d_forward(y0c, params.bn_expand, counter, training)

    if params.shortcut_conv is not None:
        scc, sc_cache = ops.conv2d_forward(x, params.shortcut_conv, counter)
        scn, scbn_cache = ops.batchnorm2d_forward(scc, params.shortcut_bn, counter, training)
    else:
        scn, sc_cache, scbn_cache = x, None, None

    pre = y0n + scn
    if counter is not None:
        counter.aux_ops += pre.size
    y, relu3 = ops.relu(pre, counter)

    cache = {
        "kind": "reference",
        "x_shape": x.shape,
        "selection": selection,
        "g_cache": g_cache,
        "decision": decision,
        "g_used": g_used,
        "scale": scale,
        "t2a": t2a,
        "red_cache": red_cache,
        "bnr_cache": bnr_cache,
        "relu1": relu1,
        "mid_cache": mid_cache,
        "bnm_cache": bnm_cache,
        "relu2": relu2,
        "exp_cache": exp_cache,
        "bne_cache": bne_cache,
        "sc_cache": sc_cache,
        "scbn_cache": scbn_cache,
        "relu3": relu3,
        "params": params,
    }
    return y, decision, cache


def block_forward_dense(x, q, params: GatedBlockParams, counter: Optional[MacCounter] = None,
                        training: bool = True):
    """All groups execute; group outputs are scaled by their normalized gates."""
    return _forward_reference(x, q, params, counter, training, selection=None)


def block_forward_masked(x, q, params: GatedBlockParams, counter: Optional[MacCounter] = None,
                         training: bool = True, k: Optional[int] = None):
    """Dense masked-gate reference for the sparse path (same selection rule)."""
    k = params.k if k is None else k
    v_img = flatten_regions(x)
    decision, _ = gate.gate_forward(v_img, q, params.controller, k, None)
    return _forward_reference(x, q, params, counter, training,
                              selection=decision.selected, k=k)


def block_backward_reference(grad_y, cache, extra_gnorm_grad=None):
    """Backward for the dense/masked paths. Returns (grad_x, grad_q, grads dict)."""
    params = cache["params"]
    d = params.width
    n = cache["x_shape"][0]
    grads = {}

    g = ops.relu_backward(grad_y, cache["relu3"])
    grad_y0n = g
    if params.shortcut_conv is not None:
        grad_scc, grads["shortcut_bn.gamma"], grads["shortcut_bn.beta"] = (
            ops.batchnorm2d_backward(g, cache["scbn_cache"]))
        grad_x_sc, grads["shortcut_conv.weight"], _ = ops.conv2d_backward(grad_scc,
                                                                          cache["sc_cache"])
    else:
        grad_x_sc = g

    grad_y0c, grads["bn_expand.gamma"], grads["bn_expand.beta"] = (
        ops.batchnorm2d_backward(grad_y0n, cache["bne_cache"]))
    grad_t2s, grads["conv_expand.weight"], _ = ops.conv2d_backward(grad_y0c, cache["exp_cache"])

    grad_gnorm = None
    if params.controller is not None:
        grad_t2a = grad_t2s * cache["scale"]
        per_channel = np.einsum("nchw,nchw->nc", grad_t2s, cache["t2a"])
        grad_g_used = per_channel.reshape(n, params.cardinality, d).sum(axis=2)
        if cache["selection"] is not None:
            ind = np.zeros_like(grad_g_used)
            ind[np.arange(n)[:, None], cache["selection"]] = 1.0
            grad_g_used = grad_g_used * ind
        grad_gnorm = grad_g_used
    else:
        grad_t2a = grad_t2s

    grad_t2n = ops.relu_backward(grad_t2a, cache["relu2"])
    grad_t2c, grads["bn_mid.gamma"], grads["bn_mid.beta"] = (
        ops.batchnorm2d_backward(grad_t2n, cache["bnm_cache"]))
    grad_t1a, grads["conv_conv.weight"], _ = ops.conv2d_backward(grad_t2c, cache["mid_cache"])

    grad_t1n = ops.relu_backward(grad_t1a, cache["relu1"])
    grad_t1c, grads["bn_reduce.gamma"], grads["bn_reduce.beta"] = (
        ops.batchnorm2d_backward(grad_t1n, cache["bnr_cache"]))
    grad_x, grads["conv_reduce.weight"], _ = ops.conv2d_backward(grad_t1c, cache["red_cache"])

    grad_x = grad_x + grad_x_sc
    grad_q = None
    if params.controller is not None:
        if extra_gnorm_grad is not None:
            grad_gnorm = grad_gnorm + extra_gnorm_grad
        grad_v_img, grad_q, g_grads = gate.gate_backward(grad_gnorm, cache["g_cache"])
        for name, value in g_grads.items():
            grads[f"controller.{name}"] = value
        grad_x = grad_x + _unflatten_regions(grad_v_img, cache["x_shape"])
    return grad_x, grad_q, grads


# ---------------------------------------------------------------------------
# Sparse execution with gathered parameters
# ---------------------------------------------------------------------------


def block_forward_sparse(x, q, params: GatedBlockParams, counter: Optional[MacCounter] = None,
                         training: bool = True, k: Optional[int] = None):
    """Execute only the per-sample top-k groups.

    Convolutions run on per-sample gathered weight rows/columns via batched
    matmuls, so executed multiply-accumulates are exactly k/E of the dense
    grouped work. Batch-norm statistics for the reduce and mid layers are
    taken per channel over the samples that executed that channel.
    """
    if params.controller is None:
        return _forward_reference(x, q, params, counter, training, selection=None)
    k = params.k if k is None else k
    e = params.cardinality
    if not 1 <= k <= e:
        raise ValueError(f"k={k} out of range [1, {e}]")
    d = params.width
    mid = params.mid_channels
    n, c_in, h, w = x.shape
    rows = np.arange(n)[:, None]

    decision, g_cache = _run_controller(x, q, params, k, counter)
    selected = decision.selected  # (N, k)
    chan_idx = _channel_index(selected, d)  # (N, k*d)
    bn_mask = _selection_channel_mask(chan_idx, mid)
    kd = k * d

    # 1x1 reduce with gathered output-channel rows
    x_cols = x.reshape(n, c_in, h * w)
    w_red = params.conv_reduce.weight.reshape(mid, c_in)
    w_red_g = w_red[chan_idx]  # (N, kd, C_in)
    t1g = ops.ordered_matmul_batched(w_red_g, x_cols)  # (N, kd, H*W)
    if counter is not None:
        counter.conv_macs += n * kd * c_in * h * w

    t1_dense = np.zeros((n, mid, h, w), dtype=x.dtype)
    t1_dense[rows, chan_idx] = t1g.reshape(n, kd, h, w)
    t1n, bnr_cache = ops.batchnorm2d_forward(t1_dense, params.bn_reduce, counter, training,
                                             sample_mask=bn_mask)
    t1a, relu1 = ops.relu(t1n, None)
    if counter is not None:
        counter.aux_ops += n * kd * h * w  # relu on executed slices

    # 3x3 grouped conv over the k selected groups
    t1ag = gather_channels_per_sample(t1a, chan_idx)  # (N, kd, H, W)
    stride = params.conv_conv.stride
    cols2, h2, w2 = ops.im2col(t1ag, 3, stride, params.conv_conv.padding)
    l2 = h2 * w2
    cols2g = cols2.reshape(n * k, d * 9, l2)
    w_mid_g = params.conv_conv.weight.reshape(e, d, d * 9)[selected].reshape(n * k, d, d * 9)
    t2g = ops.ordered_matmul_batched(w_mid_g, cols2g).reshape(n, kd, h2, w2)
    if counter is not None:
        counter.conv_macs += n * 9 * d * d * k * l2

    t2_dense = np.zeros((n, mid, h2, w2), dtype=x.dtype)
    t2_dense[rows, chan_idx] = t2g
    t2n, bnm_cache = ops.batchnorm2d_forward(t2_dense, params.bn_mid, counter, training,
                                             sample_mask=bn_mask)
    t2a, relu2 = ops.relu(t2n, None)
    if counter is not None:
        counter.aux_ops += n * kd * l2

    # gate scaling of the surviving groups
    gate_g = decision.g_norm[rows, selected]  # (N, k)
    scale_g = np.repeat(gate_g, d, axis=1)[:, :, None, None]  # (N, kd, 1, 1)
    t2ag = gather_channels_per_sample(t2a, chan_idx)  # (N, kd, H2, W2)
    t2sg = t2ag * scale_g
    if counter is not None:
        counter.aux_ops += n * kd * l2

    # 1x1 expand with gathered input-channel columns
    c_out = params.conv_expand.weight.shape[0]
    w_exp = params.conv_expand.weight.reshape(c_out, mid)
    w_exp_g = np.ascontiguousarray(w_exp[:, chan_idx].transpose(1, 0, 2))  # (N, C_out, kd)
    y0c = ops.ordered_matmul_batched(w_exp_g, t2sg.reshape(n, kd, l2)).reshape(n, c_out, h2, w2)
    if counter is not None:
        counter.conv_macs += n * kd * c_out * l2

    y0n, bne_cache = ops.batchnorm2d_forward(y0c, params.bn_expand, counter, training)

    if params.shortcut_conv is not None:
        scc, sc_cache = ops.conv2d_forward(x, params.shortcut_conv, counter)
        scn, scbn_cache = ops.batchnorm2d_forward(scc, params.shortcut_bn, counter, training)
    else:
        scn, sc_cache, scbn_cache = x, None, None

    pre = y0n + scn
    if counter is not None:
        counter.aux_ops += pre.size
    y, relu3 = ops.relu(pre, counter)

    cache = {
        "kind": "sparse",
        "x": x,
        "x_cols": x_cols,
        "k": k,
        "chan_idx": chan_idx,
        "selected": selected,
        "g_cache": g_cache,
        "decision": decision,
        "w_red_g": w_red_g,
        "bnr_cache": bnr_cache,
        "relu1": relu1,
        "cols2g": cols2g,
        "w_mid_g": w_mid_g,
        "h2w2": (h2, w2),
        "bnm_cache": bnm_cache,
        "relu2": relu2,
        "gate_g": gate_g,
        "scale_g": scale_g,
        "t2ag": t2ag,
        "t2sg": t2sg,
        "w_exp_g": w_exp_g,
        "bne_cache": bne_cache,
        "sc_cache": sc_cache,
        "scbn_cache": scbn_cache,
        "relu3": relu3,
        "params": params,
    }
    return y, decision, cache


def block_backward_sparse(grad_y, cache, extra_gnorm_grad=None):
    """Backward for the sparse path; non-executed groups get exact zero gradients."""
    if cache["kind"] == "reference":
        return block_backward_reference(grad_y, cache, extra_gnorm_grad)
    params = cache["params"]
    e, d = params.cardinality, params.width
    mid = params.mid_channels
    x = cache["x"]
    n, c_in, h, w = x.shape
    rows = np.arange(n)[:, None]
    chan_idx = cache["chan_idx"]
    selected = cache["selected"]
    k = cache["k"]
    kd = k * d
    h2, w2 = cache["h2w2"]
    l2 = h2 * w2
    grads = {}

    g = ops.relu_backward(grad_y, cache["relu3"])
    if params.shortcut_conv is not None:
        grad_scc, grads["shortcut_bn.gamma"], grads["shortcut_bn.beta"] = (
            ops.batchnorm2d_backward(g, cache["scbn_cache"]))
        grad_x_sc, grads["shortcut_conv.weight"], _ = ops.conv2d_backward(grad_scc,
                                                                          cache["sc_cache"])
    else:
        grad_x_sc = g

    grad_y0c, grads["bn_expand.gamma"], grads["bn_expand.beta"] = (
        ops.batchnorm2d_backward(g, cache["bne_cache"]))

    # expand: per-sample gathered columns
    go = grad_y0c.reshape(n, -1, l2)  # (N, C_out, L2)
    c_out = go.shape[1]
    grad_w_exp_g = np.matmul(go, cache["t2sg"].reshape(n, kd, l2).transpose(0, 2, 1))
    grad_w_exp = np.zeros((mid, c_out), dtype=go.dtype)
    np.add.at(grad_w_exp, chan_idx, grad_w_exp_g.transpose(0, 2, 1))
    grads["conv_expand.weight"] = grad_w_exp.T.reshape(params.conv_expand.weight.shape)
    grad_t2sg = np.matmul(cache["w_exp_g"].transpose(0, 2, 1), go)  # (N, kd, L2)
    grad_t2sg = grad_t2sg.reshape(n, kd, h2, w2)

    # gate scaling
    grad_t2ag = grad_t2sg * cache["scale_g"]
    grad_gate_g = np.einsum("nchw,nchw->nc", grad_t2sg, cache["t2ag"])
    grad_gate_g = grad_gate_g.reshape(n, k, d).sum(axis=2)  # (N, k)
    grad_gnorm = np.zeros_like(cache["decision"].g_norm)
    grad_gnorm[rows, selected] = grad_gate_g

    # scatter back to the dense mid buffer for masked batch-norm backward
    grad_t2a = np.zeros((n, mid, h2, w2), dtype=grad_y.dtype)
    grad_t2a[rows, chan_idx] = grad_t2ag
    grad_t2n = ops.relu_backward(grad_t2a, cache["relu2"])
    grad_t2c, grads["bn_mid.gamma"], grads["bn_mid.beta"] = (
        ops.batchnorm2d_backward(grad_t2n, cache["bnm_cache"]))

    # grouped conv over selected groups
    go2 = grad_t2c[rows, chan_idx].reshape(n * k, d, l2)
    grad_w_mid_g = np.matmul(go2, cache["cols2g"].transpose(0, 2, 1)).reshape(n, k, d, d * 9)
    grad_w_mid = np.zeros((e, d, d * 9), dtype=go2.dtype)
    np.add.at(grad_w_mid, selected, grad_w_mid_g)
    grads["conv_conv.weight"] = grad_w_mid.reshape(params.conv_conv.weight.shape)
    grad_cols2g = np.matmul(cache["w_mid_g"].transpose(0, 2, 1), go2)  # (N*k, d*9, L2)
    grad_t1ag = ops.col2im(grad_cols2g.reshape(n, kd * 9, l2), (n, kd, h, w), 3,
                           params.conv_conv.stride, params.conv_conv.padding, h2, w2)

    grad_t1a = np.zeros((n, mid, h, w), dtype=grad_y.dtype)
    grad_t1a[rows, chan_idx] = grad_t1ag
    grad_t1n = ops.relu_backward(grad_t1a, cache["relu1"])
    grad_t1c, grads["bn_reduce.gamma"], grads["bn_reduce.beta"] = (
        ops.batchnorm2d_backward(grad_t1n, cache["bnr_cache"]))

    # reduce: per-sample gathered rows
    grad_t1g = grad_t1c[rows, chan_idx].reshape(n, kd, h * w)
    grad_w_red_g = np.matmul(grad_t1g, cache["x_cols"].transpose(0, 2, 1))  # (N, kd, C_in)
    grad_w_red = np.zeros((mid, c_in), dtype=grad_y.dtype)
    np.add.at(grad_w_red, chan_idx, grad_w_red_g)
    grads["conv_reduce.weight"] = grad_w_red.reshape(params.conv_reduce.weight.shape)
    grad_x = np.matmul(cache["w_red_g"].transpose(0, 2, 1), grad_t1g).reshape(n, c_in, h, w)

    grad_x = grad_x + grad_x_sc
    if extra_gnorm_grad is not None:
        grad_gnorm = grad_gnorm + extra_gnorm_grad
    grad_v_img, grad_q, g_grads = gate.gate_backward(grad_gnorm, cache["g_cache"])
    for name, value in g_grads.items():
        grads[f"controller.{name}"] = value
    grad_x = grad_x + _unflatten_regions(grad_v_img, x.shape)
    return grad_x, grad_q, grads
