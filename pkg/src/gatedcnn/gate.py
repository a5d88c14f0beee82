"""Question-conditioned gate controller for expert selection.

Given the incoming feature map (flattened to D = H*W regions of F features)
and a question vector, the controller attends over the regions, forms a
multimodal query, and produces one weight per expert through a gating MLP
with ReLU + L1 normalization. The top-k experts by weight are selected for
execution. A coefficient-of-variation penalty on batch expert importance
keeps utilization balanced during training.

All functions operate on batched inputs: v_img is (N, D, F), v_q is (N, Q).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops

# Below this L1 mass the normalized gates are undefined; fall back to uniform.
FALLBACK_L1_THRESHOLD = 1e-12


@dataclass
class GateControllerParams:
    w_img_att: np.ndarray  # (Hd, F) region features -> attention hidden
    w_q_att: np.ndarray  # (Hd, Q) question -> attention hidden
    b_att: np.ndarray  # (Hd,)
    w_score: np.ndarray  # (Hd,) attention hidden -> region score
    b_score: np.ndarray  # (1,) shared across regions
    w_proj: Optional[np.ndarray]  # (Q, F) pooled-feature projection; None = identity (F == Q)
    w_gate: np.ndarray  # (E, Q) query -> expert logits
    b_gate: np.ndarray  # (E,)

    @property
    def n_experts(self) -> int:
        return self.w_gate.shape[0]


@dataclass
class GateDecision:
    """Per-batch gating outcome of one block."""

    g_raw: np.ndarray  # (N, E) pre-ReLU gate logits
    g_norm: np.ndarray  # (N, E) normalized gates, rows sum to 1
    selected: np.ndarray  # (N, k) expert indices, ascending
    attention: np.ndarray  # (N, D) region attention, rows sum to 1
    fallback_used: np.ndarray  # (N,) bool, True where gates fell back to uniform


def init_gate_controller(rng: np.random.Generator, n_features: int, q_dim: int,
                         hidden: int, n_experts: int, dtype=np.float64) -> GateControllerParams:
    """Xavier-uniform matrices, zero biases; projection omitted when F == Q."""

    def xavier(n_out, n_in):
        bound = np.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-bound, bound, size=(n_out, n_in)).astype(dtype)

    return GateControllerParams(
        w_img_att=xavier(hidden, n_features),
        w_q_att=xavier(hidden, q_dim),
        b_att=np.zeros(hidden, dtype=dtype),
        w_score=xavier(1, hidden)[0],
        b_score=np.zeros(1, dtype=dtype),
        w_proj=None if n_features == q_dim else xavier(q_dim, n_features),
        w_gate=xavier(n_experts, q_dim),
        b_gate=np.zeros(n_experts, dtype=dtype),
    )


def attention_pool(v_img: np.ndarray, v_q: np.ndarray, params: GateControllerParams,
                   counter: Optional[ops.MacCounter] = None):
    """Soft attention over regions, then attention-weighted feature pooling.

    Returns (v_tilde, attn, cache): v_tilde is the pooled image feature in
    question space (N, Q); attn rows sum to 1 over the D regions.
    """
    if v_img.ndim != 3 or v_q.ndim != 2:
        raise ValueError(f"expected v_img (N,D,F) and v_q (N,Q), got {v_img.shape}, {v_q.shape}")
    n, d, f = v_img.shape
    hd = params.w_img_att.shape[0]
    q = v_q.shape[1]
    if params.w_img_att.shape[1] != f or params.w_q_att.shape[1] != q:
        raise ValueError(
            f"feature widths {f}/{q} do not match controller "
            f"{params.w_img_att.shape}/{params.w_q_att.shape}"
        )
    img_h = v_img @ params.w_img_att.T  # (N, D, Hd)
    q_h = v_q @ params.w_q_att.T + params.b_att  # (N, Hd)
    h, h_cache = ops.tanh(img_h + q_h[:, None, :], counter)
    scores = h @ params.w_score + params.b_score  # (N, D)
    attn, sm_cache = ops.softmax(scores, axis=1, counter=counter)
    pooled = np.einsum("nd,ndf->nf", attn, v_img)  # (N, F)
    if params.w_proj is not None:
        v_tilde = pooled @ params.w_proj.T
    else:
        if f != q:
            raise ValueError(f"pooled width {f} != question width {q} and no projection")
        v_tilde = pooled
    if counter is not None:
        proj = q * f if params.w_proj is not None else 0
        counter.aux_ops += n * (d * hd * f + hd * q + hd + d * hd + d * hd + d + d * f + proj)
    cache = (v_img, v_q, h, h_cache, sm_cache, attn, pooled, params)
    return v_tilde, attn, cache


def attention_pool_backward(grad_v_tilde: np.ndarray, cache):
    """Returns (grad_v_img, grad_v_q, param-gradient dict)."""
    v_img, v_q, h, h_cache, sm_cache, attn, pooled, params = cache
    grads = {}
    if params.w_proj is not None:
        grads["w_proj"] = grad_v_tilde.T @ pooled
        grad_pooled = grad_v_tilde @ params.w_proj
    else:
        grad_pooled = grad_v_tilde
    grad_attn = np.einsum("nf,ndf->nd", grad_pooled, v_img)
    grad_v_img = attn[:, :, None] * grad_pooled[:, None, :]
    grad_scores = ops.softmax_backward(grad_attn, sm_cache)
    grads["b_score"] = np.array([grad_scores.sum()], dtype=grad_scores.dtype)
    grads["w_score"] = np.einsum("nd,ndh->h", grad_scores, h)
    grad_h = grad_scores[:, :, None] * params.w_score[None, None, :]
    grad_pre = ops.tanh_backward(grad_h, h_cache)
    grad_v_img += grad_pre @ params.w_img_att
    grads["w_img_att"] = np.einsum("ndh,ndf->hf", grad_pre, v_img)
    grad_qh = grad_pre.sum(axis=1)
    grads["w_q_att"] = grad_qh.T @ v_q
    grads["b_att"] = grad_qh.sum(axis=0)
    grad_v_q = grad_qh @ params.w_q_att
    return grad_v_img, grad_v_q, grads


def gate_weights(v_tilde: np.ndarray, v_q: np.ndarray, params: GateControllerParams,
                 counter: Optional[ops.MacCounter] = None):
    """Expert weights from the multimodal query: ReLU then L1 normalization.

    Rows whose ReLU mass is below the fallback threshold get uniform weights
    (fallback_used=True); those rows carry no gradient back to the logits.
    Returns (g_raw, g_norm, fallback_used, cache).
    """
    if not (np.all(np.isfinite(v_tilde)) and np.all(np.isfinite(v_q))):
        raise ValueError("non-finite gate controller inputs")
    n, q = v_q.shape
    e = params.w_gate.shape[0]
    u = v_tilde + v_q
    g_raw = u @ params.w_gate.T + params.b_gate
    r, r_mask = ops.relu(g_raw, counter)
    l1 = r.sum(axis=1)
    fallback = l1 <= FALLBACK_L1_THRESHOLD
    safe = np.where(fallback, 1.0, l1).astype(g_raw.dtype)
    g_norm = np.where(fallback[:, None], np.full_like(g_raw, 1.0 / e), r / safe[:, None])
    if counter is not None:
        counter.aux_ops += n * (q + e * q + e + 2 * e)
    cache = (u, r, r_mask, safe, fallback, params)
    return g_raw, g_norm, fallback, cache


def gate_weights_backward(grad_g_norm: np.ndarray, cache):
    """Quotient rule through the L1 normalization; fallback rows get zero gradient."""
    u, r, r_mask, safe, fallback, params = cache
    inner = (grad_g_norm * r).sum(axis=1, keepdims=True)
    grad_r = (grad_g_norm - inner / safe[:, None]) / safe[:, None]
    grad_r = np.where(fallback[:, None], 0.0, grad_r)
    grad_g_raw = ops.relu_backward(grad_r, r_mask)
    grad_u = grad_g_raw @ params.w_gate
    grads = {
        "w_gate": grad_g_raw.T @ u,
        "b_gate": grad_g_raw.sum(axis=0),
    }
    return grad_u, grads


def topk_select(g_norm: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries along the last axis, sorted ascending.

    Ties break toward the smaller index (stable sort on descending value).
    """
    e = g_norm.shape[-1]
    if not 1 <= k <= e:
        raise ValueError(f"k={k} out of range [1, {e}]")
    order = np.argsort(-g_norm, axis=-1, kind="stable")
    sel = np.sort(order[..., :k], axis=-1)
    return sel


def gate_forward(v_img: np.ndarray, v_q: np.ndarray, params: GateControllerParams, k: int,
                 counter: Optional[ops.MacCounter] = None):
    """Full controller pass. Returns (GateDecision, cache)."""
    v_tilde, attn, att_cache = attention_pool(v_img, v_q, params, counter)
    g_raw, g_norm, fallback, gw_cache = gate_weights(v_tilde, v_q, params, counter)
    selected = topk_select(g_norm, k)
    decision = GateDecision(g_raw=g_raw, g_norm=g_norm, selected=selected,
                            attention=attn, fallback_used=fallback)
    return decision, (att_cache, gw_cache)


def gate_backward(grad_g_norm: np.ndarray, cache):
    """Backprop from gate-weight gradients to inputs and all controller parameters.

    Top-k selection is treated as a constant index set: gradients flow only
    through the gate values themselves. Returns (grad_v_img, grad_v_q, grads).
    """
    att_cache, gw_cache = cache
    grad_u, grads = gate_weights_backward(grad_g_norm, gw_cache)
    grad_v_img, grad_v_q, att_grads = attention_pool_backward(grad_u, att_cache)
    grads.update(att_grads)
    grad_v_q = grad_v_q + grad_u  # query sum feeds the question in directly
    return grad_v_img, grad_v_q, grads


def cv_squared(values: np.ndarray) -> float:
    """Squared coefficient of variation (population sigma over mean) of a vector."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"expected a non-empty vector, got shape {v.shape}")
    mu = v.mean()
    if mu <= 0:
        raise ValueError("degenerate importance vector")
    var = ((v - mu) ** 2).mean()
    return float(var / (mu * mu))


def balance_loss(batch_gates: np.ndarray) -> float:
    """Squared CV of batch expert importance (column sums of normalized gates).

    Computed on the full normalized gates, before top-k masking, so every
    expert receives a balancing gradient.
    """
    if batch_gates.ndim != 2 or batch_gates.shape[0] == 0:
        raise ValueError(f"expected a non-empty (B, E) gate matrix, got {batch_gates.shape}")
    importance = batch_gates.sum(axis=0)
    return cv_squared(importance)


def balance_loss_grad(batch_gates: np.ndarray) -> np.ndarray:
    """Analytic gradient of :func:`balance_loss` w.r.t. each gate entry."""
    if batch_gates.ndim != 2 or batch_gates.shape[0] == 0:
        raise ValueError(f"expected a non-empty (B, E) gate matrix, got {batch_gates.shape}")
    s = batch_gates.sum(axis=0).astype(np.float64)
    e = s.size
    mu = s.mean()
    if mu <= 0:
        raise ValueError("degenerate importance vector")
    var = ((s - mu) ** 2).mean()
    d_imp = (2.0 / e) * (s - mu) / (mu * mu) - 2.0 * var / (e * mu**3)
    return np.broadcast_to(d_imp[None, :], batch_gates.shape).astype(batch_gates.dtype, copy=True)


def write_gate_csv(path, block_decisions) -> None:
    """Dump decisions as CSV rows: block_id, sample_id, k, fallback_used, gates, selection.

    ``block_decisions`` is an iterable of (block_id, GateDecision).
    """
    import csv

    block_decisions = list(block_decisions)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        if block_decisions:
            _, first = block_decisions[0]
            e = first.g_norm.shape[1]
            k = first.selected.shape[1]
            writer.writerow(
                ["block_id", "sample_id", "k", "fallback_used"]
                + [f"g_norm{j}" for j in range(e)]
                + [f"sel{j}" for j in range(k)]
            )
        for block_id, dec in block_decisions:
            n, k = dec.selected.shape
            for i in range(n):
                writer.writerow(
                    [block_id, i, k, int(dec.fallback_used[i])]
                    + [repr(float(v)) for v in dec.g_norm[i]]
                    + [int(j) for j in dec.selected[i]]
                )
