"""Network assembly: deterministic initialization from a config, forward and
backward passes over the stem / gated stages / head pipeline, checkpointing."""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np

from . import block as block_mod
from . import ops, tensor
from .config import NetworkConfig, layer_plan, parse_config, serialize_config


class GatedNetwork:
    """Built network: ordered layers with initialized parameters.

    Parameters are float arrays owned by this object; forward passes never
    mutate them apart from batch-norm running statistics in training mode.
    """

    def __init__(self, cfg: NetworkConfig, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.plan = layer_plan(cfg)
        self.stem_conv: Optional[ops.Conv2dParams] = None
        self.stem_bn: Optional[ops.BatchNorm2dParams] = None
        self.blocks: list = []  # GatedBlockParams in plan order
        self.final_conv: Optional[ops.Conv2dParams] = None
        self.final_bn: Optional[ops.BatchNorm2dParams] = None
        self.head_w: Optional[np.ndarray] = None
        self.head_b: Optional[np.ndarray] = None

    # -- parameter access ---------------------------------------------------

    def named_parameters(self):
        """Stable (name, array) iteration over all trainable parameters."""
        yield "stem.conv.weight", self.stem_conv.weight
        yield "stem.bn.gamma", self.stem_bn.gamma
        yield "stem.bn.beta", self.stem_bn.beta
        for name, params in self._named_blocks():
            yield f"{name}.conv_reduce.weight", params.conv_reduce.weight
            yield f"{name}.bn_reduce.gamma", params.bn_reduce.gamma
            yield f"{name}.bn_reduce.beta", params.bn_reduce.beta
            yield f"{name}.conv_conv.weight", params.conv_conv.weight
            yield f"{name}.bn_mid.gamma", params.bn_mid.gamma
            yield f"{name}.bn_mid.beta", params.bn_mid.beta
            yield f"{name}.conv_expand.weight", params.conv_expand.weight
            yield f"{name}.bn_expand.gamma", params.bn_expand.gamma
            yield f"{name}.bn_expand.beta", params.bn_expand.beta
            if params.shortcut_conv is not None:
                yield f"{name}.shortcut_conv.weight", params.shortcut_conv.weight
                yield f"{name}.shortcut_bn.gamma", params.shortcut_bn.gamma
                yield f"{name}.shortcut_bn.beta", params.shortcut_bn.beta
            if params.controller is not None:
                ctrl = params.controller
                yield f"{name}.controller.w_img_att", ctrl.w_img_att
                yield f"{name}.controller.w_q_att", ctrl.w_q_att
                yield f"{name}.controller.b_att", ctrl.b_att
                yield f"{name}.controller.w_score", ctrl.w_score
                yield f"{name}.controller.b_score", ctrl.b_score
                if ctrl.w_proj is not None:
                    yield f"{name}.controller.w_proj", ctrl.w_proj
                yield f"{name}.controller.w_gate", ctrl.w_gate
                yield f"{name}.controller.b_gate", ctrl.b_gate
        if self.final_conv is not None:
            yield "final.conv.weight", self.final_conv.weight
            if self.final_bn is not None:
                yield "final.bn.gamma", self.final_bn.gamma
                yield "final.bn.beta", self.final_bn.beta
        yield "head.weight", self.head_w
        yield "head.bias", self.head_b

    def named_state(self):
        """Parameters plus batch-norm running statistics, for checkpoints."""
        yield from self.named_parameters()
        yield "stem.bn.running_mean", self.stem_bn.running_mean
        yield "stem.bn.running_var", self.stem_bn.running_var
        for name, params in self._named_blocks():
            for bn_name, bn in (("bn_reduce", params.bn_reduce), ("bn_mid", params.bn_mid),
                                ("bn_expand", params.bn_expand),
                                ("shortcut_bn", params.shortcut_bn)):
                if bn is None:
                    continue
                yield f"{name}.{bn_name}.running_mean", bn.running_mean
                yield f"{name}.{bn_name}.running_var", bn.running_var
        if self.final_bn is not None:
            yield "final.bn.running_mean", self.final_bn.running_mean
            yield "final.bn.running_var", self.final_bn.running_var

    def _named_blocks(self):
        specs = [s for s in self.plan if s.kind == "block"]
        for spec, params in zip(specs, self.blocks):
            yield spec.name, params

    def parameter_count(self) -> int:
        return sum(arr.size for _, arr in self.named_parameters())

    def gated_block_names(self) -> list:
        return [s.name for s in self.plan if s.kind == "block" and s.gated]

    # -- execution ------------------------------------------------------------

    def _with_coords(self, images: np.ndarray) -> np.ndarray:
        if not self.cfg.input.coords:
            return images
        n, _, h, w = images.shape
        ys = np.linspace(-1.0, 1.0, h, dtype=images.dtype)
        xs = np.linspace(-1.0, 1.0, w, dtype=images.dtype)
        yy = np.broadcast_to(ys[:, None], (h, w))
        xx = np.broadcast_to(xs[None, :], (h, w))
        coords = np.broadcast_to(np.stack([yy, xx])[None], (n, 2, h, w))
        return np.concatenate([images, coords.astype(images.dtype)], axis=1)

    def forward(self, images: np.ndarray, questions: Optional[np.ndarray] = None,
                counter: Optional[ops.MacCounter] = None, mode: str = "sparse",
                training: bool = False, k: Optional[int] = None, with_cache: bool = False):
        """Run the network. Returns (logits, decisions[, cache]).

        ``decisions`` holds one GateDecision per gated block, in block order.
        ``mode`` selects dense (all groups) or sparse (top-k gathered) block
        execution; ``k`` overrides the config value in sparse mode.
        """
        if mode not in ("dense", "sparse"):
            raise ValueError(f"unknown mode {mode!r}")
        x = np.ascontiguousarray(images, dtype=self.dtype)
        if questions is not None:
            questions = np.ascontiguousarray(questions, dtype=self.dtype)
            if questions.shape[0] != x.shape[0]:
                raise ValueError(
                    f"batch mismatch: {x.shape[0]} images vs {questions.shape[0]} questions"
                )
        if any(s.gated for s in self.plan if s.kind == "block") and questions is None:
            raise ValueError("gated network requires question vectors")
        x = self._with_coords(x)

        steps = []
        decisions = []
        block_iter = iter(self.blocks)
        for spec in self.plan:
            if spec.kind == "conv":
                conv = self.stem_conv if spec.name == "stem" else self.final_conv
                bn = self.stem_bn if spec.name == "stem" else self.final_bn
                x, c_cache = ops.conv2d_forward(x, conv, counter)
                if spec.bn_relu:
                    x, b_cache = ops.batchnorm2d_forward(x, bn, counter, training)
                    x, r_mask = ops.relu(x, counter)
                else:
                    b_cache = r_mask = None
                steps.append(("conv", spec, (c_cache, b_cache, r_mask)))
            elif spec.kind == "maxpool":
                x, p_cache = ops.maxpool2d(x, spec.kernel, spec.stride, spec.padding, counter)
                steps.append(("maxpool", spec, p_cache))
            elif spec.kind == "block":
                params = next(block_iter)
                if mode == "sparse":
                    x, decision, bcache = block_mod.block_forward_sparse(
                        x, questions, params, counter, training, k=k if spec.gated else None)
                else:
                    x, decision, bcache = block_mod.block_forward_dense(
                        x, questions, params, counter, training)
                if spec.gated:
                    decisions.append(decision)
                steps.append(("block", spec, bcache))
            elif spec.kind == "gap":
                x, g_cache = ops.global_avg_pool(x, counter)
                steps.append(("gap", spec, g_cache))
            elif spec.kind == "linear":
                x, l_cache = ops.linear(x, self.head_w, self.head_b, counter)
                steps.append(("linear", spec, l_cache))
        logits = x
        if with_cache:
            return logits, decisions, steps
        return logits, decisions

    def backward(self, steps, grad_logits: np.ndarray, gate_extra_grads=None):
        """Walk the cached forward steps in reverse; returns name -> gradient.

        ``gate_extra_grads`` optionally adds a gradient on each gated block's
        normalized gates (block order), e.g. from a balancing penalty.
        """
        grads = {}
        grad = grad_logits
        gated_specs = [s for t, s, _ in steps if t == "block" and s.gated]
        extra = dict(zip([s.name for s in gated_specs], gate_extra_grads or []))
        for kind, spec, cache in reversed(steps):
            if kind == "linear":
                grad, grads["head.weight"], grads["head.bias"] = ops.linear_backward(grad, cache)
            elif kind == "gap":
                grad = ops.global_avg_pool_backward(grad, cache)
            elif kind == "block":
                grad, _, b_grads = block_mod.block_backward_sparse(
                    grad, cache, extra.get(spec.name))
                for pname, val in b_grads.items():
                    grads[f"{spec.name}.{pname}"] = val
            elif kind == "maxpool":
                grad = ops.maxpool2d_backward(grad, cache)
            elif kind == "conv":
                c_cache, b_cache, r_mask = cache
                prefix = "stem" if spec.name == "stem" else "final"
                if r_mask is not None:
                    grad = ops.relu_backward(grad, r_mask)
                    grad, grads[f"{prefix}.bn.gamma"], grads[f"{prefix}.bn.beta"] = (
                        ops.batchnorm2d_backward(grad, b_cache))
                grad, grads[f"{prefix}.conv.weight"], _ = ops.conv2d_backward(grad, c_cache)
        return grads


def _xavier(rng, n_out, n_in, dtype):
    bound = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-bound, bound, size=(n_out, n_in)).astype(dtype)


def build_network(cfg: NetworkConfig, seed: Optional[int] = None,
                  dtype=np.float32) -> GatedNetwork:
    """Deterministically initialize a network: identical (config, seed, dtype)
    yields byte-identical parameters."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    net = GatedNetwork(cfg, dtype)
    dt = net.dtype

    for spec in net.plan:
        if spec.kind == "conv":
            fan_in = spec.c_in * spec.kernel * spec.kernel
            weight = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                size=(spec.c_out, spec.c_in, spec.kernel, spec.kernel)).astype(dt)
            conv = ops.Conv2dParams(weight, stride=spec.stride, padding=spec.padding)
            bn = block_mod._bn(spec.c_out, dt) if spec.bn_relu else None
            if spec.name == "stem":
                net.stem_conv, net.stem_bn = conv, bn
            else:
                net.final_conv, net.final_bn = conv, bn
        elif spec.kind == "block":
            net.blocks.append(block_mod.init_gated_block(
                rng, spec.c_in, spec.c_out, spec.cardinality, spec.width, spec.stride,
                k=min(cfg.k, spec.cardinality), q_dim=cfg.question_dim,
                gate_hidden=cfg.gate_hidden_dim, gated=spec.gated, dtype=dt))
        elif spec.kind == "linear":
            net.head_w = _xavier(rng, spec.d_out, spec.d_in, dt)
            net.head_b = np.zeros(spec.d_out, dtype=dt)
    return net


def save_checkpoint(out_dir, net: GatedNetwork) -> None:
    """Write params.bin (named tensor dump) and config.json next to each other."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensor.save_named_tensors(out / "params.bin", dict(net.named_state()))
    (out / "config.json").write_text(serialize_config(net.cfg))


def load_checkpoint(ckpt_dir, dtype=None) -> GatedNetwork:
    ckpt = Path(ckpt_dir)
    cfg = parse_config((ckpt / "config.json").read_text())
    state = tensor.load_named_tensors(ckpt / "params.bin")
    if dtype is None:
        dtype = next(iter(state.values())).dtype
    net = build_network(cfg, dtype=dtype)
    expected = dict(net.named_state())
    if set(expected) != set(state):
        missing = set(expected) ^ set(state)
        raise ValueError(f"checkpoint does not match config: mismatched entries {sorted(missing)}")
    for name, arr in net.named_state():
        arr[...] = state[name].astype(net.dtype)
    return net
