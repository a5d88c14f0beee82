"""Analytical multiply-accumulate model for the gated networks.

Headline counts are convolution MACs from the layer geometry (grouped
convolutions divide by the group count; the division is always exact). The
fully-connected head is reported separately, and batch-norm / activation /
pooling / gate-controller work is tracked as auxiliary element operations
using the same accounting rules as the instrumented counter, so the two
agree as exact integers for any admissible k.
"""

from __future__ import annotations

import csv as csv_mod
from dataclasses import dataclass, field
from typing import Optional

from .config import NetworkConfig, layer_plan


def conv_flops(c_in: int, c_out: int, p: int, h_o: int, w_o: int, groups: int = 1) -> int:
    """MACs of one convolution layer: c_in*c_out*p*p*h_o*w_o / groups, exact."""
    total = c_in * c_out * p * p * h_o * w_o
    if groups < 1:
        raise ValueError(f"groups must be >= 1, got {groups}")
    if total % groups:
        raise ValueError(
            f"conv cost {total} not divisible by groups={groups}; invalid geometry"
        )
    return total // groups


def gated_block_flops(c_in: int, c_out: int, cardinality: int, width: int, k: int,
                      h1: int, w1: int, h2: int, w2: int, h3: int, w3: int) -> int:
    """Conv MACs of one bottleneck block executing k of E groups.

    reduce (1x1, k*d gathered output channels) + 3x3 grouped over k groups +
    expand (1x1, k*d gathered input channels). Shortcut projections are
    accounted separately by :func:`network_flops`.
    """
    if not 1 <= k <= cardinality:
        raise ValueError(f"k={k} out of range [1, {cardinality}]")
    d = width
    return (k * d * c_in * h1 * w1
            + 9 * d * d * k * h2 * w2
            + k * d * c_out * h3 * w3)


def controller_aux_ops(regions: int, feat: int, q_dim: int, hidden: int, experts: int) -> int:
    """Element operations of one gate-controller pass (per sample).

    Mirrors the runtime accounting: attention projections and pooling, tanh,
    softmax, the projection to question space when feature widths differ, and
    the gating MLP with ReLU + L1 normalization.
    """
    d, f, q, hd, e = regions, feat, q_dim, hidden, experts
    att = d * hd * f + hd * q + hd + 3 * d * hd + 4 * d + d * f
    if f != q:
        att += q * f
    gating = q + e * q + 4 * e
    return att + gating


@dataclass
class FlopsRow:
    name: str
    kind: str
    conv_macs: int = 0
    aux_ops: int = 0
    linear_macs: int = 0


@dataclass
class FlopsReport:
    network: str
    input_hw: tuple
    k_used: dict  # gated block name -> k
    rows: list = field(default_factory=list)

    @property
    def total_conv_macs(self) -> int:
        return sum(r.conv_macs for r in self.rows)

    @property
    def total_linear_macs(self) -> int:
        return sum(r.linear_macs for r in self.rows)

    @property
    def total_aux_ops(self) -> int:
        return sum(r.aux_ops for r in self.rows)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv_mod.writer(f)
            writer.writerow(["layer", "kind", "conv_macs", "aux_ops"])
            for r in self.rows:
                writer.writerow([r.name, r.kind, r.conv_macs + r.linear_macs, r.aux_ops])

    def table(self) -> str:
        width = max(len(r.name) for r in self.rows) + 2
        lines = [f"{'layer':<{width}}{'kind':<10}{'conv_macs':>14}{'aux_ops':>14}"]
        for r in self.rows:
            macs = r.conv_macs + r.linear_macs
            lines.append(f"{r.name:<{width}}{r.kind:<10}{macs:>14}{r.aux_ops:>14}")
        lines.append(
            f"{'total':<{width}}{'':<10}{self.total_conv_macs + self.total_linear_macs:>14}"
            f"{self.total_aux_ops:>14}"
        )
        lines.append(
            f"  conv={self.total_conv_macs}  linear={self.total_linear_macs}"
            f"  aux={self.total_aux_ops}"
        )
        return "\n".join(lines)


def network_flops(cfg: NetworkConfig, k: Optional[int] = None,
                  input_hw: Optional[tuple] = None) -> FlopsReport:
    """Per-sample cost report for a config at the given input size and k."""
    k = cfg.k if k is None else k
    q_dim = cfg.question_dim
    hidden = cfg.gate_hidden_dim
    plan = layer_plan(cfg, input_hw)
    hw = input_hw if input_hw is not None else (cfg.input.height, cfg.input.width)
    report = FlopsReport(network=cfg.name, input_hw=tuple(hw), k_used={})

    for spec in plan:
        if spec.kind == "conv":
            macs = conv_flops(spec.c_in, spec.c_out, spec.kernel, spec.h_out, spec.w_out)
            aux = 3 * spec.c_out * spec.h_out * spec.w_out if spec.bn_relu else 0
            report.rows.append(FlopsRow(spec.name, "conv", conv_macs=macs, aux_ops=aux))
        elif spec.kind == "maxpool":
            out = spec.channels * spec.h_out * spec.w_out
            report.rows.append(FlopsRow(spec.name, "maxpool",
                                        aux_ops=out * spec.kernel * spec.kernel))
        elif spec.kind == "block":
            e, d = spec.cardinality, spec.width
            if spec.gated:
                if not 1 <= k <= e:
                    raise ValueError(f"k exceeds cardinality ({k} > {e}) at {spec.name}")
                bk = k
                report.k_used[spec.name] = bk
            else:
                bk = e
            h1w1 = spec.h_in * spec.w_in
            h2w2 = spec.h_out * spec.w_out
            macs = gated_block_flops(spec.c_in, spec.c_out, e, d, bk,
                                     spec.h_in, spec.w_in, spec.h_out, spec.w_out,
                                     spec.h_out, spec.w_out)
            kd = bk * d
            # bn_reduce+relu, bn_expand, residual add + final relu
            aux = 3 * kd * h1w1 + 2 * spec.c_out * h2w2 + 2 * spec.c_out * h2w2
            if spec.gated:
                aux += 4 * kd * h2w2  # bn_mid + relu + gate scaling on the mid map
                aux += controller_aux_ops(h1w1, spec.c_in, q_dim, hidden, e)
            else:
                aux += 3 * kd * h2w2  # bn_mid + relu
            if spec.has_proj:
                macs += conv_flops(spec.c_in, spec.c_out, 1, spec.h_out, spec.w_out)
                aux += 2 * spec.c_out * h2w2  # shortcut batch-norm
            report.rows.append(FlopsRow(spec.name, "block", conv_macs=macs, aux_ops=aux))
        elif spec.kind == "gap":
            report.rows.append(FlopsRow(spec.name, "gap",
                                        aux_ops=spec.channels * spec.h_in * spec.w_in))
        elif spec.kind == "linear":
            report.rows.append(FlopsRow(spec.name, "linear",
                                        linear_macs=spec.d_in * spec.d_out,
                                        aux_ops=spec.d_out))
    return report
