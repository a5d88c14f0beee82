"""Desk-scale training harness: cross-entropy plus a weighted gate-balancing
penalty, SGD with momentum, per-step tracing, and evaluation utilities.

Runs are bitwise reproducible from (config, seed): batch sampling uses its own
seeded generator and every tensor operation is deterministic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import gate
from .data import SyntheticTask, generate_dataset, generate_val
from .network import GatedNetwork


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"non-finite loss at step {step}")


@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    batch: int = 64
    steps: int = 5000
    balance_weight: float = 0.01  # weight of the CV penalty in the total loss
    k: Optional[int] = None  # None -> network config value
    seed: int = 0
    mode: str = "sparse"
    eval_every: int = 250
    eval_samples: int = 1024

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.balance_weight < 0:
            raise ValueError("balance_weight must be non-negative")


@dataclass
class TrainingTrace:
    block_names: list
    n_experts: list
    records: list = field(default_factory=list)  # per-step dicts
    val_history: list = field(default_factory=list)  # (step, accuracy)

    def write_csv(self, path) -> None:
        cols = ["step", "loss", "task_loss", "balance_loss", "acc"]
        for bi, e in enumerate(self.n_experts):
            cols += [f"b{bi}:imp{j}" for j in range(e)]
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(cols)
            for rec in self.records:
                row = [rec["step"], repr(rec["loss"]), repr(rec["task_loss"]),
                       repr(rec["balance_loss"]), repr(rec["acc"])]
                for imp in rec["importance"]:
                    row += [repr(float(v)) for v in imp]
                writer.writerow(row)

    def final_importance(self):
        return self.records[-1]["importance"] if self.records else []

    def best_val_accuracy(self) -> float:
        return max((acc for _, acc in self.val_history), default=0.0)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    loss = float(-log_p[np.arange(n), labels].mean())
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad.astype(logits.dtype)


class SgdMomentum:
    """v <- momentum * v + grad; p <- p - lr * v. Parameters update in place."""

    def __init__(self, net: GatedNetwork, lr: float, momentum: float):
        self.net = net
        self.lr = lr
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(arr) for name, arr in net.named_parameters()}

    def step(self, grads: dict) -> None:
        for name, param in self.net.named_parameters():
            g = grads.get(name)
            v = self.velocity[name]
            v *= self.momentum
            if g is not None:
                v += g.astype(param.dtype, copy=False)
            param -= self.lr * v


def batch_importance(decisions) -> list:
    """Per-block expert importance: column sums of the normalized gates."""
    return [dec.g_norm.sum(axis=0) for dec in decisions]


def train_loop(net: GatedNetwork, task: SyntheticTask, tcfg: TrainConfig) -> TrainingTrace:
    """Train on the synthetic task; returns the per-step trace.

    Total loss is cross_entropy + balance_weight * sum of per-block squared-CV
    penalties on batch expert importance (computed on full gates, before the
    top-k mask, so unselected experts still receive balancing gradient).
    """
    images, questions, labels = generate_dataset(task)
    val_images, val_questions, val_labels = generate_val(task)
    rng = np.random.default_rng(tcfg.seed)
    opt = SgdMomentum(net, tcfg.lr, tcfg.momentum)
    trace = TrainingTrace(
        block_names=net.gated_block_names(),
        n_experts=[s.cardinality for s in net.plan if s.kind == "block" and s.gated],
    )
    lam = tcfg.balance_weight

    for step in range(tcfg.steps):
        idx = rng.integers(0, images.shape[0], size=tcfg.batch)
        logits, decisions, steps_cache = net.forward(
            images[idx], questions[idx], mode=tcfg.mode, training=True, k=tcfg.k,
            with_cache=True)
        task_loss, grad_logits = cross_entropy(logits, labels[idx])
        bal_terms = [gate.balance_loss(dec.g_norm) for dec in decisions]
        bal_loss = float(sum(bal_terms))
        loss = task_loss + lam * bal_loss
        if not np.isfinite(loss):
            raise TrainingDiverged(step)
        extra = None
        if lam > 0:
            extra = [lam * gate.balance_loss_grad(dec.g_norm) for dec in decisions]
        grads = net.backward(steps_cache, grad_logits, extra)
        opt.step(grads)

        acc = float((logits.argmax(axis=1) == labels[idx]).mean())
        trace.records.append({
            "step": step,
            "loss": loss,
            "task_loss": task_loss,
            "balance_loss": bal_loss,
            "acc": acc,
            "importance": batch_importance(decisions),
        })
        if tcfg.eval_every and (step + 1) % tcfg.eval_every == 0:
            result = evaluate(net, val_images[: tcfg.eval_samples],
                              val_questions[: tcfg.eval_samples],
                              val_labels[: tcfg.eval_samples], k=tcfg.k, mode=tcfg.mode)
            trace.val_history.append((step + 1, result.accuracy))
    return trace


@dataclass
class EvalResult:
    accuracy: float
    gate_entropy: list  # per gated block, mean entropy of the normalized gates
    usage: list  # per gated block, top-k membership counts per expert
    importance: list  # per gated block, summed normalized gates
    samples: int = 0


def evaluate(net: GatedNetwork, images, questions, labels, k: Optional[int] = None,
             mode: str = "sparse", batch: int = 512) -> EvalResult:
    """Inference-mode evaluation with gate-utilization metrics."""
    n = images.shape[0]
    n_gated = len(net.gated_block_names())
    correct = 0
    entropy = [0.0] * n_gated
    usage = None
    importance = None
    for start in range(0, n, batch):
        sl = slice(start, min(start + batch, n))
        logits, decisions = net.forward(images[sl], questions[sl], mode=mode,
                                        training=False, k=k)
        correct += int((logits.argmax(axis=1) == labels[sl]).sum())
        if usage is None:
            usage = [np.zeros(dec.g_norm.shape[1], dtype=np.int64) for dec in decisions]
            importance = [np.zeros(dec.g_norm.shape[1]) for dec in decisions]
        for bi, dec in enumerate(decisions):
            p = np.clip(dec.g_norm, 1e-12, None)
            entropy[bi] += float(-(p * np.log(p)).sum())
            np.add.at(usage[bi], dec.selected.ravel(), 1)
            importance[bi] += dec.g_norm.sum(axis=0)
    return EvalResult(
        accuracy=correct / n,
        gate_entropy=[h / n for h in entropy],
        usage=usage or [],
        importance=importance or [],
        samples=n,
    )
