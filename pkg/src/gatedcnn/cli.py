"""Command-line front end: cost reports, sparse-vs-dense verification,
gradient checking, training, evaluation, and gate inspection.

Exit codes: 0 success, 1 verification failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import copy
import sys
from pathlib import Path

import numpy as np

from . import block as block_mod
from . import gate, tensor
from .config import ConfigError, layer_plan, resolve_config
from .data import SyntheticTask, generate_val
from .flops import network_flops
from .gradcheck import finite_diff_check
from .network import build_network, load_checkpoint, save_checkpoint
from .train import TrainConfig, TrainingDiverged, evaluate, train_loop

USAGE_ERROR = 2
VERIFY_ERROR = 1

_DTYPES = {"f32": np.float32, "f64": np.float64}


def _load_config(spec, parser):
    try:
        return resolve_config(spec)
    except (ConfigError, FileNotFoundError) as exc:
        parser.exit(USAGE_ERROR, f"error: {exc}\n")


def _parse_hw(text):
    h, _, w = text.partition("x")
    return int(h), int(w)


# -- flops -------------------------------------------------------------------


def cmd_flops(args, parser):
    cfg = _load_config(args.config, parser)
    input_hw = _parse_hw(args.input) if args.input else None
    try:
        ks = [int(v) for v in args.k.split(",")] if args.k else [cfg.k]
    except ValueError:
        parser.exit(USAGE_ERROR, f"error: bad --k value {args.k!r}\n")
    reports = []
    for k in ks:
        try:
            reports.append(network_flops(cfg, k=k, input_hw=input_hw))
        except ValueError as exc:
            parser.exit(USAGE_ERROR, f"error: {exc}\n")
    for k, rep in zip(ks, reports):
        print(f"== {cfg.name}  k={k}  input={rep.input_hw[0]}x{rep.input_hw[1]} ==")
        print(rep.table())
        ref = cfg.reference_flops.get(k)
        if ref is not None:
            print(f"  published: {ref:.4g}  computed conv: {rep.total_conv_macs:.4g}")
        print()
    if len(ks) >= 2:
        # totals are affine in k; report the per-k slope
        slope = (reports[-1].total_conv_macs - reports[0].total_conv_macs) / (ks[-1] - ks[0])
        print(f"conv MACs are affine in k: slope {slope:.0f} per unit k")
    if args.csv:
        reports[-1].write_csv(args.csv)
        print(f"wrote {args.csv} (k={ks[-1]})")
    return 0


# -- verify --------------------------------------------------------------------


def _random_block_trial(spec, cfg, rng, dtype, training, check_backward):
    """One sparse-vs-masked-reference trial on a block geometry from the plan."""
    e, d = spec.cardinality, spec.width
    k = int(rng.integers(1, e + 1))
    n = int(rng.integers(2, 5))
    h = min(spec.h_in, 8)
    params = block_mod.init_gated_block(
        np.random.default_rng(rng.integers(0, 2**31)), spec.c_in, spec.c_out, e, d,
        spec.stride, k, q_dim=cfg.question_dim, gate_hidden=cfg.gate_hidden_dim, dtype=dtype)
    x = rng.normal(size=(n, spec.c_in, h, h)).astype(dtype)
    q = rng.normal(size=(n, cfg.question_dim)).astype(dtype)
    ps, pm = copy.deepcopy(params), copy.deepcopy(params)
    ys, _, cs = block_mod.block_forward_sparse(x, q, ps, training=training)
    ym, _, cm = block_mod.block_forward_masked(x, q, pm, training=training)
    fwd = float(np.abs(ys - ym).max())
    if not check_backward:
        return fwd, 0.0
    gy = rng.normal(size=ys.shape).astype(dtype)
    gxs, gqs, gs = block_mod.block_backward_sparse(gy, cs)
    gxm, gqm, gm = block_mod.block_backward_reference(gy, cm)
    bwd = max(float(np.abs(gxs - gxm).max()), float(np.abs(gqs - gqm).max()),
              max(float(np.abs(gs[key] - gm[key]).max()) for key in gs))
    return fwd, bwd


def cmd_verify(args, parser):
    if args.trials < 1:
        parser.exit(USAGE_ERROR, "error: --trials must be >= 1\n")
    cfg = _load_config(args.config, parser)
    dtype = _DTYPES[args.dtype]
    tol = 1e-5 if dtype == np.float32 else 1e-10
    if args.inject_fault:
        tensor.set_fault_injection(True)
    gated = [s for s in layer_plan(cfg) if s.kind == "block" and s.gated]
    if not gated:
        parser.exit(USAGE_ERROR, "error: config has no gated blocks to verify\n")
    check_backward = dtype == np.float64  # gradient equivalence is an f64 contract
    what = "forward+backward" if check_backward else "forward"
    print(f"sparse-vs-reference equivalence ({what}): {args.trials} trials, "
          f"dtype={args.dtype}, seed={args.seed}, tolerance {tol:g}")
    worst = -1.0
    worst_seed = None
    try:
        for t in range(args.trials):
            trial_seed = args.seed + t
            rng = np.random.default_rng(trial_seed)
            spec = gated[t % len(gated)]
            fwd, bwd = _random_block_trial(spec, cfg, rng, dtype,
                                           training=not args.inference,
                                           check_backward=check_backward)
            if max(fwd, bwd) > worst:
                worst, worst_seed = max(fwd, bwd), trial_seed
    finally:
        tensor.set_fault_injection(False)
    worst = max(worst, 0.0)
    print(f"max deviation: {worst:.3e} (worst trial seed {worst_seed})")
    if worst > tol:
        print(f"FAIL: exceeded tolerance {tol:g}")
        return VERIFY_ERROR
    print("OK")
    return 0


# -- gradcheck -----------------------------------------------------------------


def _gradcheck_suite(dtype, seed):
    """Finite-difference checks over every primitive and the composite block."""
    from . import ops

    rng = np.random.default_rng(seed)
    results = {}

    def check(name, f, point, analytic):
        results[name] = finite_diff_check(f, point, analytic)

    # conv, grouped and ungrouped
    for groups in (1, 2):
        x = rng.normal(size=(2, 4, 5, 5))
        w = rng.normal(size=(4, 4 // groups, 3, 3))
        upstream = rng.normal(size=(2, 4, 3, 3))
        params = ops.Conv2dParams(w, stride=1, padding=0, groups=groups)

        def conv_loss(wv, x=x, params=params, upstream=upstream):
            p2 = ops.Conv2dParams(wv.reshape(params.weight.shape), stride=params.stride,
                                  padding=params.padding, groups=params.groups)
            y, _ = ops.conv2d_forward(x, p2)
            return float((y * upstream).sum())

        y, cache = ops.conv2d_forward(x, params)
        gx, gw, _ = ops.conv2d_backward(upstream, cache)
        check(f"conv2d.weight[g={groups}]", conv_loss, w, gw)
        check(f"conv2d.input[g={groups}]",
              lambda xv: conv_loss(w, x=xv.reshape(x.shape)), x, gx)

    # batchnorm training mode
    x = rng.normal(size=(3, 4, 4, 4))
    bn = block_mod._bn(4, np.float64)
    upstream = rng.normal(size=x.shape)

    def bn_loss(xv):
        y, _ = ops.batchnorm2d_forward(xv.reshape(x.shape), bn, training=True,
                                       update_running=False)
        return float((y * upstream).sum())

    y, cache = ops.batchnorm2d_forward(x, bn, training=True, update_running=False)
    gx, gg, gb = ops.batchnorm2d_backward(upstream, cache)
    check("batchnorm.input", bn_loss, x, gx)

    # linear / softmax / tanh / relu composite
    x = rng.normal(size=(3, 5))
    w = rng.normal(size=(4, 5))
    b = rng.normal(size=4)
    upstream = rng.normal(size=(3, 4))

    def lin_loss(wv):
        y, _ = ops.linear(x, wv.reshape(w.shape), b)
        s, _ = ops.softmax(y, axis=1)
        t, _ = ops.tanh(s)
        r, _ = ops.relu(t)
        return float((r * upstream).sum())

    y, lc = ops.linear(x, w, b)
    s, sc = ops.softmax(y, axis=1)
    t, tc = ops.tanh(s)
    r, rm = ops.relu(t)
    g = ops.relu_backward(upstream, rm)
    g = ops.tanh_backward(g, tc)
    g = ops.softmax_backward(g, sc)
    _, gw, _ = ops.linear_backward(g, lc)
    check("linear+softmax+tanh+relu.weight", lin_loss, w, gw)

    # full gate controller
    ctrl = gate.init_gate_controller(np.random.default_rng(seed + 1), n_features=6,
                                     q_dim=4, hidden=5, n_experts=8, dtype=np.float64)
    v_img = rng.normal(size=(2, 7, 6))
    v_q = rng.normal(size=(2, 4))
    upstream = rng.normal(size=(2, 8))

    def ctrl_loss(flat):
        c2 = copy.deepcopy(ctrl)
        c2.w_gate[...] = flat.reshape(c2.w_gate.shape)
        dec, _ = gate.gate_forward(v_img, v_q, c2, k=3)
        return float((dec.g_norm * upstream).sum())

    dec, gcache = gate.gate_forward(v_img, v_q, ctrl, k=3)
    gvi, gvq, ggrads = gate.gate_backward(upstream, gcache)
    check("gate.w_gate", ctrl_loss, ctrl.w_gate, ggrads["w_gate"])
    check("gate.v_img", lambda v: _gate_input_loss(ctrl, v.reshape(v_img.shape), v_q, upstream),
          v_img, gvi)
    check("gate.v_q", lambda v: _gate_input_loss(ctrl, v_img, v.reshape(v_q.shape), upstream),
          v_q, gvq)

    # full gated block (input gradient)
    params = block_mod.init_gated_block(np.random.default_rng(seed + 2), 6, 8, 4, 2, 1,
                                        k=2, q_dim=4, gate_hidden=4, dtype=np.float64)
    x = rng.normal(size=(2, 6, 5, 5))
    q = rng.normal(size=(2, 4))
    upstream = rng.normal(size=(2, 8, 5, 5))

    def block_loss(xv):
        y, _, _ = block_mod.block_forward_sparse(xv.reshape(x.shape), q,
                                                 copy.deepcopy(params), training=True)
        return float((y * upstream).sum())

    y, _, cache = block_mod.block_forward_sparse(x, q, copy.deepcopy(params), training=True)
    gx, gq, grads = block_mod.block_backward_sparse(upstream, cache)
    check("block.input", block_loss, x, gx)
    check("block.conv_conv",
          lambda wv: _block_param_loss(params, "conv_conv", wv, x, q, upstream),
          params.conv_conv.weight, grads["conv_conv.weight"])
    return results


def _gate_input_loss(ctrl, v_img, v_q, upstream):
    dec, _ = gate.gate_forward(v_img, v_q, ctrl, k=3)
    return float((dec.g_norm * upstream).sum())


def _block_param_loss(params, conv_name, flat, x, q, upstream):
    p2 = copy.deepcopy(params)
    conv = getattr(p2, conv_name)
    conv.weight[...] = flat.reshape(conv.weight.shape)
    y, _, _ = block_mod.block_forward_sparse(x, q, p2, training=True)
    return float((y * upstream).sum())


def cmd_gradcheck(args, parser):
    dtype = _DTYPES[args.dtype]
    if dtype != np.float64:
        print("warning: finite differences are unreliable in f32; expect failures")
    results = _gradcheck_suite(dtype, args.seed)
    worst = 0.0
    for name in sorted(results):
        print(f"  {name:36s} rel err {results[name]:.3e}")
        worst = max(worst, results[name])
    print(f"worst relative error: {worst:.3e}")
    if worst > 1e-4:
        print("FAIL: exceeded 1e-4")
        return VERIFY_ERROR
    print("OK")
    return 0


# -- train / eval / inspect-gates ----------------------------------------------


def cmd_train(args, parser):
    cfg = _load_config(args.config, parser)
    net = build_network(cfg, seed=args.seed, dtype=_DTYPES[args.dtype])
    task = SyntheticTask(seed=args.seed)
    tcfg = TrainConfig(lr=args.lr, momentum=args.momentum, batch=args.batch,
                       steps=args.steps, balance_weight=args.balance_weight,
                       k=args.k, seed=args.seed, mode=args.mode,
                       eval_every=args.eval_every)
    try:
        trace = train_loop(net, task, tcfg)
    except TrainingDiverged as exc:
        print(f"aborted: {exc}")
        return VERIFY_ERROR
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace.write_csv(out / "trace.csv")
    save_checkpoint(out, net)
    final = trace.records[-1]
    print(f"trained {tcfg.steps} steps: loss {final['loss']:.4f} batch acc {final['acc']:.3f}")
    if trace.val_history:
        print(f"best val accuracy: {trace.best_val_accuracy():.3f}")
    print(f"wrote {out}/trace.csv and {out}/params.bin")
    return 0


def _eval_data(net, args):
    task = SyntheticTask(seed=args.data_seed)
    images, questions, labels = generate_val(task)
    if args.samples:
        images, questions, labels = (images[: args.samples], questions[: args.samples],
                                     labels[: args.samples])
    return images, questions, labels


def cmd_eval(args, parser):
    if args.checkpoint:
        net = load_checkpoint(args.checkpoint)
    else:
        cfg = _load_config(args.config, parser)
        net = build_network(cfg)
    images, questions, labels = _eval_data(net, args)
    result = evaluate(net, images, questions, labels, k=args.k, mode=args.mode)
    print(f"accuracy: {result.accuracy:.4f} over {result.samples} samples")
    for bi, (h, use) in enumerate(zip(result.gate_entropy, result.usage)):
        print(f"  block {bi}: mean gate entropy {h:.4f}, usage {use.tolist()}")
    if args.dump_logits:
        logits, _ = net.forward(images, questions, mode=args.mode, k=args.k)
        tensor.save_tensor(args.dump_logits, logits)
        print(f"wrote logits to {args.dump_logits}")
    return 0


def cmd_inspect_gates(args, parser):
    if args.checkpoint:
        net = load_checkpoint(args.checkpoint)
    else:
        cfg = _load_config(args.config, parser)
        net = build_network(cfg)
    images, questions, labels = _eval_data(net, args)
    _, decisions = net.forward(images, questions, mode=args.mode, training=False, k=args.k)
    rows = [(bi, dec) for bi, dec in enumerate(decisions)]
    gate.write_gate_csv(args.out, rows)
    print(f"wrote {args.out}: {sum(d.g_norm.shape[0] for _, d in rows)} rows "
          f"over {len(rows)} blocks")
    return 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gatedcnn",
        description="Conditionally computed grouped-convolution networks: "
                    "cost analysis, verification, and desk-scale training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("flops", help="analytical cost report per k")
    p.add_argument("--config", required=True)
    p.add_argument("--k", help="comma-separated k values (default: config k)")
    p.add_argument("--csv", help="write the last report as CSV")
    p.add_argument("--input", help="override input size, e.g. 128x128")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("verify", help="randomized sparse-vs-reference equivalence trials")
    p.add_argument("--config", default="toy_small")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=sorted(_DTYPES), default="f64")
    p.add_argument("--inference", action="store_true",
                   help="verify inference mode instead of training mode")
    p.add_argument("--inject-fault", action="store_true",
                   help="test hook: corrupt the channel gather to prove detection")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--all", action="store_true", help="run every check (default)")
    p.add_argument("--dtype", choices=sorted(_DTYPES), default="f64")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train on the synthetic task")
    p.add_argument("--config", default="toy_small")
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--balance-weight", type=float, default=0.01)
    p.add_argument("--k", type=int)
    p.add_argument("--mode", choices=["dense", "sparse"], default="sparse")
    p.add_argument("--dtype", choices=sorted(_DTYPES), default="f32")
    p.add_argument("--eval-every", type=int, default=250)
    p.add_argument("--out", default="runs/latest")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or a fresh network)")
    p.add_argument("--config", default="toy_small")
    p.add_argument("--checkpoint", help="directory written by train --out")
    p.add_argument("--k", type=int)
    p.add_argument("--mode", choices=["dense", "sparse"], default="sparse")
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--dump-logits", help="write logits as a tensor dump")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-gates", help="dump per-sample gate decisions as CSV")
    p.add_argument("--config", default="toy_small")
    p.add_argument("--checkpoint")
    p.add_argument("--k", type=int)
    p.add_argument("--mode", choices=["dense", "sparse"], default="sparse")
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--out", default="gates.csv")
    p.set_defaults(func=cmd_inspect_gates)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return VERIFY_ERROR


if __name__ == "__main__":
    sys.exit(main())
