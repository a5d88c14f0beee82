import copy

import numpy as np
import pytest

from gatedcnn import block as blk
from gatedcnn.gradcheck import finite_diff_check
from gatedcnn.ops import MacCounter


def make_block(seed, c_in, c_out, e, d, stride, k, q_dim=5, dtype=np.float64):
    return blk.init_gated_block(np.random.default_rng(seed), c_in, c_out, e, d, stride,
                                k, q_dim=q_dim, gate_hidden=4, dtype=dtype)


def make_inputs(seed, n, c_in, h, q_dim=5, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return (rng.normal(size=(n, c_in, h, h)).astype(dtype),
            rng.normal(size=(n, q_dim)).astype(dtype))


def run_pair(params, x, q, training=True):
    """Sparse pass and the dense masked reference on copies of the same block."""
    ps, pm = copy.deepcopy(params), copy.deepcopy(params)
    ys, ds, cs = blk.block_forward_sparse(x, q, ps, training=training)
    ym, dm, cm = blk.block_forward_masked(x, q, pm, training=training)
    return (ys, ds, cs, ps), (ym, dm, cm, pm)


class TestDenseForward:
    def test_uniform_gates_identical_groups_permutation_invariant(self):
        # identical group parameters + uniform gates: permuting groups changes nothing
        params = make_block(0, 4, 6, 4, 2, 1, k=2)
        mid_w = params.conv_conv.weight
        mid_w[...] = np.tile(mid_w[:2], (4, 1, 1, 1))
        red_w = params.conv_reduce.weight
        red_w[...] = np.tile(red_w[:2], (4, 1, 1, 1))
        exp_w = params.conv_expand.weight.reshape(6, 4, 2)
        exp_w[...] = exp_w[:, :1, :]
        params.controller.w_gate[...] = 0.0
        params.controller.b_gate[...] = -1.0  # all-negative logits: uniform fallback
        x, q = make_inputs(1, 3, 4, 6)
        y1, dec, _ = blk.block_forward_dense(x, q, copy.deepcopy(params), training=True)
        assert dec.fallback_used.all()

        perm = [2, 0, 3, 1]
        permuted = copy.deepcopy(params)
        d = params.width
        ch = np.concatenate([np.arange(g * d, (g + 1) * d) for g in perm])
        permuted.conv_reduce.weight[...] = params.conv_reduce.weight[ch]
        permuted.conv_conv.weight[...] = params.conv_conv.weight[ch]
        permuted.conv_expand.weight[...] = params.conv_expand.weight[:, ch]
        y2, _, _ = blk.block_forward_dense(x, q, permuted, training=True)
        assert np.abs(y1 - y2).max() < 1e-12

    def test_one_hot_gate_matches_zero_masked_oracle(self):
        # a one-hot gate makes the block equal to executing only that group
        params = make_block(2, 6, 8, 4, 2, 1, k=1)
        x, q = make_inputs(3, 2, 6, 5)
        # drive the gate controller to a hard one-hot on expert 2
        params.controller.w_gate[...] = 0.0
        params.controller.b_gate[...] = -100.0
        params.controller.b_gate[2] = 100.0
        y, dec, _ = blk.block_forward_dense(x, q, copy.deepcopy(params), training=True)
        assert np.allclose(dec.g_norm[:, 2], 1.0)

        # oracle: zero out all other groups' mid activations by hand
        pz = copy.deepcopy(params)
        ym, dm, _ = blk.block_forward_masked(x, q, pz, training=True, k=1)
        assert np.array_equal(dm.selected, np.full((2, 1), 2))
        assert np.abs(y - ym).max() < 1e-10

    def test_counter_counts_full_dense_work(self):
        params = make_block(4, 4, 8, 4, 2, 2, k=2)
        x, q = make_inputs(5, 3, 4, 8)
        counter = MacCounter()
        blk.block_forward_dense(x, q, copy.deepcopy(params), counter, training=False)
        mid = 8
        h1, h2 = 8, 4
        expected = 3 * (4 * mid * h1 * h1 + 9 * 2 * 2 * 4 * h2 * h2 + mid * 8 * h2 * h2
                        + 4 * 8 * h2 * h2)  # reduce, grouped mid, expand, shortcut
        assert counter.conv_macs == expected


class TestSparseDenseEquivalence:
    def test_k_equals_e_bitwise_forward(self):
        params = make_block(6, 8, 12, 4, 2, 2, k=4)
        x, q = make_inputs(7, 3, 8, 6)
        ps, pd = copy.deepcopy(params), copy.deepcopy(params)
        ys, _, _ = blk.block_forward_sparse(x, q, ps, training=True)
        yd, _, _ = blk.block_forward_dense(x, q, pd, training=True)
        assert np.array_equal(ys, yd)
        # running statistics advance identically as well
        assert np.array_equal(ps.bn_reduce.running_mean, pd.bn_reduce.running_mean)
        assert np.array_equal(ps.bn_mid.running_var, pd.bn_mid.running_var)

    @pytest.mark.parametrize("seed", range(8))
    def test_forward_matches_masked_oracle_f64(self, seed):
        rng = np.random.default_rng(1000 + seed)
        e = int(rng.choice([2, 4, 8]))
        d = int(rng.choice([1, 2, 4]))
        k = int(rng.integers(1, e + 1))
        stride = int(rng.choice([1, 2]))
        c_in, c_out = int(rng.choice([4, 8])), int(rng.choice([4, 8, 12]))
        params = make_block(seed, c_in, c_out, e, d, stride, k)
        x, q = make_inputs(seed + 50, 3, c_in, 6)
        (ys, ds, _, _), (ym, dm, _, _) = run_pair(params, x, q)
        assert np.array_equal(ds.selected, dm.selected)
        assert np.abs(ys - ym).max() <= 1e-10

    def test_forward_matches_masked_oracle_f32(self):
        params = make_block(8, 8, 8, 4, 2, 1, k=2, dtype=np.float32)
        x, q = make_inputs(9, 4, 8, 6, dtype=np.float32)
        (ys, _, _, _), (ym, _, _, _) = run_pair(params, x, q)
        assert np.abs(ys - ym).max() <= 1e-5

    def test_backward_matches_masked_oracle(self):
        params = make_block(10, 6, 10, 4, 2, 2, k=2)
        x, q = make_inputs(11, 3, 6, 6)
        (ys, ds, cs, _), (ym, dm, cm, _) = run_pair(params, x, q)
        gy = np.random.default_rng(12).normal(size=ys.shape)
        gxs, gqs, gs = blk.block_backward_sparse(gy, cs)
        gxm, gqm, gm = blk.block_backward_reference(gy, cm)
        assert set(gs) == set(gm)
        assert np.abs(gxs - gxm).max() <= 1e-10
        assert np.abs(gqs - gqm).max() <= 1e-10
        for name in gs:
            assert np.abs(gs[name] - gm[name]).max() <= 1e-10, name

    def test_unselected_groups_zero_gradient(self):
        params = make_block(13, 4, 8, 8, 2, 1, k=2)
        x, q = make_inputs(14, 4, 4, 5)
        ys, dec, cache = blk.block_forward_sparse(x, q, copy.deepcopy(params), training=True)
        never = sorted(set(range(8)) - set(dec.selected.ravel().tolist()))
        assert never, "test needs at least one never-selected expert"
        gy = np.random.default_rng(15).normal(size=ys.shape)
        _, _, grads = blk.block_backward_sparse(gy, cache)
        d = params.width
        for e_idx in never:
            assert np.all(grads["conv_conv.weight"][e_idx * d:(e_idx + 1) * d] == 0)
            assert np.all(grads["conv_reduce.weight"][e_idx * d:(e_idx + 1) * d] == 0)
            assert np.all(grads["conv_expand.weight"][:, e_idx * d:(e_idx + 1) * d] == 0)
            assert np.all(grads["bn_reduce.gamma"][e_idx * d:(e_idx + 1) * d] == 0)

    def test_unselected_running_stats_unchanged(self):
        params = make_block(16, 4, 8, 8, 2, 1, k=2)
        params.bn_reduce.running_mean[...] = 7.0
        params.bn_mid.running_var[...] = 3.0
        x, q = make_inputs(17, 4, 4, 5)
        ps = copy.deepcopy(params)
        _, dec, _ = blk.block_forward_sparse(x, q, ps, training=True)
        never = sorted(set(range(8)) - set(dec.selected.ravel().tolist()))
        assert never
        d = params.width
        for e_idx in never:
            sl = slice(e_idx * d, (e_idx + 1) * d)
            assert np.array_equal(ps.bn_reduce.running_mean[sl],
                                  params.bn_reduce.running_mean[sl])
            assert np.array_equal(ps.bn_mid.running_var[sl], params.bn_mid.running_var[sl])
        selected_first = dec.selected[0, 0]
        assert not np.array_equal(
            ps.bn_reduce.running_mean[selected_first * d:(selected_first + 1) * d],
            params.bn_reduce.running_mean[selected_first * d:(selected_first + 1) * d])

    def test_sparse_counter_matches_closed_form(self):
        # executed conv MACs: k*d*C*H1W1 + 9*d^2*k*H2W2 + k*d*C_out*H3W3 (+ shortcut)
        e, d, k, c_in, c_out, h = 8, 2, 3, 4, 8, 6
        params = make_block(18, c_in, c_out, e, d, 1, k)
        x, q = make_inputs(19, 1, c_in, h)
        counter = MacCounter()
        blk.block_forward_sparse(x, q, copy.deepcopy(params), counter, training=False)
        closed = k * d * c_in * h * h + 9 * d * d * k * h * h + k * d * c_out * h * h
        shortcut = c_in * c_out * h * h
        assert counter.conv_macs == closed + shortcut

    def test_counter_affine_and_monotone_in_k(self):
        e, d = 8, 2
        params = make_block(20, 4, 8, e, d, 1, k=1)
        x, q = make_inputs(21, 2, 4, 6)
        counts = []
        for k in range(1, e + 1):
            counter = MacCounter()
            blk.block_forward_sparse(x, q, copy.deepcopy(params), counter,
                                     training=False, k=k)
            counts.append(counter.conv_macs)
        diffs = np.diff(counts)
        assert np.all(diffs > 0)
        assert len(set(diffs.tolist())) == 1  # affine in k

    def test_gate_scaling_commutes_with_relu(self):
        # scaling group channels before the mid ReLU equals scaling after it
        from gatedcnn import ops
        rng = np.random.default_rng(22)
        t = rng.normal(size=(3, 8, 4, 4))
        gates = rng.random((3, 4))  # nonnegative
        scale = np.repeat(gates, 2, axis=1)[:, :, None, None]
        before, _ = ops.relu(t * scale)
        after_relu, _ = ops.relu(t)
        assert np.array_equal(before, after_relu * scale)

    def test_k_out_of_range(self):
        params = make_block(23, 4, 8, 4, 2, 1, k=4)
        x, q = make_inputs(24, 2, 4, 5)
        with pytest.raises(ValueError, match="out of range"):
            blk.block_forward_sparse(x, q, params, training=False, k=5)


class TestBlockGradients:
    def test_zero_upstream(self):
        params = make_block(25, 4, 6, 4, 1, 1, k=2)
        x, q = make_inputs(26, 2, 4, 5)
        y, _, cache = blk.block_forward_sparse(x, q, copy.deepcopy(params), training=True)
        gx, gq, grads = blk.block_backward_sparse(np.zeros_like(y), cache)
        assert np.all(gx == 0) and np.all(gq == 0)
        assert all(np.all(g == 0) for g in grads.values())

    def test_finite_difference_through_block(self):
        params = make_block(27, 8, 8, 4, 2, 1, k=2)
        x0, q0 = make_inputs(28, 2, 8, 6)
        w = np.random.default_rng(29).normal(size=(2, 8, 6, 6))

        def loss(xv):
            y, _, _ = blk.block_forward_sparse(xv.reshape(x0.shape), q0,
                                               copy.deepcopy(params), training=True)
            return (y * w).sum()

        y, _, cache = blk.block_forward_sparse(x0, q0, copy.deepcopy(params), training=True)
        gx, gq, grads = blk.block_backward_sparse(w, cache)
        assert finite_diff_check(loss, x0, gx) <= 1e-4

        def loss_q(qv):
            y, _, _ = blk.block_forward_sparse(x0, qv.reshape(q0.shape),
                                               copy.deepcopy(params), training=True)
            return (y * w).sum()

        assert finite_diff_check(loss_q, q0, gq) <= 1e-4

    def test_gathered_param_finite_difference(self):
        params = make_block(30, 6, 6, 4, 2, 2, k=2)
        x0, q0 = make_inputs(31, 2, 6, 6)
        w = np.random.default_rng(32).normal(size=(2, 6, 3, 3))
        y, _, cache = blk.block_forward_sparse(x0, q0, copy.deepcopy(params), training=True)
        _, _, grads = blk.block_backward_sparse(w, cache)

        for conv_name in ("conv_reduce", "conv_conv", "conv_expand"):
            weight = getattr(params, conv_name).weight

            def loss(flat, conv_name=conv_name):
                p2 = copy.deepcopy(params)
                getattr(p2, conv_name).weight[...] = flat.reshape(weight.shape)
                y2, _, _ = blk.block_forward_sparse(x0, q0, p2, training=True)
                return (y2 * w).sum()

            err = finite_diff_check(loss, weight, grads[f"{conv_name}.weight"])
            assert err <= 1e-4, conv_name

    def test_ungated_block_runs_and_checks(self):
        params = blk.init_gated_block(np.random.default_rng(33), 4, 8, 4, 2, 2, k=4,
                                      gated=False, dtype=np.float64)
        rng = np.random.default_rng(34)
        x = rng.normal(size=(2, 4, 6, 6))
        y, dec, cache = blk.block_forward_sparse(x, None, copy.deepcopy(params),
                                                 training=True)
        assert dec is None
        w = rng.normal(size=y.shape)

        def loss(xv):
            y2, _, _ = blk.block_forward_sparse(xv.reshape(x.shape), None,
                                                copy.deepcopy(params), training=True)
            return (y2 * w).sum()

        gx, gq, grads = blk.block_backward_sparse(w, cache)
        assert gq is None
        assert finite_diff_check(loss, x, gx) <= 1e-4
        assert not any(name.startswith("controller") for name in grads)
