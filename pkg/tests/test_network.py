import numpy as np
import pytest

from gatedcnn.config import layer_plan, resolve_config
from gatedcnn.network import build_network, load_checkpoint, save_checkpoint
from gatedcnn.tensor import save_named_tensors


def toy_net(seed=0, dtype=np.float64):
    return build_network(resolve_config("toy_small"), seed=seed, dtype=dtype)


def toy_batch(seed=0, n=4, dtype=np.float64):
    rng = np.random.default_rng(seed)
    images = rng.normal(size=(n, 3, 32, 32)).astype(dtype)
    questions = np.eye(4, dtype=dtype)[rng.integers(0, 4, n)]
    return images, questions


class TestBuild:
    def test_same_seed_bitwise_identical(self, tmp_path):
        a, b = toy_net(3), toy_net(3)
        for (name_a, pa), (name_b, pb) in zip(a.named_state(), b.named_state()):
            assert name_a == name_b
            assert np.array_equal(pa, pb)
        save_checkpoint(tmp_path / "a", a)
        save_checkpoint(tmp_path / "b", b)
        assert (tmp_path / "a/params.bin").read_bytes() == (tmp_path / "b/params.bin").read_bytes()

    def test_different_seed_differs(self):
        a, b = toy_net(1), toy_net(2)
        assert not np.array_equal(a.stem_conv.weight, b.stem_conv.weight)

    def test_parameter_count_matches_closed_form(self):
        cfg = resolve_config("clevr_table4")
        net = build_network(cfg)
        total = 0
        q, hd = cfg.question_dim, cfg.gate_hidden_dim
        for spec in layer_plan(cfg):
            if spec.kind == "conv":
                total += spec.c_out * spec.c_in * spec.kernel ** 2
                if spec.bn_relu:
                    total += 2 * spec.c_out
            elif spec.kind == "block":
                mid = spec.cardinality * spec.width
                total += mid * spec.c_in  # reduce
                total += mid * spec.width * 9  # grouped 3x3
                total += spec.c_out * mid  # expand
                total += 2 * (mid + mid + spec.c_out)  # the three batch-norms
                if spec.has_proj:
                    total += spec.c_out * spec.c_in + 2 * spec.c_out
                if spec.gated:
                    f = spec.c_in
                    total += hd * f + hd * q + hd  # attention projections + bias
                    total += hd + 1  # score vector + shared bias
                    total += (q * f if f != q else 0)
                    total += spec.cardinality * q + spec.cardinality  # gating mlp
            elif spec.kind == "linear":
                total += spec.d_out * spec.d_in + spec.d_out
        assert net.parameter_count() == total

    def test_grouped_conv_fan_in(self):
        # E=12, d=4 block: grouped 3x3 weight has d*9 = 36 inputs per filter
        net = build_network(resolve_config("clevr_table4"))
        w = net.blocks[0].conv_conv.weight
        assert w.shape[1] * w.shape[2] * w.shape[3] == 36


class TestForward:
    def test_dense_equals_sparse_at_full_k_bitwise(self):
        images, questions = toy_batch(5)
        net_a, net_b = toy_net(7), toy_net(7)
        la, _ = net_a.forward(images, questions, mode="dense", training=True)
        lb, _ = net_b.forward(images, questions, mode="sparse", training=True, k=8)
        assert np.array_equal(la, lb)

    def test_decision_list_matches_gated_blocks(self):
        net = toy_net()
        images, questions = toy_batch(6)
        _, decisions = net.forward(images, questions, mode="sparse")
        assert len(decisions) == len(net.gated_block_names()) == 1

    def test_batch_mismatch_rejected(self):
        net = toy_net()
        images, questions = toy_batch(7)
        with pytest.raises(ValueError, match="batch mismatch"):
            net.forward(images, questions[:2])

    def test_question_required(self):
        net = toy_net()
        images, _ = toy_batch(8)
        with pytest.raises(ValueError, match="question"):
            net.forward(images, None)

    def test_inference_does_not_mutate_state(self):
        net = toy_net(9)
        before = {name: arr.copy() for name, arr in net.named_state()}
        images, questions = toy_batch(10)
        net.forward(images, questions, mode="sparse", training=False)
        for name, arr in net.named_state():
            assert np.array_equal(arr, before[name]), name

    def test_training_updates_running_stats(self):
        net = toy_net(11)
        images, questions = toy_batch(12)
        before = net.stem_bn.running_mean.copy()
        net.forward(images, questions, mode="sparse", training=True)
        assert not np.array_equal(net.stem_bn.running_mean, before)


class TestBackward:
    def test_grads_cover_all_parameters(self):
        net = toy_net(13)
        images, questions = toy_batch(14)
        logits, _, cache = net.forward(images, questions, mode="sparse", training=True,
                                       with_cache=True)
        grads = net.backward(cache, np.ones_like(logits))
        names = {name for name, _ in net.named_parameters()}
        assert set(grads) == names
        for name, param in net.named_parameters():
            assert grads[name].shape == param.shape, name

    def test_network_finite_difference_spot(self):
        from gatedcnn.gradcheck import finite_diff_check

        cfg = resolve_config("toy_small")
        net = build_network(cfg, seed=15, dtype=np.float64)
        rng = np.random.default_rng(16)
        images = rng.normal(size=(2, 3, 8, 8))  # small spatial input keeps FD cheap
        questions = np.eye(4)[rng.integers(0, 4, 2)].astype(np.float64)
        upstream = rng.normal(size=(2, 4))

        logits, _, cache = net.forward(images, questions, mode="sparse", training=True,
                                       with_cache=True)
        grads = net.backward(cache, upstream)

        for target in ("stem.conv.weight", "head.weight", "stage0.block0.controller.w_gate"):
            ref = dict(net.named_parameters())[target]

            def loss(flat):
                net2 = build_network(cfg, seed=15, dtype=np.float64)
                dict(net2.named_parameters())[target][...] = flat.reshape(ref.shape)
                l2, _ = net2.forward(images, questions, mode="sparse", training=True)
                return (l2 * upstream).sum()

            assert finite_diff_check(loss, ref, grads[target]) <= 1e-4, target


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net = toy_net(17, dtype=np.float32)
        images, questions = toy_batch(18, dtype=np.float32)
        net.forward(images, questions, training=True)  # move running stats off init
        save_checkpoint(tmp_path / "ckpt", net)
        restored = load_checkpoint(tmp_path / "ckpt")
        assert restored.dtype == np.float32
        for (name_a, pa), (name_b, pb) in zip(net.named_state(), restored.named_state()):
            assert name_a == name_b and np.array_equal(pa, pb)
        la, _ = net.forward(images, questions, training=False)
        lb, _ = restored.forward(images, questions, training=False)
        assert np.array_equal(la, lb)

    def test_mismatched_checkpoint_rejected(self, tmp_path):
        net = toy_net(19)
        save_checkpoint(tmp_path / "ckpt", net)
        state = dict(net.named_state())
        state.pop("head.bias")
        save_named_tensors(tmp_path / "ckpt" / "params.bin", state)
        with pytest.raises(ValueError, match="does not match"):
            load_checkpoint(tmp_path / "ckpt")
