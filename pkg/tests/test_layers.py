import numpy as np
import pytest

from resunetpp import autodiff as ad
from resunetpp.autodiff import Tape, Variable, grad_check
from resunetpp.errors import ShapeError, UsageError
from resunetpp.layers import (ASPPModule, AttentionGate, BatchNorm2D, Conv2DLayer,
                              ConvBNRelu, ResBlock)


def run(layer, x, mode="train", **kwargs):
    tape = Tape(grad_enabled=False)
    v = tape.leaf(np.asarray(x))
    if isinstance(layer, (BatchNorm2D, ConvBNRelu, ResBlock)):
        return layer(v, mode).value
    return layer(v, **kwargs).value


class TestBatchNorm:
    def test_two_values_normalize_to_unit(self):
        bn = BatchNorm2D(1, eps=1e-12, dtype=np.float64)
        x = np.array([1.0, 3.0]).reshape(1, 1, 1, 2)
        out = run(bn, x)
        assert np.allclose(out, [[-1.0, 1.0]], atol=1e-6)

    def test_running_stats_update(self):
        bn = BatchNorm2D(1, eps=1e-12, dtype=np.float64)
        run(bn, np.array([1.0, 3.0]).reshape(1, 1, 1, 2))
        # population stats of {1, 3}: mean 2, var 1
        assert np.isclose(bn.running_mean[0], 0.9 * 0.0 + 0.1 * 2.0)
        assert np.isclose(bn.running_var[0], 0.9 * 1.0 + 0.1 * 1.0)

    def test_already_normalized_passes_through(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 1, 8, 8))
        x = (x - x.mean()) / x.std()
        bn = BatchNorm2D(1, dtype=np.float64)
        assert np.allclose(run(bn, x.reshape(2, 1, 8, 8)), x, atol=1e-4)

    def test_eval_identity_normalization(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 3, 4, 4))
        bn = BatchNorm2D(3, dtype=np.float64)
        assert np.allclose(run(bn, x, mode="eval"), x, atol=1e-4)

    def test_train_needs_two_values(self):
        bn = BatchNorm2D(2, dtype=np.float64)
        with pytest.raises(UsageError):
            run(bn, np.zeros((1, 2, 1, 1)))

    def test_channel_mismatch(self):
        bn = BatchNorm2D(2, dtype=np.float64)
        with pytest.raises(ShapeError):
            run(bn, np.zeros((1, 3, 2, 2)))

    def test_train_output_statistics(self):
        rng = np.random.default_rng(2)
        x = rng.normal(2.0, 3.0, size=(4, 3, 8, 8)).astype(np.float32)
        bn = BatchNorm2D(3)
        out = run(bn, x)
        for c in range(3):
            assert abs(out[:, c].mean()) < 1e-5
            assert abs(out[:, c].var() - 1.0) < 1e-3


class TestConvBNRelu:
    def test_non_negative_and_shape_preserved(self):
        layer = ConvBNRelu(3, 5, rng=np.random.default_rng(0))
        out = run(layer, np.random.default_rng(1).normal(size=(2, 3, 8, 8)).astype(np.float32))
        assert out.shape == (2, 5, 8, 8)
        assert out.min() >= 0.0

    def test_large_beta_disables_relu(self):
        layer = ConvBNRelu(2, 3, rng=np.random.default_rng(0), dtype=np.float64)
        layer.bn.beta.value = np.full(3, 100.0)
        x = np.random.default_rng(1).normal(size=(2, 2, 6, 6))
        out = run(layer, x)
        # compose the two sub-layer oracles: relu is inactive at beta=100
        tape = Tape(grad_enabled=False)
        bn_out = layer.bn(layer.conv(tape.leaf(x)), "train").value
        assert out.min() > 0.0
        assert np.array_equal(out, bn_out)


class TestResBlock:
    def test_zero_residual_path_is_relu_of_input(self):
        block = ResBlock(3, 3, rng=np.random.default_rng(0), dtype=np.float64)
        block.conv1.weight.value = np.zeros_like(block.conv1.weight.value)
        block.conv2.weight.value = np.zeros_like(block.conv2.weight.value)
        x = np.random.default_rng(1).normal(size=(2, 3, 4, 4))
        assert np.array_equal(run(block, x), np.maximum(x, 0.0))

    def test_output_shape(self):
        block = ResBlock(2, 6, rng=np.random.default_rng(0))
        out = run(block, np.random.default_rng(1).normal(size=(3, 2, 8, 8)).astype(np.float32))
        assert out.shape == (3, 6, 8, 8)

    def test_identity_shortcut_has_no_projection(self):
        assert ResBlock(4, 4, rng=np.random.default_rng(0)).shortcut is None
        assert ResBlock(4, 8, rng=np.random.default_rng(0)).shortcut is not None

    @pytest.mark.parametrize("seed", range(3))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        block = ResBlock(2, 2, rng=rng, dtype=np.float64)
        x = Variable(rng.uniform(-1, 1, (1, 2, 4, 4)), requires_grad=True)
        r = np.random.default_rng(99).uniform(0.5, 1.5, (1, 2, 4, 4))

        def f():
            tape = Tape()
            tape.attach(x)
            out = block(x, "train")
            return ad.reduce_sum(ad.square(ad.mul(out, ad.constant(tape, r))))

        worst = max(grad_check(f, v) for v in
                    [x] + [var for _, var in block.parameters()])
        assert worst < 1e-4


class TestASPP:
    def test_spatial_dims_preserved(self):
        for dilations in ((1,), (1, 2), (1, 2, 4)):
            aspp = ASPPModule(2, 3, dilations, rng=np.random.default_rng(0))
            out = run(aspp, np.random.default_rng(1).normal(size=(1, 2, 8, 8)).astype(np.float32))
            assert out.shape == (1, 3, 8, 8)

    def test_identical_branches_average_to_single_branch(self):
        aspp = ASPPModule(2, 3, (1, 1, 1, 1), rng=np.random.default_rng(0),
                          dtype=np.float64)
        for branch in aspp.branches[1:]:
            branch.weight.value = aspp.branches[0].weight.value.copy()
            branch.bias.value = aspp.branches[0].bias.value.copy()
        # fuse averages the four identical branch blocks, ignores the 1x1 branch
        fuse_w = np.zeros_like(aspp.fuse.weight.value)
        for c in range(3):
            for k in range(4):
                fuse_w[c, 3 * k + c, 0, 0] = 0.25
        aspp.fuse.weight.value = fuse_w
        aspp.fuse.bias.value = np.zeros_like(aspp.fuse.bias.value)

        x = np.random.default_rng(1).normal(size=(1, 2, 6, 6))
        expected = run(aspp.branches[0], x)
        assert np.allclose(run(aspp, x), expected, atol=1e-12)

    def test_dilated_branch_reproduces_conv_oracle(self):
        aspp = ASPPModule(1, 1, (2,), rng=np.random.default_rng(0), dtype=np.float64)
        branch = aspp.branches[0]
        branch.weight.value = np.ones_like(branch.weight.value)
        branch.bias.value = np.zeros_like(branch.bias.value)
        x = np.arange(1, 26, dtype=np.float64).reshape(1, 1, 5, 5)
        out = run(branch, x)
        # padding=dilation=2 keeps 5x5; the center tap sees the whole grid
        assert out.shape == (1, 1, 5, 5)
        assert out[0, 0, 2, 2] == 117.0

    @pytest.mark.parametrize("seed", range(2))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        aspp = ASPPModule(2, 2, (1, 2), rng=rng, dtype=np.float64)
        x = Variable(rng.uniform(-1, 1, (1, 2, 5, 5)), requires_grad=True)

        def f():
            tape = Tape()
            tape.attach(x)
            return ad.reduce_sum(ad.square(aspp(x)))

        worst = max(grad_check(f, v) for v in
                    [x] + [var for _, var in aspp.parameters()])
        assert worst < 1e-4


class TestAttentionGate:
    @staticmethod
    def gate_output(gate, skip, gating):
        tape = Tape(grad_enabled=False)
        return gate(tape.leaf(skip), tape.leaf(gating)).value

    def test_zero_psi_halves_skip(self):
        gate = AttentionGate(2, 3, rng=np.random.default_rng(0), dtype=np.float64)
        gate.psi.weight.value = np.zeros_like(gate.psi.weight.value)
        gate.psi.bias.value = np.zeros_like(gate.psi.bias.value)
        rng = np.random.default_rng(1)
        skip = rng.normal(size=(2, 2, 4, 4))
        gating = rng.normal(size=(2, 3, 4, 4))
        assert np.allclose(self.gate_output(gate, skip, gating), 0.5 * skip)

    def test_saturated_psi_passes_skip_through(self):
        gate = AttentionGate(2, 3, rng=np.random.default_rng(0), dtype=np.float64)
        gate.psi.bias.value = np.full(1, 100.0)
        rng = np.random.default_rng(1)
        skip = rng.normal(size=(1, 2, 4, 4))
        gating = rng.normal(size=(1, 3, 4, 4))
        assert np.allclose(self.gate_output(gate, skip, gating), skip, atol=1e-12)

    def test_attenuates_non_negative_skip(self):
        gate = AttentionGate(2, 2, rng=np.random.default_rng(3), dtype=np.float64)
        rng = np.random.default_rng(4)
        skip = np.abs(rng.normal(size=(1, 2, 5, 5)))
        gating = rng.normal(size=(1, 2, 5, 5))
        out = self.gate_output(gate, skip, gating)
        assert np.all(np.abs(out) <= np.abs(skip))

    def test_alpha_strictly_inside_unit_interval(self):
        # at scales where sigmoid doesn't round to exactly 0.0/1.0
        gate = AttentionGate(2, 2, rng=np.random.default_rng(5), dtype=np.float64)
        rng = np.random.default_rng(6)
        skip = rng.normal(size=(1, 2, 4, 4)) * 5.0
        gating = rng.normal(size=(1, 2, 4, 4)) * 5.0
        tape = Tape(grad_enabled=False)
        sv, gv = tape.leaf(skip), tape.leaf(gating)
        mix = ad.relu(ad.add(gate.w_gate(gv), gate.w_skip(sv)))
        alpha = ad.sigmoid(gate.psi(mix)).value
        assert np.all(alpha > 0.0) and np.all(alpha < 1.0)
        assert alpha.shape == (1, 1, 4, 4)

    def test_spatial_mismatch_rejected(self):
        gate = AttentionGate(2, 2, rng=np.random.default_rng(0))
        tape = Tape(grad_enabled=False)
        with pytest.raises(ShapeError):
            gate(tape.leaf(np.zeros((1, 2, 4, 4), np.float32)),
                 tape.leaf(np.zeros((1, 2, 8, 8), np.float32)))

    @pytest.mark.parametrize("seed", range(2))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        gate = AttentionGate(2, 3, rng=rng, dtype=np.float64)
        skip = Variable(rng.uniform(-1, 1, (1, 2, 4, 4)), requires_grad=True)
        gating = Variable(rng.uniform(-1, 1, (1, 3, 4, 4)), requires_grad=True)

        def f():
            tape = Tape()
            tape.attach(skip)
            tape.attach(gating)
            return ad.reduce_sum(ad.square(gate(skip, gating)))

        targets = [skip, gating] + [var for _, var in gate.parameters()]
        assert max(grad_check(f, v) for v in targets) < 1e-4


class TestBatchDimension:
    def test_every_layer_preserves_batch(self):
        rng = np.random.default_rng(0)
        n = 3
        x = rng.normal(size=(n, 2, 8, 8)).astype(np.float32)
        layers = [
            (Conv2DLayer(2, 4, 3, padding=1, rng=rng), {}),
            (BatchNorm2D(2), {"mode": "train"}),
            (ConvBNRelu(2, 4, rng=rng), {"mode": "train"}),
            (ResBlock(2, 4, rng=rng), {"mode": "train"}),
            (ASPPModule(2, 4, rng=rng), {}),
        ]
        for layer, kwargs in layers:
            tape = Tape(grad_enabled=False)
            v = tape.leaf(x)
            out = layer(v, kwargs["mode"]) if "mode" in kwargs else layer(v)
            assert out.value.shape[0] == n
