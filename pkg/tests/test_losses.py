import numpy as np
import pytest

from resunetpp.autodiff import Tape, Variable, grad_check
from resunetpp.errors import ShapeError, ValidationError
from resunetpp.losses import (LossConfig, binarize, dice_coefficient, jaccard_index,
                              jaccard_loss, pixel_accuracy, soft_jaccard_index)


def loss_value(pred, target, cfg=LossConfig()):
    tape = Tape(grad_enabled=False)
    return jaccard_loss(tape.leaf(np.asarray(pred, np.float64)), target, cfg).value.item()


class TestJaccardLoss:
    def test_perfect_overlap_is_zero(self):
        ones = np.ones((2, 2))
        assert loss_value(ones, ones) == 0.0

    def test_half_overlap(self):
        # intersection 1, union 3
        pred = np.array([1.0, 1.0, 0.0, 0.0])
        target = np.array([1.0, 0.0, 1.0, 0.0])
        assert abs(loss_value(pred, target) - (1.0 - 1.0 / 3.0)) < 1e-6

    def test_empty_vs_empty_is_zero(self):
        zeros = np.zeros((3, 3))
        assert loss_value(zeros, zeros) == 0.0

    def test_non_binary_target_rejected(self):
        tape = Tape()
        pred = tape.leaf(np.full((2, 2), 0.5))
        with pytest.raises(ValidationError):
            jaccard_loss(pred, np.full((2, 2), 0.5))

    def test_shape_mismatch_rejected(self):
        tape = Tape()
        with pytest.raises(ShapeError):
            jaccard_loss(tape.leaf(np.zeros((2, 2))), np.zeros((2, 3)))

    @pytest.mark.parametrize("seed", range(10))
    def test_complements_soft_index_exactly(self, seed):
        rng = np.random.default_rng(seed)
        pred = rng.uniform(0, 1, (2, 1, 5, 5))
        target = (rng.uniform(0, 1, (2, 1, 5, 5)) > 0.4).astype(np.float64)
        assert abs(loss_value(pred, target)
                   - (1.0 - soft_jaccard_index(pred, target))) < 1e-12

    def test_symmetric_under_joint_pixel_permutation(self):
        rng = np.random.default_rng(1)
        pred = rng.uniform(0, 1, 24)
        target = (rng.uniform(0, 1, 24) > 0.5).astype(np.float64)
        perm = rng.permutation(24)
        # summation order differs, so allow rounding at the last ulp
        assert abs(loss_value(pred, target)
                   - loss_value(pred[perm], target[perm])) < 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_monotonicity(self, seed):
        rng = np.random.default_rng(seed)
        pred = rng.uniform(0.1, 0.9, 16)
        target = (rng.uniform(0, 1, 16) > 0.5).astype(np.float64)
        base = loss_value(pred, target)
        for i in range(16):
            bumped = pred.copy()
            bumped[i] = min(1.0, bumped[i] + 0.05)
            if target[i] == 1.0:
                assert loss_value(bumped, target) <= base + 1e-12
            else:
                assert loss_value(bumped, target) >= base - 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        pred = Variable(rng.uniform(0.1, 0.9, (1, 1, 4, 4)), requires_grad=True)
        target = (rng.uniform(0, 1, (1, 1, 4, 4)) > 0.5).astype(np.float64)

        def f():
            tape = Tape()
            tape.attach(pred)
            return jaccard_loss(pred, target)

        assert grad_check(f, pred) < 1e-6

    def test_per_sample_mode_averages(self):
        rng = np.random.default_rng(0)
        pred = rng.uniform(0, 1, (2, 1, 4, 4))
        target = (rng.uniform(0, 1, (2, 1, 4, 4)) > 0.5).astype(np.float64)
        cfg = LossConfig(per_sample=True)
        joint = loss_value(pred, target, cfg)
        individual = [loss_value(pred[i:i + 1], target[i:i + 1]) for i in range(2)]
        assert abs(joint - np.mean(individual)) < 1e-12

    def test_bounded_in_unit_interval(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            pred = rng.uniform(0, 1, 30)
            target = (rng.uniform(0, 1, 30) > rng.uniform(0.1, 0.9)).astype(np.float64)
            assert 0.0 <= loss_value(pred, target) <= 1.0


class TestLossConfig:
    def test_bad_eps(self):
        with pytest.raises(ValidationError):
            LossConfig(smooth_eps=0.0)

    def test_bad_threshold(self):
        with pytest.raises(ValidationError):
            LossConfig(binarize_threshold=1.0)


class TestBinarize:
    def test_strictly_greater(self):
        out = binarize(np.array([0.4, 0.5, 0.6]), 0.5)
        assert np.array_equal(out, [0.0, 0.0, 1.0])


class TestJaccardIndex:
    def test_identical_masks(self):
        m = np.array([[1.0, 0.0], [1.0, 1.0]])
        assert jaccard_index(m, m) == 1.0

    def test_disjoint_masks(self):
        assert jaccard_index(np.array([1.0, 1.0, 0.0, 0.0]),
                             np.array([0.0, 0.0, 1.0, 1.0])) == 0.0

    def test_three_of_four_plus_false_positive(self):
        pred = np.array([1.0, 1.0, 1.0, 0.0, 1.0])
        target = np.array([1.0, 1.0, 1.0, 1.0, 0.0])
        assert jaccard_index(pred, target) == 0.6

    def test_empty_vs_empty(self):
        z = np.zeros(4)
        assert jaccard_index(z, z) == 1.0

    def test_non_binary_rejected(self):
        with pytest.raises(ValidationError):
            jaccard_index(np.array([0.5]), np.array([1.0]))


class TestDice:
    def test_identical(self):
        m = np.array([1.0, 0.0, 1.0])
        assert dice_coefficient(m, m) == 1.0

    def test_disjoint(self):
        assert dice_coefficient(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_relates_to_jaccard(self):
        # the 3-of-4 + 1 FP pair has J = 0.6, so D = 2J/(1+J) = 0.75
        pred = np.array([1.0, 1.0, 1.0, 0.0, 1.0])
        target = np.array([1.0, 1.0, 1.0, 1.0, 0.0])
        assert dice_coefficient(pred, target) == 0.75

    @pytest.mark.parametrize("seed", range(20))
    def test_dice_jaccard_identity(self, seed):
        rng = np.random.default_rng(seed)
        a = (rng.uniform(0, 1, 40) > rng.uniform(0.2, 0.8)).astype(np.float64)
        b = (rng.uniform(0, 1, 40) > rng.uniform(0.2, 0.8)).astype(np.float64)
        j = jaccard_index(a, b)
        assert abs(dice_coefficient(a, b) - 2.0 * j / (1.0 + j)) < 1e-12


class TestPixelAccuracy:
    def test_identical(self):
        m = np.array([1.0, 0.0, 1.0, 0.0])
        assert pixel_accuracy(m, m) == 1.0

    def test_complement(self):
        m = np.array([1.0, 0.0, 1.0, 0.0])
        assert pixel_accuracy(m, 1.0 - m) == 0.0

    def test_three_of_four(self):
        assert pixel_accuracy(np.array([1.0, 1.0, 0.0, 0.0]),
                              np.array([1.0, 1.0, 0.0, 1.0])) == 0.75
