import math

import numpy as np
import pytest

from src.errors import DataError, DimensionError
from src.tensor import Tensor
from src.tensor.gradcheck import grad_check
from src.training.loss import cross_entropy_loss, dice_ce_loss, one_hot, soft_dice_loss


def _target(seed=0, shape=(2, 4, 4), num_classes=2):
    target = np.random.default_rng(seed).integers(0, num_classes, size=shape)
    target[:, 0, 0] = 0
    target[:, 0, 1] = num_classes - 1
    return target


class TestLosses:
    """Unit tests for the Dice + cross-entropy objective"""

    def test_uniform_logits_cross_entropy(self):
        """Test that equal logits give ln(K)"""
        loss = cross_entropy_loss(Tensor(np.zeros((2, 2, 4, 4))), _target())
        assert float(loss.data) == pytest.approx(math.log(2.0))

    def test_saturated_prediction(self):
        """Test that confident correct logits drive both terms to zero"""
        target = _target(1)
        logits = Tensor(one_hot(target, 2).astype(np.float64) * 40.0 - 20.0)
        assert float(cross_entropy_loss(logits, target).data) < 0.01
        assert float(dice_ce_loss(logits, target).data) < 0.01

    def test_pixel_permutation_invariance(self):
        rng = np.random.default_rng(2)
        target = _target(2)
        logits = rng.standard_normal((2, 2, 4, 4))
        perm = rng.permutation(16)
        shuffled_logits = logits.reshape(2, 2, 16)[..., perm].reshape(2, 2, 4, 4)
        shuffled_target = target.reshape(2, 16)[:, perm].reshape(2, 4, 4)
        a = float(dice_ce_loss(Tensor(logits), target).data)
        b = float(dice_ce_loss(Tensor(shuffled_logits), shuffled_target).data)
        assert a == pytest.approx(b, abs=1e-12)

    def test_dice_ce_is_equal_weight_mean(self):
        rng = np.random.default_rng(3)
        logits = Tensor(rng.standard_normal((2, 3, 4, 4)))
        target = _target(3, num_classes=3)
        combined = float(dice_ce_loss(logits, target).data)
        parts = float(soft_dice_loss(logits, target).data) + float(cross_entropy_loss(logits, target).data)
        assert combined == pytest.approx(parts / 2)

    def test_gradient(self):
        target = _target(4, num_classes=3)
        report = grad_check(lambda x: dice_ce_loss(x, target), [np.random.default_rng(4).standard_normal((2, 3, 4, 4))], h=1e-5)
        assert report.passed, report.inputs

    def test_class_out_of_range(self):
        target = _target()
        target[0, 2, 2] = 2
        with pytest.raises(DataError):
            dice_ce_loss(Tensor(np.zeros((2, 2, 4, 4))), target)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            dice_ce_loss(Tensor(np.zeros((2, 2, 4, 4))), np.zeros((2, 4, 5), dtype=np.int64))

    def test_one_hot_layout(self):
        encoded = one_hot(np.array([[[0, 2]]]), 3)
        assert encoded.shape == (1, 3, 1, 2)
        np.testing.assert_array_equal(encoded[0, :, 0, 1], [0.0, 0.0, 1.0])
