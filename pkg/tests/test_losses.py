import math

import numpy as np
import pytest

from edgeattnet import tensor as T
from edgeattnet.losses import bce_with_logits, dice_loss, total_loss
from edgeattnet.tensor import Tensor

from conftest import check_grads


def test_bce_zero_logits_is_ln2(rng):
    z = Tensor(np.zeros((2, 1, 3, 3)))
    t = Tensor((rng.random((2, 1, 3, 3)) > 0.5).astype(float))
    assert abs(bce_with_logits(z, t).item() - math.log(2.0)) < 1e-12


def test_bce_saturated_correct_prediction():
    z = Tensor(np.full((1, 1, 2, 2), 20.0))
    t = Tensor(np.ones((1, 1, 2, 2)))
    assert bce_with_logits(z, t).item() < 1e-8


def test_bce_matches_naive_formula(rng):
    z = Tensor(rng.standard_normal((4, 4)) * 3.0)
    t = Tensor((rng.random((4, 4)) > 0.5).astype(float))
    sig = 1.0 / (1.0 + np.exp(-z.data))
    naive = -(t.data * np.log(sig) + (1.0 - t.data) * np.log(1.0 - sig)).mean()
    assert abs(bce_with_logits(z, t).item() - naive) < 1e-10


def test_bce_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        bce_with_logits(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))


def test_dice_perfect_overlap_near_zero():
    z = Tensor(np.full((1, 1, 4, 4), 20.0))
    t = Tensor(np.ones((1, 1, 4, 4)))
    assert dice_loss(z, t).item() < 1e-6


def test_dice_empty_case_saved_by_smoothing():
    z = Tensor(np.full((1, 1, 4, 4), -40.0))  # sigmoid ~ 0
    t = Tensor(np.zeros((1, 1, 4, 4)))
    assert abs(dice_loss(z, t).item()) < 1e-12


def test_dice_hand_worked_case():
    # p = 0.5 uniform on 2x2, one target pixel: 1 - (2*0.5 + 1)/(2 + 1 + 1) = 0.5
    z = Tensor(np.zeros((2, 2)))
    t = Tensor(np.array([[1.0, 0.0], [0.0, 0.0]]))
    assert abs(dice_loss(z, t).item() - 0.5) < 1e-12


def test_losses_nonnegative_and_dice_in_unit_interval(rng):
    for _ in range(20):
        z = Tensor(rng.standard_normal((1, 1, 4, 4)) * 5.0)
        t = Tensor((rng.random((1, 1, 4, 4)) > 0.5).astype(float))
        b = bce_with_logits(z, t).item()
        d = dice_loss(z, t).item()
        assert b >= 0.0
        assert 0.0 <= d <= 1.0


def test_total_is_exact_sum(rng):
    z = Tensor(rng.standard_normal((1, 1, 4, 4)))
    t = Tensor((rng.random((1, 1, 4, 4)) > 0.5).astype(float))
    lv = total_loss(z, t)
    assert lv.total.item() == lv.bce.item() + lv.dice.item()


def test_loss_gradients_match_finite_differences(rng):
    z = Tensor(rng.standard_normal((2, 1, 3, 3)) * 2.0, requires_grad=True)
    t = Tensor((rng.random((2, 1, 3, 3)) > 0.5).astype(float))

    def build_bce():
        return bce_with_logits(z, t)

    check_grads(build_bce, [z], tol=1e-5)
    z.zero_grad()

    def build_dice():
        return dice_loss(z, t)

    check_grads(build_dice, [z], tol=1e-5)


def test_loss_invariant_under_joint_spatial_permutation(rng):
    z = rng.standard_normal((1, 1, 4, 4))
    t = (rng.random((1, 1, 4, 4)) > 0.5).astype(float)
    perm = rng.permutation(16)
    zp = z.reshape(-1)[perm].reshape(z.shape)
    tp = t.reshape(-1)[perm].reshape(t.shape)
    lv = total_loss(Tensor(z), Tensor(t))
    lvp = total_loss(Tensor(zp), Tensor(tp))
    assert abs(lv.total.item() - lvp.total.item()) < 1e-12
