import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from thinmask.core import BBox, BinaryMask, Instance
from thinmask.gradcheck import random_trial, run_gradcheck
from thinmask.loss import (
    DifferentiableLoss,
    balanced_handle,
    balanced_mask_grad,
    balanced_mask_loss,
    dice_grad,
    dice_handle,
    dice_loss,
    grad_check,
    pixel_weights,
    to_logit_grad,
    wbce_handle,
    weighted_bce,
    weighted_bce_grad,
)

ONE_OF_FOUR = BinaryMask(np.array([[1, 0], [0, 0]]))


def quarter_instance():
    """2x2 grid, one foreground pixel, box = whole grid, so rho = 0.25."""
    return Instance(0, BBox(0, 0, 2, 2), ONE_OF_FOUR)


def numeric_grad(f, p, h=1e-6):
    # scalar-at-a-time oracle, independent of the batched central_difference
    p = np.array(p, dtype=float)
    g = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        up, dn = p.copy(), p.copy()
        up[idx] += h
        dn[idx] -= h
        g[idx] = (f(up) - f(dn)) / (2 * h)
    return g


grids = st.tuples(st.integers(1, 6), st.integers(1, 6))


@st.composite
def pairs(draw):
    shape = draw(grids)
    y = draw(arrays(np.bool_, shape))
    p = draw(arrays(np.float64, shape, elements=st.floats(0, 1)))
    return p, BinaryMask(y)


class TestDice:
    def test_perfect(self):
        y = BinaryMask(np.array([[1, 0, 1], [0, 1, 1]]))
        assert dice_loss(y.bits.astype(float), y) == 0.0

    def test_empty_empty(self):
        assert dice_loss(np.zeros((3, 3)), BinaryMask.zeros(3, 3)) == 0.0

    def test_half_fixture(self):
        # sum(py) = 0.5, sum(p^2) = 1, sum(y^2) = 1 -> 1 - 2/3
        assert dice_loss(np.full((2, 2), 0.5), ONE_OF_FOUR, 1.0) == pytest.approx(1 / 3, abs=1e-15)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError, match="dimension mismatch"):
            dice_loss(np.zeros((2, 3)), ONE_OF_FOUR)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            dice_loss(np.full((2, 2), 1.5), ONE_OF_FOUR)

    @given(pairs())
    def test_bounded(self, pair):
        p, y = pair
        assert 0.0 <= dice_loss(p, y) <= 1.0 + 1e-15

    @given(pairs())
    def test_symmetric_under_swap(self, pair):
        p, y = pair
        # both arguments as real grids: swap a binary p into the target slot
        pb = (p > 0.5)
        lhs = dice_loss(pb.astype(float), y)
        rhs = dice_loss(y.bits.astype(float), BinaryMask(pb))
        assert lhs == pytest.approx(rhs, abs=1e-14)


class TestDiceGrad:
    def test_zero_zero(self):
        assert not np.any(dice_grad(np.zeros((3, 3)), BinaryMask.zeros(3, 3)))

    def test_single_pixel(self):
        # N = 2, D = 2.25 -> -(2*2.25 - 2*1)/2.25^2
        g = dice_grad(np.array([[0.5]]), BinaryMask(np.array([[1]])), 1.0)
        assert g[0, 0] == pytest.approx(-(2 * 2.25 - 2 * 1) / 2.25**2, abs=1e-15)
        assert g[0, 0] == pytest.approx(-0.4938, abs=1e-4)

    @given(pairs())
    @settings(max_examples=50)
    def test_matches_scalar_oracle(self, pair):
        p, y = pair
        num = numeric_grad(lambda q: dice_loss(np.clip(q, 0, 1), y), np.clip(p, 1e-5, 1 - 1e-5))
        ana = dice_grad(np.clip(p, 1e-5, 1 - 1e-5), y)
        np.testing.assert_allclose(ana, num, rtol=1e-5, atol=1e-7)


class TestPixelWeights:
    def test_background_is_one(self):
        w = pixel_weights(ONE_OF_FOUR, 40.0, 1.0)
        assert w[0, 1] == 1.0 and w[1, 1] == 1.0

    def test_ratio_ten(self):
        assert pixel_weights(ONE_OF_FOUR, 10.0, 1.0)[0, 0] == 5.0

    def test_ratio_two_boundary(self):
        assert pixel_weights(ONE_OF_FOUR, 2.0, 1.0)[0, 0] == 1.0

    def test_empty_target(self):
        with pytest.raises(ValueError, match="weights undefined for empty target"):
            pixel_weights(BinaryMask.zeros(2, 2), 4.0, 0)

    @given(arrays(np.bool_, grids), st.integers(1, 10_000))
    def test_foreground_sum_identity(self, bits, extra):
        y = BinaryMask(bits)
        assume(y.area() > 0)
        s_mask = y.area()
        s_bbox = float(s_mask + extra)
        w = pixel_weights(y, s_bbox, s_mask)
        assert math.isclose(w[bits].sum(), max(s_mask, 0.5 * s_bbox), rel_tol=1e-12)
        assert np.all(w[~bits] == 1.0)
        assert len(np.unique(w[bits])) == 1 and w[bits][0] >= 1.0

    def test_foreground_mass_invariant_to_thinness(self):
        # same box, thinner and thinner masks: fg weight sum stays 0.5 * S_bbox
        for k in (1, 2, 5, 10):
            bits = np.zeros((20, 20), dtype=bool)
            bits[0, :k] = True
            w = pixel_weights(BinaryMask(bits), 400.0, k)
            assert w[bits].sum() == pytest.approx(200.0, rel=1e-12)
            assert w[~bits].sum() == 400 - k


class TestWeightedBCE:
    def test_perfect(self):
        y = BinaryMask(np.array([[1, 0], [0, 1]]))
        clamp = 1e-7
        v = weighted_bce(y.bits.astype(float), y, None, clamp)
        assert v == pytest.approx(-4 * math.log1p(-clamp), rel=1e-6)

    def test_half(self):
        v = weighted_bce(np.array([[0.5]]), BinaryMask(np.array([[1]])), np.ones((1, 1)))
        assert abs(v - math.log(2)) <= 1e-12

    @given(pairs())
    def test_unit_weights_equal_plain(self, pair):
        p, y = pair
        assert weighted_bce(p, y, np.ones(y.shape)) == weighted_bce(p, y)

    @given(pairs())
    def test_non_negative(self, pair):
        p, y = pair
        assert weighted_bce(p, y) >= 0.0

    @given(pairs(), st.floats(0.05, 0.95))
    def test_decreases_toward_target(self, pair, step):
        p, y = pair
        p = np.clip(p, 0.01, 0.99)
        i = (0, 0)
        target = float(y.bits[i])
        moved = p.copy()
        moved[i] = p[i] + step * (target - p[i])
        assume(abs(moved[i] - p[i]) > 1e-9)
        assert weighted_bce(moved, y) < weighted_bce(p, y)

    def test_normalize_divides(self):
        p = np.full((2, 2), 0.3)
        assert weighted_bce(p, ONE_OF_FOUR, normalize=True) == pytest.approx(weighted_bce(p, ONE_OF_FOUR) / 4)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            weighted_bce(np.zeros((1, 2)), ONE_OF_FOUR)


class TestWeightedBCEGrad:
    def test_half(self):
        g = weighted_bce_grad(np.array([[0.5]]), BinaryMask(np.array([[1]])), np.ones((1, 1)))
        assert g[0, 0] == -2.0

    def test_clamped_binary(self):
        y = BinaryMask(np.array([[1, 0], [0, 1]]))
        assert not np.any(weighted_bce_grad(y.bits.astype(float), y))

    @given(pairs())
    @settings(max_examples=50)
    def test_matches_scalar_oracle(self, pair):
        p, y = pair
        p = np.clip(p, 0.01, 0.99)
        w = np.where(y.bits, 3.0, 1.0)
        num = numeric_grad(lambda q: weighted_bce(q, y, w), p)
        np.testing.assert_allclose(weighted_bce_grad(p, y, w), num, rtol=1e-5)


class TestBalanced:
    def test_perfect(self):
        inst = Instance.from_mask(0, BinaryMask(np.array([[1, 1], [1, 0]])))
        assert balanced_mask_loss(inst.mask.bits.astype(float), inst).total == pytest.approx(0, abs=1e-5)

    def test_lambda_zero(self):
        inst = quarter_instance()
        p = np.array([[0.2, 0.7], [0.4, 0.9]])
        brk = balanced_mask_loss(p, inst, lam=0.0)
        assert brk.total == dice_loss(p, inst.mask)

    def test_quarter_fixture(self):
        # rho = 0.25 -> fg weight max(1, 0.5*4/1) = 2
        # wbce = -(2 ln 0.5 + 3 ln 0.5) = 5 ln 2; dice = 1/3
        brk = balanced_mask_loss(np.full((2, 2), 0.5), quarter_instance())
        assert brk.dice == pytest.approx(1 / 3, abs=1e-15)
        assert brk.wbce == pytest.approx(5 * math.log(2), abs=1e-12)
        assert brk.total == pytest.approx(1 / 3 + 5 * math.log(2), abs=1e-12)
        assert brk.total == brk.dice + 1.0 * brk.wbce

    @given(pairs(), st.floats(0, 3))
    def test_total_identity(self, pair, lam):
        p, y = pair
        assume(y.area() > 0)
        inst = Instance(0, BBox(0, 0, y.width, y.height), y)
        brk = balanced_mask_loss(p, inst, lam=lam)
        assert brk.total == brk.dice + lam * brk.wbce

    def test_blob_weights_are_plain(self):
        inst = Instance.from_mask(0, BinaryMask(np.ones((3, 3))))
        p = np.full((3, 3), 0.4)
        assert balanced_mask_loss(p, inst).wbce == weighted_bce(p, inst.mask)

    def test_grad_sum_of_parts(self):
        inst = quarter_instance()
        p = np.array([[0.2, 0.7], [0.4, 0.9]])
        w = pixel_weights(inst.mask, 4.0, 1)
        expected = dice_grad(p, inst.mask) + weighted_bce_grad(p, inst.mask, w)
        np.testing.assert_array_equal(balanced_mask_grad(p, inst), expected)

    def test_logit_chain(self):
        z = np.array([[0.3, -1.2]])
        p = 1 / (1 + np.exp(-z))
        y = BinaryMask(np.array([[1, 0]]))
        f = lambda zz: weighted_bce(1 / (1 + np.exp(-zz)), y)
        num = numeric_grad(f, z)
        np.testing.assert_allclose(to_logit_grad(p, weighted_bce_grad(p, y)), num, rtol=1e-6)


class TestGradCheck:
    def test_dice_random_pairs(self):
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(50):
            y = BinaryMask(rng.random((28, 28)) < rng.uniform(0.05, 0.6))
            p = rng.uniform(0.02, 0.98, (28, 28))
            worst = max(worst, grad_check(dice_handle(y), p))
        assert worst <= 1e-4

    def test_balanced_thin(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            p, inst = random_trial(rng)
            assert grad_check(balanced_handle(inst), p) <= 1e-4
            assert grad_check(wbce_handle(inst), p) <= 1e-4

    def test_constant_loss(self):
        inst = Instance(0, BBox(0, 0, 3, 3), BinaryMask(np.eye(3)))
        zero = DifferentiableLoss("zero", lambda p: np.zeros(p.shape[:-2]), lambda p: np.zeros_like(p))
        assert grad_check(zero, np.zeros((3, 3))) == 0.0
        assert grad_check(balanced_handle(inst, lam=0.0), np.full((3, 3), 0.3)) <= 1e-4

    def test_detects_wrong_gradient(self):
        rows = run_gradcheck(trials=3, corrupt=True)
        assert not any(r.passed for r in rows)

    def test_step_validation(self):
        with pytest.raises(ValueError):
            grad_check(dice_handle(ONE_OF_FOUR), np.full((2, 2), 0.5), step=0.1)

    def test_batched_matches_scalar_value(self):
        p, inst = random_trial(np.random.default_rng(3), size=12)
        h = balanced_handle(inst)
        stack = np.stack([p, np.clip(p * 0.9, 0, 1)])
        vals = h.value(stack)
        assert vals[0] == pytest.approx(balanced_mask_loss(p, inst).total, rel=1e-13)
