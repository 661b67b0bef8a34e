import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from metdrive.domain import ConfigurationError, Trajectory, ValidationError
from metdrive.losses import (
    GradCheckError,
    LossWeights,
    batch_mean,
    gradcheck,
    imitation_loss,
    temporal_guidance_loss,
    total_loss,
)


def traj(rng, k=8, scale=1.0):
    return Trajectory(rng.normal(size=(k, 2)) * scale)


class TestLossWeights:
    def test_negative_rejected(self):
        with pytest.raises(ConfigurationError):
            LossWeights(alpha=-0.1)

    def test_zero_sum_rejected_in_loss(self):
        rng = np.random.default_rng(0)
        t = traj(rng, 4)
        with pytest.raises(ConfigurationError, match="alpha"):
            temporal_guidance_loss(t, t, t, LossWeights(alpha=0.0, beta=0.0))


class TestTemporalGuidanceLoss:
    def test_zero_on_matching_halves(self):
        rng = np.random.default_rng(1)
        full = traj(rng, 8)
        first = Trajectory(torch.cat([full.points[:4], torch.full((4, 2), 7.0,
                                                                  dtype=torch.float64)]))
        second = Trajectory(torch.cat([torch.full((4, 2), -7.0, dtype=torch.float64),
                                       full.points[4:]]))
        w = LossWeights(alpha=0.4, beta=0.6)
        assert float(temporal_guidance_loss(first, second, full, w)) == 0.0

    def test_hand_computed_offset(self):
        # K=4, alpha=1, beta=0: both first-half points offset by (0.1, 0)
        rng = np.random.default_rng(2)
        full = traj(rng, 4)
        shifted = full.points.clone()
        shifted[:2, 0] += 0.1
        first = Trajectory(shifted)
        w = LossWeights(alpha=1.0, beta=0.0)
        val = float(temporal_guidance_loss(first, full, full, w))
        assert abs(val - 0.02) < 1e-12

    def test_weight_linearity(self):
        rng = np.random.default_rng(3)
        first, second, full = traj(rng), traj(rng), traj(rng)
        base = LossWeights(alpha=0.3, beta=0.7)
        scaled = LossWeights(alpha=0.3 * 2.5, beta=0.7 * 2.5)
        a = float(temporal_guidance_loss(first, second, full, base))
        b = float(temporal_guidance_loss(first, second, full, scaled))
        assert abs(b - 2.5 * a) <= 1e-12 * max(1.0, abs(b))

    def test_insensitive_to_non_corresponding_indices(self):
        rng = np.random.default_rng(4)
        first, second, full = traj(rng), traj(rng), traj(rng)
        w = LossWeights(alpha=0.5, beta=0.5)
        base = float(temporal_guidance_loss(first, second, full, w))
        first2 = first.points.clone()
        first2[4:] = 99.0  # beyond K/2: must not matter
        second2 = second.points.clone()
        second2[:4] = -99.0  # before K/2: must not matter
        val = float(temporal_guidance_loss(Trajectory(first2), Trajectory(second2), full, w))
        assert val == base

    def test_nonnegative_and_zero_iff_match(self):
        rng = np.random.default_rng(5)
        w = LossWeights(alpha=0.4, beta=0.6)
        for _ in range(20):
            first, second, full = traj(rng), traj(rng), traj(rng)
            val = float(temporal_guidance_loss(first, second, full, w))
            assert val >= 0.0
            matches = (torch.equal(first.points[:4], full.points[:4])
                       and torch.equal(second.points[4:], full.points[4:]))
            assert (val == 0.0) == matches

    def test_length_mismatch(self):
        rng = np.random.default_rng(6)
        with pytest.raises(ValidationError, match="lengths"):
            temporal_guidance_loss(traj(rng, 4), traj(rng, 8), traj(rng, 8), LossWeights())

    def test_differentiability(self):
        rng = np.random.default_rng(7)
        pts = torch.tensor(rng.normal(size=(4, 2)), requires_grad=True)
        full = torch.tensor(rng.normal(size=(4, 2)), requires_grad=True)
        val = temporal_guidance_loss(pts, pts.flip(0), full, LossWeights())
        val.backward()
        assert pts.grad is not None and torch.isfinite(pts.grad).all()


class TestImitationLoss:
    def test_zero_on_equal(self):
        rng = np.random.default_rng(8)
        t = traj(rng)
        assert float(imitation_loss(t, t)) == 0.0

    def test_constant_offset(self):
        rng = np.random.default_rng(9)
        gt = traj(rng)
        pred = Trajectory(gt.points + torch.tensor([1.0, 0.0], dtype=torch.float64))
        assert abs(float(imitation_loss(pred, gt)) - 1.0) < 1e-12

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(10)
        pred, gt = traj(rng, 8), traj(rng, 8)
        expect = 0.0
        p, g = pred.numpy(), gt.numpy()
        for k in range(8):
            expect += abs(p[k, 0] - g[k, 0]) + abs(p[k, 1] - g[k, 1])
        expect /= 8
        assert abs(float(imitation_loss(pred, gt)) - expect) < 1e-12


class TestTotalLoss:
    def test_lambda_zero_reduces_to_imitation(self):
        rng = np.random.default_rng(11)
        full, first, second, gt = traj(rng), traj(rng), traj(rng), traj(rng)
        w = LossWeights(alpha=0.4, beta=0.6, lambda_tg=0.0)
        assert float(total_loss(full, first, second, gt, w)) == float(imitation_loss(full, gt))

    def test_zero_when_all_equal_gt(self):
        rng = np.random.default_rng(12)
        gt = traj(rng)
        assert float(total_loss(gt, gt, gt, gt, LossWeights())) == 0.0

    def test_compositional_oracle(self):
        rng = np.random.default_rng(13)
        full, first, second, gt = traj(rng), traj(rng), traj(rng), traj(rng)
        w = LossWeights(alpha=0.3, beta=0.9, lambda_tg=0.7)
        expect = (float(imitation_loss(full, gt))
                  + 0.7 * float(temporal_guidance_loss(first, second, full, w)))
        assert abs(float(total_loss(full, first, second, gt, w)) - expect) < 1e-12


class TestBatchMean:
    @given(st.lists(st.floats(min_value=-1e6, max_value=1e6, allow_nan=False),
                    min_size=1, max_size=64),
           st.randoms(use_true_random=False))
    @settings(max_examples=60, deadline=None)
    def test_permutation_invariant(self, values, rnd):
        shuffled = list(values)
        rnd.shuffle(shuffled)
        assert batch_mean(shuffled) == batch_mean(values)

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            batch_mean([])


class TestGradcheck:
    def test_quadratic(self):
        p = torch.tensor([1.0, 2.0], dtype=torch.float64)
        err = gradcheck(lambda q: (q ** 2).sum(), [p])
        assert err < 1e-9

    def test_constant_function(self):
        p = torch.tensor([3.0], dtype=torch.float64)
        err = gradcheck(lambda q: (q * 0.0).sum(), [p])
        assert err == 0.0

    def test_non_finite_rejected(self):
        p = torch.tensor([0.0], dtype=torch.float64)
        with pytest.raises(GradCheckError):
            gradcheck(lambda q: (1.0 / q).sum(), [p])

    def test_catches_wrong_gradient(self):
        # function whose autograd path is deliberately detached half-way
        p = torch.tensor([1.5], dtype=torch.float64)

        def f(q):
            return (q ** 2).sum() + q.detach().sum() * 3.0

        err = gradcheck(f, [p])
        assert err > 1e-2
