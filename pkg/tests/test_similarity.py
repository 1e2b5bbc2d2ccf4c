import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posefix.core import InstanceContext, Pose
from posefix.similarity import ks, ks_radius, oks, oks_arrays

from oracles import oks_direct, radius

pos = st.floats(min_value=1e-2, max_value=1e3, allow_nan=False)


class TestKS:
    def test_zero_distance_is_one(self):
        assert ks(0.0, 50.0, 0.1) == 1.0

    def test_one_scaled_kappa_is_exp_half(self):
        # d = s * kappa gives exp(-1/2)
        assert ks(5.0, 50.0, 0.1) == pytest.approx(math.exp(-0.5), rel=1e-15)

    def test_vectorized(self):
        d = np.array([0.0, 5.0, 10.0])
        np.testing.assert_allclose(ks(d, 50.0, 0.1), np.exp(-(d**2) / (2 * 25.0)), rtol=1e-15)

    @pytest.mark.parametrize("d,s,k", [(-1, 1, 1), (1, 0, 1), (1, 1, 0), (float("nan"), 1, 1), (1, float("inf"), 1)])
    def test_invalid(self, d, s, k):
        with pytest.raises(ValueError):
            ks(d, s, k)

    @given(d1=st.floats(0, 1e3), d2=st.floats(0, 1e3), s=pos, k=pos)
    def test_monotone_in_distance(self, d1, d2, s, k):
        lo, hi = sorted((d1, d2))
        assert ks(lo, s, k) >= ks(hi, s, k)


class TestKSRadius:
    def test_frozen_values(self):
        # s = 100, kappa = 0.079 (COCO shoulder): radius = 7.9 * sqrt(-2 ln k)
        # reference values from 30-digit mpmath
        assert ks_radius(0.85, 100.0, 0.079) == pytest.approx(4.503955237334433, rel=1e-13)
        assert ks_radius(0.5, 100.0, 0.079) == pytest.approx(9.301539177872250, rel=1e-13)
        assert ks_radius(0.1, 100.0, 0.079) == pytest.approx(16.953131607685844, rel=1e-13)
        assert ks_radius(1.0, 100.0, 0.079) == 0.0

    def test_matches_oracle(self):
        assert ks_radius(0.5, 80.0, 2 * 0.062) == pytest.approx(radius(0.5, 80.0, 0.062), rel=1e-14)

    @pytest.mark.parametrize("k", [0.0, -0.1, 1.5, float("nan")])
    def test_invalid_level(self, k):
        with pytest.raises(ValueError):
            ks_radius(k, 10.0, 0.1)

    @given(k=st.floats(1e-6, 1.0), s=pos, kap=pos)
    def test_inverse(self, k, s, kap):
        assert ks(ks_radius(k, s, kap), s, kap) == pytest.approx(k, rel=1e-10)


class TestOKS:
    def test_identity_is_one(self, spec):
        p = Pose.from_arrays(np.random.default_rng(0).random((17, 2)) * 100, 2)
        assert oks(p, p, InstanceContext(p, (), 30.0), spec) == (1.0, False)

    def test_degenerate_when_nothing_labeled(self, spec):
        p = Pose.from_arrays(np.zeros((17, 2)), 0)
        assert oks(p, p, InstanceContext(p, (), 30.0), spec) == (0.0, True)

    def test_length_mismatch(self, spec):
        p = Pose.from_arrays(np.zeros((17, 2)), 2)
        with pytest.raises(ValueError):
            oks(Pose.from_arrays(np.zeros((3, 2)), 2), p, InstanceContext(p, (), 1.0), spec)

    def test_only_labeled_joints_count(self, spec):
        gt_xy = np.zeros((17, 2))
        vis = np.zeros(17, dtype=int)
        vis[[0, 5]] = 2
        est = gt_xy.copy()
        est[1] = [500, 500]  # unlabeled joint, ignored
        est[5] = [spec.kappa[5] * 40, 0]  # exp(-1/2)
        v, deg = oks_arrays(est, gt_xy, vis > 0, 40.0, spec.kappa_array)
        assert not deg
        assert v == pytest.approx((1 + math.exp(-0.5)) / 2, rel=1e-14)

    @settings(max_examples=200)
    @given(seed=st.integers(0, 2**32 - 1), s=st.floats(1.0, 500.0))
    def test_matches_direct_formula(self, spec, seed, s):
        rng = np.random.default_rng(seed)
        gt = rng.uniform(0, 400, (17, 2))
        est = gt + rng.normal(0, s * 0.1, (17, 2))
        vis = rng.random(17) < 0.8
        vis[0] = True
        v, _ = oks_arrays(est, gt, vis, s, spec.kappa_array)
        assert abs(v - oks_direct(est.tolist(), gt.tolist(), vis.tolist(), s * s)) < 1e-12
