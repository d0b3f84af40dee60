import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tcdepth.align import (
    DegenerateTargetError,
    DepthMap,
    NormalizedDepth,
    fit_scale_shift,
    normalize_gt,
    ssimae,
    ssimae_value,
)
from tcdepth.autodiff import Tensor
from tcdepth.gradcheck import numerical_gradient, relative_error


def grid_refine_fit(d, t, rounds=40):
    """Minimize sum((a*d + b - t)^2) by repeatedly shrinking a 2-D grid around the best point."""
    a, b, span = 0.0, 0.0, 100.0
    for _ in range(rounds):
        grid = np.linspace(-span, span, 21)
        aa, bb = np.meshgrid(a + grid, b + grid, indexing="ij")
        cost = ((aa[..., None] * d + bb[..., None] - t) ** 2).sum(axis=-1)
        i, j = np.unravel_index(np.argmin(cost), cost.shape)
        a, b = aa[i, j], bb[i, j]
        span *= 0.5
    return a, b


def normalized(values):
    return normalize_gt(DepthMap.dense(np.asarray(values, dtype=float)))


class TestNormalize:
    def test_four_values(self):
        n = normalize_gt(DepthMap.dense([1.0, 2.0, 3.0, 4.0]))
        assert n.median == 2.5
        assert n.std == pytest.approx(np.sqrt(1.25))
        np.testing.assert_allclose(n.values, [-1.3416, -0.4472, 0.4472, 1.3416], atol=1e-4)

    def test_fixed_point(self):
        x = np.array([-1.0, 1.0])  # median 0, population std 1
        np.testing.assert_array_equal(normalize_gt(DepthMap.dense(x)).values, x)

    def test_constant_rejected(self):
        with pytest.raises(DegenerateTargetError):
            normalize_gt(DepthMap.dense([5.0, 5.0, 5.0]))

    def test_statistics_use_valid_pixels_only(self):
        gt = DepthMap(np.array([1.0, 2.0, 3.0, 1e6]), np.array([1, 1, 1, 0], bool))
        n = normalize_gt(gt)
        assert n.median == 2.0
        assert n.std == pytest.approx(np.std([1.0, 2.0, 3.0]))
        assert n.values[3] == 0.0

    @given(hnp.arrays(np.float64, 30, elements=st.floats(-100, 100)))
    def test_denormalize_round_trip(self, x):
        if np.std(x) < 1e-6:
            return
        n = normalize_gt(DepthMap.dense(x))
        np.testing.assert_allclose(n.denormalize(), x, rtol=0, atol=1e-12 * max(1.0, np.abs(x).max()))


class TestFit:
    def test_exact_linear(self):
        target = NormalizedDepth(np.array([2.0, 4.0, 6.0]), np.ones(3, bool), 0.0, 1.0)
        f = fit_scale_shift(np.array([1.0, 2.0, 3.0]), target)
        assert f.alpha == pytest.approx(2.0)
        assert f.beta == pytest.approx(0.0, abs=1e-12)

    def test_sign_flip(self):
        target = NormalizedDepth(np.array([1.0, 0.0]), np.ones(2, bool), 0.0, 1.0)
        f = fit_scale_shift(np.array([0.0, 1.0]), target)
        assert f.alpha == pytest.approx(-1.0)
        assert f.beta == pytest.approx(1.0)

    def test_grid_search_oracle(self, rng):
        d = rng.normal(size=100)
        gt = DepthMap.dense(0.7 * d + rng.normal(scale=0.5, size=100) + 3.0)
        n = normalize_gt(gt)
        f = fit_scale_shift(d, n)
        a, b = grid_refine_fit(d, n.values)
        assert f.alpha == pytest.approx(a, abs=1e-6)
        assert f.beta == pytest.approx(b, abs=1e-6)

    @given(st.integers(0, 2**31))
    def test_normal_equations(self, seed):
        r = np.random.default_rng(seed)
        d = r.normal(size=50)
        valid = r.uniform(size=50) < 0.8
        valid[:3] = True
        n = normalize_gt(DepthMap(r.normal(size=50), valid))
        f = fit_scale_shift(d, n)
        res = f.apply(d[valid]) - n.values[valid]
        scale = np.abs(n.values[valid]).sum() * max(1.0, np.abs(d).max())
        assert abs(res.sum()) < 1e-9 * scale
        assert abs((res * d[valid]).sum()) < 1e-9 * scale
        assert f.n_pixels == valid.sum()

    def test_constant_prediction_is_degenerate(self):
        f = fit_scale_shift(np.full(5, 2.0), normalized([1.0, 2.0, 3.0, 4.0, 5.0]))
        assert f.degenerate
        assert np.isfinite(f.alpha) and np.isfinite(f.beta)

    def test_too_few_pixels(self):
        n = normalized([1.0, 2.0, 3.0])
        with pytest.raises(DegenerateTargetError):
            fit_scale_shift(np.ones(3), n, np.array([1, 0, 0], bool))


class TestSSIMAE:
    @pytest.mark.parametrize("a,b", [(2.0, 1.0), (-0.5, 3.0), (1e-3, -7.0)])
    def test_affine_prediction_is_zero(self, a, b, rng):
        gt = DepthMap.dense(rng.uniform(0.2, 1.0, size=(8, 8)))
        assert ssimae_value(a * gt.values + b, gt) < 1e-9
        assert ssimae(a * gt.values + b, gt).item() < 1e-9

    def test_hand_computed_four_pixels(self):
        gt = DepthMap.dense([1.0, 2.0, 3.0, 4.0])
        n = np.array([-3, -1, 1, 3]) / np.sqrt(5.0)
        p = np.array([1.0, -1.0, -1.0, 1.0])  # orthogonal to constants and to n
        # var(n) = var(p) = 1, so alpha = 1/2 and beta = 0 by hand
        expected = np.mean(np.abs(0.5 * (n + p) - n))
        assert expected == pytest.approx(0.585410, abs=1e-6)
        assert ssimae_value(n + p, gt) == pytest.approx(expected, abs=1e-12)
        assert ssimae(n + p, gt).item() == pytest.approx(expected, abs=1e-12)

    def test_tensor_and_value_agree(self, rng):
        gt = DepthMap(rng.uniform(0.2, 1.0, size=(6, 6)), rng.uniform(size=(6, 6)) < 0.7)
        pred = rng.normal(size=(6, 6))
        assert ssimae(pred, gt).item() == pytest.approx(ssimae_value(pred, gt), abs=1e-14)

    def test_gradient_fd_8x8(self, rng):
        for _ in range(5):
            gt = DepthMap(rng.uniform(0.2, 1.0, size=(8, 8)), rng.uniform(size=(8, 8)) < 0.8)
            pred = rng.normal(size=(8, 8))
            t = Tensor(pred, requires_grad=True)
            ssimae(t, gt).backward()
            (num,) = numerical_gradient(lambda: ssimae_value(pred, gt), [pred])
            assert relative_error(t.grad, num).max() < 1e-6

    def test_gradient_flows_through_fit(self, rng):
        gt = DepthMap.dense(rng.uniform(0.2, 1.0, size=(5, 5)))
        pred = rng.normal(size=(5, 5))
        t = Tensor(pred, requires_grad=True)
        ssimae(t, gt).backward()
        # a detached fit would give sign(residual) * alpha / N; the full gradient differs
        f = fit_scale_shift(pred, normalize_gt(gt))
        detached = np.sign(f.apply(pred) - normalize_gt(gt).values) * f.alpha / pred.size
        assert not np.allclose(t.grad, detached)

    def test_constant_prediction_uses_ridge(self):
        gt = DepthMap.dense([1.0, 2.0, 3.0, 4.0])
        t = Tensor(np.full(4, 0.5), requires_grad=True)
        loss = ssimae(t, gt)
        loss.backward()
        assert np.isfinite(loss.item())
        assert loss.item() == pytest.approx(np.mean(np.abs(normalize_gt(gt).values)), rel=1e-6)
        assert np.all(np.isfinite(t.grad))

    @given(
        st.sampled_from([-2.0, 0.5, 3.0]),
        st.sampled_from([-1.0, 0.0, 10.0]),
        st.integers(0, 2**31),
    )
    def test_affine_invariance(self, a, b, seed):
        r = np.random.default_rng(seed)
        gt = DepthMap(r.uniform(0.1, 1.0, size=(6, 6)), r.uniform(size=(6, 6)) < 0.9)
        d = r.normal(size=(6, 6))
        assert abs(ssimae_value(a * d + b, gt) - ssimae_value(d, gt)) < 1e-9

    @given(st.integers(0, 2**31), st.floats(0.01, 100.0))
    def test_disparity_target_equivalent(self, seed, fb):
        r = np.random.default_rng(seed)
        inv_depth = r.uniform(0.2, 1.0, size=(6, 6))
        d = r.normal(size=(6, 6))
        assert abs(ssimae_value(d, DepthMap.dense(fb * inv_depth)) - ssimae_value(d, DepthMap.dense(inv_depth))) < 1e-9

    @given(st.integers(0, 2**31))
    def test_masked_pixels_ignored(self, seed):
        r = np.random.default_rng(seed)
        valid = r.uniform(size=(6, 6)) < 0.6
        valid[0, :2] = True
        values = r.uniform(0.2, 1.0, size=(6, 6))
        d = r.normal(size=(6, 6))
        base = ssimae_value(d, DepthMap(values, valid))
        values2 = np.where(valid, values, r.normal(scale=1e3, size=(6, 6)))
        d2 = np.where(valid, d, r.normal(scale=1e3, size=(6, 6)))
        assert ssimae_value(d2, DepthMap(values2, valid)) == pytest.approx(base, abs=1e-12)

    @given(st.integers(0, 2**31))
    def test_nonnegative(self, seed):
        r = np.random.default_rng(seed)
        assert ssimae_value(r.normal(size=(4, 4)), DepthMap.dense(r.normal(size=(4, 4)))) >= 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ssimae_value(np.zeros((3, 3)), DepthMap.dense(np.arange(4.0).reshape(2, 2)))
