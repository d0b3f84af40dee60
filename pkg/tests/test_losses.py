import logging

import numpy as np
import pytest
from conftest import fixed_teacher, rigged_net
from hypothesis import given, settings
from hypothesis import strategies as st

from tcdepth.align import DepthMap, ssimae_value
from tcdepth.flowgeom import FlowField, MaskConfig, correspondence_mask, warp
from tcdepth.gradcheck import oracle_inputs
from tcdepth.losses import (
    AugmentParams,
    EmptyMaskError,
    FramePair,
    LossItem,
    augmentation_consistency_loss,
    augmentation_items,
    eligible_pairs,
    mean_loss,
    sample_frame_pair,
    supervised_loss,
    temporal_consistency_loss,
    temporal_items,
)
from tcdepth.model import DepthNet, ModelPair
from tcdepth.synth import Camera, Scene, analytic_flow, camera_path, trajectory
from tcdepth.train import sgd_step

SIZE = (12, 16)


@pytest.fixture
def inputs():
    return oracle_inputs(np.random.default_rng(5), SIZE)


@pytest.fixture
def pair():
    return ModelPair.from_fast(DepthNet.init(np.random.default_rng(11), final_scale=1.0))


def static_pair(image):
    zero = FlowField.constant(image.shape[:2], 0.0, 0.0)
    return FramePair(image, image, 0.0, 0.04, zero, zero)


def all_losses(pair, inputs):
    return {
        "sup": supervised_loss(pair, inputs["image"], inputs["disparity"]),
        "aug": augmentation_consistency_loss(pair, inputs["image"], inputs["aug"]),
        "temp": temporal_consistency_loss(pair, inputs["frame_pair"]),
    }


class TestSupervised:
    def test_rigged_affine_output(self, inputs):
        gt = inputs["disparity"]
        image = np.repeat((gt.values / gt.values.max())[..., None], 3, axis=2)
        pair = ModelPair.from_fast(rigged_net(-2.5, 0.7))
        assert supervised_loss(pair, image, gt).item() < 1e-9

    def test_overfit_single_image(self, inputs, pair):
        pair = ModelPair.from_fast(DepthNet.init(np.random.default_rng(2)))
        params = pair.fast.params
        values = []
        for _ in range(50):
            loss = supervised_loss(pair, inputs["image"], inputs["disparity"])
            values.append(loss.item())
            pair.fast.zero_grad()
            loss.backward()
            new, _ = sgd_step([p.data for p in params], [p.grad for p in params], 0.05, 10.0)
            for p, v in zip(params, new):
                p.data = v
        assert values[-1] < 0.8 * values[0]


class TestAugmentation:
    def test_identity_with_copied_teacher(self, inputs, pair):
        loss = augmentation_consistency_loss(pair, inputs["image"], AugmentParams.identity())
        assert loss.item() < 1e-9

    def test_identity_spatial_target_is_teacher_output(self, inputs, pair):
        aug = AugmentParams(brightness=1.1, contrast=0.9, channel_gain=(1.0, 0.95, 1.05))
        (item,) = augmentation_items(pair, [inputs["image"]], [aug])
        assert item.target.valid.all()
        assert np.array_equal(item.target.values, pair.slow.predict(inputs["image"]))

    def test_same_transform_for_image_and_target(self, inputs):
        # with a rigged teacher reading the red channel, the target is the transformed red channel
        pair = ModelPair.from_fast(rigged_net())
        aug = AugmentParams.sample(np.random.default_rng(0), SIZE)
        aug.brightness, aug.contrast, aug.channel_gain = 1.0, 1.0, (1.0, 1.0, 1.0)
        (item,) = augmentation_items(pair, [inputs["image"]], [aug])
        v = item.target.valid
        np.testing.assert_allclose(item.target.values[v], item.student_input[..., 0][v], atol=1e-12)

    def test_singular_spatial_rejected(self):
        with pytest.raises(ValueError):
            AugmentParams(spatial=np.zeros((2, 3)))


class TestTemporal:
    def test_static_identity(self, inputs, pair):
        assert temporal_consistency_loss(pair, static_pair(inputs["image"])).item() < 1e-9

    def test_matches_hand_assembled_pipeline(self, pair):
        size = (16, 20)
        scene = Scene(base_depth=2.0, slope=(0.1, 0.0), amplitude=0.2, texture_seed=4)
        cams, ts = camera_path(Camera.centered(25.0, size), 2, (1.5, 0.0, 0.0))
        clip = trajectory(scene, cams, ts, size)
        fp = FramePair(clip.frames[0], clip.frames[1], ts[0], ts[1], clip.flow(0, 1), clip.flow(1, 0))
        true_b = clip.disparity[1].values
        fixed_teacher(pair, true_b)
        loss = temporal_consistency_loss(pair, fp).item()

        warped, ok = warp(fp.f_ab, true_b)
        mask = ok & correspondence_mask(fp.f_ab, fp.f_ba, MaskConfig())
        expected = ssimae_value(pair.fast.predict(fp.frame_a), DepthMap(warped, mask))
        assert loss == pytest.approx(expected, abs=1e-12)

    def test_occluded_teacher_values_ignored(self, pair):
        from conftest import occluder_scene

        size = (32, 40)
        scene = occluder_scene()
        cam_a = Camera.centered(100.0, size)
        cam_b = cam_a.moved((0.1, 0.01, 0.0))
        ab, ba = analytic_flow(scene, cam_a, cam_b, size), analytic_flow(scene, cam_b, cam_a, size)
        rng = np.random.default_rng(0)
        frames = rng.uniform(size=(2,) + size + (3,))
        fp = FramePair(frames[0], frames[1], 0.0, 0.04, ab.flow, ba.flow)
        (item,) = temporal_items(fixed_teacher(pair, rng.uniform(size=size)), [fp])
        base_teacher = pair.slow.predict(frames[1:])[0]
        base = temporal_consistency_loss(pair, fp).item()
        # every frame-b pixel that a masked frame-a pixel could read from
        used = np.zeros(size, dtype=bool)
        ys, xs = np.nonzero(item.target.valid)
        for y, x in zip(ys, xs):
            px, py = x + fp.f_ab.dx[y, x], y + fp.f_ab.dy[y, x]
            used[int(np.floor(py)) : int(np.floor(py)) + 2, int(np.floor(px)) : int(np.floor(px)) + 2] = True
        assert (~used).sum() > 20
        perturbed = np.where(used, base_teacher, base_teacher + rng.normal(scale=5.0, size=size))
        fixed_teacher(pair, perturbed)
        assert abs(temporal_consistency_loss(pair, fp).item() - base) < 1e-12

    def test_empty_mask_raises(self, inputs, pair):
        f_ab = FlowField.constant(SIZE, 3.0, 0.0)
        f_ba = FlowField.constant(SIZE, 3.0, 0.0)
        fp = FramePair(inputs["image"], inputs["image"], 0.0, 0.04, f_ab, f_ba)
        with pytest.raises(EmptyMaskError):
            temporal_consistency_loss(pair, fp)

    def test_pair_too_far_apart(self, inputs):
        z = FlowField.constant(SIZE, 0.0, 0.0)
        with pytest.raises(ValueError):
            FramePair(inputs["image"], inputs["image"], 0.0, 0.12, z, z)

    def test_axial_motion_bias(self, caplog):
        """Dolly-in pairs carry a target bias that lateral pairs do not; the size is logged.

        Inverse depth of a tilted plane is affine in pixel coordinates, so
        bilinear warping is exact and any remaining SSIMAE comes from the
        non-affine change of inverse depth under axial motion.
        """
        size = (24, 32)
        scene = Scene(base_depth=1.5, slope=(0.2, 0.1), amplitude=0.0, texture_seed=8)
        cam = Camera.centered(32.0, size)
        bias = {}
        for name, velocity in [("lateral", (1.0, 0.0, 0.0)), ("dolly_in", (0.0, 0.0, 2.5))]:
            cams, ts = camera_path(cam, 3, velocity)
            clip = trajectory(scene, cams, ts, size)
            warped, ok = warp(clip.flow(0, 2), clip.disparity[2].values)
            mask = ok & correspondence_mask(clip.flow(0, 2), clip.flow(2, 0))
            bias[name] = ssimae_value(clip.disparity[0].values, DepthMap(warped, mask))
        logging.getLogger(__name__).info("temporal target bias: %s", bias)
        assert bias["lateral"] < 1e-9
        assert bias["dolly_in"] > 1e-4


class TestFramePairSampling:
    def _clip(self, n, fps=25.0):
        size = (8, 8)
        cams, ts = camera_path(Camera.centered(10.0, size), n, fps=fps)
        return trajectory(Scene(texture_seed=1), cams, ts, size)

    def test_25fps_gaps(self, rng):
        clip = self._clip(10)
        gaps = {abs(fp.index_b - fp.index_a) for fp in (sample_frame_pair(clip, rng) for _ in range(300))}
        assert gaps == {1, 2}

    def test_two_frame_clip(self, rng):
        clip = self._clip(2)
        draws = {(fp.index_a, fp.index_b) for fp in (sample_frame_pair(clip, rng) for _ in range(50))}
        assert draws == {(0, 1), (1, 0)}

    def test_uniform_over_eligible_pairs(self, rng):
        from scipy import stats

        clip = self._clip(6)
        pairs = eligible_pairs(clip.timestamps)
        counts = dict.fromkeys(pairs, 0)
        for _ in range(10_000):
            fp = sample_frame_pair(clip, rng)
            counts[(fp.index_a, fp.index_b)] += 1
        assert stats.chisquare(list(counts.values())).pvalue > 1e-3

    def test_no_eligible_pair(self, rng):
        with pytest.raises(ValueError):
            sample_frame_pair(self._clip(3, fps=5.0), rng)


class TestSharedProperties:
    def test_teacher_receives_no_gradient(self, inputs, pair):
        for name, loss in all_losses(pair, inputs).items():
            pair.fast.zero_grad()
            loss.backward()
            assert all(p.grad is None for p in pair.slow.params), name
            assert all(p.grad is not None for p in pair.fast.params), name

    def test_slow_perturbation_leaves_fast_gradient_of_supervised_loss(self, inputs, pair):
        loss = supervised_loss(pair, inputs["image"], inputs["disparity"])
        loss.backward()
        before = [p.grad.copy() for p in pair.fast.params]
        pair.slow.load_flat(pair.slow.flat() + 0.3)
        pair.fast.zero_grad()
        supervised_loss(pair, inputs["image"], inputs["disparity"]).backward()
        assert all(np.array_equal(a, p.grad) for a, p in zip(before, pair.fast.params))

    @given(st.sampled_from([-2.0, 0.5, 3.0]), st.floats(-1.0, 1.0))
    @settings(max_examples=10)
    def test_head_rescale_leaves_values(self, a, b):
        inputs = oracle_inputs(np.random.default_rng(5), SIZE)
        pair = ModelPair.from_fast(DepthNet.init(np.random.default_rng(11), final_scale=1.0))
        base = {k: v.item() for k, v in all_losses(pair, inputs).items()}
        pair.fast.params[6].data = a * pair.fast.params[6].data
        pair.fast.params[7].data = a * pair.fast.params[7].data + b
        for name, loss in all_losses(pair, inputs).items():
            assert loss.item() == pytest.approx(base[name], abs=1e-9), name

    def test_losses_nonnegative(self, inputs, pair):
        assert all(v.item() >= 0 for v in all_losses(pair, inputs).values())

    def test_mean_loss_skips_degenerate_targets(self, inputs, pair):
        good = LossItem(inputs["image"], inputs["disparity"])
        empty = LossItem(inputs["image"], DepthMap(np.ones(SIZE), np.zeros(SIZE, bool)))
        flat = LossItem(inputs["image"], DepthMap.dense(np.ones(SIZE)))
        loss, skipped = mean_loss(pair.fast, [good, empty, flat])
        assert skipped == 2
        assert loss.item() == pytest.approx(supervised_loss(pair, inputs["image"], inputs["disparity"]).item())
        assert mean_loss(pair.fast, [empty]) == (None, 1)
