import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import pir.autodiff as ad
from pir.camera import Camera, Intrinsics, Pose
from pir.errors import ShapeError
from pir.inpaint import (
    InpaintConfig,
    InpaintNet,
    RenderTrainState,
    augmented_training_step,
    make_masked_frame,
    perturbation_variance,
    render_frame,
    render_step,
)
from pir.triplane import FieldConfig
from pir.volume import FaceRenderer, RenderConfig, RenderedFeatureMap

SMALL = InpaintConfig(image_size=16, fusion_size=4, feature_channels=3, width=4, res_blocks=1)


def toy_frame(rng, size=16):
    img = rng.uniform(0, 1, (3, size, size))
    M = np.zeros((size, size), dtype=bool)
    M[size // 4: 3 * size // 4, size // 4: 3 * size // 4] = True
    return img, M


class StubRenderer:
    """Feature map that is a smooth function of the intrinsics only."""

    def __init__(self, channels):
        self.channels = channels

    def feature_map(self, z_id, z_exp, K, pose, size=None, rng=None):
        v, u = np.mgrid[0:size, 0:size] / size
        base = np.sin(u * K.fx / 10 + K.u0 / 7) * np.cos(v * K.fy / 10 + K.v0 / 7)
        I_F = np.stack([base * (c + 1) for c in range(self.channels)])
        return RenderedFeatureMap(ad.Tensor(I_F), ad.Tensor(np.ones((size, size))))


def toy_camera(size=16):
    return Camera(Intrinsics(size * 1.7, size * 1.7, size / 2, size / 2),
                  Pose.look_from(0.0, 0.0, 0.0, 2.7), 2.0, 3.5)


class TestMaskedFrame:
    def test_zero_mask_leaves_frame(self):
        img = np.random.default_rng(0).uniform(size=(3, 8, 8))
        frame = make_masked_frame(img, np.zeros((8, 8)), 2)
        assert np.array_equal(frame.I_M, img)
        assert not frame.mask.any()

    def test_no_dilation_is_head_mask(self):
        rng = np.random.default_rng(1)
        M = rng.uniform(size=(8, 8)) > 0.6
        frame = make_masked_frame(rng.uniform(size=(3, 8, 8)), M, 0)
        assert np.array_equal(frame.mask.astype(bool), M)

    @pytest.mark.parametrize("d", [1, 2, 3])
    def test_dilation_matches_loop_oracle(self, d):
        rng = np.random.default_rng(d)
        M = rng.uniform(size=(12, 12)) > 0.9
        expected = np.zeros_like(M)
        for i in range(12):
            for j in range(12):
                if M[i, j]:
                    expected[max(i - d, 0):i + d + 1, max(j - d, 0):j + d + 1] = True
        assert np.array_equal(make_masked_frame(np.ones((3, 12, 12)), M, d).mask.astype(bool), expected)

    def test_masked_pixels_zeroed(self):
        img = np.ones((3, 8, 8))
        M = np.zeros((8, 8))
        M[4, 4] = 1
        frame = make_masked_frame(img, M, 1)
        assert frame.I_M[:, 3:6, 3:6].sum() == 0.0
        assert frame.I_M.sum() == 3 * (64 - 9)

    def test_negative_dilation(self):
        with pytest.raises(ValueError):
            make_masked_frame(np.ones((3, 4, 4)), np.zeros((4, 4)), -1)

    @given(st.integers(0, 3), st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_dilation_is_superset(self, d, seed):
        rng = np.random.default_rng(seed)
        M = rng.uniform(size=(10, 10)) > 0.8
        mask = make_masked_frame(np.ones((3, 10, 10)), M, d).mask.astype(bool)
        assert np.all(mask[M])


class TestInpaintNet:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            InpaintConfig(image_size=64, fusion_size=12)
        with pytest.raises(ValueError):
            InpaintConfig(dilation=-1)

    def test_output_shape(self):
        net = InpaintNet(SMALL, ad.make_rng(0))
        rng = np.random.default_rng(0)
        img, M = toy_frame(rng)
        frame = make_masked_frame(img, M, 1)
        out = net(frame.I_M, frame.mask, rng.standard_normal((3, 4, 4)))
        assert out.shape == (3, 16, 16)

    def test_default_config_shape(self):
        net = InpaintNet(InpaintConfig(), ad.make_rng(0))
        out = net(np.zeros((3, 64, 64)), np.zeros((64, 64)), np.zeros((8, 8, 8)))
        assert out.shape == (3, 64, 64)

    def test_fusion_size_mismatch(self):
        net = InpaintNet(SMALL, ad.make_rng(0))
        with pytest.raises(ShapeError):
            net(np.zeros((3, 16, 16)), np.zeros((16, 16)), np.zeros((3, 8, 8)))

    def test_zeroing_feature_image_changes_output(self):
        net = InpaintNet(SMALL, ad.make_rng(1))
        rng = np.random.default_rng(1)
        img, M = toy_frame(rng)
        frame = make_masked_frame(img, M, 1)
        I_F = rng.standard_normal((3, 4, 4))
        with ad.no_grad():
            a = net(frame.I_M, frame.mask, I_F).data
            b = net(frame.I_M, frame.mask, np.zeros_like(I_F)).data
        assert np.max(np.abs(a - b)) > 1e-6

    def test_zero_head_returns_visible_frame(self):
        # with a zeroed output layer the network is the identity on I_M
        net = InpaintNet(SMALL, ad.make_rng(2))
        net.to_rgb.weight.data[:] = 0
        net.to_rgb.bias.data[:] = 0
        img, M = toy_frame(np.random.default_rng(2))
        frame = make_masked_frame(img, M, 1)
        out = net(frame.I_M, frame.mask, np.ones((3, 4, 4))).data
        assert np.array_equal(out, frame.I_M)

    @pytest.mark.parametrize("seed", range(10))
    def test_gradcheck(self, seed):
        net = InpaintNet(SMALL, ad.make_rng(seed))
        rng = np.random.default_rng(seed)
        img, M = toy_frame(rng)
        frame = make_masked_frame(img, M, 1)
        I_F = ad.Tensor(rng.standard_normal((3, 4, 4)), requires_grad=True)
        target = rng.uniform(size=(3, 16, 16))

        def loss():
            d = net(frame.I_M, frame.mask, I_F) - target
            return (d * d).sum()

        params = [net.entry.weight, net.fuse.weight, net.blocks[0].a.weight, net.up[0].weight,
                  net.to_rgb.weight]
        assert ad.check_gradients(loss, [I_F] + params, max_coords=12, rng=rng) < 1e-4


class TestTraining:
    def test_render_step_lowers_loss(self):
        state = RenderTrainState.create(SMALL, 0, lr=3e-3, d_lr=1e-3)
        rng = np.random.default_rng(0)
        img, M = toy_frame(rng)
        frame = make_masked_frame(img, M, 1)
        I_F = rng.standard_normal((3, 4, 4))
        losses = [render_step(state, frame, I_F, img) for _ in range(60)]
        assert np.mean(losses[-5:]) < 0.5 * losses[0]

    def test_zero_spread_step_matches_plain_step(self):
        rng = np.random.default_rng(3)
        img, M = toy_frame(rng)
        cam = toy_camera()
        renderer = StubRenderer(3)
        a = RenderTrainState.create(SMALL, 7)
        b = RenderTrainState.create(SMALL, 7)
        la = augmented_training_step(a, img, M, renderer, None, None, cam, 0.0, ad.make_rng(5))
        I_F = renderer.feature_map(None, None, cam.K, cam.pose, size=4).I_F.data
        lb = render_step(b, make_masked_frame(img, M, SMALL.dilation), I_F, img)
        assert la == lb
        for p, q in zip(a.net.parameters() + a.D.parameters(), b.net.parameters() + b.D.parameters()):
            assert np.array_equal(p.data, q.data)

    def test_spread_changes_conditioning(self):
        rng = np.random.default_rng(4)
        img, M = toy_frame(rng)
        a = RenderTrainState.create(SMALL, 7)
        b = RenderTrainState.create(SMALL, 7)
        cam, renderer = toy_camera(), StubRenderer(3)
        augmented_training_step(a, img, M, renderer, None, None, cam, 0.0, ad.make_rng(5))
        augmented_training_step(b, img, M, renderer, None, None, cam, 3.0, ad.make_rng(5))
        assert not np.array_equal(a.net.fuse.weight.data, b.net.fuse.weight.data)

    def test_real_renderer_step_is_finite_and_frozen(self):
        rcfg = RenderConfig(image_size=16, feature_size=4, n_coarse=4, n_fine=4, up_width=4)
        fcfg = FieldConfig(channels=3, resolution=8, gen_width=4, d_z=8, decoder_hidden=8,
                           feature_out=3)
        renderer = FaceRenderer(fcfg, rcfg, ad.make_rng(0))
        before = [p.data.copy() for p in renderer.parameters()]
        state = RenderTrainState.create(SMALL, 0)
        img, M = toy_frame(np.random.default_rng(5))
        z = np.zeros(8)
        loss = augmented_training_step(state, img, M, renderer, z, z, toy_camera(), 3.0,
                                       ad.make_rng(0))
        assert np.isfinite(loss)
        assert all(np.array_equal(p.data, q) for p, q in zip(renderer.parameters(), before))


class TestInference:
    def test_render_frame_deterministic(self):
        net = InpaintNet(SMALL, ad.make_rng(0))
        img, M = toy_frame(np.random.default_rng(0))
        cam = toy_camera()
        a = render_frame(net, StubRenderer(3), img, M, None, None, cam.K, cam.pose)
        b = render_frame(net, StubRenderer(3), img, M, None, None, cam.K, cam.pose)
        assert np.array_equal(a, b)

    def test_zero_spread_has_zero_variance(self):
        net = InpaintNet(SMALL, ad.make_rng(0))
        img, M = toy_frame(np.random.default_rng(0))
        v = perturbation_variance(net, StubRenderer(3), img, M, None, None, toy_camera(), 0.0, 5,
                                  ad.make_rng(0))
        # identical outputs; only the mean's round-off remains
        assert v < 1e-28

    def test_positive_spread_has_positive_variance(self):
        net = InpaintNet(SMALL, ad.make_rng(0))
        img, M = toy_frame(np.random.default_rng(0))
        v = perturbation_variance(net, StubRenderer(3), img, M, None, None, toy_camera(), 2.0, 5,
                                  ad.make_rng(0))
        assert v > 0.0
