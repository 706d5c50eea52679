import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import pir.autodiff as ad
from pir.errors import ShapeError
from pir.triplane import (
    FieldConfig,
    FieldDecoder,
    LatentMapping,
    PlaneGenerator,
    TriPlane,
    TriPlaneField,
    generate_planes,
    map_latent,
    plane_features,
    sample_field,
    sample_plane,
)

CFG = FieldConfig(d_id=3, d_exp=2, d_z=6, channels=3, resolution=8, gen_width=4,
                  decoder_hidden=5, feature_out=2)


def four_corner_oracle(plane, a, b):
    """Brute-force bilinear lookup with align-corners-true texel centres."""
    C, n, _ = plane.shape
    x = min(max((a + 1) / 2 * (n - 1), 0.0), n - 1)
    y = min(max((b + 1) / 2 * (n - 1), 0.0), n - 1)
    out = np.zeros(C)
    for r in range(n):
        for c in range(n):
            w = max(0.0, 1 - abs(x - c)) * max(0.0, 1 - abs(y - r))
            out += w * plane[:, r, c]
    return out


def random_triplane(rng, C=3, n=8, extent=0.5):
    return TriPlane(tuple(ad.Tensor(rng.standard_normal((C, n, n)), requires_grad=True)
                          for _ in range(3)), extent)


class TestSamplePlane:
    def test_texel_centre(self):
        plane = np.arange(2 * 5 * 5, dtype=float).reshape(2, 5, 5)
        # column 3, row 1 of a 5-texel grid
        out = sample_plane(plane, -1 + 2 * 3 / 4, -1 + 2 * 1 / 4).data
        np.testing.assert_array_equal(out, plane[:, 1, 3])

    def test_midway(self):
        plane = np.random.default_rng(0).standard_normal((2, 5, 5))
        a = -1 + 2 * 1.5 / 4
        out = sample_plane(plane, a, -1.0).data
        np.testing.assert_allclose(out, 0.5 * (plane[:, 0, 1] + plane[:, 0, 2]), atol=1e-15)

    def test_corners(self):
        plane = np.random.default_rng(1).standard_normal((1, 4, 4))
        assert sample_plane(plane, -1.0, -1.0).data[0] == plane[0, 0, 0]
        assert sample_plane(plane, 1.0, 1.0).data[0] == plane[0, 3, 3]

    def test_clamped_outside(self):
        plane = np.random.default_rng(2).standard_normal((2, 4, 4))
        np.testing.assert_array_equal(sample_plane(plane, 3.0, -7.0).data,
                                      sample_plane(plane, 1.0, -1.0).data)

    def test_four_corner_oracle_1000_queries(self):
        rng = np.random.default_rng(3)
        plane = rng.standard_normal((4, 7, 7))
        a = rng.uniform(-1.2, 1.2, 1000)
        b = rng.uniform(-1.2, 1.2, 1000)
        out = sample_plane(plane, a, b).data
        ref = np.stack([four_corner_oracle(plane, x, y) for x, y in zip(a, b)])
        assert np.max(np.abs(out - ref)) < 1e-12

    @pytest.mark.parametrize("seed", range(10))
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        plane = ad.Tensor(rng.standard_normal((2, 5, 5)), requires_grad=True)
        a, b = rng.uniform(-1, 1, 6), rng.uniform(-1, 1, 6)
        proj = rng.standard_normal((6, 2))
        err = ad.check_gradients(lambda: (sample_plane(plane, a, b) * proj).sum(), [plane])
        assert err < 1e-4


class TestAggregation:
    def test_two_zero_planes(self):
        rng = np.random.default_rng(4)
        tp = random_triplane(rng)
        zero = ad.Tensor(np.zeros((3, 8, 8)))
        only_xz = TriPlane((zero, tp.planes[1], zero), tp.extent)
        pts = rng.uniform(-0.5, 0.5, (20, 3))
        ref = sample_plane(tp.planes[1], pts[:, 0] / 0.5, pts[:, 2] / 0.5).data
        np.testing.assert_array_equal(plane_features(pts, only_xz).data, ref)

    def test_translation_along_z_keeps_xy_sample(self):
        rng = np.random.default_rng(5)
        tp = random_triplane(rng)
        zero = ad.Tensor(np.zeros((3, 8, 8)))
        xy_only = TriPlane((tp.planes[0], zero, zero), tp.extent)
        p = rng.uniform(-0.4, 0.4, (50, 3))
        q = p.copy()
        q[:, 2] += rng.uniform(-0.3, 0.3, 50)
        np.testing.assert_array_equal(plane_features(p, xy_only).data, plane_features(q, xy_only).data)

    def test_translation_along_y_keeps_xz_sample(self):
        rng = np.random.default_rng(6)
        tp = random_triplane(rng)
        zero = ad.Tensor(np.zeros((3, 8, 8)))
        xz_only = TriPlane((zero, tp.planes[1], zero), tp.extent)
        p = rng.uniform(-0.4, 0.4, (50, 3))
        q = p.copy()
        q[:, 1] += rng.uniform(-0.3, 0.3, 50)
        np.testing.assert_array_equal(plane_features(p, xz_only).data, plane_features(q, xz_only).data)

    def test_permutation_symmetric(self):
        rng = np.random.default_rng(7)
        p = rng.standard_normal((3, 8, 8))
        tp = TriPlane(tuple(ad.Tensor(p) for _ in range(3)), 1.0)
        pts = np.array([[0.2, 0.2, 0.2]])
        single = sample_plane(p, 0.2, 0.2).data
        np.testing.assert_allclose(plane_features(pts, tp).data[0], 3 * single, atol=1e-14)

    def test_plane_shape_mismatch(self):
        with pytest.raises(ShapeError):
            TriPlane((ad.Tensor(np.zeros((2, 4, 4))), ad.Tensor(np.zeros((2, 4, 4))),
                      ad.Tensor(np.zeros((3, 4, 4)))), 1.0)


class TestDecoder:
    def test_zero_weights_density_ln2(self):
        dec = FieldDecoder(CFG, ad.make_rng(0))
        for p in dec.parameters():
            p.data[:] = 0.0
        tp = random_triplane(np.random.default_rng(0))
        s = sample_field(np.array([0.1, 0.2, -0.1]), tp, dec)
        assert s.density.item() == pytest.approx(np.log(2.0), abs=1e-15)
        assert s.color_feature.shape == (CFG.feature_out,)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(-1e3, 1e3), st.integers(0, 2 ** 16))
    def test_density_nonnegative(self, scale, seed):
        rng = np.random.default_rng(seed)
        dec = FieldDecoder(CFG, ad.make_rng(seed))
        tp = TriPlane(tuple(ad.Tensor(scale * rng.standard_normal((3, 8, 8))) for _ in range(3)), 0.5)
        s = sample_field(rng.uniform(-1, 1, (30, 3)), tp, dec)
        assert np.all(s.density.data >= 0)

    @pytest.mark.parametrize("seed", range(10))
    def test_gradcheck_sample_field(self, seed):
        rng = np.random.default_rng(seed)
        dec = FieldDecoder(CFG, ad.make_rng(seed))
        tp = random_triplane(rng)
        pts = rng.uniform(-0.5, 0.5, (5, 3))
        pc, pd = rng.standard_normal((5, 2)), rng.standard_normal(5)

        def loss():
            s = sample_field(pts, tp, dec)
            return (s.color_feature * pc).sum() + (s.density * pd).sum()

        assert ad.check_gradients(loss, list(tp.planes) + dec.parameters(), rng=rng) < 1e-4


class TestMapping:
    def test_zero_weights(self):
        m = LatentMapping(CFG, ad.make_rng(0))
        for p in m.parameters():
            p.data[:] = 0.0
        assert np.all(map_latent(np.ones(3), np.ones(2), m).data == 0)

    def test_distinct_expressions(self):
        m = LatentMapping(CFG, ad.make_rng(1))
        a = map_latent(np.ones(3), np.array([0.0, 1.0]), m).data
        b = map_latent(np.ones(3), np.array([1.0, 0.0]), m).data
        assert not np.allclose(a, b)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            map_latent(np.ones(3), np.ones(3), LatentMapping(CFG, ad.make_rng(0)))

    @pytest.mark.parametrize("seed", range(10))
    def test_gradcheck(self, seed):
        m = LatentMapping(CFG, ad.make_rng(seed))
        rng = np.random.default_rng(seed)
        z_exp = ad.Tensor(rng.standard_normal(2), requires_grad=True)
        proj = rng.standard_normal(6)
        err = ad.check_gradients(lambda: (map_latent(np.ones(3), z_exp, m) * proj).sum(),
                                 [z_exp] + m.parameters(), rng=rng)
        assert err < 1e-4


class TestGenerator:
    def test_channel_count(self):
        gen = PlaneGenerator(CFG, ad.make_rng(0))
        tp = generate_planes(np.ones(6), gen, 0.5)
        assert gen(ad.Tensor(np.ones(6))).shape == (3 * CFG.channels, 8, 8)
        assert all(p.shape == (CFG.channels, 8, 8) for p in tp.planes)

    def test_distinct_latents(self):
        gen = PlaneGenerator(CFG, ad.make_rng(0))
        a = gen(ad.Tensor(np.zeros(6))).data
        b = gen(ad.Tensor(np.ones(6))).data
        assert not np.allclose(a, b)

    @pytest.mark.parametrize("seed", range(10))
    def test_gradcheck(self, seed):
        gen = PlaneGenerator(CFG, ad.make_rng(seed))
        rng = np.random.default_rng(seed)
        z = ad.Tensor(rng.standard_normal(6), requires_grad=True)
        proj = rng.standard_normal((3 * CFG.channels, 8, 8))
        err = ad.check_gradients(lambda: (gen(z) * proj).sum(), [z] + gen.parameters(),
                                 max_coords=8, rng=rng)
        assert err < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_gradient_reaches_latent_inputs(seed):
    field = TriPlaneField(CFG, ad.make_rng(seed))
    rng = np.random.default_rng(seed)
    z_exp = ad.Tensor(rng.standard_normal(2), requires_grad=True)
    pts = rng.uniform(-0.5, 0.5, (4, 3))

    def loss():
        s = sample_field(pts, field.planes(np.ones(3), z_exp), field.decoder)
        return s.density.sum() + s.color_feature.sum()

    assert ad.check_gradients(loss, [z_exp], rng=rng) < 1e-4
