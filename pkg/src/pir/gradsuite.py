"""Finite-difference gradient suite over every differentiable building block.

Each case maps a seed to the largest relative error between analytic and
central-difference gradients (see ``pir.autodiff.check_gradients``).  The
suite backs ``pir gradcheck`` and the acceptance run.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

import pir.autodiff as ad
from pir.autodiff import functional as F
from pir.audio2exp import (
    Audio2Exp,
    DecoderConfig,
    MultiHeadAttention,
    biased_causal_self_attention,
    biased_cross_modal_attention,
    loss_audio,
    resample_linear,
)
from pir.camera import Intrinsics, Pose, pixel_rays
from pir.inpaint import InpaintConfig, InpaintNet, make_masked_frame
from pir.losses import (
    LossWeights,
    MultiScaleDiscriminator,
    PerceptualExtractor,
    gan_d_loss,
    gan_g_loss,
    loss_face,
    loss_feature_matching,
    loss_render_rec,
)
from pir.triplane import (
    FieldConfig,
    FieldDecoder,
    LatentMapping,
    PlaneGenerator,
    TriPlane,
    TriPlaneField,
    map_latent,
    sample_field,
    sample_plane,
)
from pir.volume import Upsampler, composite, plan_samples, shade_rays, upsample_to_image, _batch

TOLERANCE = 1e-4
DEFAULT_SEEDS = tuple(range(10))


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


# op, input shapes, optional sampler; checked on every coordinate
OP_CASES: dict[str, tuple[Callable, list, Callable | None]] = {
    "add_broadcast": (lambda a, b: a + b, [(3, 4), (4,)], None),
    "sub": (lambda a, b: a - b, [(2, 3), (2, 3)], None),
    "mul_broadcast": (lambda a, b: a * b, [(2, 3, 4), (3, 1)], None),
    "div": (lambda a, b: a / b, [(3, 3), (3, 3)], _positive),
    "scalar_ops": (lambda a: 2.5 * a - 1.0 + a / 4.0, [(5,)], None),
    "power": (lambda a: a ** 3, [(4,)], None),
    "exp": (ad.exp, [(3, 2)], None),
    "log": (ad.log, [(3, 2)], _positive),
    "sqrt": (ad.sqrt, [(5,)], _positive),
    "sin": (ad.sin, [(6,)], None),
    "cos": (ad.cos, [(6,)], None),
    "tanh": (ad.tanh, [(6,)], None),
    "sigmoid": (ad.sigmoid, [(6,)], None),
    "softplus": (ad.softplus, [(6,)], None),
    "silu": (ad.silu, [(6,)], None),
    "sum_axis": (lambda a: a.sum(axis=1), [(3, 4, 2)], None),
    "mean_keepdims": (lambda a: a.mean(axis=(0, 2), keepdims=True), [(3, 4, 2)], None),
    "cumsum": (lambda a: ad.cumsum(a, axis=-1), [(3, 5)], None),
    "matmul": (lambda a, b: a @ b, [(4, 5), (5, 3)], None),
    "matmul_batched": (lambda a, b: a @ b, [(2, 3, 4, 5), (5, 2)], None),
    "concat": (lambda a, b: ad.concat([a, b], axis=1), [(2, 3), (2, 2)], None),
    "stack": (lambda a, b: ad.stack([a, b], axis=0), [(2, 3), (2, 3)], None),
    "slice": (lambda a: a[1:, ::2], [(4, 5)], None),
    "transpose": (lambda a: a.transpose(2, 0, 1), [(2, 3, 4)], None),
    "reshape": (lambda a: a.reshape(6, 2), [(3, 4)], None),
    "broadcast_to": (lambda a: ad.broadcast_to(a, (3, 4, 5)), [(4, 1)], None),
    "embedding": (lambda w: ad.embedding(w, np.array([[0, 2], [2, 1]])), [(3, 4)], None),
    "softmax": (lambda a: ad.softmax(a), [(3, 5)], None),
    "masked_softmax": (lambda a: ad.masked_softmax(
        a, np.array([[0.0, -np.inf, 1.0], [0.5, 0.0, -np.inf]])), [(2, 3)], None),
    "layer_norm": (lambda a, w, b: ad.layer_norm(a, w, b), [(3, 6), (6,), (6,)], None),
    "conv2d": (lambda x, w, b: F.conv2d(x, w, b, stride=1, padding=1),
               [(2, 3, 5, 5), (4, 3, 3, 3), (4,)], None),
    "conv2d_stride2": (lambda x, w, b: F.conv2d(x, w, b, stride=2, padding=1),
                       [(1, 2, 6, 6), (3, 2, 3, 3), (3,)], None),
    "conv1d": (lambda x, w, b: F.conv1d(x, w, b, padding=1), [(2, 3, 7), (4, 3, 3), (4,)], None),
    "avg_pool2d": (lambda x: F.avg_pool2d(x, 2), [(2, 3, 4, 6)], None),
    "upsample_nearest": (lambda x: F.upsample_nearest(x, 2), [(1, 2, 3, 3)], None),
    "upsample_bilinear": (lambda x: F.upsample_bilinear(x, 2), [(1, 2, 3, 4)], None),
}

AUDIO = DecoderConfig(d_audio=3, d_model=8, n_heads_self=2, n_heads_cross=2, n_heads_enc=2,
                      n_enc_blocks=1, d_ffn=12, period=3, context=5, d_exp=3, d_id=2)
FIELD = FieldConfig(d_id=3, d_exp=2, d_z=6, channels=2, resolution=8, gen_width=4,
                    decoder_hidden=6, feature_out=2)
INPAINT = InpaintConfig(image_size=16, fusion_size=4, feature_channels=3, width=4, res_blocks=1)
FRONT = Pose.look_from(0.0, 0.0, 0.0, 2.7)


def _projected(rng, out_shape):
    proj = rng.standard_normal(out_shape)
    return lambda t: (t * proj).sum()


# -- attention and audio-to-expression ---------------------------------------
def _self_attention(seed):
    rng = ad.make_rng(seed)
    attn = MultiHeadAttention(8, 2, rng)
    x = ad.Tensor(rng.standard_normal((2, 6, 8)))
    red = _projected(rng, (2, 6, 8))
    return ad.check_gradients(lambda: red(biased_causal_self_attention(x, attn, AUDIO)),
                              [x] + attn.parameters(), max_coords=16, rng=rng)


def _cross_attention(seed):
    rng = ad.make_rng(seed)
    attn = MultiHeadAttention(8, 2, rng)
    x = ad.Tensor(rng.standard_normal((2, 5, 8)))
    enc = ad.Tensor(rng.standard_normal((2, 5, 8)))
    red = _projected(rng, (2, 5, 8))
    return ad.check_gradients(lambda: red(biased_cross_modal_attention(x, enc, attn)),
                              [x, enc] + attn.parameters(), max_coords=16, rng=rng)


def _resample(seed):
    rng = ad.make_rng(seed)
    x = ad.Tensor(rng.standard_normal((2, 9, 3)))
    red = _projected(rng, (2, 5, 3))
    return ad.check_gradients(lambda: red(resample_linear(x, 5)), [x], max_coords=None, rng=rng)


def _audio_encoder(seed):
    rng = ad.make_rng(seed)
    model = Audio2Exp(AUDIO, rng)
    feats = ad.Tensor(rng.standard_normal((1, 9, AUDIO.d_audio)))
    red = _projected(rng, (1, 5, AUDIO.d_model))
    return ad.check_gradients(lambda: red(model.encode(feats, 5)),
                              [feats] + model.encoder.parameters(), max_coords=6, rng=rng)


def _audio2exp_model(seed):
    rng = ad.make_rng(seed)
    model = Audio2Exp(AUDIO, rng)
    feats = rng.standard_normal((2, 9, AUDIO.d_audio))
    target = rng.standard_normal((2, 5, AUDIO.d_exp))
    z = ad.Tensor(rng.standard_normal((2, AUDIO.d_id)))
    params = [p for p in model.parameters() if p not in model.encoder.parameters()]
    return ad.check_gradients(lambda: loss_audio(model(feats, z, target), target),
                              [z] + params, max_coords=6, rng=rng)


def _loss_audio(seed):
    rng = ad.make_rng(seed)
    pred = ad.Tensor(rng.standard_normal((4, 3)))
    target = rng.standard_normal((4, 3))
    return ad.check_gradients(lambda: loss_audio(pred, target), [pred], max_coords=None, rng=rng)


# -- tri-plane field -----------------------------------------------------------
def _triplane(rng, n=6, c=2):
    return TriPlane(tuple(ad.Tensor(rng.standard_normal((c, n, n))) for _ in range(3)), 0.5)


def _sample_plane(seed):
    rng = ad.make_rng(seed)
    plane = ad.Tensor(rng.standard_normal((3, 6, 6)))
    a, b = rng.uniform(-0.6, 0.6, (2, 20))
    red = _projected(rng, (20, 3))
    return ad.check_gradients(lambda: red(sample_plane(plane, a, b)), [plane], max_coords=None,
                              rng=rng)


def _sample_field(seed):
    rng = ad.make_rng(seed)
    dec = FieldDecoder(FIELD, rng)
    tp = _triplane(rng)
    pts = rng.uniform(-0.5, 0.5, (5, 3))
    pc, pd = rng.standard_normal((5, 2)), rng.standard_normal(5)

    def loss():
        s = sample_field(pts, tp, dec)
        return (s.color_feature * pc).sum() + (s.density * pd).sum()

    return ad.check_gradients(loss, list(tp.planes) + dec.parameters(), rng=rng)


def _mapping(seed):
    rng = ad.make_rng(seed)
    m = LatentMapping(FIELD, rng)
    z_exp = ad.Tensor(rng.standard_normal(FIELD.d_exp))
    red = _projected(rng, (FIELD.d_z,))
    return ad.check_gradients(lambda: red(map_latent(np.ones(FIELD.d_id), z_exp, m)),
                              [z_exp] + m.parameters(), rng=rng)


def _plane_generator(seed):
    rng = ad.make_rng(seed)
    gen = PlaneGenerator(FIELD, rng)
    z = ad.Tensor(rng.standard_normal(FIELD.d_z))
    red = _projected(rng, (3 * FIELD.channels, FIELD.resolution, FIELD.resolution))
    return ad.check_gradients(lambda: red(gen(z)), [z] + gen.parameters(), max_coords=8, rng=rng)


def _field_from_latent(seed):
    rng = ad.make_rng(seed)
    field = TriPlaneField(FIELD, rng)
    z_exp = ad.Tensor(rng.standard_normal(FIELD.d_exp))
    pts = rng.uniform(-0.5, 0.5, (4, 3))

    def loss():
        s = sample_field(pts, field.planes(np.ones(FIELD.d_id), z_exp), field.decoder)
        return s.density.sum() + s.color_feature.sum()

    return ad.check_gradients(loss, [z_exp], rng=rng)


# -- volume rendering ------------------------------------------------------------
def _composite(seed):
    rng = ad.make_rng(seed)
    depths = 2.0 + np.cumsum(rng.uniform(0.05, 0.3, 7))
    batch = _batch(np.broadcast_to(depths, (4, 7)).copy(), 2.0, float(depths[-1]) + 0.1)
    sigma = ad.Tensor(rng.uniform(0.1, 3.0, (4, 7)))
    color = ad.Tensor(rng.standard_normal((4, 7, 2)))
    pf, pw, pt = rng.standard_normal((4, 2)), rng.standard_normal((4, 7)), rng.standard_normal(4)

    def loss():
        f, w, T = composite(color, sigma, batch)
        return (f * pf).sum() + (w * pw).sum() + (T * pt).sum()

    return ad.check_gradients(loss, [sigma, color], max_coords=None, rng=rng)


def _shade_rays(seed):
    rng = ad.make_rng(seed)
    tp = TriPlane(tuple(ad.Tensor(0.5 * rng.standard_normal((2, 5, 5))) for _ in range(3)), 0.5)
    dec = FieldDecoder(FieldConfig(channels=2, decoder_hidden=4, feature_out=2), rng)
    bg = ad.Tensor(rng.standard_normal(2))
    origins, dirs = pixel_rays(Intrinsics(5.0, 5.0, 2.0, 2.0), FRONT, 4, 4)
    batch = plan_samples(tp, dec, origins, dirs, 6, 6, 2.0, 3.5)
    red = _projected(rng, (16, 2))
    return ad.check_gradients(lambda: red(shade_rays(tp, dec, origins, dirs, batch, bg)[0]),
                              list(tp.planes) + dec.parameters() + [bg], max_coords=12, rng=rng)


def _upsampler(seed):
    rng = ad.make_rng(seed)
    up = Upsampler(3, 2, 4, rng)
    x = ad.Tensor(rng.standard_normal((3, 4, 4)))
    red = _projected(rng, (3, 8, 8))
    return ad.check_gradients(lambda: red(upsample_to_image(x, up)), [x] + up.parameters(),
                              max_coords=12, rng=rng)


# -- losses ------------------------------------------------------------------
PHI = PerceptualExtractor(0, widths=(3, 4, 4))


def _images(rng, size=8):
    return ad.Tensor(rng.uniform(0, 1, (3, size, size))), rng.uniform(0, 1, (3, size, size))


def _loss_face(seed):
    rng = ad.make_rng(seed)
    img, gt = _images(rng)
    M = (rng.uniform(size=(8, 8)) > 0.3).astype(float)
    return ad.check_gradients(lambda: loss_face(img, gt, M, LossWeights(), PHI), [img], rng=rng)


def _loss_render_rec(seed):
    rng = ad.make_rng(seed)
    img, gt = _images(rng)
    return ad.check_gradients(lambda: loss_render_rec(img, gt, LossWeights(), PHI), [img], rng=rng)


def _loss_fm(seed):
    rng = ad.make_rng(seed)
    D = MultiScaleDiscriminator(seed)
    img, gt = _images(rng, 16)
    return ad.check_gradients(lambda: loss_feature_matching(img, gt, D), [img], rng=rng)


def _gan_g(seed):
    rng = ad.make_rng(seed)
    D = MultiScaleDiscriminator(seed)
    img, _ = _images(rng, 16)
    return ad.check_gradients(lambda: gan_g_loss(img, D), [img] + D.parameters()[:4],
                              max_coords=16, rng=rng)


def _gan_d(seed):
    rng = ad.make_rng(seed)
    D = MultiScaleDiscriminator(seed)
    img, gt = _images(rng, 16)
    return ad.check_gradients(lambda: gan_d_loss(img.data, gt, D), D.parameters(), max_coords=6,
                              rng=rng)


# -- inpainting network ----------------------------------------------------------
def _inpaint_net(seed):
    rng = ad.make_rng(seed)
    net = InpaintNet(INPAINT, rng)
    img = rng.uniform(0, 1, (3, 16, 16))
    M = np.zeros((16, 16))
    M[4:12, 4:12] = 1
    frame = make_masked_frame(img, M, 1)
    I_F = ad.Tensor(rng.standard_normal((3, 4, 4)))
    target = rng.uniform(size=(3, 16, 16))

    def loss():
        d = net(frame.I_M, frame.mask, I_F) - target
        return (d * d).sum()

    return ad.check_gradients(loss, [I_F] + net.parameters(), max_coords=6, rng=rng)


def _op_case(name):
    op, shapes, sampler = OP_CASES[name]
    return lambda seed: ad.gradcheck(op, shapes, seed, sampler=sampler, max_coords=None)


CASES: dict[str, Callable[[int], float]] = {f"op.{name}": _op_case(name) for name in OP_CASES}
CASES.update({
    "attention.self_biased_causal": _self_attention,
    "attention.cross_modal_aligned": _cross_attention,
    "audio2exp.resample_linear": _resample,
    "audio2exp.encoder": _audio_encoder,
    "audio2exp.decoder_teacher_forced": _audio2exp_model,
    "audio2exp.loss_audio": _loss_audio,
    "field.sample_plane": _sample_plane,
    "field.sample_field": _sample_field,
    "field.latent_mapping": _mapping,
    "field.plane_generator": _plane_generator,
    "field.latent_to_density": _field_from_latent,
    "volume.composite": _composite,
    "volume.shade_rays": _shade_rays,
    "volume.upsampler": _upsampler,
    "loss.face": _loss_face,
    "loss.render_rec": _loss_render_rec,
    "loss.feature_matching": _loss_fm,
    "loss.gan_generator": _gan_g,
    "loss.gan_discriminator": _gan_d,
    "inpaint.network": _inpaint_net,
})


@dataclass
class GradResult:
    name: str
    seed: int
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < TOLERANCE)


def run_suite(seeds=DEFAULT_SEEDS, names=None) -> list[GradResult]:
    names = sorted(CASES) if names is None else list(names)
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise KeyError(f"unknown gradient cases: {unknown}")
    out = []
    for name in names:
        for seed in seeds:
            t0 = time.perf_counter()
            err = CASES[name](seed)
            out.append(GradResult(name, seed, err, time.perf_counter() - t0))
    return out
