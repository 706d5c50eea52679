"""Inpainting renderer conditioned on the low-resolution feature image I_F.

The network sees the frame with the (dilated) head region zeroed plus the
mask, encodes it down to the fusion resolution, concatenates I_F there,
refines with residual blocks and decodes back up with skip connections.
Training perturbs the camera intrinsics before rendering I_F (jitter
reduction) while the target stays the unperturbed frame.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

import pir.autodiff as ad
from pir.autodiff import functional as F
from pir.autodiff import Adam, Conv2d, Module, Tensor
from pir.camera import Camera, perturb_intrinsics
from pir.errors import NumericError, ShapeError
from pir.losses import (
    LossWeights,
    MultiScaleDiscriminator,
    PerceptualExtractor,
    gan_d_loss,
    gan_g_loss,
    loss_feature_matching,
    loss_render_rec,
)


@dataclass
class InpaintConfig:
    image_size: int = 64
    fusion_size: int = 8
    feature_channels: int = 8
    width: int = 16
    res_blocks: int = 2
    dilation: int = 2

    def __post_init__(self):
        ratio = self.image_size // (2 * self.fusion_size)
        if self.image_size % (2 * self.fusion_size) or ratio < 1 or ratio & (ratio - 1):
            raise ValueError("image_size / (2 * fusion_size) must be a power of two")
        if self.dilation < 0:
            raise ValueError("dilation must be >= 0")


@dataclass
class MaskedFrame:
    I_M: np.ndarray  # [3, H, W], zero where mask == 1
    mask: np.ndarray  # [H, W] in {0, 1}


def make_masked_frame(I_GT: np.ndarray, M_h: np.ndarray, dilation: int) -> MaskedFrame:
    """Dilate the head mask by a (2d+1)-square and zero those pixels."""
    if dilation < 0:
        raise ValueError("dilation must be >= 0")
    M = np.asarray(M_h).astype(bool)
    if dilation:
        M = ndimage.binary_dilation(M, structure=np.ones((2 * dilation + 1,) * 2, dtype=bool))
    mask = M.astype(np.float64)
    return MaskedFrame(np.asarray(I_GT, dtype=np.float64) * (1.0 - mask), mask)


class ResBlock(Module):
    def __init__(self, c: int, rng: np.random.Generator):
        self.a = Conv2d(c, c, 3, rng)
        self.b = Conv2d(c, c, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.b(ad.silu(self.a(x)))


class InpaintNet(Module):
    def __init__(self, cfg: InpaintConfig, rng: np.random.Generator):
        self.cfg = cfg
        w = cfg.width
        n_down = int(np.log2(cfg.image_size // (2 * cfg.fusion_size)))
        enc_w = [w] + [2 * w] * n_down
        self.entry = Conv2d(4, enc_w[0], 3, rng)
        self.down = [Conv2d(a, b, 3, rng, stride=2) for a, b in zip(enc_w[:-1], enc_w[1:])]
        self.fuse = Conv2d(enc_w[-1] + cfg.feature_channels, enc_w[-1], 3, rng)
        self.blocks = [ResBlock(enc_w[-1], rng) for _ in range(cfg.res_blocks)]
        # decoder mirrors the encoder; each stage sees its skip
        dec_in = enc_w[::-1]
        self.up = [Conv2d(a + b, b, 3, rng) for a, b in zip(dec_in[:-1], dec_in[1:])]
        self.full = Conv2d(enc_w[0] + 4, w, 3, rng)
        self.to_rgb = Conv2d(w, 3, 3, rng)

    def forward(self, I_M, mask, I_F) -> Tensor:
        x = ad.concat([ad.as_tensor(I_M), ad.as_tensor(mask[None])], axis=0)
        x = x.reshape((1,) + x.shape)
        h = ad.silu(self.entry(F.avg_pool2d(x, 2)))
        skips = [h]
        for conv in self.down:
            h = ad.silu(conv(h))
            skips.append(h)
        I_F = ad.as_tensor(I_F)
        if I_F.shape[-2:] != h.shape[-2:]:
            raise ShapeError(f"I_F spatial size {I_F.shape[-2:]} != fusion resolution {h.shape[-2:]}")
        h = ad.silu(self.fuse(ad.concat([h, I_F.reshape((1,) + I_F.shape)], axis=1)))
        for block in self.blocks:
            h = block(h)
        for conv, skip in zip(self.up, skips[-2::-1]):
            h = ad.silu(conv(ad.concat([F.upsample_bilinear(h, 2), skip], axis=1)))
        h = ad.silu(self.full(ad.concat([F.upsample_bilinear(h, 2), x], axis=1)))
        # residual on the visible frame: the network predicts a correction
        return self.to_rgb(h)[0] + I_M


def inpaint(net: InpaintNet, frame: MaskedFrame, I_F) -> Tensor:
    if hasattr(I_F, "I_F"):
        I_F = I_F.I_F
    return net(frame.I_M, frame.mask, I_F)


@dataclass
class RenderTrainState:
    net: InpaintNet
    D: MultiScaleDiscriminator
    opt_net: Adam
    opt_D: Adam
    phi: PerceptualExtractor
    weights: LossWeights

    @classmethod
    def create(cls, cfg: InpaintConfig, seed: int, lr: float = 1e-3, d_lr: float = 1e-3,
               weights: LossWeights = LossWeights()) -> "RenderTrainState":
        net = InpaintNet(cfg, ad.derive(seed, "inpaint"))
        D = MultiScaleDiscriminator(seed)
        return cls(net, D, Adam(net.parameters(), lr=lr), Adam(D.parameters(), lr=d_lr),
                   PerceptualExtractor(seed), weights)


def render_step(state: RenderTrainState, frame: MaskedFrame, I_F, I_GT: np.ndarray) -> float:
    """One generator update on L_rec + L_FM + L_GAN, then one discriminator update."""
    state.opt_net.zero_grad()
    state.opt_D.zero_grad()
    I = inpaint(state.net, frame, I_F)
    loss = (loss_render_rec(I, I_GT, state.weights, state.phi)
            + loss_feature_matching(I, I_GT, state.D) + gan_g_loss(I, state.D))
    if not np.isfinite(loss.item()):
        raise NumericError(f"renderer loss is {loss.item()}")
    loss.backward()
    state.opt_net.step()
    state.opt_D.zero_grad()
    d_loss = gan_d_loss(I.data, I_GT, state.D)
    d_loss.backward()
    state.opt_D.step()
    return loss.item()


def augmented_training_step(state: RenderTrainState, I_GT: np.ndarray, M_h: np.ndarray, renderer,
                            z_id, z_exp, cam: Camera, spread: float,
                            rng: np.random.Generator) -> float:
    """Render I_F with perturbed intrinsics, then ``render_step`` against the clean frame.

    Exactly three uniform draws are taken from ``rng`` per call, for any
    spread, so s = 0 runs reproduce the unaugmented step bit-exactly.
    """
    K = perturb_intrinsics(cam.K, spread, rng)
    cfg = state.net.cfg
    with ad.no_grad():
        I_F = renderer.feature_map(z_id, z_exp, K, cam.pose, size=cfg.fusion_size).I_F.data
    frame = make_masked_frame(I_GT, M_h, cfg.dilation)
    return render_step(state, frame, I_F, I_GT)


def render_frame(net: InpaintNet, renderer, I_GT: np.ndarray, M_h: np.ndarray, z_id, z_exp,
                 K, pose) -> np.ndarray:
    """Inference: I_F at fusion resolution, then inpaint the masked frame."""
    cfg = net.cfg
    with ad.no_grad():
        I_F = renderer.feature_map(z_id, z_exp, K, pose, size=cfg.fusion_size)
        frame = make_masked_frame(I_GT, M_h, cfg.dilation)
        return inpaint(net, frame, I_F).data


def perturbation_variance(net: InpaintNet, renderer, I_GT, M_h, z_id, z_exp, cam: Camera,
                          spread: float, draws: int, rng: np.random.Generator) -> float:
    """Mean per-pixel variance of the output over ``draws`` intrinsic perturbations."""
    outs = np.stack([render_frame(net, renderer, I_GT, M_h, z_id, z_exp,
                                  perturb_intrinsics(cam.K, spread, rng), cam.pose)
                     for _ in range(draws)])
    return float(outs.var(axis=0).mean())
