"""Training objectives and the multi-scale discriminator.

Images are [3, H, W] (or batched [B, 3, H, W]) tensors.  Squared norms are
plain sums over elements; the perceptual extractor is a frozen, seeded
random conv pyramid with taps at 1x, 1/2x and 1/4x resolution.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

import pir.autodiff as ad
from pir.autodiff import functional as F
from pir.autodiff import Conv2d, Module, Tensor
from pir.errors import ShapeError

EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0
    w4: float = 1.0

    def __post_init__(self):
        if min(self.w1, self.w2, self.w3, self.w4) < 0:
            raise ValueError("loss weights must be non-negative")


def _batched(img) -> Tensor:
    img = ad.as_tensor(img)
    return img.reshape((1,) + img.shape) if img.ndim == 3 else img


def _same_shape(a, b) -> None:
    if tuple(np.shape(a.data if isinstance(a, Tensor) else a)) != \
            tuple(np.shape(b.data if isinstance(b, Tensor) else b)):
        raise ShapeError(f"image shapes differ: {np.shape(getattr(a, 'data', a))} vs "
                         f"{np.shape(getattr(b, 'data', b))}")


def sq_norm(x: Tensor) -> Tensor:
    return (x * x).sum()


class PerceptualExtractor(Module):
    """Frozen random conv pyramid; ``forward`` returns the list of tap activations."""

    def __init__(self, seed: int = 0, widths: tuple[int, int, int] = (8, 12, 16)):
        rng = ad.derive(seed, "perceptual")
        chans = (3,) + tuple(widths)
        self.convs = [Conv2d(a, b, 3, rng) for a, b in zip(chans[:-1], chans[1:])]
        self.freeze()

    def forward(self, img) -> list[Tensor]:
        x = _batched(img)
        taps = []
        for i, conv in enumerate(self.convs):
            if i:
                x = F.avg_pool2d(x, 2)
            x = ad.silu(conv(x))
            taps.append(x)
        return taps


def perceptual_distance(a, b, phi: PerceptualExtractor) -> Tensor:
    """Σ_i ‖φ_i(a) − φ_i(b)‖²."""
    total = None
    for fa, fb in zip(phi(a), phi(b)):
        term = sq_norm(fa - fb)
        total = term if total is None else total + term
    return total


def loss_face(I_face, I_GT, M_h, w: LossWeights, phi: PerceptualExtractor) -> Tensor:
    """w1‖M⊙(I_face − I_GT)‖² + w2 Σ_i‖φ_i(I_face) − φ_i(M⊙I_GT)‖².

    The mask multiplies the ground truth inside the perceptual term but not
    the prediction.
    """
    I_face = ad.as_tensor(I_face)
    _same_shape(I_face, I_GT)
    M = np.asarray(M_h, dtype=np.float64)
    if M.shape != I_face.shape[-2:]:
        raise ShapeError(f"mask {M.shape} does not match image {I_face.shape}")
    gt = np.asarray(I_GT.data if isinstance(I_GT, Tensor) else I_GT)
    photometric = sq_norm((I_face - gt) * M)
    loss = photometric * w.w1
    if w.w2:
        loss = loss + perceptual_distance(I_face, gt * M, phi) * w.w2
    return loss


def loss_render_rec(I, I_GT, w: LossWeights, phi: PerceptualExtractor) -> Tensor:
    """w3‖I − I_GT‖² + w4 Σ_i‖φ_i(I) − φ_i(I_GT)‖²."""
    I = ad.as_tensor(I)
    _same_shape(I, I_GT)
    loss = sq_norm(I - I_GT) * w.w3
    if w.w4:
        loss = loss + perceptual_distance(I, I_GT, phi) * w.w4
    return loss


class PatchDiscriminator(Module):
    """Strided conv classifier; taps are every activation including the logit map."""

    def __init__(self, rng: np.random.Generator, widths: tuple[int, ...] = (8, 16)):
        chans = (3,) + tuple(widths)
        self.convs = [Conv2d(a, b, 3, rng, stride=2) for a, b in zip(chans[:-1], chans[1:])]
        self.to_logit = Conv2d(chans[-1], 1, 3, rng)

    def forward(self, x: Tensor) -> list[Tensor]:
        taps = []
        for conv in self.convs:
            x = ad.silu(conv(x))
            taps.append(x)
        taps.append(self.to_logit(x))
        return taps


class MultiScaleDiscriminator(Module):
    """D_1, D_2, D_3 on the image average-pooled by 1, 2 and 4."""

    def __init__(self, seed: int = 0, n_scales: int = 3, widths: tuple[int, ...] = (8, 16)):
        rng = ad.derive(seed, "discriminator")
        self.scales = [PatchDiscriminator(rng, widths) for _ in range(n_scales)]

    def features(self, img) -> list[list[Tensor]]:
        x = _batched(img)
        out = []
        for k, d in enumerate(self.scales):
            if k:
                x = F.avg_pool2d(x, 2)
            out.append(d(x))
        return out

    def probabilities(self, img) -> list[Tensor]:
        """D_k(img) in (0, 1): sigmoid of the mean logit, one per batch element."""
        return [ad.sigmoid(taps[-1].mean(axis=(1, 2, 3))) for taps in self.features(img)]


def loss_feature_matching(I, I_GT, D) -> Tensor:
    """Mean over scales of Σ_i (1/N_i)‖D_k^(i)(I) − D_k^(i)(I_GT)‖₁; real features detached."""
    fake = D.features(I)
    with ad.no_grad():
        real = D.features(I_GT)
    total = None
    for fk, rk in zip(fake, real):
        for f, r in zip(fk, rk):
            term = ad.abs(f - r.data).sum() * (1.0 / f.size)
            total = term if total is None else total + term
    return total * (1.0 / len(fake))


def _log_clamped(p: Tensor) -> Tensor:
    return ad.log(ad.clamp(p, EPS, 1.0 - EPS))


def gan_d_loss(I, I_GT, D) -> Tensor:
    """−Σ_k [log D_k(I_GT) + log(1 − D_k(I))]; ``I`` is treated as a constant."""
    fake = ad.as_tensor(I).data
    total = None
    for pr, pf in zip(D.probabilities(I_GT), D.probabilities(fake)):
        term = -(_log_clamped(pr) + _log_clamped(1.0 - pf)).sum()
        total = term if total is None else total + term
    return total


def gan_g_loss(I, D) -> Tensor:
    """−Σ_k log D_k(I)."""
    total = None
    for pf in D.probabilities(I):
        term = -_log_clamped(pf).sum()
        total = term if total is None else total + term
    return total


def loss_gan(I, I_GT, D) -> tuple[Tensor, Tensor]:
    """(d_loss, g_loss) of the minimax objective with probabilities clamped to [ε, 1−ε]."""
    return gan_d_loss(I, I_GT, D), gan_g_loss(I, D)
