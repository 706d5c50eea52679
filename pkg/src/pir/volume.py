"""Emission-absorption volume rendering of the tri-plane field.

Each pixel's ray is sampled in two passes: stratified coarse depths, then
inverse-CDF resampling proportional to the coarse compositing weights.  The
merged samples are composited into a low-resolution feature image I_F,
which a small convolutional upsampler turns into the RGB face image.
Depths are distances along the unit ray direction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

import pir.autodiff as ad
from pir.autodiff import functional as F
from pir.autodiff import Conv2d, Module, Tensor
from pir.camera import Intrinsics, Pose, pixel_rays
from pir.triplane import FieldConfig, TriPlane, TriPlaneField, sample_field


@dataclass
class RenderConfig:
    image_size: int = 64
    feature_size: int = 16
    n_coarse: int = 32
    n_fine: int = 32
    near: float = 2.0
    far: float = 3.5
    up_width: int = 32

    def __post_init__(self):
        ratio = self.image_size // self.feature_size
        if self.image_size % self.feature_size or ratio & (ratio - 1):
            raise ValueError("image_size / feature_size must be a power of two")
        if self.n_coarse < 1 or self.n_fine < 0:
            raise ValueError("sample counts must be positive")
        if not self.near < self.far:
            raise ValueError("near must be < far")


@dataclass
class SampleBatch:
    depths: np.ndarray  # [..., N_s], strictly increasing
    deltas: np.ndarray  # [..., N_s], last = far - depth_N
    near: float
    far: float

    @property
    def edges(self) -> np.ndarray:
        """Bin boundaries: near, midpoints between depths, far."""
        d = self.depths
        lead = d.shape[:-1]
        mids = 0.5 * (d[..., 1:] + d[..., :-1])
        return np.concatenate([np.full(lead + (1,), self.near), mids, np.full(lead + (1,), self.far)],
                              axis=-1)


@dataclass
class RenderedFeatureMap:
    I_F: Tensor  # [C, H_F, W_F]
    accumulated_opacity: np.ndarray  # [H_F, W_F]


def _batch(depths: np.ndarray, near: float, far: float) -> SampleBatch:
    deltas = np.concatenate([np.diff(depths, axis=-1), far - depths[..., -1:]], axis=-1)
    return SampleBatch(depths, deltas, near, far)


def stratified_samples(near: float, far: float, n: int, rng: np.random.Generator | None = None,
                       jitter: bool = False, shape: tuple[int, ...] = ()) -> SampleBatch:
    """One depth per equal bin of [near, far]: the centre, or uniform within it."""
    if n < 1:
        raise ValueError("need at least one sample")
    if not near < far:
        raise ValueError(f"near ({near}) must be < far ({far})")
    width = (far - near) / n
    lo = near + width * np.arange(n)
    if jitter:
        u = rng.uniform(0.0, 1.0, size=tuple(shape) + (n,))
    else:
        u = np.full(tuple(shape) + (n,), 0.5)
    return _batch(lo + width * u, near, far)


def composite(color, density, batch: SampleBatch) -> tuple[Tensor, Tensor, Tensor]:
    """Front-to-back compositing along the last sample axis.

    color [..., N, C], density [..., N]  ->  feature [..., C], weights [..., N],
    T_final [...].
    """
    color, density = ad.as_tensor(color), ad.as_tensor(density)
    tau = density * batch.deltas
    acc = ad.cumsum(tau, axis=-1)
    T = ad.exp(-(acc - tau))
    alpha = 1.0 - ad.exp(-tau)
    weights = T * alpha
    feature = (weights.reshape(weights.shape + (1,)) * color).sum(axis=-2)
    T_final = ad.exp(-acc[..., -1])
    return feature, weights, T_final


def _strictly_increasing(d: np.ndarray) -> np.ndarray:
    d = d.copy()
    for i in range(1, d.shape[-1]):
        d[..., i] = np.maximum(d[..., i], np.nextafter(d[..., i - 1], np.inf))
    return d


def sample_pdf(edges: np.ndarray, weights: np.ndarray, n: int,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """Inverse-CDF draws from the piecewise-constant PDF with bin mass ``weights``.

    ``edges`` [..., B+1], ``weights`` [..., B] -> depths [..., n].  Rows whose
    weights are all zero fall back to uniform.  Without ``rng`` the
    quantiles (i + 1) / (n + 1) are used.
    """
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    total = w.sum(axis=-1, keepdims=True)
    w = np.where(total > 0, w, 1.0)
    pdf = w / w.sum(axis=-1, keepdims=True)
    cdf = np.concatenate([np.zeros(pdf.shape[:-1] + (1,)), np.cumsum(pdf, axis=-1)], axis=-1)
    cdf[..., -1] = 1.0
    lead = pdf.shape[:-1]
    if rng is None:
        u = np.broadcast_to((np.arange(n) + 1.0) / (n + 1.0), lead + (n,))
    else:
        u = rng.uniform(0.0, 1.0, size=lead + (n,))
    # one searchsorted over all rows: offset row r by 2r to keep it monotone
    flat_cdf = cdf.reshape(-1, cdf.shape[-1])
    rows = np.arange(len(flat_cdf))[:, None]
    idx = np.searchsorted((flat_cdf + 2.0 * rows).ravel(), (u.reshape(-1, n) + 2.0 * rows).ravel(),
                          side="right").reshape(-1, n)
    idx -= cdf.shape[-1] * rows
    bins = np.clip(idx - 1, 0, pdf.shape[-1] - 1).reshape(u.shape)
    c_lo = np.take_along_axis(cdf, bins, axis=-1)
    c_hi = np.take_along_axis(cdf, bins + 1, axis=-1)
    e_lo = np.take_along_axis(edges, bins, axis=-1)
    e_hi = np.take_along_axis(edges, bins + 1, axis=-1)
    frac = (u - c_lo) / np.where(c_hi > c_lo, c_hi - c_lo, 1.0)
    return e_lo + frac * (e_hi - e_lo)


def importance_resample(batch: SampleBatch, weights: np.ndarray, n_fine: int,
                        rng: np.random.Generator | None = None) -> SampleBatch:
    """Coarse depths merged with ``n_fine`` draws proportional to the coarse weights."""
    if n_fine == 0:
        return batch
    fine = sample_pdf(batch.edges, weights, n_fine, rng)
    fine = np.minimum(fine, np.nextafter(batch.far, -np.inf))
    merged = _strictly_increasing(np.sort(np.concatenate([batch.depths, fine], axis=-1), axis=-1))
    return _batch(merged, batch.near, batch.far)


class Upsampler(Module):
    """I_F [C, h, w] -> RGB [3, h*r, w*r] with conv + bilinear 2x stages."""

    def __init__(self, c_in: int, ratio: int, width: int, rng: np.random.Generator):
        n_up = int(np.log2(ratio))
        widths = [width] * n_up + [max(width // 2, 4)]
        self.entry = Conv2d(c_in, widths[0], 3, rng)
        self.stages = [Conv2d(a, b, 3, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.to_rgb = Conv2d(widths[-1], 3, 1, rng)

    def forward(self, I_F: Tensor) -> Tensor:
        x = ad.silu(self.entry(I_F.reshape((1,) + I_F.shape)))
        for conv in self.stages:
            x = ad.silu(conv(F.upsample_bilinear(x, 2)))
        return self.to_rgb(x)[0]


def upsample_to_image(I_F, upsampler: Upsampler) -> Tensor:
    if isinstance(I_F, RenderedFeatureMap):
        I_F = I_F.I_F
    return upsampler(ad.as_tensor(I_F))


def plan_samples(tp: TriPlane, decoder, origins: np.ndarray, dirs: np.ndarray, n_coarse: int,
                 n_fine: int, near: float, far: float,
                 rng: np.random.Generator | None = None) -> SampleBatch:
    """Coarse pass (no tape) followed by importance resampling; depths [R, N_c + N_f]."""
    R = origins.shape[0]
    coarse = stratified_samples(near, far, n_coarse, rng, jitter=rng is not None, shape=(R,))
    if n_fine == 0:
        return coarse
    with ad.no_grad():
        pts = origins[:, None, :] + coarse.depths[..., None] * dirs[:, None, :]
        s = sample_field(pts.reshape(-1, 3), tp, decoder)
        _, w, _ = composite(s.color_feature.reshape(R, n_coarse, -1), s.density.reshape(R, n_coarse),
                            coarse)
    return importance_resample(coarse, w.data, n_fine, rng)


def shade_rays(tp: TriPlane, decoder, origins: np.ndarray, dirs: np.ndarray, batch: SampleBatch,
               background=None) -> tuple[Tensor, Tensor]:
    """Differentiable pass at fixed depths: (feature [R, C], T_final [R])."""
    R, n = batch.depths.shape
    pts = origins[:, None, :] + batch.depths[..., None] * dirs[:, None, :]
    s = sample_field(pts.reshape(-1, 3), tp, decoder)
    feat, _, T_final = composite(s.color_feature.reshape(R, n, -1), s.density.reshape(R, n), batch)
    if background is not None:
        feat = feat + T_final.reshape(R, 1) * ad.as_tensor(background).reshape(1, -1)
    return feat, T_final


def render_feature_map(tp: TriPlane, decoder, K: Intrinsics, pose: Pose, height: int, width: int,
                       n_coarse: int, n_fine: int, near: float = 2.0, far: float = 3.5,
                       rng: np.random.Generator | None = None, background=None) -> RenderedFeatureMap:
    """Render I_F at ``height`` x ``width`` with intrinsics ``K`` for that resolution.

    Sample depths are chosen without a gradient tape and treated as
    constants; only the shading at those depths is differentiable.
    ``rng=None`` selects the deterministic mode (bin centres and fixed
    quantiles).  ``background`` (a [C] feature) is composited behind the
    field with the residual transmittance.
    """
    origins, dirs = pixel_rays(K, pose, height, width)
    batch = plan_samples(tp, decoder, origins, dirs, n_coarse, n_fine, near, far, rng)
    feat, T_final = shade_rays(tp, decoder, origins, dirs, batch, background)
    I_F = feat.T.reshape(feat.shape[-1], height, width)
    opacity = (1.0 - T_final.data).reshape(height, width)
    return RenderedFeatureMap(I_F, opacity)


class FaceRenderer(Module):
    """Tri-plane field + background feature + upsampler: (z_id, z_exp, camera) -> I_face."""

    def __init__(self, field_cfg: FieldConfig, render_cfg: RenderConfig, rng: np.random.Generator):
        self.field_cfg = field_cfg
        self.render_cfg = render_cfg
        self.field = TriPlaneField(field_cfg, rng)
        self.background = ad.param(np.zeros(field_cfg.feature_out))
        ratio = render_cfg.image_size // render_cfg.feature_size
        self.upsampler = Upsampler(field_cfg.feature_out, ratio, render_cfg.up_width, rng)

    def feature_map(self, z_id, z_exp, K: Intrinsics, pose: Pose, size: int | None = None,
                    rng: np.random.Generator | None = None) -> RenderedFeatureMap:
        """I_F at ``size`` pixels square; ``K`` is given at the full image resolution."""
        rc = self.render_cfg
        size = rc.feature_size if size is None else size
        Ks = K.scaled(size / rc.image_size)
        tp = self.field.planes(z_id, z_exp)
        return render_feature_map(tp, self.field.decoder, Ks, pose, size, size, rc.n_coarse,
                                  rc.n_fine, rc.near, rc.far, rng, self.background)

    def forward(self, z_id, z_exp, K: Intrinsics, pose: Pose,
                rng: np.random.Generator | None = None) -> tuple[Tensor, RenderedFeatureMap]:
        fm = self.feature_map(z_id, z_exp, K, pose, rng=rng)
        return upsample_to_image(fm, self.upsampler), fm
