"""Conditional tri-plane feature field.

Identity and expression parameters are mapped to a latent ``z``; a small
modulated convolutional generator turns ``z`` into three axis-aligned
feature planes (xy, xz, yz).  A 3D point's feature is the sum of its three
bilinear plane samples, decoded by a one-hidden-layer softplus MLP into a
colour feature and a non-negative density.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

import pir.autodiff as ad
from pir.autodiff import functional as F
from pir.autodiff import Conv2d, Linear, Module, Tensor
from pir.errors import ShapeError


@dataclass
class FieldConfig:
    d_id: int = 8
    d_exp: int = 8
    d_z: int = 32
    mapping_layers: int = 2
    channels: int = 8  # C_f per plane
    resolution: int = 32  # N
    gen_width: int = 32
    extent: float = 0.5
    decoder_hidden: int = 64
    feature_out: int = 8  # colour feature channels of I_F

    def __post_init__(self):
        n = self.resolution
        if n < 4 or n & (n - 1):
            raise ValueError(f"plane resolution must be a power of two >= 4, got {n}")
        if self.extent <= 0:
            raise ValueError("extent must be positive")


@dataclass
class TriPlane:
    planes: tuple[Tensor, Tensor, Tensor]  # xy, xz, yz, each [C_f, N, N]
    extent: float

    def __post_init__(self):
        shapes = {p.shape for p in self.planes}
        if len(self.planes) != 3 or len(shapes) != 1:
            raise ShapeError(f"three planes of equal shape required, got {sorted(shapes)}")
        C, H, W = self.planes[0].shape
        if H != W:
            raise ShapeError(f"planes must be square, got {H}x{W}")
        if self.extent <= 0:
            raise ValueError("extent must be positive")

    @property
    def channels(self) -> int:
        return self.planes[0].shape[0]

    @property
    def resolution(self) -> int:
        return self.planes[0].shape[1]


@dataclass
class FieldSample:
    color_feature: Tensor  # [..., C_out]
    density: Tensor  # [...]


# ---------------------------------------------------------------------------
# plane sampling
# ---------------------------------------------------------------------------
def plane_sample_matrix(a, b, n: int) -> sp.csc_matrix:
    """Sparse [n*n, P] bilinear weights for queries (a, b) in [-1, 1].

    ``a`` indexes columns and ``b`` rows; -1 maps to texel 0's centre and +1
    to texel n-1's centre.  Out-of-range queries clamp to the border.
    """
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    col = np.clip((a + 1.0) * 0.5 * (n - 1), 0.0, n - 1)
    row = np.clip((b + 1.0) * 0.5 * (n - 1), 0.0, n - 1)
    c0 = np.minimum(np.floor(col).astype(np.int64), n - 2)
    r0 = np.minimum(np.floor(row).astype(np.int64), n - 2)
    fc = col - c0
    fr = row - r0
    P = len(a)
    rows = np.stack([r0 * n + c0, r0 * n + c0 + 1, (r0 + 1) * n + c0, (r0 + 1) * n + c0 + 1])
    vals = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc])
    cols = np.broadcast_to(np.arange(P), rows.shape)
    return sp.csc_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=(n * n, P))


def sample_plane(plane, a, b) -> Tensor:
    """Bilinear samples of ``plane`` [C, N, N]: [P, C] for arrays, [C] for scalars."""
    plane = ad.as_tensor(plane)
    C, n, _ = plane.shape
    scalar = np.ndim(a) == 0 and np.ndim(b) == 0
    S = plane_sample_matrix(a, b, n)
    out = ad.sparse_matmul(plane.reshape(C, n * n), S).T
    return out.reshape(C) if scalar else out


def plane_features(points: np.ndarray, tp: TriPlane) -> Tensor:
    """Summed tri-plane feature [P, C_f] for world points [P, 3]."""
    q = np.asarray(points, dtype=np.float64).reshape(-1, 3) / tp.extent
    x, y, z = q[:, 0], q[:, 1], q[:, 2]
    xy, xz, yz = tp.planes
    return sample_plane(xy, x, y) + sample_plane(xz, x, z) + sample_plane(yz, y, z)


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------
class LatentMapping(Module):
    def __init__(self, cfg: FieldConfig, rng: np.random.Generator):
        dims = [cfg.d_id + cfg.d_exp] + [cfg.d_z] * cfg.mapping_layers
        self.layers = [Linear(i, o, rng) for i, o in zip(dims[:-1], dims[1:])]

    def forward(self, z_in: Tensor) -> Tensor:
        h = z_in
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = ad.silu(h)
        return h


def map_latent(z_id, z_exp, mapping: LatentMapping) -> Tensor:
    z_id, z_exp = ad.as_tensor(z_id), ad.as_tensor(z_exp)
    d_in = mapping.layers[0].weight.shape[0]
    if z_id.shape[-1] + z_exp.shape[-1] != d_in:
        raise ShapeError(f"z_id {z_id.shape} + z_exp {z_exp.shape} do not match mapping input {d_in}")
    return mapping(ad.concat([z_id, z_exp], axis=-1))


class ModulatedConv(Module):
    """3x3 conv whose output channels are scaled by ``1 + style(z)``."""

    def __init__(self, c_in: int, c_out: int, d_z: int, rng: np.random.Generator):
        self.conv = Conv2d(c_in, c_out, 3, rng)
        self.style = Linear(d_z, c_out, rng)

    def forward(self, x: Tensor, z: Tensor) -> Tensor:
        s = self.style(z).reshape(1, -1, 1, 1)
        return ad.silu(self.conv(x) * (s + 1.0))


class PlaneGenerator(Module):
    """Learned 4x4 constant -> (upsample, modulated conv) stages -> 3*C_f x N x N."""

    def __init__(self, cfg: FieldConfig, rng: np.random.Generator):
        w = cfg.gen_width
        self.const = ad.param(rng.standard_normal((1, w, 4, 4)) * 0.5)
        self.head = ModulatedConv(w, w, cfg.d_z, rng)
        n_up = int(np.log2(cfg.resolution // 4))
        self.stages = [ModulatedConv(w, w, cfg.d_z, rng) for _ in range(n_up)]
        self.to_planes = Conv2d(w, 3 * cfg.channels, 1, rng)
        self.channels = cfg.channels

    def forward(self, z: Tensor) -> Tensor:
        x = self.head(self.const, z)
        for stage in self.stages:
            x = stage(F.upsample_bilinear(x, 2), z)
        return self.to_planes(x)[0]


def generate_planes(z, generator: PlaneGenerator, extent: float) -> TriPlane:
    out = generator(ad.as_tensor(z))
    C = generator.channels
    return TriPlane((out[0:C], out[C:2 * C], out[2 * C:3 * C]), extent)


class FieldDecoder(Module):
    """C_f -> hidden (softplus) -> C_out colour + 1 raw density."""

    def __init__(self, cfg: FieldConfig, rng: np.random.Generator):
        self.hidden = Linear(cfg.channels, cfg.decoder_hidden, rng)
        self.out = Linear(cfg.decoder_hidden, cfg.feature_out + 1, rng)
        self.feature_out = cfg.feature_out

    def forward(self, features: Tensor) -> FieldSample:
        h = self.out(ad.softplus(self.hidden(features)))
        return FieldSample(h[..., :self.feature_out], ad.softplus(h[..., self.feature_out]))


def sample_field(points, tp: TriPlane, decoder: FieldDecoder) -> FieldSample:
    """Field at world points [P, 3] (or a single 3-vector)."""
    pts = np.asarray(points, dtype=np.float64)
    sample = decoder(plane_features(pts.reshape(-1, 3), tp))
    if pts.ndim == 1:
        return FieldSample(sample.color_feature.reshape(-1), sample.density.reshape(()))
    return sample


class TriPlaneField(Module):
    """Latent mapping, plane generator and decoder bundled for one identity."""

    def __init__(self, cfg: FieldConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.mapping = LatentMapping(cfg, rng)
        self.generator = PlaneGenerator(cfg, rng)
        self.decoder = FieldDecoder(cfg, rng)

    def planes(self, z_id, z_exp) -> TriPlane:
        return generate_planes(map_latent(z_id, z_exp, self.mapping), self.generator, self.cfg.extent)
