"""Procedural talking-head scene with an independent reference renderer.

The head is a soft-density ellipsoid centred at the world origin (+y down,
face towards -z) with a smooth analytic colour field: skin, hair on top,
two eyes, lips, and a dark interior.  Expression coefficient a[0] opens the
mouth by carving a slab of height ``gap_scale * max(a[0], 0)``; a[1] widens
the mouth and a[2] closes the eyes.  Frames are rendered by a brute-force
numpy ray marcher that shares only the camera module with the learned
pipeline, then composited over a static background with a torso.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from pir.autodiff import checkpoint, derive
from pir.camera import Camera, Intrinsics, Pose, pixel_rays, read_cameras, write_cameras
from pir.errors import MissingArtifactError

RADII = np.array([0.36, 0.44, 0.38])
MOUTH_Y = 0.17
EYE_Y = -0.06
EYE_X = 0.13


@dataclass
class SceneConfig:
    frames: int = 220
    train_frames: int = 200
    size: int = 64
    focal: float = 110.0
    distance: float = 2.7
    near: float = 2.0
    far: float = 3.5
    ref_samples: int = 128
    d_exp: int = 8
    d_id: int = 8
    d_audio: int = 16
    feature_noise: float = 0.01
    gap_scale: float = 0.12
    sigma_max: float = 40.0
    sharpness: float = 30.0

    def __post_init__(self):
        if not 0 < self.train_frames < self.frames:
            raise ValueError("need 0 < train_frames < frames")
        if self.d_exp < 3:
            raise ValueError("d_exp must be >= 3 (mouth, width, eyes)")


@dataclass
class SyntheticScene:
    images: np.ndarray  # [F, 3, H, W] in [0, 1]
    masks: np.ndarray  # [F, H, W] bool, head opacity > 0.5
    opacity: np.ndarray  # [F, H, W]
    cameras: list[Camera]
    expressions: np.ndarray  # [F, d_exp]
    features: np.ndarray  # [2F, d_audio], two rows per frame
    z_id: np.ndarray  # [d_id]
    background: np.ndarray  # [3, H, W]
    train_frames: int
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return len(self.images)

    @property
    def train_idx(self) -> np.ndarray:
        return np.arange(self.train_frames)

    @property
    def test_idx(self) -> np.ndarray:
        return np.arange(self.train_frames, self.n_frames)


# ---------------------------------------------------------------------------
# analytic head
# ---------------------------------------------------------------------------
def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def mouth_carve(p: np.ndarray, expr: np.ndarray, gap_scale: float) -> np.ndarray:
    """Fraction of density removed by the mouth slab; exactly 0 when a[0] <= 0."""
    gap = gap_scale * max(float(expr[0]), 0.0)
    half_w = 0.11 * (1.0 + 0.25 * np.tanh(expr[1]))
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    vertical = np.clip((0.5 * gap - np.abs(y - MOUTH_Y)) / 0.01, 0.0, 1.0)
    horizontal = _smoothstep((half_w - np.abs(x)) / 0.03)
    depth = _smoothstep((-0.12 - z) / 0.05)
    return vertical * horizontal * depth


def head_density(p: np.ndarray, expr: np.ndarray, cfg: SceneConfig) -> np.ndarray:
    r = np.sqrt(np.sum((p / RADII) ** 2, axis=-1))
    solid = cfg.sigma_max / (1.0 + np.exp(-cfg.sharpness * (1.0 - r)))
    return solid * (1.0 - mouth_carve(p, expr, cfg.gap_scale))


def _blend(base: np.ndarray, color, weight: np.ndarray) -> np.ndarray:
    w = weight[..., None]
    return base * (1.0 - w) + np.asarray(color) * w


def head_color(p: np.ndarray, expr: np.ndarray) -> np.ndarray:
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    r = np.sqrt(np.sum((p / RADII) ** 2, axis=-1))
    skin = np.array([0.86, 0.66, 0.52]) - 0.12 * (y[..., None] / RADII[1]) * np.array([0.3, 0.5, 0.5])
    c = np.broadcast_to(skin, p.shape).copy()
    front = _smoothstep((-z - 0.05) / 0.1)
    # hair on the crown and the back of the head
    hair = np.maximum(_smoothstep((-y - 0.16) / 0.08), _smoothstep((z - 0.12) / 0.1))
    c = _blend(c, [0.28, 0.17, 0.09], hair)
    # eyes: dark ellipses, vertically squashed as a[2] -> +inf
    openness = 0.5 * (1.0 - np.tanh(expr[2])) + 0.05
    for sx in (-1.0, 1.0):
        d2 = ((x - sx * EYE_X) / 0.05) ** 2 + ((y - EYE_Y) / (0.035 * openness)) ** 2
        c = _blend(c, [0.12, 0.12, 0.18], np.exp(-d2) * front)
    # lips around the mouth line
    half_w = 0.11 * (1.0 + 0.25 * np.tanh(expr[1]))
    lips = np.exp(-((y - MOUTH_Y) / 0.04) ** 2) * _smoothstep((half_w + 0.02 - np.abs(x)) / 0.04)
    c = _blend(c, [0.72, 0.28, 0.3], lips * front)
    # dark interior seen through the open mouth
    c = _blend(c, [0.32, 0.05, 0.08], _smoothstep((0.93 - r) / 0.06))
    return np.clip(c, 0.0, 1.0)


def reference_render(cam: Camera, expr: np.ndarray, cfg: SceneConfig) -> tuple[np.ndarray, np.ndarray]:
    """Brute-force midpoint ray marching: (rgb [3, H, W], opacity [H, W])."""
    H = W = cfg.size
    origins, dirs = pixel_rays(cam.K, cam.pose, H, W)
    n = cfg.ref_samples
    step = (cam.far - cam.near) / n
    t = cam.near + step * (np.arange(n) + 0.5)
    pts = origins[:, None, :] + t[None, :, None] * dirs[:, None, :]
    sigma = head_density(pts, expr, cfg)
    absorb = sigma * step
    trans = np.exp(-np.concatenate([np.zeros((len(pts), 1)), np.cumsum(absorb, axis=1)[:, :-1]], axis=1))
    w = trans * (1.0 - np.exp(-absorb))
    # colour is only evaluated where it can contribute
    live = w > 1e-10
    color = np.zeros((len(pts), 3))
    np.add.at(color, np.nonzero(live)[0], w[live][:, None] * head_color(pts[live], expr))
    opacity = w.sum(axis=1)
    return color.T.reshape(3, H, W), opacity.reshape(H, W)


def make_background(size: int) -> np.ndarray:
    """Vertical blue-grey gradient with a static torso ellipse at the bottom."""
    v, u = np.meshgrid((np.arange(size) + 0.5) / size, (np.arange(size) + 0.5) / size, indexing="ij")
    bg = np.stack([0.35 + 0.25 * v, 0.45 + 0.2 * v, 0.6 - 0.1 * v])
    torso = _smoothstep((1.0 - np.sqrt(((u - 0.5) / 0.42) ** 2 + ((v - 1.08) / 0.3) ** 2)) / 0.05)
    shirt = np.stack([0.2 + 0.1 * u, 0.3 + 0.05 * u, 0.55 - 0.1 * v])
    return bg * (1.0 - torso) + shirt * torso


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------
def _smooth_signal(rng: np.random.Generator, times: np.ndarray, n_terms: int = 3,
                   fps: float = 25.0) -> np.ndarray:
    """Sum of random sinusoids in 0.2..1.6 Hz, normalised to unit peak."""
    freq = rng.uniform(0.2, 1.6, n_terms)
    phase = rng.uniform(0, 2 * np.pi, n_terms)
    amp = rng.uniform(0.5, 1.0, n_terms)
    s = np.sum(amp[:, None] * np.sin(2 * np.pi * freq[:, None] * times[None] / fps + phase[:, None]),
               axis=0)
    return s / amp.sum()


def expression_trajectory(rng: np.random.Generator, times: np.ndarray, d_exp: int) -> np.ndarray:
    """[len(times), d_exp]; a[0] is the mouth opening (closed for a[0] <= 0)."""
    out = np.stack([_smooth_signal(rng, times) for _ in range(d_exp)], axis=1)
    out[:, 0] = 1.6 * out[:, 0] + 0.3
    return out


def pose_trajectory(rng: np.random.Generator, times: np.ndarray) -> np.ndarray:
    """[len(times), 3] yaw, pitch, roll in radians (±20, ±10, ±5 degrees)."""
    limits = np.deg2rad([20.0, 10.0, 5.0])
    return np.stack([lim * _smooth_signal(rng, times, fps=25.0 * 2.0) for lim in limits], axis=1)


def scene_intrinsics(cfg: SceneConfig) -> Intrinsics:
    c = cfg.size / 2.0
    return Intrinsics(cfg.focal, cfg.focal, c, c)


def generate_scene(cfg: SceneConfig, seed: int) -> SyntheticScene:
    """Deterministic given ``seed``."""
    rng_expr = derive(seed, "scene.expressions")
    rng_pose = derive(seed, "scene.poses")
    rng_feat = derive(seed, "scene.features")
    F = cfg.frames
    frame_t = np.arange(F, dtype=np.float64)
    half_t = np.arange(2 * F, dtype=np.float64) / 2.0
    expr_state = rng_expr.bit_generator.state
    expressions = expression_trajectory(rng_expr, frame_t, cfg.d_exp)
    # the same random curves evaluated at half-frame times drive the features
    rng_expr.bit_generator.state = expr_state
    expr_half = expression_trajectory(rng_expr, half_t, cfg.d_exp)
    mix = rng_feat.standard_normal((cfg.d_exp, cfg.d_audio)) / np.sqrt(cfg.d_exp)
    features = expr_half @ mix + cfg.feature_noise * rng_feat.standard_normal((2 * F, cfg.d_audio))
    z_id = derive(seed, "scene.identity").standard_normal(cfg.d_id)

    K = scene_intrinsics(cfg)
    poses = pose_trajectory(rng_pose, frame_t)
    cameras = [Camera(K, Pose.look_from(*ypr, cfg.distance), cfg.near, cfg.far) for ypr in poses]
    background = make_background(cfg.size)
    images = np.empty((F, 3, cfg.size, cfg.size))
    opacity = np.empty((F, cfg.size, cfg.size))
    for i, cam in enumerate(cameras):
        rgb, alpha = reference_render(cam, expressions[i], cfg)
        images[i] = rgb + (1.0 - alpha) * background
        opacity[i] = alpha
    return SyntheticScene(np.clip(images, 0.0, 1.0), opacity > 0.5, opacity, cameras, expressions,
                          features, z_id, background, cfg.train_frames, {"seed": seed})


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------
SCENE_FILE = "scene.pirk"
CAMERA_FILE = "cameras.txt"


def save_scene(scene: SyntheticScene, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tensors = {
        "images": scene.images, "masks": scene.masks.astype(np.uint8), "opacity": scene.opacity,
        "expressions": scene.expressions, "features": scene.features, "z_id": scene.z_id,
        "background": scene.background,
    }
    checkpoint.save(d / SCENE_FILE, tensors, dict(scene.meta, train_frames=scene.train_frames))
    write_cameras(d / CAMERA_FILE, scene.cameras)


def load_scene(directory) -> SyntheticScene:
    d = Path(directory)
    if not (d / SCENE_FILE).exists():
        raise MissingArtifactError(f"scene: {d / SCENE_FILE} not found (run gen-scene first)")
    t, meta = checkpoint.load(d / SCENE_FILE)
    cameras = read_cameras(d / CAMERA_FILE)
    return SyntheticScene(t["images"], t["masks"].astype(bool), t["opacity"], cameras,
                          t["expressions"], t["features"], t["z_id"], t["background"],
                          int(meta["train_frames"]), meta)

