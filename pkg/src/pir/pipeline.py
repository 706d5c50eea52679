"""Three-stage training, end-to-end inference and the on-disk artifact layout.

A workspace directory holds::

    config.cfg            the configuration used for training
    scene/                synthetic scene (scene.pirk, cameras.txt)
    audio2exp.pirk        stage 1 checkpoint
    field.pirk            stage 2 checkpoint (tri-plane field + upsampler)
    render.pirk           stage 3 checkpoint (inpainting network)
    train_report.tsv      per-stage metrics, plus train_curves.png
    out/                  frames, metrics.tsv and metrics.png written by ``run``
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

import pir.autodiff as ad
from pir.audio2exp import Audio2Exp, infer, train
from pir.autodiff import checkpoint
from pir.config import ExperimentConfig, serialize_config
from pir.errors import MissingArtifactError, NumericError
from pir.imageio import write_ppm
from pir.inpaint import InpaintNet, RenderTrainState, augmented_training_step, render_frame
from pir.losses import PerceptualExtractor, loss_face
from pir.metrics import masked_psnr, psnr, ssim
from pir.plotting import plot_frame_metrics, plot_training_curves
from pir.report import write_tsv
from pir.scene import SyntheticScene, generate_scene, load_scene, save_scene
from pir.volume import FaceRenderer

log = logging.getLogger("pir")

PER_FRAME = 2  # audio feature rows per video frame
STAGES = ("audio2exp", "field", "render")
STAGE_COMMANDS = {"audio2exp": "pir audio2exp train", "field": "pir field train",
                  "render": "pir render train"}


@dataclass
class Workspace:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def scene_dir(self) -> Path:
        return self.root / "scene"

    @property
    def config_path(self) -> Path:
        return self.root / "config.cfg"

    @property
    def out_dir(self) -> Path:
        return self.root / "out"

    def checkpoint(self, stage: str) -> Path:
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        return self.root / f"{stage}.pirk"


def load_stage(ws: Workspace, stage: str):
    path = ws.checkpoint(stage)
    if not path.exists():
        raise MissingArtifactError(
            f"{stage} checkpoint missing at {path}; run `{STAGE_COMMANDS[stage]}` first")
    return checkpoint.load(path)


# ---------------------------------------------------------------------------
# scene
# ---------------------------------------------------------------------------
def ensure_scene(cfg: ExperimentConfig, ws: Workspace) -> SyntheticScene:
    """Load the workspace scene, regenerating it if absent or built from other settings."""
    wanted = {"seed": cfg.seed, "scene_config": asdict(cfg.scene())}
    try:
        scene = load_scene(ws.scene_dir)
        if {k: scene.meta.get(k) for k in wanted} == wanted:
            return scene
        log.info("scene settings changed; regenerating")
    except MissingArtifactError:
        pass
    return write_scene(cfg, ws)


def write_scene(cfg: ExperimentConfig, ws: Workspace) -> SyntheticScene:
    t0 = time.perf_counter()
    scene = generate_scene(cfg.scene(), cfg.seed)
    scene.meta["scene_config"] = asdict(cfg.scene())
    save_scene(scene, ws.scene_dir)
    log.info("scene: %d frames in %.1f s", scene.n_frames, time.perf_counter() - t0)
    return scene


# ---------------------------------------------------------------------------
# stage 1: audio features -> expressions
# ---------------------------------------------------------------------------
@dataclass
class AudioReport:
    losses: list[float]
    val_mse: float
    target_var: float

    @property
    def ratio(self) -> float:
        return self.val_mse / self.target_var


def build_audio2exp(cfg: ExperimentConfig, k: int | None = None, label: str = "audio2exp.init"):
    dcfg = cfg.decoder()
    if k is not None:
        dcfg.context = k
    return Audio2Exp(dcfg, ad.derive(cfg.seed, label))


def predict_test_expressions(model: Audio2Exp, scene: SyntheticScene, k: int | None = None,
                             features: np.ndarray | None = None) -> np.ndarray:
    """Autoregressive expressions for the held-out frames, decoded from their features only."""
    tf = scene.train_frames
    feats = scene.features[PER_FRAME * tf:] if features is None else features
    return infer(model, feats, scene.z_id, scene.n_frames - tf, PER_FRAME, k)


def audio_validation(model: Audio2Exp, scene: SyntheticScene, k: int | None = None):
    pred = predict_test_expressions(model, scene, k)
    target = scene.expressions[scene.train_frames:]
    return float(np.mean((pred - target) ** 2)), float(np.var(target))


def train_audio2exp_stage(cfg: ExperimentConfig, scene: SyntheticScene, k: int | None = None,
                          steps: int | None = None, label: str = "audio2exp"):
    model = build_audio2exp(cfg, k, f"{label}.init")
    settings = cfg.audio_training()
    if steps is not None:
        settings.steps = steps
    t0 = time.perf_counter()
    losses = train(model, scene.features, scene.expressions, scene.z_id, scene.train_frames,
                   PER_FRAME, settings, ad.derive(cfg.seed, f"{label}.train"), k)
    mse, var = audio_validation(model, scene, k)
    log.info("audio2exp: %d steps in %.1f s, val MSE %.3g (%.2f%% of variance)", settings.steps,
             time.perf_counter() - t0, mse, 100 * mse / var)
    return model, AudioReport(losses, mse, var)


def save_audio2exp(ws: Workspace, model: Audio2Exp, cfg: ExperimentConfig, scene, report) -> None:
    tensors = dict(model.state_dict())
    tensors["scene.z_id"] = scene.z_id
    checkpoint.save(ws.checkpoint("audio2exp"), tensors,
                    {"stage": "audio2exp", "config": serialize_config(cfg),
                     "context": model.cfg.context, "val_mse": report.val_mse,
                     "target_var": report.target_var})


def load_audio2exp(ws_or_path, cfg: ExperimentConfig) -> tuple[Audio2Exp, np.ndarray]:
    if isinstance(ws_or_path, Workspace):
        tensors, meta = load_stage(ws_or_path, "audio2exp")
    else:
        path = Path(ws_or_path)
        if not path.exists():
            raise MissingArtifactError(f"audio2exp checkpoint {path} not found")
        tensors, meta = checkpoint.load(path)
    model = build_audio2exp(cfg, int(meta.get("context", cfg.audio_k)))
    model.load_state_dict(tensors)
    return model, tensors["scene.z_id"]


# ---------------------------------------------------------------------------
# stage 2: tri-plane field + upsampler
# ---------------------------------------------------------------------------
@dataclass
class FieldReport:
    losses: list[float]
    masked_psnr: list[float]

    @property
    def mean_masked_psnr(self) -> float:
        return float(np.mean(self.masked_psnr))


def build_face_renderer(cfg: ExperimentConfig) -> FaceRenderer:
    return FaceRenderer(cfg.field(), cfg.render(), ad.derive(cfg.seed, "field.init"))


def field_validation(renderer: FaceRenderer, scene: SyntheticScene) -> list[float]:
    """Masked PSNR of I_face against the reference on held-out poses (true expressions)."""
    out = []
    with ad.no_grad():
        for i in scene.test_idx:
            cam = scene.cameras[i]
            img, _ = renderer(scene.z_id, scene.expressions[i], cam.K, cam.pose)
            out.append(masked_psnr(img.data, scene.images[i], scene.masks[i]))
    return out


def train_field_stage(cfg: ExperimentConfig, scene: SyntheticScene):
    renderer = build_face_renderer(cfg)
    phi = PerceptualExtractor(cfg.seed)
    weights = cfg.loss_weights()
    opt = ad.Adam(renderer.parameters(), lr=cfg.field_lr)
    rng = ad.derive(cfg.seed, "field.train")
    losses = []
    t0 = time.perf_counter()
    for step in range(cfg.field_steps):
        i = int(rng.integers(scene.train_frames))
        cam = scene.cameras[i]
        opt.zero_grad()
        img, _ = renderer(scene.z_id, scene.expressions[i], cam.K, cam.pose, rng=rng)
        loss = loss_face(img, scene.images[i], scene.masks[i], weights, phi)
        if not np.isfinite(loss.item()):
            raise NumericError(f"field loss became non-finite at step {step}")
        loss.backward()
        opt.step()
        losses.append(loss.item())
    report = FieldReport(losses, field_validation(renderer, scene))
    log.info("field: %d steps in %.1f s, held-out masked PSNR %.2f dB", cfg.field_steps,
             time.perf_counter() - t0, report.mean_masked_psnr)
    return renderer, report


def save_field(ws: Workspace, renderer: FaceRenderer, cfg: ExperimentConfig, report) -> None:
    checkpoint.save(ws.checkpoint("field"), renderer.state_dict(),
                    {"stage": "field", "config": serialize_config(cfg),
                     "masked_psnr": report.mean_masked_psnr})


def load_field(ws_or_path, cfg: ExperimentConfig) -> FaceRenderer:
    if isinstance(ws_or_path, Workspace):
        tensors, _ = load_stage(ws_or_path, "field")
    else:
        path = Path(ws_or_path)
        if not path.exists():
            raise MissingArtifactError(f"field checkpoint {path} not found")
        tensors, _ = checkpoint.load(path)
    renderer = build_face_renderer(cfg)
    renderer.load_state_dict(tensors)
    renderer.freeze()
    return renderer


# ---------------------------------------------------------------------------
# stage 3: inpainting renderer
# ---------------------------------------------------------------------------
@dataclass
class RenderReport:
    losses: list[float]
    spread: float


def train_render_stage(cfg: ExperimentConfig, scene: SyntheticScene, renderer: FaceRenderer,
                       spread: float | None = None):
    """Train the inpainting network against a frozen field with jitter ``spread``."""
    spread = cfg.inpaint_spread if spread is None else spread
    renderer.freeze()
    state = RenderTrainState.create(cfg.inpaint(), cfg.seed, cfg.inpaint_lr, cfg.inpaint_d_lr,
                                    cfg.loss_weights())
    rng = ad.derive(cfg.seed, "render.train")
    losses = []
    t0 = time.perf_counter()
    for _ in range(cfg.inpaint_steps):
        i = int(rng.integers(scene.train_frames))
        losses.append(augmented_training_step(state, scene.images[i], scene.masks[i], renderer,
                                              scene.z_id, scene.expressions[i], scene.cameras[i],
                                              spread, rng))
    log.info("render (s=%g): %d steps in %.1f s", spread, cfg.inpaint_steps,
             time.perf_counter() - t0)
    return state.net, RenderReport(losses, spread)


def save_render(path, net: InpaintNet, cfg: ExperimentConfig, spread: float) -> None:
    checkpoint.save(path, net.state_dict(),
                    {"stage": "render", "config": serialize_config(cfg), "spread": spread})


def load_render(ws_or_path, cfg: ExperimentConfig) -> tuple[InpaintNet, dict]:
    if isinstance(ws_or_path, Workspace):
        tensors, meta = load_stage(ws_or_path, "render")
    else:
        path = Path(ws_or_path)
        if not path.exists():
            raise MissingArtifactError(f"render checkpoint {path} not found")
        tensors, meta = checkpoint.load(path)
    net = InpaintNet(cfg.inpaint(), ad.derive(cfg.seed, "inpaint"))
    net.load_state_dict(tensors)
    net.freeze()
    return net, meta


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------
@dataclass
class TrainReport:
    rows: list[tuple[str, str, float]] = field(default_factory=list)
    curves: dict[str, list[float]] = field(default_factory=dict)

    def value(self, stage: str, metric: str) -> float:
        for s, m, v in self.rows:
            if (s, m) == (stage, metric):
                return v
        raise KeyError((stage, metric))


def write_train_report(ws: Workspace, report: TrainReport) -> None:
    write_tsv(ws.root / "train_report.tsv", ["stage", "metric", "value"], report.rows)
    if report.curves:
        plot_training_curves(ws.root / "train_curves.png", report.curves)


def run_audio_stage(cfg, ws, scene, report: TrainReport) -> None:
    t0 = time.perf_counter()
    model, rep = train_audio2exp_stage(cfg, scene)
    save_audio2exp(ws, model, cfg, scene, rep)
    report.rows += [("audio2exp", "val_mse", rep.val_mse), ("audio2exp", "target_var", rep.target_var),
                    ("audio2exp", "val_mse_ratio", rep.ratio),
                    ("audio2exp", "seconds", time.perf_counter() - t0)]
    report.curves["audio2exp"] = rep.losses


def run_field_stage(cfg, ws, scene, report: TrainReport) -> FaceRenderer:
    t0 = time.perf_counter()
    renderer, rep = train_field_stage(cfg, scene)
    save_field(ws, renderer, cfg, rep)
    report.rows += [("field", "masked_psnr", rep.mean_masked_psnr),
                    ("field", "seconds", time.perf_counter() - t0)]
    report.curves["field"] = rep.losses
    return renderer


def run_render_stage(cfg, ws, scene, renderer, report: TrainReport) -> None:
    t0 = time.perf_counter()
    net, rep = train_render_stage(cfg, scene, renderer)
    save_render(ws.checkpoint("render"), net, cfg, rep.spread)
    report.rows += [("render", "final_loss", float(np.mean(rep.losses[-50:]))),
                    ("render", "seconds", time.perf_counter() - t0)]
    report.curves["render"] = rep.losses


def train_all(cfg: ExperimentConfig, ws: Workspace) -> TrainReport:
    """Scene, then audio2exp, field (+ upsampler) and inpainting renderer in sequence."""
    t0 = time.perf_counter()
    ws.root.mkdir(parents=True, exist_ok=True)
    ws.config_path.write_text(serialize_config(cfg))
    report = TrainReport()
    scene = ensure_scene(cfg, ws)
    report.rows.append(("scene", "seconds", time.perf_counter() - t0))
    run_audio_stage(cfg, ws, scene, report)
    renderer = run_field_stage(cfg, ws, scene, report)
    run_render_stage(cfg, ws, scene, renderer, report)
    report.rows.append(("all", "seconds", time.perf_counter() - t0))
    write_train_report(ws, report)
    return report


# ---------------------------------------------------------------------------
# end-to-end inference
# ---------------------------------------------------------------------------
@dataclass
class RunReport:
    frames: list[int]
    psnr: list[float]
    ssim: list[float]
    out_dir: Path

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))


def frame_name(index: int, prefix: str = "frame") -> str:
    return f"{prefix}_{index:04d}.ppm"


def run_end_to_end(cfg: ExperimentConfig, ws: Workspace, out_dir=None) -> RunReport:
    """audio2exp -> feature map -> inpainting for every held-out frame; P6 frames + metrics."""
    scene = load_scene(ws.scene_dir)
    model, z_id = load_audio2exp(ws, cfg)
    renderer = load_field(ws, cfg)
    net, _ = load_render(ws, cfg)
    out = Path(out_dir) if out_dir is not None else ws.out_dir
    out.mkdir(parents=True, exist_ok=True)
    expressions = infer(model, scene.features[PER_FRAME * scene.train_frames:], z_id,
                        scene.n_frames - scene.train_frames, PER_FRAME)
    rep = RunReport([], [], [], out)
    for j, i in enumerate(scene.test_idx):
        cam = scene.cameras[i]
        with ad.no_grad():
            face, _ = renderer(z_id, expressions[j], cam.K, cam.pose)
        frame = render_frame(net, renderer, scene.images[i], scene.masks[i], z_id, expressions[j],
                             cam.K, cam.pose)
        if not (np.all(np.isfinite(frame)) and np.all(np.isfinite(face.data))):
            raise NumericError(f"non-finite output at frame {i}")
        frame = np.clip(frame, 0.0, 1.0)
        write_ppm(out / frame_name(int(i)), frame)
        write_ppm(out / frame_name(int(i), "face"), face.data)
        rep.frames.append(int(i))
        rep.psnr.append(psnr(frame, scene.images[i]))
        rep.ssim.append(ssim(frame, scene.images[i]))
    write_run_metrics(rep)
    log.info("run: %d frames, PSNR %.2f dB, SSIM %.3f", len(rep.frames), rep.mean_psnr, rep.mean_ssim)
    return rep


def write_run_metrics(rep: RunReport) -> None:
    rows = [(f, p, s) for f, p, s in zip(rep.frames, rep.psnr, rep.ssim)]
    rows.append(("mean", rep.mean_psnr, rep.mean_ssim))
    write_tsv(rep.out_dir / "metrics.tsv", ["frame", "psnr", "ssim"], rows)
    plot_frame_metrics(rep.out_dir / "metrics.png", rep.frames, rep.psnr, rep.ssim)
