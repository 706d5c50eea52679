"""Sequence-length and jitter-augmentation ablations."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

import pir.autodiff as ad
from pir.autodiff import checkpoint
from pir.config import ExperimentConfig, serialize_config
from pir.inpaint import perturbation_variance
from pir.pipeline import (
    PER_FRAME,
    Workspace,
    load_field,
    load_render,
    predict_test_expressions,
    save_render,
    train_audio2exp_stage,
    train_render_stage,
)
from pir.plotting import plot_context_ablation, plot_jitter
from pir.report import write_tsv
from pir.scene import SyntheticScene

log = logging.getLogger("pir")


# ---------------------------------------------------------------------------
# context length k
# ---------------------------------------------------------------------------
@dataclass
class ContextRow:
    k: int
    val_mse: float
    val_ratio: float
    probe_frame: int  # index within the held-out segment
    window_start: int
    past_sensitivity: float
    probe_ok: bool

    @property
    def dependencies(self) -> str:
        if self.window_start == self.probe_frame:
            return "own features only"
        return (f"features of frames {self.window_start}..{self.window_start + self.k - 1}"
                f" and predictions {self.window_start}..{self.probe_frame - 1}")


def permute_past_frames(features: np.ndarray, t: int, rng: np.random.Generator) -> np.ndarray:
    """Derange the feature blocks of frames 0..t-1 (two rows each); frame t onward stays."""
    if t < 2:
        raise ValueError("need at least two earlier frames to permute")
    order = rng.permutation(t)
    while np.any(order == np.arange(t)):
        order = rng.permutation(t)
    out = features.copy()
    blocks = features[:PER_FRAME * t].reshape(t, PER_FRAME, -1)
    out[:PER_FRAME * t] = blocks[order].reshape(PER_FRAME * t, -1)
    return out


def context_probe(model, scene: SyntheticScene, k: int, t: int, rng) -> float:
    """max |change| of the prediction at held-out frame t after permuting earlier frames."""
    feats = scene.features[PER_FRAME * scene.train_frames:]
    base = predict_test_expressions(model, scene, k, feats)
    moved = predict_test_expressions(model, scene, k, permute_past_frames(feats, t, rng))
    return float(np.max(np.abs(base[t] - moved[t])))


def ablate_context_length(cfg: ExperimentConfig, scene: SyntheticScene,
                          ks=None) -> list[ContextRow]:
    """Train one model per k; report validation MSE and the past-frame dependence at one frame.

    The probe frame is the last held-out frame.  k = 1 models must be exactly
    insensitive to permuting earlier frames; k > 1 models must react
    whenever the probe frame's window contains earlier frames.
    """
    ks = list(cfg.ablate_ks if ks is None else ks)
    n_test = scene.n_frames - scene.train_frames
    t = n_test - 1
    rows = []
    for k in ks:
        model, rep = train_audio2exp_stage(cfg, scene, k=k, steps=cfg.ablate_k_steps,
                                           label=f"ablate.k{k}")
        sens = context_probe(model, scene, k, t, ad.derive(cfg.seed, "ablate.probe"))
        start = (t // k) * k
        ok = sens == 0.0 if start == t else sens > 0.0
        rows.append(ContextRow(k, rep.val_mse, rep.ratio, t, start, sens, ok))
        log.info("ablate-k: k=%d val ratio %.4f sensitivity %.3g", k, rep.ratio, sens)
    return rows


def write_context_report(out_dir, rows: list[ContextRow]) -> Path:
    out = Path(out_dir)
    path = write_tsv(out / "ablate_k.tsv",
                     ["k", "val_mse", "val_mse_ratio", "probe_frame", "window_start",
                      "past_sensitivity", "probe_ok", "dependencies"],
                     [(r.k, r.val_mse, r.val_ratio, r.probe_frame, r.window_start,
                       r.past_sensitivity, r.probe_ok, r.dependencies) for r in rows])
    plot_context_ablation(out / "ablate_k.png", [r.k for r in rows], [r.val_ratio for r in rows],
                          [r.past_sensitivity for r in rows])
    return path


# ---------------------------------------------------------------------------
# jitter augmentation
# ---------------------------------------------------------------------------
@dataclass
class JitterRow:
    spread: float
    frame_variances: list[float]

    @property
    def mean_variance(self) -> float:
        return float(np.mean(self.frame_variances))


def jitter_frames(cfg: ExperimentConfig, scene: SyntheticScene) -> np.ndarray:
    idx = scene.test_idx
    pick = np.unique(np.linspace(0, len(idx) - 1, min(cfg.jitter_frames, len(idx))).astype(int))
    return idx[pick]


def measure_jitter(cfg: ExperimentConfig, scene: SyntheticScene, net, renderer) -> list[float]:
    """Output variance under test-time intrinsic perturbations, per evaluation frame.

    Every model sees the same perturbation draws (fresh generator per call).
    """
    rng = ad.derive(cfg.seed, "jitter.probe")
    return [perturbation_variance(net, renderer, scene.images[i], scene.masks[i], scene.z_id,
                                  scene.expressions[i], scene.cameras[i], cfg.jitter_test_spread,
                                  cfg.jitter_draws, rng)
            for i in jitter_frames(cfg, scene)]


def _reusable(path: Path, cfg: ExperimentConfig, spread: float) -> bool:
    if not path.exists():
        return False
    _, meta = checkpoint.load(path)
    return meta.get("spread") == spread and meta.get("config") == serialize_config(cfg)


def ablate_jitter(cfg: ExperimentConfig, ws: Workspace, scene: SyntheticScene,
                  spreads=None) -> list[JitterRow]:
    """Train renderers with s = 0 and s = inpaint_spread on the same seed; compare variances.

    A renderer checkpoint trained with identical settings (the workspace's own
    render.pirk, or one cached by an earlier ablation) is reused instead of
    retrained; training is deterministic, so the result is the same.
    """
    spreads = [0.0, cfg.inpaint_spread] if spreads is None else list(spreads)
    renderer = load_field(ws, cfg)
    rows = []
    for s in spreads:
        cached = ws.root / f"render_s{s:g}.pirk"
        if _reusable(ws.checkpoint("render"), cfg, s):
            net, _ = load_render(ws.checkpoint("render"), cfg)
        elif _reusable(cached, cfg, s):
            net, _ = load_render(cached, cfg)
        else:
            net, _ = train_render_stage(cfg, scene, renderer, spread=s)
            save_render(cached, net, cfg, s)
        rows.append(JitterRow(s, measure_jitter(cfg, scene, net, renderer)))
        log.info("ablate-jitter: s=%g variance %.3g", s, rows[-1].mean_variance)
    return rows


def write_jitter_report(out_dir, rows: list[JitterRow]) -> Path:
    out = Path(out_dir)
    n = len(rows[0].frame_variances)
    path = write_tsv(out / "ablate_jitter.tsv",
                     ["spread", "mean_variance"] + [f"frame{j}" for j in range(n)],
                     [(r.spread, r.mean_variance, *r.frame_variances) for r in rows])
    plot_jitter(out / "ablate_jitter.png", [r.spread for r in rows], [r.mean_variance for r in rows])
    return path
