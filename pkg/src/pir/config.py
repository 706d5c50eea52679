"""Flat ``key = value`` experiment configuration.

Every key has a documented default; unknown keys and malformed values are
rejected with ``ConfigError``.  ``#`` starts a comment.  Serialising and
parsing again is the identity.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from pir.audio2exp import DecoderConfig, TrainSettings
from pir.errors import ConfigError
from pir.inpaint import InpaintConfig
from pir.losses import LossWeights
from pir.scene import SceneConfig
from pir.triplane import FieldConfig
from pir.volume import RenderConfig


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    d_exp: int = 8  # expression coefficients
    d_id: int = 8  # identity coefficients
    # synthetic scene
    scene_frames: int = 220
    scene_train_frames: int = 200
    scene_size: int = 64
    scene_focal: float = 110.0
    scene_ref_samples: int = 128
    scene_d_audio: int = 16
    scene_feature_noise: float = 0.01
    # audio-to-expression
    audio_d_model: int = 32
    audio_heads: int = 4
    audio_enc_blocks: int = 2
    audio_dec_blocks: int = 1
    audio_ffn: int = 64
    audio_period: int = 25
    audio_k: int = 25  # sequence length / context window in frames
    audio_steps: int = 6000
    audio_lr: float = 2e-3
    audio_batch: int = 8
    audio_mixup: float = 1.0  # window blending bound, 0 disables
    audio_cosine: bool = True  # cosine learning-rate decay
    # tri-plane field and volume renderer
    field_channels: int = 8
    field_resolution: int = 32
    field_d_z: int = 32
    field_gen_width: int = 32
    field_hidden: int = 64
    field_feature_out: int = 8
    field_extent: float = 0.5
    field_steps: int = 1500
    field_lr: float = 2e-3
    render_feature_size: int = 16
    render_n_coarse: int = 32
    render_n_fine: int = 32
    render_near: float = 2.0
    render_far: float = 3.5
    render_up_width: int = 32
    # inpainting renderer
    inpaint_width: int = 16
    inpaint_res_blocks: int = 2
    inpaint_dilation: int = 2
    inpaint_fusion_size: int = 8
    inpaint_steps: int = 1200
    inpaint_lr: float = 1e-3
    inpaint_d_lr: float = 1e-3
    inpaint_spread: float = 3.0
    # loss weights
    loss_w1: float = 1.0
    loss_w2: float = 1.0
    loss_w3: float = 1.0
    loss_w4: float = 1.0
    # ablations
    ablate_ks: tuple = (1, 5, 25)
    ablate_k_steps: int = 300
    jitter_test_spread: float = 2.0
    jitter_draws: int = 20
    jitter_frames: int = 5  # held-out frames the variance is averaged over

    # -- component views --------------------------------------------------
    def scene(self) -> SceneConfig:
        return SceneConfig(frames=self.scene_frames, train_frames=self.scene_train_frames,
                           size=self.scene_size, focal=self.scene_focal,
                           near=self.render_near, far=self.render_far,
                           ref_samples=self.scene_ref_samples, d_exp=self.d_exp, d_id=self.d_id,
                           d_audio=self.scene_d_audio, feature_noise=self.scene_feature_noise)

    def decoder(self) -> DecoderConfig:
        h = self.audio_heads
        return DecoderConfig(d_audio=self.scene_d_audio, d_model=self.audio_d_model, n_heads_self=h,
                             n_heads_cross=h, n_heads_enc=h, n_enc_blocks=self.audio_enc_blocks,
                             n_dec_blocks=self.audio_dec_blocks, d_ffn=self.audio_ffn,
                             period=self.audio_period, context=self.audio_k, d_exp=self.d_exp,
                             d_id=self.d_id)

    def audio_training(self) -> TrainSettings:
        return TrainSettings(steps=self.audio_steps, lr=self.audio_lr, batch=self.audio_batch,
                             mixup=self.audio_mixup, cosine=self.audio_cosine)

    def field(self) -> FieldConfig:
        return FieldConfig(d_id=self.d_id, d_exp=self.d_exp, d_z=self.field_d_z,
                           channels=self.field_channels, resolution=self.field_resolution,
                           gen_width=self.field_gen_width, extent=self.field_extent,
                           decoder_hidden=self.field_hidden, feature_out=self.field_feature_out)

    def render(self) -> RenderConfig:
        return RenderConfig(image_size=self.scene_size, feature_size=self.render_feature_size,
                            n_coarse=self.render_n_coarse, n_fine=self.render_n_fine,
                            near=self.render_near, far=self.render_far, up_width=self.render_up_width)

    def inpaint(self) -> InpaintConfig:
        return InpaintConfig(image_size=self.scene_size, fusion_size=self.inpaint_fusion_size,
                             feature_channels=self.field_feature_out, width=self.inpaint_width,
                             res_blocks=self.inpaint_res_blocks, dilation=self.inpaint_dilation)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.loss_w1, self.loss_w2, self.loss_w3, self.loss_w4)

    def validate(self) -> "ExperimentConfig":
        """Build every component config so inconsistent values fail early."""
        try:
            self.scene(), self.decoder(), self.field(), self.render(), self.inpaint()
            self.loss_weights()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not self.ablate_ks or min(self.ablate_ks) < 1:
            raise ConfigError("ablate_ks must list positive sequence lengths")
        for key in ("audio_steps", "audio_batch", "field_steps", "inpaint_steps", "ablate_k_steps"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        for key in ("audio_lr", "field_lr", "inpaint_lr", "inpaint_d_lr"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive")
        if self.audio_mixup < 0 or self.inpaint_spread < 0 or self.jitter_test_spread < 0:
            raise ConfigError("audio_mixup, inpaint_spread and jitter_test_spread must be >= 0")
        if self.jitter_frames < 1 or self.jitter_draws < 2:
            raise ConfigError("jitter_frames must be >= 1 and jitter_draws >= 2")
        return self


DEFAULTS = ExperimentConfig()
_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _parse_value(key: str, text: str):
    default = getattr(DEFAULTS, key)
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.split(",") if v.strip())
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, value)
    return replace(DEFAULTS, **values).validate()


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} not found")
    return parse_config(p.read_text(), str(p))


def serialize_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in asdict(cfg).items())


def apply_assignments(cfg: ExperimentConfig, items) -> ExperimentConfig:
    """Apply ``key=value`` strings (command-line overrides) on top of ``cfg``."""
    values = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = (part.strip() for part in item.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _parse_value(key, value)
    return replace(cfg, **values).validate()


def with_overrides(cfg: ExperimentConfig, **overrides) -> ExperimentConfig:
    unknown = set(overrides) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}")
    return replace(cfg, **overrides).validate()
