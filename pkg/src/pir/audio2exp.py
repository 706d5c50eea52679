"""Audio features -> expression parameters.

A temporal-convolution + transformer encoder turns a feature sequence into
one vector per video frame; an autoregressive decoder with periodic
positional encoding, linearly biased causal self-attention and an
alignment-masked cross attention emits one expression vector per frame.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

import pir.autodiff as ad
from pir.autodiff import functional as F
from pir.autodiff import Linear, LayerNorm, Module, Tensor
from pir.errors import AlignmentError, NumericError, ShapeError


@dataclass
class DecoderConfig:
    d_audio: int = 16
    d_model: int = 32
    n_heads_self: int = 4
    n_heads_cross: int = 4
    n_heads_enc: int = 4
    n_enc_blocks: int = 2
    n_dec_blocks: int = 1
    d_ffn: int = 64
    period: int = 25
    context: int = 25
    slope_base: float | None = None
    d_exp: int = 8
    d_id: int = 8
    tcn_layers: int = 2
    tcn_kernel: int = 3

    def __post_init__(self):
        for heads in (self.n_heads_self, self.n_heads_cross, self.n_heads_enc):
            if heads < 1 or self.d_model % heads:
                raise ValueError(f"d_model={self.d_model} not divisible by head count {heads}")
        if self.period < 1 or self.context < 1:
            raise ValueError("period and context length must be >= 1")
        if self.tcn_kernel % 2 == 0:
            raise ValueError("tcn_kernel must be odd")


@dataclass
class AudioFeatureSequence:
    features: np.ndarray  # [L_a, d_a]
    sample_rate_hz: float = 50.0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or len(self.features) < 1:
            raise ShapeError(f"features must be [L_a >= 1, d_a], got {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")


@dataclass
class ExpressionSequence:
    frames: np.ndarray  # [k, d_exp]
    fps: float = 25.0


# ---------------------------------------------------------------------------
# fixed tables
# ---------------------------------------------------------------------------
def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """[n_out, n_in] linear interpolation over normalised position, endpoints kept."""
    if n_in < 1 or n_out < 1:
        raise ValueError("lengths must be >= 1")
    A = np.zeros((n_out, n_in))
    if n_in == 1:
        A[:, 0] = 1.0
        return A
    pos = np.zeros(1) if n_out == 1 else np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    A[np.arange(n_out), lo] = 1.0 - frac
    A[np.arange(n_out), lo + 1] += frac
    return A


def resample_linear(features, target_len: int) -> Tensor:
    """Per-channel linear resampling of [..., L, d] to [..., target_len, d]."""
    features = ad.as_tensor(features if not isinstance(features, AudioFeatureSequence)
                            else features.features)
    return Tensor(interpolation_matrix(features.shape[-2], target_len)) @ features


def periodic_positional_encoding(t: int, d: int, p: int) -> np.ndarray:
    """Sinusoidal encoding of (t mod p): sine on even dims, cosine on odd dims."""
    if d % 2:
        raise ValueError("encoding dimension must be even")
    phase = (t % p) / 10000.0 ** (np.arange(0, d, 2) / d)
    out = np.empty(d)
    out[0::2] = np.sin(phase)
    out[1::2] = np.cos(phase)
    return out


def ppe_table(length: int, d: int, p: int) -> np.ndarray:
    """Rows for timesteps 1..length."""
    return np.stack([periodic_positional_encoding(t, d, p) for t in range(1, length + 1)])


def causal_temporal_bias(t: int, p: int) -> np.ndarray:
    """B[i, j] = floor((i - j) / p) for j <= i, -inf above the diagonal."""
    i = np.arange(t)[:, None]
    j = np.arange(t)[None, :]
    return np.where(j <= i, np.floor_divide(i - j, p).astype(np.float64), -np.inf)


def head_slopes(n_heads: int, slope_base: float | None = None) -> np.ndarray:
    """Geometric slopes base**h for h = 1..H; base defaults to 2**(-8/H)."""
    if n_heads < 1:
        raise ValueError("need at least one head")
    base = 2.0 ** (-8.0 / n_heads) if slope_base is None else float(slope_base)
    return base ** np.arange(1, n_heads + 1, dtype=np.float64)


def self_attention_bias(t: int, p: int, slopes: np.ndarray) -> np.ndarray:
    """Per-head additive bias [H, t, t]: -m_h * B, keeping -inf on masked entries.

    The negative sign makes attention decay with temporal distance.
    """
    B = causal_temporal_bias(t, p)
    finite = np.isfinite(B)
    return np.where(finite[None], -slopes[:, None, None] * np.where(finite, B, 0.0)[None], -np.inf)


def alignment_bias(t_dec: int, t_enc: int) -> np.ndarray:
    """Zero where the decoder step i meets encoder step j == i, -inf elsewhere."""
    if t_dec != t_enc:
        raise AlignmentError(f"decoder length {t_dec} != encoder length {t_enc}")
    out = np.full((t_dec, t_enc), -np.inf)
    np.fill_diagonal(out, 0.0)
    return out


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------
class MultiHeadAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng):
        self.n_heads = n_heads
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.out = Linear(d_model, d_model, rng)

    def _split(self, x: Tensor) -> Tensor:
        B, T, D = x.shape
        return x.reshape(B, T, self.n_heads, D // self.n_heads).transpose(0, 2, 1, 3)

    def forward(self, x: Tensor, memory: Tensor, bias: np.ndarray | None) -> Tensor:
        """x [B, T, D] attends over memory [B, S, D]; bias broadcasts to [H, T, S]."""
        B, T, D = x.shape
        dk = D // self.n_heads
        q, k, v = self._split(self.q(x)), self._split(self.k(memory)), self._split(self.v(memory))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dk))
        weights = ad.masked_softmax(scores, bias)
        heads = (weights @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
        return self.out(heads)


class FeedForward(Module):
    def __init__(self, d_model: int, d_ffn: int, rng):
        self.fc1 = Linear(d_model, d_ffn, rng)
        self.fc2 = Linear(d_ffn, d_model, rng)

    def forward(self, x):
        return self.fc2(ad.silu(self.fc1(x)))


def _batched(x) -> tuple[Tensor, bool]:
    x = ad.as_tensor(x)
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    return x, False


def biased_causal_self_attention(x, attn: MultiHeadAttention, cfg: DecoderConfig) -> Tensor:
    """Causal self-attention with per-head linear temporal bias; [T, D] or [B, T, D]."""
    xb, squeeze = _batched(x)
    bias = self_attention_bias(xb.shape[1], cfg.period, head_slopes(attn.n_heads, cfg.slope_base))
    out = attn(xb, xb, bias)
    return out.reshape(out.shape[1:]) if squeeze else out


def biased_cross_modal_attention(x, enc_out, attn: MultiHeadAttention) -> Tensor:
    """Each decoder step attends only to its aligned encoder step."""
    xb, squeeze = _batched(x)
    eb, _ = _batched(enc_out)
    bias = alignment_bias(xb.shape[1], eb.shape[1])[None]
    out = attn(xb, eb, bias)
    return out.reshape(out.shape[1:]) if squeeze else out


class EncoderBlock(Module):
    def __init__(self, cfg: DecoderConfig, rng):
        self.norm1 = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads_enc, rng)
        self.norm2 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ffn, rng)

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, None)
        return x + self.ffn(self.norm2(x))


class DecoderBlock(Module):
    def __init__(self, cfg: DecoderConfig, rng):
        self.cfg = cfg
        self.norm_self = LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads_self, rng)
        self.norm_cross = LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads_cross, rng)
        self.norm_ffn = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ffn, rng)

    def forward(self, x, enc_out):
        cfg = self.cfg
        x = x + Tensor(ppe_table(x.shape[1], cfg.d_model, cfg.period))
        x = x + biased_causal_self_attention(self.norm_self(x), self.self_attn, cfg)
        x = x + biased_cross_modal_attention(self.norm_cross(x), enc_out, self.cross_attn)
        return x + self.ffn(self.norm_ffn(x))


class AudioEncoder(Module):
    def __init__(self, cfg: DecoderConfig, rng):
        fan = cfg.tcn_kernel * cfg.d_model
        self.inp = Linear(cfg.d_audio, cfg.d_model, rng)
        self.tcn = []
        for _ in range(cfg.tcn_layers):
            self.tcn.append(ad.param(ad.uniform_init(rng, (cfg.d_model, cfg.d_model, cfg.tcn_kernel), fan)))
            self.tcn.append(ad.param(ad.uniform_init(rng, (cfg.d_model,), fan)))
        self.blocks = [EncoderBlock(cfg, rng) for _ in range(cfg.n_enc_blocks)]
        self.norm = LayerNorm(cfg.d_model)
        self.proj = Linear(cfg.d_model, cfg.d_model, rng)
        self.kernel = cfg.tcn_kernel

    def forward(self, features, k: int) -> Tensor:
        """features [B, L_a, d_a] -> [B, k, d_model]."""
        # linear input projection, then residual temporal convolutions
        h = self.inp(ad.as_tensor(features)).transpose(0, 2, 1)
        for w, b in zip(self.tcn[0::2], self.tcn[1::2]):
            h = h + ad.silu(F.conv1d(h, w, b, padding=self.kernel // 2))
        h = resample_linear(h.transpose(0, 2, 1), k)
        for block in self.blocks:
            h = block(h)
        return self.proj(self.norm(h))


class Audio2Exp(Module):
    """Encoder, style embedding, expression encoder/decoder and decoder stack."""

    def __init__(self, cfg: DecoderConfig, rng):
        self.cfg = cfg
        self.encoder = AudioEncoder(cfg, rng)
        self.style = Linear(cfg.d_id, cfg.d_model, rng)
        self.expr_in = Linear(cfg.d_exp, cfg.d_model, rng)
        self.blocks = [DecoderBlock(cfg, rng) for _ in range(cfg.n_dec_blocks)]
        self.norm = LayerNorm(cfg.d_model)
        self.expr_out = Linear(cfg.d_model, cfg.d_exp, rng)

    def encode(self, features, k: int) -> Tensor:
        xb, squeeze = _batched(features)
        out = self.encoder(xb, k)
        return out.reshape(out.shape[1:]) if squeeze else out

    def decoder_inputs(self, z_id, previous, k: int) -> Tensor:
        """Row 0: style(z_id); row t: style(z_id) + expr_in(a_{t-1}).

        ``previous`` holds a_0..a_{k-2} as [B, k-1, d_exp] (ignored when k == 1).
        """
        z_id = ad.as_tensor(z_id)
        style = self.style(z_id.reshape(-1, 1, self.cfg.d_id))
        if k == 1:
            return style
        prev = self.expr_in(ad.as_tensor(previous))
        B = prev.shape[0]
        shifted = ad.concat([Tensor(np.zeros((B, 1, self.cfg.d_model))), prev], axis=1)
        return shifted + style

    def decode(self, enc_out, z_id, previous) -> Tensor:
        """Teacher-forced decoder pass: enc_out [B, k, D] -> expressions [B, k, d_exp]."""
        enc_out = ad.as_tensor(enc_out)
        k = enc_out.shape[1]
        h = self.decoder_inputs(z_id, previous, k)
        if h.shape[0] != enc_out.shape[0]:
            h = h + Tensor(np.zeros((enc_out.shape[0], k, self.cfg.d_model)))
        for block in self.blocks:
            h = block(h, enc_out)
        return self.expr_out(self.norm(h))

    def forward(self, features, z_id, targets) -> Tensor:
        """Teacher forcing: targets [B, k, d_exp] supply the previous-frame inputs."""
        targets = ad.as_tensor(targets)
        k = targets.shape[1]
        enc = self.encoder(features, k)
        return self.decode(enc, z_id, targets[:, :-1] if k > 1 else None)


def decode_sequence(model: Audio2Exp, enc_out, z_id) -> np.ndarray:
    """Autoregressive inference over one window: enc_out [k, D] or [B, k, D].

    Step t runs the full-length decoder on a buffer whose first t-1 previous
    slots hold the predictions so far; causal masking makes the unfilled
    slots irrelevant to row t.
    """
    enc, squeeze = _batched(enc_out)
    B, k, _ = enc.shape
    d_exp = model.cfg.d_exp
    preds = np.zeros((B, k, d_exp))
    with ad.no_grad():
        for t in range(k):
            prev = Tensor(preds[:, :-1]) if k > 1 else None
            out = model.decode(enc, z_id, prev)
            preds[:, t] = out.data[:, t]
    return preds[0] if squeeze else preds


def window_bounds(n_frames: int, k: int) -> list[tuple[int, int]]:
    return [(s, min(s + k, n_frames)) for s in range(0, n_frames, k)]


def window_features(features: np.ndarray, start: int, stop: int, per_frame: int) -> np.ndarray:
    """Feature rows spanning frames [start, stop): indices per_frame*start .. per_frame*(stop-1)."""
    return features[per_frame * start: per_frame * (stop - 1) + 1]


def infer(model: Audio2Exp, features: np.ndarray, z_id: np.ndarray, n_frames: int,
          per_frame: int, k: int | None = None) -> np.ndarray:
    """Expressions for ``n_frames`` frames, decoded window by window of length k."""
    k = k or model.cfg.context
    out = []
    for start, stop in window_bounds(n_frames, k):
        feats = window_features(features, start, stop, per_frame)
        with ad.no_grad():
            enc = model.encode(feats, stop - start)
        out.append(decode_sequence(model, enc, z_id))
    return np.concatenate(out, axis=0)


def loss_audio(pred, target) -> Tensor:
    """Sum over frames of squared Euclidean distances."""
    pred = ad.as_tensor(pred.frames if isinstance(pred, ExpressionSequence) else pred)
    target = ad.as_tensor(target.frames if isinstance(target, ExpressionSequence) else target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = pred - target
    return (diff * diff).sum()


@dataclass
class TrainSettings:
    steps: int = 600
    lr: float = 1e-3
    batch: int = 8
    mixup: float = 0.0  # 0 disables; otherwise the upper bound of the mixing weight
    cosine: bool = False  # cosine learning-rate decay to zero over ``steps``


def train(model: Audio2Exp, features: np.ndarray, expressions: np.ndarray, z_id: np.ndarray,
          n_frames: int, per_frame: int, settings: TrainSettings, rng,
          k: int | None = None) -> list[float]:
    """Teacher-forced training on random length-k windows of frames [0, n_frames).

    With ``mixup`` > 0 each window is blended with a randomly paired one,
    features and targets alike, using a weight drawn from U(0, mixup).
    """
    k = k or model.cfg.context
    k = min(k, n_frames)
    opt = ad.Adam(model.parameters(), lr=settings.lr)
    z = Tensor(np.broadcast_to(z_id, (settings.batch, len(z_id))).copy())
    losses = []
    for step in range(settings.steps):
        starts = rng.integers(0, n_frames - k + 1, size=settings.batch)
        feats = np.stack([window_features(features, s, s + k, per_frame) for s in starts])
        target = np.stack([expressions[s:s + k] for s in starts])
        if settings.mixup:
            pair = rng.permutation(settings.batch)
            lam = rng.uniform(0.0, settings.mixup, (settings.batch, 1, 1))
            feats = (1 - lam) * feats + lam * feats[pair]
            target = (1 - lam) * target + lam * target[pair]
        if settings.cosine:
            opt.lr = settings.lr * 0.5 * (1.0 + math.cos(math.pi * step / settings.steps))
        opt.zero_grad()
        loss = loss_audio(model(feats, z, target), target) * (1.0 / settings.batch)
        if not np.isfinite(loss.item()):
            raise NumericError(f"audio2exp loss became non-finite at step {step}")
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses
