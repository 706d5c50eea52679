import math

import numpy as np
import pytest

import pir.autodiff as ad
from pir.audio2exp import (
    Audio2Exp,
    DecoderConfig,
    MultiHeadAttention,
    TrainSettings,
    alignment_bias,
    biased_causal_self_attention,
    biased_cross_modal_attention,
    causal_temporal_bias,
    decode_sequence,
    head_slopes,
    infer,
    interpolation_matrix,
    loss_audio,
    periodic_positional_encoding,
    resample_linear,
    train,
)
from pir.errors import AlignmentError, ShapeError

SMALL = DecoderConfig(d_audio=4, d_model=8, n_heads_self=2, n_heads_cross=2, n_heads_enc=2,
                      n_enc_blocks=1, d_ffn=12, period=3, context=6, d_exp=3, d_id=2)


# ---------------------------------------------------------------------------
# independent oracles
# ---------------------------------------------------------------------------
def bias_double_loop(t, p):
    out = np.empty((t, t))
    for i in range(t):
        for j in range(t):
            out[i, j] = math.floor((i - j) / p) if j <= i else -math.inf
    return out


def attention_oracle(attn, x, memory, bias):
    """Explicit-summation multi-head attention for one sequence."""
    Wq, bq = attn.q.weight.data, attn.q.bias.data
    Wk, bk = attn.k.weight.data, attn.k.bias.data
    Wv, bv = attn.v.weight.data, attn.v.bias.data
    Wo, bo = attn.out.weight.data, attn.out.bias.data
    T, D = x.shape
    S = memory.shape[0]
    H = attn.n_heads
    dk = D // H
    concat = np.zeros((T, D))
    for h in range(H):
        cols = slice(h * dk, (h + 1) * dk)
        for i in range(T):
            q = [sum(x[i, a] * Wq[a, c] for a in range(D)) + bq[c] for c in range(D)][cols]
            scores = []
            for j in range(S):
                kj = [sum(memory[j, a] * Wk[a, c] for a in range(D)) + bk[c] for c in range(D)][cols]
                scores.append(sum(qq * kk for qq, kk in zip(q, kj)) / math.sqrt(dk) + bias[h][i][j])
            finite = [s for s in scores if s != -math.inf]
            top = max(finite)
            e = [math.exp(s - top) if s != -math.inf else 0.0 for s in scores]
            z = sum(e)
            for c in range(dk):
                acc = 0.0
                for j in range(S):
                    vj = sum(memory[j, a] * Wv[a, h * dk + c] for a in range(D)) + bv[h * dk + c]
                    acc += e[j] / z * vj
                concat[i, h * dk + c] = acc
    return concat @ Wo + bo


# ---------------------------------------------------------------------------
class TestResample:
    def test_identity(self):
        x = np.arange(6.0).reshape(3, 2)
        np.testing.assert_array_equal(resample_linear(x, 3).data, x)

    def test_midpoint(self):
        x = np.array([[0.0, 0.0], [2.0, 2.0]])
        np.testing.assert_allclose(resample_linear(x, 3).data, [[0, 0], [1, 1], [2, 2]])

    def test_matches_np_interp(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((7, 3))
        out = resample_linear(x, 25).data
        src = np.linspace(0.0, 1.0, 7)
        dst = np.linspace(0.0, 1.0, 25)
        for c in range(3):
            np.testing.assert_allclose(out[:, c], np.interp(dst, src, x[:, c]), atol=1e-12)

    def test_endpoints_preserved(self):
        x = np.random.default_rng(1).standard_normal((5, 2))
        out = resample_linear(x, 13).data
        np.testing.assert_array_equal(out[[0, -1]], x[[0, -1]])

    def test_single_sample(self):
        assert np.array_equal(interpolation_matrix(1, 4), np.ones((4, 1)))


class TestPeriodicPositionalEncoding:
    def test_zero_phase_pattern(self):
        np.testing.assert_array_equal(periodic_positional_encoding(25, 8, 25), [0, 1] * 4)

    @pytest.mark.parametrize("p", [1, 5, 25])
    def test_periodicity_exact(self, p):
        for t in range(1, 80):
            assert np.array_equal(periodic_positional_encoding(t, 16, p),
                                  periodic_positional_encoding(t + p, 16, p))

    def test_direct_values(self):
        out = periodic_positional_encoding(26, 4, 25)
        np.testing.assert_allclose(out, [math.sin(1), math.cos(1), math.sin(0.01), math.cos(0.01)],
                                   atol=1e-15)
        assert out[0] == pytest.approx(0.841471, abs=1e-6)
        assert out[1] == pytest.approx(0.540302, abs=1e-6)


class TestTemporalBias:
    def test_diagonal_zero(self):
        assert np.all(np.diag(causal_temporal_bias(40, 25)) == 0)

    def test_upper_masked(self):
        # 1-based B(3,5)
        assert causal_temporal_bias(6, 25)[2, 4] == -np.inf

    def test_period_floor(self):
        B = causal_temporal_bias(30, 25)
        assert B[29, 1] == 1.0  # B(30,2) = floor(28/25)
        assert B[25, 1] == 0.0  # B(26,2) = floor(24/25)

    @pytest.mark.parametrize("p", [1, 5, 25])
    def test_matches_double_loop(self, p):
        for t in range(1, 65):
            assert np.array_equal(causal_temporal_bias(t, p), bias_double_loop(t, p))


class TestHeadSlopes:
    def test_single_head(self):
        assert head_slopes(1, 2.0 ** -8).tolist() == [2.0 ** -8]

    def test_geometric(self):
        assert head_slopes(4, 0.25).tolist() == [1 / 4, 1 / 16, 1 / 64, 1 / 256]

    def test_default_positive_decreasing(self):
        for H in (1, 2, 4, 8, 16):
            m = head_slopes(H)
            assert np.all(m > 0) and np.all(np.diff(m) < 0)
            assert m[-1] == pytest.approx(2.0 ** -8)


class TestAlignmentBias:
    def test_values(self):
        B = alignment_bias(6, 6)
        assert B[3, 3] == 0.0  # B(4,4)
        assert B[3, 4] == -np.inf  # B(4,5)
        assert np.all(np.isfinite(B).sum(axis=1) == 1)

    def test_matches_double_loop(self):
        for t in range(1, 65):
            ref = np.array([[0.0 if i <= j < i + 1 else -np.inf for j in range(t)] for i in range(t)])
            assert np.array_equal(alignment_bias(t, t), ref)

    def test_mismatch(self):
        with pytest.raises(AlignmentError):
            alignment_bias(3, 4)


class TestSelfAttention:
    def test_single_position_is_value_projection(self):
        rng = ad.make_rng(0)
        attn = MultiHeadAttention(4, 2, rng)
        x = rng.standard_normal((1, 4))
        out = biased_causal_self_attention(x, attn, SMALL).data
        expected = (x @ attn.v.weight.data + attn.v.bias.data) @ attn.out.weight.data + attn.out.bias.data
        np.testing.assert_allclose(out, expected, atol=1e-14)

    def test_causality_bit_exact(self):
        rng = ad.make_rng(1)
        attn = MultiHeadAttention(8, 2, rng)
        x = rng.standard_normal((9, 8))
        base = biased_causal_self_attention(x, attn, SMALL).data
        for tau in range(8):
            y = x.copy()
            y[tau + 1:] += rng.standard_normal(y[tau + 1:].shape)
            out = biased_causal_self_attention(y, attn, SMALL).data
            assert np.array_equal(out[:tau + 1], base[:tau + 1])

    def test_hand_size_oracle(self):
        rng = ad.make_rng(2)
        attn = MultiHeadAttention(2, 1, rng)
        x = rng.standard_normal((3, 2))
        cfg = DecoderConfig(d_model=2, n_heads_self=1, n_heads_cross=1, n_heads_enc=1, period=2)
        from pir.audio2exp import self_attention_bias
        bias = self_attention_bias(3, 2, head_slopes(1))
        out = biased_causal_self_attention(x, attn, cfg).data
        np.testing.assert_allclose(out, attention_oracle(attn, x, x, bias), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_multi_head_oracle(self, seed):
        from pir.audio2exp import self_attention_bias
        rng = ad.make_rng(10 + seed)
        attn = MultiHeadAttention(8, 2, rng)
        x = rng.standard_normal((7, 8))
        bias = self_attention_bias(7, 3, head_slopes(2))
        out = biased_causal_self_attention(x, attn, SMALL).data
        np.testing.assert_allclose(out, attention_oracle(attn, x, x, bias), rtol=0, atol=1e-10)


class TestCrossModalAttention:
    def test_row_depends_only_on_aligned_encoder_row(self):
        rng = ad.make_rng(3)
        attn = MultiHeadAttention(8, 2, rng)
        x = rng.standard_normal((5, 8))
        enc = rng.standard_normal((5, 8))
        base = biased_cross_modal_attention(x, enc, attn).data
        for i in range(5):
            e2 = enc.copy()
            e2[i] += 1.0
            out = biased_cross_modal_attention(x, e2, attn).data
            changed = np.any(out != base, axis=1)
            assert changed.tolist() == [r == i for r in range(5)]

    def test_oracle(self):
        rng = ad.make_rng(4)
        attn = MultiHeadAttention(2, 1, rng)
        x = rng.standard_normal((2, 2))
        enc = rng.standard_normal((2, 2))
        bias = alignment_bias(2, 2)[None]
        out = biased_cross_modal_attention(x, enc, attn).data
        np.testing.assert_allclose(out, attention_oracle(attn, x, enc, bias), rtol=0, atol=1e-12)

    def test_zero_queries_keys_gives_value_rows(self):
        rng = ad.make_rng(5)
        attn = MultiHeadAttention(4, 2, rng)
        for lin in (attn.q, attn.k):
            lin.weight.data[:] = 0.0
            lin.bias.data[:] = 0.0
        x = rng.standard_normal((3, 4))
        enc = rng.standard_normal((3, 4))
        out = biased_cross_modal_attention(x, enc, attn).data
        expected = (enc @ attn.v.weight.data + attn.v.bias.data) @ attn.out.weight.data + attn.out.bias.data
        np.testing.assert_allclose(out, expected, atol=1e-14)

    def test_length_mismatch(self):
        attn = MultiHeadAttention(4, 2, ad.make_rng(0))
        with pytest.raises(AlignmentError):
            biased_cross_modal_attention(np.zeros((3, 4)), np.zeros((4, 4)), attn)


class TestDecoder:
    @pytest.fixture
    def model(self):
        return Audio2Exp(SMALL, ad.make_rng(6))

    def test_single_frame_skips_expression_encoder(self, model):
        model.expr_in.weight.data[:] = np.nan
        enc = ad.make_rng(0).standard_normal((1, SMALL.d_model))
        out = decode_sequence(model, enc, np.ones(SMALL.d_id))
        assert out.shape == (1, SMALL.d_exp) and np.all(np.isfinite(out))

    def test_teacher_forced_equals_autoregressive(self, model):
        rng = ad.make_rng(7)
        enc = rng.standard_normal((6, SMALL.d_model))
        z = rng.standard_normal(SMALL.d_id)
        auto = decode_sequence(model, enc, z)
        with ad.no_grad():
            teacher = model.decode(enc[None], z, auto[None, :-1]).data[0]
        assert np.array_equal(teacher, auto)

    def test_identity_reaches_every_frame(self, model):
        rng = ad.make_rng(8)
        enc = rng.standard_normal((6, SMALL.d_model))
        a = decode_sequence(model, enc, np.zeros(SMALL.d_id))
        b = decode_sequence(model, enc, np.ones(SMALL.d_id))
        assert np.all(np.any(a != b, axis=1))

    def test_causality_through_decoder(self, model):
        rng = ad.make_rng(9)
        enc = rng.standard_normal((1, 6, SMALL.d_model))
        z = rng.standard_normal(SMALL.d_id)
        prev = rng.standard_normal((1, 5, SMALL.d_exp))
        with ad.no_grad():
            base = model.decode(enc, z, prev).data
            for tau in range(5):
                e2, p2 = enc.copy(), prev.copy()
                e2[:, tau + 1:] += 1.0
                p2[:, tau:] += 1.0  # a_tau feeds row tau+1
                out = model.decode(e2, z, p2).data
                assert np.array_equal(out[:, :tau + 1], base[:, :tau + 1])
                assert not np.array_equal(out[:, tau + 1:], base[:, tau + 1:])


class TestEncoder:
    def test_shape(self):
        model = Audio2Exp(SMALL, ad.make_rng(0))
        for L, k in [(1, 1), (11, 6), (4, 9)]:
            with ad.no_grad():
                out = model.encode(np.ones((L, SMALL.d_audio)), k)
            assert out.shape == (k, SMALL.d_model)

    def test_zero_projection(self):
        model = Audio2Exp(SMALL, ad.make_rng(0))
        model.encoder.proj.weight.data[:] = 0
        model.encoder.proj.bias.data[:] = 0
        out = model.encode(ad.make_rng(1).standard_normal((9, SMALL.d_audio)), 5)
        assert np.all(out.data == 0)

    @pytest.mark.parametrize("seed", range(3))
    def test_gradcheck(self, seed):
        model = Audio2Exp(SMALL, ad.make_rng(seed))
        rng = ad.make_rng(100 + seed)
        feats = ad.Tensor(rng.standard_normal((1, 9, SMALL.d_audio)))
        proj = rng.standard_normal((1, 5, SMALL.d_model))

        def loss():
            return (model.encode(feats, 5) * proj).sum()

        err = ad.check_gradients(loss, [feats] + model.encoder.parameters()[:6], max_coords=12, rng=rng)
        assert err < 1e-4


class TestLoss:
    def test_zero(self):
        x = np.ones((3, 2))
        assert loss_audio(x, x).item() == 0.0

    def test_hand_arithmetic(self):
        assert loss_audio(np.array([[1.0, 2.0]]), np.zeros((1, 2))).item() == 5.0

    def test_gradient(self):
        rng = np.random.default_rng(0)
        pred = ad.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        target = rng.standard_normal((4, 3))
        loss_audio(pred, target).backward()
        np.testing.assert_allclose(pred.grad, 2 * (pred.data - target))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            loss_audio(np.zeros((2, 3)), np.zeros((3, 3)))


def test_training_reduces_loss_on_linear_targets():
    """Targets are a fixed linear map of the per-frame features."""
    cfg = DecoderConfig(d_audio=6, d_model=16, n_heads_self=2, n_heads_cross=2, n_heads_enc=2,
                        n_enc_blocks=1, d_ffn=32, context=8, d_exp=3, d_id=2)
    rng = ad.make_rng(0)
    n_frames = 120
    feats = rng.standard_normal((n_frames, cfg.d_audio))
    mix = rng.standard_normal((cfg.d_audio, cfg.d_exp)) / np.sqrt(cfg.d_audio)
    targets = feats @ mix
    model = Audio2Exp(cfg, ad.make_rng(1))
    losses = train(model, feats, targets, np.ones(cfg.d_id), n_frames, 1,
                   TrainSettings(steps=500, lr=1e-3, batch=8), ad.make_rng(2))
    assert np.mean(losses[-10:]) < 0.01 * np.mean(losses[:3])


def test_infer_windows_cover_all_frames():
    model = Audio2Exp(SMALL, ad.make_rng(0))
    feats = np.random.default_rng(0).standard_normal((2 * 13 - 1, SMALL.d_audio))
    out = infer(model, feats, np.zeros(SMALL.d_id), 13, 2, k=6)
    assert out.shape == (13, SMALL.d_exp)
