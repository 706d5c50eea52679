import shutil

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import pir.ablation as ablation
from pir.ablation import (
    ContextRow,
    JitterRow,
    ablate_context_length,
    ablate_jitter,
    jitter_frames,
    permute_past_frames,
    write_context_report,
    write_jitter_report,
)
from pir.pipeline import PER_FRAME, Workspace
from pir.report import read_tsv
from pir.scene import load_scene


class TestPermutePastFrames:
    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 12), st.integers(0, 6), st.integers(0, 2 ** 31 - 1))
    def test_derangement_of_earlier_blocks(self, t, extra, seed):
        n = t + extra
        feats = np.arange(PER_FRAME * n * 3, dtype=float).reshape(PER_FRAME * n, 3)
        out = permute_past_frames(feats, t, np.random.default_rng(seed))
        np.testing.assert_array_equal(out[PER_FRAME * t:], feats[PER_FRAME * t:])
        blocks = out[:PER_FRAME * t].reshape(t, PER_FRAME, 3)
        origin = (blocks[:, 0, 0] // (PER_FRAME * 3)).astype(int)
        assert sorted(origin) == list(range(t))
        assert np.all(origin != np.arange(t))
        # rows of one frame stay together and in order
        np.testing.assert_array_equal(blocks, feats[:PER_FRAME * t].reshape(t, PER_FRAME, 3)[origin])

    @pytest.mark.parametrize("t", [0, 1])
    def test_too_short(self, t):
        with pytest.raises(ValueError):
            permute_past_frames(np.zeros((8, 2)), t, np.random.default_rng(0))


class TestContextRow:
    def test_own_features_only(self):
        assert ContextRow(1, 0.1, 0.2, 7, 7, 0.0, True).dependencies == "own features only"

    def test_window(self):
        row = ContextRow(5, 0.1, 0.2, 7, 5, 0.3, True)
        assert row.dependencies == "features of frames 5..9 and predictions 5..6"


@pytest.fixture(scope="module")
def rows(tiny_workspace, tiny_cfg):
    return ablate_context_length(tiny_cfg, load_scene(tiny_workspace.scene_dir))


class TestContextAblation:
    def test_one_row_per_k(self, rows, tiny_cfg):
        assert [r.k for r in rows] == list(tiny_cfg.ablate_ks)

    def test_k1_ignores_earlier_frames_exactly(self, rows):
        r = rows[0]
        assert r.k == 1 and r.window_start == r.probe_frame
        assert r.past_sensitivity == 0.0 and r.probe_ok

    def test_longer_context_reacts(self, rows):
        r = rows[1]  # probe frame 3 with k = 2 opens a window at frame 2
        assert r.window_start < r.probe_frame
        assert r.past_sensitivity > 0.0 and r.probe_ok

    def test_report(self, rows, tmp_path):
        path = write_context_report(tmp_path, rows)
        table = read_tsv(path)
        assert [int(t["k"]) for t in table] == [r.k for r in rows]
        assert [t["probe_ok"] for t in table] == ["True"] * len(rows)
        assert (tmp_path / "ablate_k.png").stat().st_size > 0


class TestJitter:
    def test_jitter_frames_spread_over_held_out(self, tiny_workspace, tiny_cfg):
        scene = load_scene(tiny_workspace.scene_dir)
        idx = jitter_frames(tiny_cfg, scene)
        assert len(idx) == tiny_cfg.jitter_frames
        assert idx[0] == scene.test_idx[0] and idx[-1] == scene.test_idx[-1]

    def test_mean_variance(self):
        assert JitterRow(0.0, [1.0, 3.0]).mean_variance == 2.0

    def test_reuse_and_cache(self, tiny_workspace, tiny_cfg, tmp_path, monkeypatch):
        root = tmp_path / "ws"
        shutil.copytree(tiny_workspace.root, root)
        ws = Workspace(root)
        scene = load_scene(ws.scene_dir)
        trained = []
        real = ablation.train_render_stage

        def counting(*args, **kwargs):
            trained.append(kwargs["spread"])
            return real(*args, **kwargs)

        monkeypatch.setattr(ablation, "train_render_stage", counting)
        first = ablate_jitter(tiny_cfg, ws, scene)
        assert trained == [0.0]  # s = inpaint_spread comes from render.pirk
        assert (root / "render_s0.pirk").exists()
        second = ablate_jitter(tiny_cfg, ws, scene)
        assert trained == [0.0]
        assert [r.frame_variances for r in first] == [r.frame_variances for r in second]
        assert [r.spread for r in first] == [0.0, tiny_cfg.inpaint_spread]
        assert all(v > 0 for r in first for v in r.frame_variances)

    def test_cache_ignored_after_config_change(self, tiny_workspace, tiny_cfg, tmp_path, monkeypatch):
        from dataclasses import replace

        root = tmp_path / "ws"
        shutil.copytree(tiny_workspace.root, root)
        ws = Workspace(root)
        trained = []
        real = ablation.train_render_stage
        monkeypatch.setattr(ablation, "train_render_stage",
                            lambda *a, **k: trained.append(k["spread"]) or real(*a, **k))
        changed = replace(tiny_cfg, inpaint_lr=2e-3)
        ablate_jitter(changed, ws, load_scene(ws.scene_dir))
        assert trained == [0.0, tiny_cfg.inpaint_spread]

    def test_report(self, tmp_path):
        rows = [JitterRow(0.0, [2e-3, 4e-3]), JitterRow(3.0, [1e-4, 3e-4])]
        table = read_tsv(write_jitter_report(tmp_path, rows))
        assert [float(t["mean_variance"]) for t in table] == pytest.approx([3e-3, 2e-4], rel=1e-12)
        assert float(table[1]["frame1"]) == 3e-4
        assert (tmp_path / "ablate_jitter.png").stat().st_size > 0
