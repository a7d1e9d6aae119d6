import numpy as np
import pytest

from flowstyle import flow
from flowstyle import tensor as T
from flowstyle.errors import (ConfigError, ContractError, InputError,
                              NumericError)
from flowstyle.rng import Rng
from flowstyle.tensor import Tensor
from flowstyle.video import (VideoClip, VideoConfig, VideoDiT,
                             build_clip_corpus, clip_motion_score, load_clip,
                             load_clip_corpus, load_video_model,
                             motion_feature, motion_filter, propagate,
                             sample_clip, save_clip, save_video_model,
                             train_video, video_positions)
from flowstyle.world import quantize, to_signed

from conftest import rel_err

TINY = dict(frames=2, frame_size=(8, 8), patch_size=4, dim=16, depth=1,
            heads=2, mlp_ratio=2)


def tiny_model(seed=0, dtype=np.float64, randomize=True, scale=0.2):
    model = VideoDiT(VideoConfig(**TINY), seed=seed, dtype=dtype)
    if randomize:
        rng = np.random.default_rng(seed + 100)
        for p in model.parameters():
            p.data = (scale * rng.standard_normal(p.shape)).astype(dtype)
    return model


def tiny_inputs(seed=0, frames=2, size=8):
    rng = np.random.default_rng(seed)
    return (rng.normal(size=(frames, size, size, 3)),
            rng.normal(size=(frames, size, size, 3)),
            rng.normal(size=(size, size, 3)))


def tiny_clip(style_id, seed=7, frames=3, static=False):
    return sample_clip(Rng(seed).child("clip", style_id), style_id,
                       frames=frames, size=(8, 8), static=static)


class TestVideoConfig:
    def test_defaults_valid(self):
        cfg = VideoConfig()
        assert cfg.frames == 8
        assert cfg.frame_size == (32, 32)
        assert cfg.motion_threshold == 0.995

    @pytest.mark.parametrize("kw", [
        dict(frames=1),
        dict(frame_size=(30, 32)),
        dict(frame_size=(32,)),
        dict(frame_size=(0, 32)),
        dict(dim=130),
        dict(motion_threshold=0.0),
        dict(motion_threshold=1.2),
        dict(lr=0.0),
        dict(batch_size=0),
    ])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            VideoConfig(**kw)


class TestVideoClip:
    def test_first_frame_is_stylized_frame_zero(self):
        clip = tiny_clip(0)
        assert np.array_equal(clip.first_frame, clip.stylized[0])

    def test_wrong_rank_rejected(self):
        with pytest.raises(InputError):
            VideoClip(clip_id="x", source=np.zeros((8, 8, 3)))

    def test_single_frame_rejected(self):
        with pytest.raises(InputError):
            VideoClip(clip_id="x", source=np.zeros((1, 8, 8, 3)))

    def test_mismatched_stylized_rejected(self):
        with pytest.raises(InputError):
            VideoClip(clip_id="x", source=np.zeros((2, 8, 8, 3)),
                      stylized=np.zeros((3, 8, 8, 3)))


class TestMotionFeature:
    def test_unit_norm(self):
        feat = motion_feature(tiny_clip(0).source[0])
        assert abs(np.linalg.norm(feat) - 1.0) <= 1e-12

    def test_identical_frames_identical_features(self):
        frame = tiny_clip(1).source[0]
        assert np.array_equal(motion_feature(frame),
                              motion_feature(frame.copy()))

    def test_translation_moves_mass_between_cells(self):
        frame = np.zeros((16, 16, 3), dtype=np.float32)
        frame[0:4, 0:4] = [0.9, 0.1, 0.1]
        shifted = np.zeros_like(frame)
        shifted[0:4, 8:12] = [0.9, 0.1, 0.1]
        a = motion_feature(frame)
        b = motion_feature(shifted)
        assert float(a @ b) < 0.999

    def test_wrong_shape_rejected(self):
        with pytest.raises(InputError):
            motion_feature(np.zeros((8, 8)))


class TestMotionScore:
    def test_static_clip_scores_zero(self):
        clip = tiny_clip(2, static=True)
        assert clip_motion_score(clip.source) == 0.0

    def test_moving_clip_scores_positive(self):
        clip = tiny_clip(3, frames=4)
        assert clip_motion_score(clip.source) > 0.0

    def test_bounded(self):
        rng = np.random.default_rng(0)
        frames = rng.uniform(size=(4, 8, 8, 3))
        assert 0.0 <= clip_motion_score(frames) <= 1.0

    def test_needs_two_frames(self):
        with pytest.raises(InputError):
            clip_motion_score(np.zeros((1, 8, 8, 3)))


class TestMotionFilter:
    def test_static_discarded_moving_kept(self):
        moving = [tiny_clip(i, frames=4) for i in range(3)]
        static = [tiny_clip(10 + i, frames=4, static=True) for i in range(2)]
        kept, report = motion_filter(moving + static, 0.995)
        assert [c.clip_id for c in kept] == [c.clip_id for c in moving]
        assert report["total"] == 5
        assert report["kept"] == 3
        assert set(report["discarded"]) == {c.clip_id for c in static}

    def test_threshold_one_keeps_any_change(self):
        clip = tiny_clip(4, frames=3)
        barely = clip.source.copy()
        # flip one pixel to a different palette color in one frame
        barely[1, 0, 0] = 1.0 - barely[1, 0, 0]
        moved = VideoClip(clip_id="m", source=barely)
        frozen = VideoClip(clip_id="f",
                           source=np.repeat(clip.source[:1], 3, axis=0))
        kept, report = motion_filter([moved, frozen], 1.0)
        assert [c.clip_id for c in kept] == ["m"]
        assert report["discarded"] == ["f"]

    def test_idempotent(self):
        clips = [tiny_clip(i, frames=4) for i in range(3)]
        clips += [tiny_clip(20, frames=4, static=True)]
        kept, _ = motion_filter(clips, 0.995)
        again, report = motion_filter(kept, 0.995)
        assert [c.clip_id for c in again] == [c.clip_id for c in kept]
        assert report["discarded"] == []

    def test_bad_threshold(self):
        with pytest.raises(ConfigError):
            motion_filter([], 0.0)


class TestVideoPositions:
    def test_layout_and_time_axis(self):
        pos = video_positions(3, 2, 2, 2)
        assert pos.shape == (1 + 3 * 4 + 4, 3)
        assert np.array_equal(pos[0], [0, 0, 0])
        for f in range(3):
            frame_rows = pos[1 + f * 4: 1 + (f + 1) * 4]
            assert np.all(frame_rows[:, 0] == f)
        style_rows = pos[1 + 12:]
        assert np.all(style_rows[:, 0] == 0)

    def test_style_stays_at_time_zero_under_shift(self):
        pos = video_positions(2, 2, 2, 2, time_shift=5)
        frame_rows = pos[1:9]
        style_rows = pos[9:]
        assert np.all(frame_rows[:, 0] >= 5)
        assert np.all(style_rows[:, 0] == 0)


class TestVideoForward:
    def test_fresh_model_outputs_zero(self):
        model = VideoDiT(VideoConfig(**TINY), seed=0)
        noisy, source, style = tiny_inputs(0)
        out = model.forward(noisy, source, style, 0, 0.5)
        assert np.all(out.data == 0.0)

    def test_zero_weights_head_bias_dominates(self):
        model = tiny_model(randomize=False)
        for p in model.parameters():
            p.data = np.zeros_like(p.data)
        model.head.b.data = np.full_like(model.head.b.data, 0.7)
        noisy, source, style = tiny_inputs(1)
        out = model.forward(noisy, source, style, 0, 0.5)
        assert out.shape == noisy.shape
        assert np.allclose(out.data, 0.7, atol=1e-12)

    def test_deterministic(self):
        model = tiny_model()
        noisy, source, style = tiny_inputs(2)
        a = model.forward(noisy, source, style, 0, 0.25)
        b = model.forward(noisy, source, style, 0, 0.25)
        assert np.array_equal(a.data, b.data)

    def test_time_shift_changes_output(self):
        model = tiny_model()
        noisy, source, style = tiny_inputs(3)
        a = model.forward(noisy, source, style, 0, 0.5)
        b = model.forward(noisy, source, style, 0, 0.5, time_shift=3)
        assert np.max(np.abs(a.data - b.data)) > 1e-8

    def test_frame_order_matters(self):
        model = tiny_model()
        noisy, source, style = tiny_inputs(4)
        a = model.forward(noisy, source, style, 0, 0.5)
        b = model.forward(noisy, source[::-1].copy(), style, 0, 0.5)
        assert np.max(np.abs(a.data - b.data)) > 1e-8

    def test_nonzero_prompt_rejected(self):
        model = tiny_model()
        noisy, source, style = tiny_inputs(5)
        with pytest.raises(ConfigError):
            model.forward(noisy, source, style, 1, 0.5)

    def test_t_out_of_range(self):
        model = tiny_model()
        noisy, source, style = tiny_inputs(6)
        with pytest.raises(ContractError):
            model.forward(noisy, source, style, 0, 1.5)

    def test_shape_mismatches_rejected(self):
        model = tiny_model()
        noisy, source, style = tiny_inputs(7)
        with pytest.raises(InputError):
            model.forward(noisy, source[:1], style, 0, 0.5)
        with pytest.raises(InputError):
            model.forward(noisy, source, style[:4], 0, 0.5)
        with pytest.raises(InputError):
            model.forward(noisy[0], source[0], style, 0, 0.5)


class TestVideoGradients:
    def test_sampled_coordinates_match_finite_differences(self):
        model = tiny_model(seed=3)
        noisy, source, style = tiny_inputs(9)
        tgt = np.random.default_rng(10).normal(size=noisy.shape)

        def loss():
            out = model.forward(noisy, source, style, 0, 0.35)
            return T.mean(T.square(out - Tensor(tgt)))

        params = model.named_parameters()
        T.zero_grads(params.values())
        loss().backward()
        coord_rng = np.random.default_rng(11)
        h = 1e-5
        for name in ("video_embed.W", "style_embed.W", "text.empty",
                     "head.b", "skip_gate.W", "blocks.0.qkv.W"):
            p = params[name]
            an = p.grad_array()
            flat = an.ravel()
            picks = {int(np.argmax(np.abs(flat)))}
            picks.update(int(i) for i in coord_rng.integers(0, flat.size, 2))
            for c in picks:
                idx = np.unravel_index(c, p.data.shape)
                keep = p.data[idx]
                p.data[idx] = keep + h
                up = loss().item()
                p.data[idx] = keep - h
                dn = loss().item()
                p.data[idx] = keep
                fd = (up - dn) / (2 * h)
                assert rel_err(flat[c], fd, floor=1e-6) <= 1e-4, (
                    f"{name}[{idx}] analytic {flat[c]:.3e} vs fd {fd:.3e}")


class TestTrainVideo:
    def clips(self, n=2):
        return [tiny_clip(i, frames=2) for i in range(n)]

    def test_loss_decreases(self):
        model = VideoDiT(VideoConfig(**TINY), seed=1, dtype=np.float32)
        out = train_video(model, self.clips(), steps=80, lr=5e-3,
                          rng=Rng(5), batch_size=2)
        losses = out["losses"]
        assert np.mean(losses[-20:]) < 0.7 * np.mean(losses[:20])

    def test_nan_loss_raises(self):
        model = VideoDiT(VideoConfig(**TINY), seed=1, dtype=np.float32)
        model.head.b.data = np.full_like(model.head.b.data, np.nan)
        with pytest.raises(NumericError, match="step 0"):
            train_video(model, self.clips(1), steps=1, lr=1e-3, rng=Rng(5))

    def test_resume_is_bit_exact(self, tmp_path):
        clips = self.clips()

        def fresh():
            return VideoDiT(VideoConfig(**TINY), seed=2, dtype=np.float32)

        straight = fresh()
        train_video(straight, clips, steps=8, lr=1e-3, rng=Rng(9),
                    batch_size=2)

        broken = fresh()
        state = str(tmp_path / "state.tsty")
        train_video(broken, clips, steps=4, lr=1e-3, rng=Rng(9),
                    batch_size=2, state_path=state, save_every=4)
        # a dead-end run must not be able to clobber the state silently
        with pytest.raises(ConfigError, match="resume"):
            train_video(fresh(), clips, steps=8, lr=1e-3, rng=Rng(9),
                        batch_size=2, state_path=state)
        resumed = fresh()
        train_video(resumed, clips, steps=8, lr=1e-3, rng=Rng(9),
                    batch_size=2, state_path=state, save_every=4,
                    resume=True)
        for name, p in straight.named_parameters().items():
            q = resumed.named_parameters()[name]
            assert np.array_equal(p.data, q.data), name

    def test_unstylized_clip_rejected(self):
        clip = VideoClip(clip_id="bare", source=tiny_clip(0).source)
        model = VideoDiT(VideoConfig(**TINY), seed=1)
        with pytest.raises(ConfigError):
            train_video(model, [clip], steps=1, lr=1e-3, rng=Rng(0))

    def test_empty_clips_rejected(self):
        model = VideoDiT(VideoConfig(**TINY), seed=1)
        with pytest.raises(ConfigError):
            train_video(model, [], steps=1, lr=1e-3, rng=Rng(0))


class TestPropagate:
    def test_shape_and_determinism(self):
        model = tiny_model(seed=4, dtype=np.float32, scale=0.05)
        clip = tiny_clip(5, frames=2)
        a = propagate(model, clip.source, clip.first_frame, steps=2, seed=3)
        b = propagate(model, clip.source, clip.first_frame, steps=2, seed=3)
        assert a.shape == clip.source.shape
        assert np.array_equal(a, b)

    def test_seed_changes_noise(self):
        model = tiny_model(seed=4, dtype=np.float32, scale=0.05)
        clip = tiny_clip(5, frames=2)
        a = propagate(model, clip.source, clip.first_frame, steps=2, seed=3)
        b = propagate(model, clip.source, clip.first_frame, steps=2, seed=4)
        assert np.max(np.abs(a - b)) > 1e-6


class TestClipStorage:
    def test_roundtrip_quantized_exact(self, tmp_path):
        clip = tiny_clip(6, frames=3)
        save_clip(str(tmp_path / "c"), clip)
        back = load_clip(str(tmp_path / "c"))
        assert back.clip_id == "c"
        assert np.array_equal(back.source, quantize(clip.source))
        assert np.array_equal(back.stylized, quantize(clip.stylized))

    def test_source_only_clip(self, tmp_path):
        clip = VideoClip(clip_id="s", source=tiny_clip(7).source)
        save_clip(str(tmp_path / "s"), clip)
        back = load_clip(str(tmp_path / "s"))
        assert back.stylized is None

    def test_empty_dir_rejected(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(InputError):
            load_clip(str(tmp_path / "empty"))

    def test_corpus_roundtrip_and_manifest(self, tmp_path):
        out = str(tmp_path / "clips")
        clips = build_clip_corpus(out, n_clips=4, frames=2, size=(8, 8),
                                  seed=3, static_fraction=0.5)
        assert len(clips) == 4
        back = load_clip_corpus(out)
        assert [c.clip_id for c in back] == [c.clip_id for c in clips]
        scores = [clip_motion_score(c.source) for c in back]
        assert scores[0] == 0.0 and scores[1] == 0.0
        assert min(scores[2:]) > 0.0


class TestVideoPersistence:
    def test_save_load_roundtrip(self, tmp_path):
        model = tiny_model(seed=5, dtype=np.float32, scale=0.1)
        noisy, source, style = tiny_inputs(11)
        before = model.forward(noisy, source, style, 0, 0.5)
        path = str(tmp_path / "video.tsty")
        save_video_model(path, model)
        back = load_video_model(path)
        assert back.cfg == model.cfg
        after = back.forward(noisy, source, style, 0, 0.5)
        assert np.array_equal(before.data, after.data)

    def test_layout_mismatch_rejected(self, tmp_path):
        model = tiny_model(randomize=False)
        path = str(tmp_path / "video.tsty")
        save_video_model(path, model)
        import flowstyle.checkpoint as ckpt
        side = ckpt.load_sidecar(str(tmp_path / "video.cfg"))
        side["depth"] = "2"
        ckpt.save_sidecar(str(tmp_path / "video.cfg"), side)
        with pytest.raises(ContractError):
            load_video_model(path)
