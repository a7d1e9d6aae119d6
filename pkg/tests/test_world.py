import json
import math
import os

import numpy as np
import pytest

from flowstyle.errors import ConfigError
from flowstyle.rng import Rng
from flowstyle import world
from flowstyle.world import (
    BASE_PALETTE, IDENTITY_STYLE, SceneDescriptor, Shape, StyleParams,
    WorldConfig, apply_style, build_corpus, destylize_noisify,
    gen_video_clip, load_manifest, make_style, quantize, read_ppm, render,
    sample_scene, styled_palette, write_ppm,
)


class TestRender:
    def test_centered_circle_covers_area(self):
        desc = SceneDescriptor(
            shapes=[Shape("circle", 0.5, 0.5, 0.4, color=2)])
        img = render(desc, (64, 64))
        frac = np.all(img == BASE_PALETTE[2], axis=-1).mean()
        assert frac >= 0.15

    def test_empty_descriptor_is_pure_gradient(self):
        img = render(SceneDescriptor(shapes=[], bg=(0, 1)), (64, 64))
        lam = np.arange(64) / 63.0
        expected = (1 - lam)[:, None] * BASE_PALETTE[0] \
            + lam[:, None] * BASE_PALETTE[1]
        assert np.array_equal(img, np.broadcast_to(
            expected[:, None, :], (64, 64, 3)))

    def test_rows_are_exact_palette_blends(self):
        img = render(SceneDescriptor(shapes=[], bg=(1, 0)), (32, 64))
        assert np.array_equal(img[0, 0], BASE_PALETTE[1])
        assert np.array_equal(img[-1, 0], BASE_PALETTE[0])
        # every row constant
        assert np.all(img == img[:, :1, :])

    def test_shapes_paint_their_palette_color(self):
        for kind in world.SHAPE_KINDS:
            desc = SceneDescriptor(
                shapes=[Shape(kind, 0.5, 0.5, 0.2, color=5,
                              angle=math.pi / 4)])
            img = render(desc, (64, 64))
            mask = np.all(img == BASE_PALETTE[5], axis=-1)
            assert mask.sum() > 20, kind

    def test_unknown_kind_rejected(self):
        desc = SceneDescriptor(shapes=[Shape("blob", 0.5, 0.5, 0.2, 2)])
        with pytest.raises(ConfigError):
            render(desc)

    def test_line_angle_changes_pixels(self):
        mk = lambda a: render(SceneDescriptor(
            shapes=[Shape("line", 0.5, 0.5, 0.2, 2, angle=a)]))
        assert not np.array_equal(mk(0.0), mk(math.pi / 2))


class TestStyles:
    def test_deterministic_and_distinct(self):
        a1 = make_style(3, seed=0)
        a2 = make_style(3, seed=0)
        b = make_style(4, seed=0)
        assert a1 == a2
        assert a1 != b
        assert make_style(3, seed=1) != a1

    def test_background_moves_off_neutral_slots(self):
        for sid in range(30):
            style = make_style(sid, seed=0)
            assert not ({style.perm[0], style.perm[1]}
                        & set(world.BACKGROUND_SLOTS))

    def test_styled_background_avoids_neutral_bins(self):
        # the probe property the metrics separation relies on
        for sid in range(30):
            style = make_style(sid, seed=0)
            mass = world._styled_background_neutral_mass(style)
            assert mass < world._NEUTRAL_PROBE_LIMIT

    def test_identity_style_is_exact_noop(self):
        img = render(sample_scene(Rng(0).child("s")), (64, 64))
        out = apply_style(IDENTITY_STYLE, img)
        assert np.array_equal(out, img)

    def test_gamma_only_style_squares_midgray(self):
        style = StyleParams(
            style_id=-1, perm=tuple(range(8)), tint=(0.0, 0.0, 0.0),
            texture_kind="none", texture_period=8, texture_strength=0.0,
            texture_angle=0.0, texture_seed=0, edge_width=0, gamma=2.0)
        img = np.full((8, 8, 3), 0.5)
        out = apply_style(style, img)
        assert np.allclose(out, 0.25, atol=1e-12)

    def test_remap_maps_solids_and_blends_exactly(self):
        desc = SceneDescriptor(
            shapes=[Shape("rect", 0.5, 0.5, 0.2, color=4)], bg=(0, 1))
        img = render(desc, (64, 64))
        style = StyleParams(
            style_id=-1, perm=(2, 5, 0, 1, 3, 4, 6, 7),
            tint=(0.02, -0.01, 0.03), texture_kind="none", texture_period=8,
            texture_strength=0.0, texture_angle=0.0, texture_seed=0,
            edge_width=0, gamma=1.0)
        out = apply_style(style, img)
        spal = styled_palette(style)
        mask = np.all(img == BASE_PALETTE[4], axis=-1)
        assert np.allclose(out[mask], spal[4], atol=1e-9)
        lam = np.arange(64) / 63.0
        expected_bg = (1 - lam)[:, None] * spal[0] + lam[:, None] * spal[1]
        bgmask = ~mask
        for y in (0, 13, 40, 63):
            row = out[y][bgmask[y]]
            assert np.allclose(row, expected_bg[y], atol=1e-9)

    def test_texture_kinds_render(self):
        img = render(SceneDescriptor(shapes=[], bg=(0, 1)))
        for kind in ("stripes", "dots", "checker", "value-noise"):
            style = StyleParams(
                style_id=-1, perm=tuple(range(8)), tint=(0.0, 0.0, 0.0),
                texture_kind=kind, texture_period=6, texture_strength=0.2,
                texture_angle=0.7, texture_seed=9, edge_width=0, gamma=1.0)
            out = apply_style(style, img)
            assert out.shape == img.shape
            assert not np.array_equal(out, img)
            assert np.array_equal(out, apply_style(style, img))

    def test_edge_outline_darkens_boundary(self):
        desc = SceneDescriptor(
            shapes=[Shape("rect", 0.5, 0.5, 0.2, color=2)], bg=(0, 1))
        img = render(desc)
        style = StyleParams(
            style_id=-1, perm=tuple(range(8)), tint=(0.0, 0.0, 0.0),
            texture_kind="none", texture_period=8, texture_strength=0.0,
            texture_angle=0.0, texture_seed=0, edge_width=1, gamma=1.0)
        out = apply_style(style, img)
        changed = ~np.all(out == img, axis=-1)
        assert changed.any()
        assert np.all(out[changed] < img[changed] + 1e-12)
        # interior of the rect is untouched
        assert np.array_equal(out[32, 32], img[32, 32])


class TestNoisify:
    def test_zero_noise_is_clean_render(self):
        scene = sample_scene(Rng(1).child("n"))
        img = render(scene, (64, 64))
        out = destylize_noisify(img, scene, jitter_px=0.0, drop_prob=0.0,
                                seed=5)
        assert np.array_equal(out, img)

    def test_jitter_moves_shapes(self):
        scene = SceneDescriptor(
            shapes=[Shape("circle", 0.5, 0.5, 0.2, color=2)])
        img = render(scene)
        out = destylize_noisify(img, scene, jitter_px=3.0, drop_prob=0.0,
                                seed=7)
        assert not np.array_equal(out, img)
        assert np.all(np.unique(out) >= 0)

    def test_small_shapes_can_drop(self):
        scene = SceneDescriptor(
            shapes=[Shape("circle", 0.5, 0.5, 0.06, color=2)])
        img = render(scene)
        dropped = [
            np.all(destylize_noisify(img, scene, 0.0, 1.0, seed=s)
                   == render(SceneDescriptor(shapes=[], bg=scene.bg)))
            for s in range(3)]
        assert all(dropped)
        # large shapes never drop
        big = SceneDescriptor(shapes=[Shape("circle", 0.5, 0.5, 0.2, 2)])
        out = destylize_noisify(render(big), big, 0.0, 1.0, seed=0)
        assert not np.array_equal(
            out, render(SceneDescriptor(shapes=[], bg=big.bg)))

    def test_bad_params_rejected(self):
        scene = sample_scene(Rng(2).child("x"))
        img = render(scene)
        with pytest.raises(ConfigError):
            destylize_noisify(img, scene, -1.0, 0.0, seed=0)
        with pytest.raises(ConfigError):
            destylize_noisify(img, scene, 0.0, 1.5, seed=0)


class TestPpm:
    def test_roundtrip_bit_exact(self, tmp_path):
        img = Rng(3).child("img").np().uniform(0, 1, (16, 24, 3))
        path = str(tmp_path / "a.ppm")
        write_ppm(path, img)
        back = read_ppm(path)
        assert back.shape == (16, 24, 3)
        assert np.array_equal(back, quantize(img))

    def test_header_parsing_with_comment(self, tmp_path):
        img = np.zeros((2, 3, 3))
        path = str(tmp_path / "b.ppm")
        write_ppm(path, img)
        with open(path, "rb") as f:
            blob = f.read()
        doctored = blob.replace(b"P6\n", b"P6\n# comment\n", 1)
        path2 = str(tmp_path / "c.ppm")
        with open(path2, "wb") as f:
            f.write(doctored)
        assert np.array_equal(read_ppm(path2), read_ppm(path))

    def test_rejects_non_ppm(self, tmp_path):
        path = str(tmp_path / "bad.ppm")
        with open(path, "wb") as f:
            f.write(b"P5\n2 2\n255\n" + bytes(4))
        with pytest.raises(world.InputError):
            read_ppm(path)


SMALL = dict(n_clean_styles=3, n_synth_styles=2, n_holdout_styles=2,
             per_clean=8, per_synth=4, per_holdout=2, n_bench_contents=3,
             seed=11)


class TestCorpus:
    def test_counts_and_manifests(self, tmp_path):
        counts = build_corpus(str(tmp_path), WorldConfig(**SMALL))
        assert counts == {"clean": 24, "synthetic": 8, "holdout": 4,
                          "bench_contents": 3}
        clean = load_manifest(str(tmp_path / "clean.jsonl"))
        assert len(clean) == 24
        r = clean[0]
        assert r.provenance == "clean"
        assert r.style_ref != r.target
        for rel in (r.style_ref, r.content_ref, r.target):
            assert os.path.exists(tmp_path / rel)

    def test_default_counts_match_contract(self):
        cfg = WorldConfig()
        assert cfg.n_clean_styles * cfg.per_clean == 720
        assert cfg.n_synth_styles * cfg.per_synth == 2000

    def test_style_ref_is_same_style_other_scene(self, tmp_path):
        build_corpus(str(tmp_path), WorldConfig(**SMALL))
        for r in load_manifest(str(tmp_path / "clean.jsonl")):
            assert r.style_ref != r.target
            ref_name = os.path.basename(r.style_ref)
            assert ref_name.startswith(f"c{r.style_id:03d}_")

    def test_clean_target_regenerates_exactly(self, tmp_path):
        cfg = WorldConfig(**SMALL)
        build_corpus(str(tmp_path), cfg)
        r = load_manifest(str(tmp_path / "clean.jsonl"))[5]
        scene = SceneDescriptor.from_dict(r.descriptor)
        style = make_style(r.style_id, cfg.seed)
        regen = quantize(apply_style(style, render(scene, r.size)))
        disk = read_ppm(str(tmp_path / r.target))
        assert np.array_equal(disk, regen)
        content = read_ppm(str(tmp_path / r.content_ref))
        assert np.array_equal(content, quantize(render(scene, r.size)))

    def test_synthetic_content_is_perturbed(self, tmp_path):
        build_corpus(str(tmp_path), WorldConfig(**SMALL))
        recs = load_manifest(str(tmp_path / "synthetic.jsonl"))
        differs = 0
        for r in recs:
            scene = SceneDescriptor.from_dict(r.descriptor)
            clean = quantize(render(scene, r.size))
            disk = read_ppm(str(tmp_path / r.content_ref))
            differs += not np.array_equal(disk, clean)
        assert differs > len(recs) // 2

    def test_wide_fraction(self, tmp_path):
        build_corpus(str(tmp_path), WorldConfig(**SMALL))
        recs = load_manifest(str(tmp_path / "clean.jsonl"))
        wide = [r for r in recs if tuple(r.size) == (32, 64)]
        assert len(wide) == 6  # every 4th of 8 per style, 3 styles

    def test_byte_identical_across_runs(self, tmp_path):
        import hashlib

        def digest(root):
            h = hashlib.sha256()
            for base, _, files in sorted(os.walk(root)):
                for name in sorted(files):
                    with open(os.path.join(base, name), "rb") as f:
                        h.update(name.encode() + f.read())
            return h.hexdigest()

        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        build_corpus(a, WorldConfig(**SMALL))
        build_corpus(b, WorldConfig(**SMALL))
        assert digest(a) == digest(b)

    def test_overlapping_ranges_rejected(self):
        with pytest.raises(ConfigError):
            WorldConfig(clean_ids=(0, 1), synth_ids=(1, 2),
                        holdout_ids=(3,))

    def test_consistency_fn_recorded(self, tmp_path):
        calls = []

        def fn(img, scene):
            calls.append(img.shape)
            return 0.5

        build_corpus(str(tmp_path), WorldConfig(**SMALL), consistency_fn=fn)
        recs = load_manifest(str(tmp_path / "clean.jsonl"))
        assert all(r.consistency == 0.5 for r in recs)
        assert len(calls) == 24 + 8 + 4

    def test_bench_contents_load(self, tmp_path):
        build_corpus(str(tmp_path), WorldConfig(**SMALL))
        bench = world.load_bench_contents(str(tmp_path))
        assert len(bench) == 3
        bid, desc, size = bench[0]
        assert bid == "b000"
        assert isinstance(desc, SceneDescriptor)
        assert size == (64, 64)

    def test_descriptor_json_roundtrip(self):
        scene = sample_scene(Rng(4).child("rt"))
        back = SceneDescriptor.from_dict(
            json.loads(json.dumps(scene.to_dict())))
        assert back == scene


class TestVideoClips:
    def test_centroid_tracks_velocity(self):
        desc = SceneDescriptor(
            shapes=[Shape("circle", 0.3, 0.5, 0.15, color=2)], bg=(0, 1))
        t, v = 6, (2.0, 1.0)
        source, stylized = gen_video_clip(desc, IDENTITY_STYLE, t, [v])

        def centroid(frame):
            mask = np.all(frame == BASE_PALETTE[2], axis=-1)
            ys, xs = np.nonzero(mask)
            return xs.mean(), ys.mean()

        x0, y0 = centroid(source[0])
        x5, y5 = centroid(source[t - 1])
        assert abs((x5 - x0) - v[0] * (t - 1)) <= 1.0
        assert abs((y5 - y0) - v[1] * (t - 1)) <= 1.0
        assert np.array_equal(stylized[0], source[0])  # identity style

    def test_stylized_first_frame_matches_conditioning(self):
        desc = SceneDescriptor(
            shapes=[Shape("rect", 0.4, 0.4, 0.15, color=3)], bg=(0, 1))
        style = make_style(2, seed=0)
        source, stylized = gen_video_clip(desc, style, 4, [(2.0, 0.0)])
        assert np.array_equal(stylized[0],
                              apply_style(style, source[0]))

    def test_static_motion_repeats_frames(self):
        desc = SceneDescriptor(
            shapes=[Shape("circle", 0.5, 0.5, 0.2, color=4)], bg=(0, 1))
        source, _ = gen_video_clip(desc, IDENTITY_STYLE, 4, [(0.0, 0.0)])
        for i in range(1, 4):
            assert np.array_equal(source[i], source[0])

    def test_bad_args_rejected(self):
        desc = SceneDescriptor(
            shapes=[Shape("circle", 0.5, 0.5, 0.2, color=4)])
        with pytest.raises(ConfigError):
            gen_video_clip(desc, IDENTITY_STYLE, 1, [(1.0, 0.0)])
        with pytest.raises(world.ContractError):
            gen_video_clip(desc, IDENTITY_STYLE, 4, [])

    def test_sampled_motion_stays_in_bounds(self):
        for k in range(20):
            scene, motion = world.sample_video_scene(
                Rng(9).child("vb", k), t=8)
            for shape, (vx, vy) in zip(scene.shapes, motion):
                for step in (0, 7):
                    assert 0.05 <= shape.cx + vx * step / 32 <= 0.95
                    assert 0.05 <= shape.cy + vy * step / 32 <= 0.95


class TestRanges:
    def test_signed_unit_roundtrip(self):
        img = Rng(5).child("r").np().uniform(0, 1, (4, 4, 3))
        x = world.to_signed(img)
        assert x.min() >= -1.0 and x.max() <= 1.0
        assert np.allclose(world.to_unit(x), img, atol=1e-6)
        assert np.all(world.to_unit(np.array([-3.0, 3.0])) == [0.0, 1.0])
