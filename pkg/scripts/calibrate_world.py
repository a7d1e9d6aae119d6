"""Empirical check of the world/metrics separation properties.

Run from the repo root:  python3 scripts/calibrate_world.py

Prints the margins the test suite and acceptance checks rely on:
same-style cosine, cross-style separation, unstyled-vs-styled gap,
content-score self/background/shuffle/jitter behavior, and motion
sensitivity of grid features for the video filter. Used to pick the
feature block weights; rerun after touching world.py or metrics.py.
"""
import sys

import numpy as np

sys.path.insert(0, "src")

from flowstyle.rng import Rng
from flowstyle import world
from flowstyle import metrics


def main():
    rng = Rng(7)

    # same-style similarity: pairs of different scenes, same style
    same = []
    for k in range(100):
        sid = k % 20
        style = world.make_style(sid, seed=0)
        s1 = world.sample_scene(rng.child("same-a", k))
        s2 = world.sample_scene(rng.child("same-b", k))
        a = world.apply_style(style, world.render(s1))
        b = world.apply_style(style, world.render(s2))
        same.append(metrics.style_similarity(a, b))
    same = np.array(same)
    print(f"same-style sim: median {np.median(same):.3f} "
          f"min {same.min():.3f} p10 {np.percentile(same, 10):.3f}")

    # cross-style: target closer to own style ref than to another style's
    own_wins, cross_sims = 0, []
    for k in range(100):
        sid_a, sid_b = k % 20, (k % 20 + 7) % 20
        sa, sb = world.make_style(sid_a, 0), world.make_style(sid_b, 0)
        target = world.apply_style(sa, world.render(
            world.sample_scene(rng.child("x-t", k))))
        ref_a = world.apply_style(sa, world.render(
            world.sample_scene(rng.child("x-a", k))))
        ref_b = world.apply_style(sb, world.render(
            world.sample_scene(rng.child("x-b", k))))
        sim_a = metrics.style_similarity(target, ref_a)
        sim_b = metrics.style_similarity(target, ref_b)
        own_wins += sim_a > sim_b
        cross_sims.append(sim_b)
    cross = np.array(cross_sims)
    print(f"own-style wins: {own_wins}/100; cross-style sim "
          f"median {np.median(cross):.3f} p95 {np.percentile(cross, 95):.3f}")

    # unstyled content copy vs styled ref (the CPC gate premise)
    copy_sims = []
    for k in range(100):
        style = world.make_style(k % 30, seed=0)
        content = world.render(world.sample_scene(rng.child("copy-c", k)))
        ref = world.apply_style(style, world.render(
            world.sample_scene(rng.child("copy-r", k))))
        copy_sims.append(metrics.style_similarity(content, ref))
    copy_sims = np.array(copy_sims)
    print(f"unstyled-vs-styled sim: median {np.median(copy_sims):.3f} "
          f"p95 {np.percentile(copy_sims, 95):.3f} "
          f"frac<0.5 {np.mean(copy_sims < 0.5):.2f}")

    # content score behaviors
    self_scores, bg_scores, styled_scores, shuffled_scores = [], [], [], []
    jitter_drop = []
    for k in range(100):
        scene = world.sample_scene(rng.child("cs", k))
        other = world.sample_scene(rng.child("cs-o", k))
        img = world.render(scene)
        self_scores.append(metrics.content_score(img, scene))
        bg = world.render(world.SceneDescriptor(shapes=[], bg=scene.bg))
        bg_scores.append(metrics.content_score(bg, scene))
        style = world.make_style(k % 20, 0)
        styled = world.apply_style(style, img)
        styled_scores.append(metrics.content_score(styled, scene))
        shuffled_scores.append(metrics.content_score(styled, other))
        jit = world.destylize_noisify(img, scene, 3.0, 0.0, seed=k)
        jitter_drop.append(self_scores[-1] - metrics.content_score(jit, scene))
    print(f"content self: median {np.median(self_scores):.3f} "
          f"min {np.min(self_scores):.3f}")
    print(f"content on background-only: median {np.median(bg_scores):.3f} "
          f"max {np.max(bg_scores):.3f}")
    print(f"styled vs own descriptor: median {np.median(styled_scores):.3f}; "
          f"vs shuffled: median {np.median(shuffled_scores):.3f}; "
          f"margin {np.median(styled_scores) - np.median(shuffled_scores):.3f}")
    print(f"jitter-3px score drop: median {np.median(jitter_drop):.4f} "
          f"frac>0 {np.mean(np.array(jitter_drop) > 0):.2f}")

    # motion sensitivity of candidate per-frame features
    def grid_hist(frame, cells=8):
        h, w = frame.shape[:2]
        d2 = ((frame[:, :, None, :] - world.BASE_PALETTE[None, None]) ** 2
              ).sum(-1)
        idx = d2.argmin(-1)
        ys = np.linspace(0, h, cells + 1).astype(int)
        xs = np.linspace(0, w, cells + 1).astype(int)
        blocks = []
        for i in range(cells):
            for j in range(cells):
                cell = idx[ys[i]:ys[i + 1], xs[j]:xs[j + 1]]
                blocks.append(np.bincount(cell.ravel(), minlength=8)
                              / max(cell.size, 1))
        v = np.sqrt(np.concatenate(blocks))
        return v / np.linalg.norm(v)

    # a clip is kept when ANY adjacent pair moves, i.e. min adjacent
    # cosine < tau, i.e. max drop > 1 - tau = 0.005
    for speed in (1.0, 2.0, 4.0, None):
        drops = []
        for k in range(40):
            scene, motion = world.sample_video_scene(
                rng.child("mv", k, str(speed)), t=4)
            if speed is not None:
                motion = [(speed, 0.0) for _ in motion]
            src, _ = world.gen_video_clip(scene, world.IDENTITY_STYLE, 4,
                                          motion)
            cos = min(float(np.dot(grid_hist(src[i]), grid_hist(src[i + 1])))
                      for i in range(3))
            drops.append(1.0 - cos)
        drops = np.array(drops)
        label = "sampled" if speed is None else f"{speed:.0f}px/frame"
        print(f"motion {label}: max-drop min {drops.min():.5f} "
              f"median {np.median(drops):.5f} "
              f"kept@tau=0.995 {np.mean(drops > 0.005):.2f}")


if __name__ == "__main__":
    main()
