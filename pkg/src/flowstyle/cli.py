"""Command-line entry point: `flowstyle <subcommand>`.

Thin orchestration over the library modules. Every subcommand resolves
its configuration (defaults < config file < flags), writes the resolved
snapshot alongside its outputs, and is deterministic under a fixed
seed. Exit codes are a stable contract: 0 success, 2 configuration or
input error, 3 numeric abort, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from . import config as cfgmod
from . import curriculum, flow, lora, metrics, video, world
from .dit import load_model, prepare_style_ref
from .errors import (ConfigError, ContractError, InputError, NumericError,
                     ShapeError)
from .rng import Rng


def _say(msg: str) -> None:
    print(msg, flush=True)


def _run_fields(args, names) -> dict:
    out = {"subcommand": args.cmd}
    for name in names:
        value = getattr(args, name.replace("-", "_"), None)
        if value is not None:
            out[name] = value
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = cfgmod.load_config(args.config)
    out_dir = args.out
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not args.force:
        raise ConfigError(
            f"{out_dir} is not empty; pass --force to overwrite")
    counts = world.build_corpus(out_dir, cfgmod.world_config(cfg),
                                consistency_fn=metrics.content_score)
    cfgmod.write_snapshot(os.path.join(out_dir, "resolved.ini"), cfg,
                          _run_fields(args, ("config", "out", "force")))
    for name in sorted(counts):
        _say(f"{name}: {counts[name]}")
    return 0


def cmd_train(args) -> int:
    cfg = cfgmod.load_config(args.config)
    stages = 3 if args.stage == "all" else int(args.stage)
    os.makedirs(args.out, exist_ok=True)
    cfgmod.write_snapshot(
        os.path.join(args.out, "resolved.ini"), cfg,
        _run_fields(args, ("config", "corpus", "out", "stage", "resume",
                           "baseline")))
    summary = curriculum.run_curriculum(
        args.corpus, args.out, cfgmod.curriculum_config(cfg),
        cfgmod.model_config(cfg), baseline=args.baseline, stages=stages,
        resume=args.resume, log=_say)
    for stage, splits in summary.items():
        for split, agg in splits.items():
            _say(f"{stage} {split}: "
                 f"style {agg.get('style_sim_median', float('nan')):.3f} "
                 f"content {agg.get('content_median', float('nan')):.3f} "
                 f"cpc@0.5 {agg.get('cpc_05_mean', float('nan')):.3f}")
    return 0


def _load_content(path: str):
    """A PPM image, or a JSON descriptor {descriptor, size} to render.

    Returns (content image, descriptor or None, size).
    """
    if path.endswith(".json"):
        with open(path, "r", encoding="utf-8") as f:
            d = json.load(f)
        desc = world.SceneDescriptor.from_dict(d["descriptor"])
        size = tuple(d.get("size", (64, 64)))
        return world.render(desc, size), desc, size
    img = world.read_ppm(path)
    return img, None, img.shape[:2]


def cmd_sample(args) -> int:
    model = load_model(args.checkpoint)
    if args.adapter:
        lora.load_adapter(args.adapter, model)
    content, desc, size = _load_content(args.content)
    style_raw = world.read_ppm(args.style)
    style = prepare_style_ref(style_raw, size[0], size[1])
    if style.shape != style_raw.shape:
        _say(f"style ref resized {style_raw.shape[0]}x{style_raw.shape[1]} "
             f"-> {style.shape[0]}x{style.shape[1]}")
    cond = flow.Conditioning(content=world.to_signed(content),
                             style=world.to_signed(style),
                             prompt_id=args.prompt_id)
    out = world.to_unit(flow.sample(model, cond, steps=args.steps,
                                    seed=args.seed, guidance=args.guidance))
    out_dir = os.path.dirname(args.out)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    world.write_ppm(args.out, out)
    _say(f"wrote {args.out}")
    if desc is not None:
        sim = metrics.style_similarity(out, style)
        content_score = metrics.content_score(out, desc)
        _say(f"style_sim {sim:.4f} content {content_score:.4f} "
             f"cpc@0.5 {metrics.cpc_at(out, style, desc, 0.5):.4f}")
    cfg = cfgmod.load_config(args.config)
    cfgmod.write_snapshot(
        os.path.splitext(args.out)[0] + ".resolved.ini", cfg,
        _run_fields(args, ("config", "checkpoint", "adapter", "style",
                           "content", "out", "prompt_id", "steps", "seed",
                           "guidance")))
    return 0


def cmd_eval(args) -> int:
    cfg = cfgmod.load_config(args.config)
    model = load_model(args.checkpoint)
    if args.adapter:
        lora.load_adapter(args.adapter, model)
    store = curriculum.TripletStore(args.corpus)
    holdout = world.load_manifest(os.path.join(args.corpus, "holdout.jsonl"))
    bench = world.load_bench_contents(args.corpus)
    if not bench:
        raise ConfigError(f"{args.corpus} has no benchmark scenes")
    pairs = curriculum.eval_pairs(store, holdout, bench,
                                  n_contents=len(bench))
    sampler = curriculum.make_sampler(
        model, sample_steps=cfg["eval"]["sample_steps"],
        rng=Rng(cfg["eval"]["seed"]).child("eval", "cli"))
    report = metrics.evaluate_pairs(sampler, pairs)
    os.makedirs(args.out, exist_ok=True)
    metrics.write_report(os.path.join(args.out, "eval.jsonl"), report)
    cfgmod.write_snapshot(
        os.path.join(args.out, "resolved.ini"), cfg,
        _run_fields(args, ("config", "corpus", "checkpoint", "adapter",
                           "out")))
    agg = report.aggregates
    _say(f"pairs {agg['n']} ok {agg['n_ok']}")
    _say(f"style_sim median {agg['style_sim_median']:.4f} "
         f"content median {agg['content_median']:.4f}")
    _say(f"cpc@0.5 {agg['cpc_05_mean']:.4f} "
         f"cpc@0.3:0.9 {agg['cpc_range_mean']:.4f}")
    return 0


def cmd_video_train(args) -> int:
    cfg = cfgmod.load_config(args.config)
    vc = cfg["video"]
    video_cfg = cfgmod.video_config(cfg)
    os.makedirs(args.out, exist_ok=True)
    cfgmod.write_snapshot(
        os.path.join(args.out, "resolved.ini"), cfg,
        _run_fields(args, ("config", "out", "resume")))
    clips_dir = os.path.join(args.out, "clips")
    if os.path.exists(os.path.join(clips_dir, "manifest.jsonl")):
        clips = video.load_clip_corpus(clips_dir)
        _say(f"clips: reusing {len(clips)} from {clips_dir}")
    else:
        clips = video.build_clip_corpus(
            clips_dir, n_clips=vc["n_clips"], frames=video_cfg.frames,
            size=video_cfg.frame_size, seed=vc["seed"],
            static_fraction=vc["static_fraction"])
        _say(f"clips: sampled {len(clips)}")
    kept, filter_report = video.motion_filter(clips,
                                              video_cfg.motion_threshold)
    with open(os.path.join(args.out, "filter_report.json"), "w",
              encoding="utf-8") as f:
        json.dump(filter_report, f, indent=2, sort_keys=True)
        f.write("\n")
    _say(f"motion filter kept {filter_report['kept']}"
         f"/{filter_report['total']}")
    model = video.VideoDiT(video_cfg, seed=vc["seed"])
    result = video.train_video(
        model, kept, steps=vc["steps"], lr=video_cfg.lr,
        rng=Rng(vc["seed"]).child("video-train"),
        batch_size=video_cfg.batch_size, save_every=vc["save_every"],
        state_path=os.path.join(args.out, "state.tsty"),
        resume=args.resume, log=_say)
    video.save_video_model(os.path.join(args.out, "video.tsty"), model)
    with open(os.path.join(args.out, "losses.json"), "w",
              encoding="utf-8") as f:
        json.dump(result["losses"], f)
        f.write("\n")
    _say(f"saved {os.path.join(args.out, 'video.tsty')}")
    return 0


def cmd_video_propagate(args) -> int:
    model = video.load_video_model(args.checkpoint)
    clip = video.load_clip(args.source)
    first = world.read_ppm(args.first_frame)
    frames = video.propagate(model, clip.source, first, steps=args.steps,
                             seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    for i, frame in enumerate(frames):
        world.write_ppm(os.path.join(args.out, f"propagated_{i:03d}.ppm"),
                        frame)
    cfg = cfgmod.load_config(args.config)
    cfgmod.write_snapshot(
        os.path.join(args.out, "resolved.ini"), cfg,
        _run_fields(args, ("config", "checkpoint", "source", "first_frame",
                           "out", "steps", "seed")))
    _say(f"wrote {len(frames)} frames to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowstyle",
        description="Style-transfer flow models on the procedural world.")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-data", help="build the triplet corpus")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run the staged curriculum")
    p.add_argument("--config")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage", choices=("1", "2", "3", "all"), default="all")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--baseline", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="stylize one content image")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--adapter")
    p.add_argument("--style", required=True)
    p.add_argument("--content", required=True,
                   help="content PPM, or scene descriptor JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--prompt-id", type=int, default=0)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--guidance", type=float, default=1.0)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="held-out style benchmark sweep")
    p.add_argument("--config")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--adapter")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("video-train", help="train the clip stylizer")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(fn=cmd_video_train)

    p = sub.add_parser("video-propagate",
                       help="stylize a clip from its first frame")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True,
                   help="clip directory holding source_*.ppm frames")
    p.add_argument("--first-frame", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_video_propagate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, InputError, ContractError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
