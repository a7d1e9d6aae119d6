"""Memorization check: overfit a handful of clean triplets, then sample.

Reports the first/last 50-step mean training loss, their ratio, and the
median style similarity of samples against their style references. Near
t=0 the velocity target amplifies noise by 1/t, which no finite model
fits, so a uniform-t run's loss floor hides memorization progress; the
--t-floor option (with a slow polynomial warmup so the early loss
reflects the untrained model) makes the ratio a meaningful probe. This
script is the sweep driver behind the overfit recipe in the acceptance
suite.
"""
import argparse
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import numpy as np

from flowstyle import flow
from flowstyle.curriculum import TripletStore, build_d1, train_stage
from flowstyle.dit import DiT, ModelConfig, prepare_style_ref
from flowstyle.metrics import style_similarity
from flowstyle.rng import Rng
from flowstyle.world import load_manifest, to_signed, to_unit


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--corpus", default="corpus")
    ap.add_argument("--triplets", type=int, default=8)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--dim", type=int, default=128)
    ap.add_argument("--depth", type=int, default=6)
    ap.add_argument("--patch", type=int, default=4)
    ap.add_argument("--batch", type=int, default=2)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--warmup", type=int, default=80)
    ap.add_argument("--warmup-power", type=int, default=4)
    ap.add_argument("--t-floor", type=float, default=0.3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--sample-steps", type=int, default=20)
    args = ap.parse_args()

    records = load_manifest(
        os.path.join(args.corpus, "clean.jsonl"))[:args.triplets]
    store = TripletStore(args.corpus)
    cfg = ModelConfig(image_size=64, patch_size=args.patch, dim=args.dim,
                      depth=args.depth, heads=4)
    model = DiT(cfg, seed=args.seed)

    t0 = time.time()
    out = train_stage(model, None, build_d1(records), store,
                      steps=args.steps, lr=args.lr,
                      rng=Rng(args.seed).child("overfit"),
                      batch_size=args.batch, warmup=args.warmup,
                      warmup_power=args.warmup_power, cosine=True,
                      t_floor=args.t_floor, log=print)
    losses = out["losses"]
    init50 = float(np.mean(losses[:50]))
    final50 = float(np.mean(losses[-50:]))

    sims = []
    for k, rec in enumerate(records):
        content, style_raw, target = store.triplet(rec)
        style = prepare_style_ref(style_raw, *target.shape[:2])
        cond = flow.Conditioning(content=to_signed(content),
                                 style=to_signed(style))
        img = to_unit(flow.sample(model, cond, steps=args.sample_steps,
                                  seed=1000 + k))
        sims.append(style_similarity(img, style))

    print(f"train {time.time() - t0:.0f}s  "
          f"loss {init50:.3f} -> {final50:.3f} "
          f"(ratio {final50 / init50:.3f})  "
          f"sim median {float(np.median(sims)):.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
