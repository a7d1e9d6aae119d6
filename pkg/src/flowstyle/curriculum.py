"""Staged adapter training over the triplet corpus.

A run has two phases. The base model first learns the conditional
denoising task full-parameter on the clean triplets; a fresh backbone
outputs exactly zero through its zero-initialized gates, which also
blocks every adapter gradient, so adapters need this trained base to
bite on. A rank-r adapter is then trained through three stages whose
sampling distributions sharpen from uniform clean data (q1) to
consistency-weighted (q2) to a synthetic mix (q3), with the optimizer
reset at each boundary and the adapter factors carried through. The
naive baseline trains one adapter for the combined step budget on the
unweighted union of clean and synthetic triplets, from the same base.

Training state (parameters, Adam moments, step counter, loss history)
is checkpointed so an interrupted stage resumes bit-exactly: step s
always consumes the stream rooted at child("step", s), never a stream
that depends on how often the process restarted.
"""
from __future__ import annotations

import json
import math
import os
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from . import flow, lora
from .dit import DiT, ModelConfig, load_model, prepare_style_ref, save_model
from .errors import ConfigError, NumericError
from .metrics import evaluate_pairs, write_report
from .optim import adam_state, adam_step, lr_at
from .rng import Rng
from .world import (load_bench_contents, load_manifest, read_ppm, render,
                    to_signed, to_unit)

STAGE_NAMES = ("q1", "q2", "q3")
BASELINE_NAME = "naive"


@dataclass
class CurriculumConfig:
    """Hyperparameters for one curriculum (or baseline) run."""

    seed: int = 0
    rank: int = 32
    stage_steps: tuple = (1500, 1000, 1500)
    lr: float = 1e-4
    base_steps: int = 2000
    base_lr: float = 3e-4
    synth_ratio: float = 0.25
    consistency_gamma: float = 4.0
    sample_steps: int = 20
    save_every: int = 250
    eval_styles: int = 6
    eval_contents: int = 2

    def __post_init__(self):
        self.stage_steps = tuple(int(s) for s in self.stage_steps)
        if len(self.stage_steps) != 3:
            raise ConfigError(
                f"stage_steps needs 3 entries, got {self.stage_steps}")
        if not 0.0 < self.synth_ratio <= 0.5:
            raise ConfigError(
                f"synth_ratio must lie in (0, 0.5], got {self.synth_ratio}")
        if self.consistency_gamma < 0:
            raise ConfigError(
                f"consistency_gamma must be >= 0, got {self.consistency_gamma}")
        if self.lr <= 0 or self.base_lr <= 0:
            raise ConfigError("learning rates must be positive")
        for name in ("rank", "base_steps", "sample_steps", "save_every",
                     "eval_styles", "eval_contents"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for s in self.stage_steps:
            if s <= 0:
                raise ConfigError(f"stage_steps must be positive, got {s}")


# ---------------------------------------------------------------------------
# stage sampling distributions


@dataclass
class StageDataset:
    """Triplet records plus the probability each one is drawn."""

    name: str
    records: list
    weights: np.ndarray


def _normalized(name: str, records: list, weights: np.ndarray) -> StageDataset:
    weights = np.asarray(weights, dtype=np.float64)
    total = float(weights.sum())
    if total <= 0:
        raise ConfigError(f"{name}: sampling weights sum to zero")
    return StageDataset(name=name, records=records, weights=weights / total)


def build_d1(clean_records: list) -> StageDataset:
    """Uniform over the clean triplets."""
    if not clean_records:
        raise ConfigError("no clean triplets to train on")
    recs = sorted(clean_records, key=lambda r: r.id)
    return _normalized("d1", recs, np.ones(len(recs)))


def build_d2(clean_records: list, gamma: float) -> StageDataset:
    """Clean triplets weighted by consistency ** gamma (gamma 0 = uniform)."""
    if not clean_records:
        raise ConfigError("no clean triplets to train on")
    recs = sorted(clean_records, key=lambda r: r.id)
    cons = np.clip([r.consistency for r in recs], 0.0, None)
    return _normalized("d2", recs, cons ** float(gamma))


def build_d3(d2: StageDataset, synth_records: list, ratio: float) -> StageDataset:
    """Mix synthetic mass `ratio` into the consistency-weighted clean set."""
    if not synth_records:
        raise ConfigError("no synthetic triplets to mix in")
    if not 0.0 < ratio <= 0.5:
        raise ConfigError(f"synthetic ratio must lie in (0, 0.5], got {ratio}")
    synth = sorted(synth_records, key=lambda r: r.id)
    weights = np.concatenate([
        (1.0 - ratio) * d2.weights,
        np.full(len(synth), ratio / len(synth))])
    return _normalized("d3", d2.records + synth, weights)


def build_naive_mix(clean_records: list, synth_records: list) -> StageDataset:
    """Unweighted union of clean and synthetic, the baseline diet."""
    if not clean_records or not synth_records:
        raise ConfigError("the naive mix needs both clean and synthetic data")
    recs = sorted(clean_records + synth_records, key=lambda r: r.id)
    return _normalized("naive", recs, np.ones(len(recs)))


# ---------------------------------------------------------------------------
# corpus image access


class TripletStore:
    """Reads triplet images from the corpus directory with a small cache."""

    def __init__(self, corpus_dir: str, cache_size: int = 512):
        if cache_size < 1:
            raise ConfigError(f"cache_size must be positive, got {cache_size}")
        self.corpus_dir = corpus_dir
        self.cache_size = cache_size
        self._cache: OrderedDict[str, np.ndarray] = OrderedDict()

    def image(self, rel_path: str) -> np.ndarray:
        hit = self._cache.get(rel_path)
        if hit is not None:
            self._cache.move_to_end(rel_path)
            return hit
        arr = read_ppm(os.path.join(self.corpus_dir, rel_path))
        self._cache[rel_path] = arr
        while len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return arr

    def triplet(self, record) -> tuple:
        return (self.image(record.content_ref),
                self.image(record.style_ref),
                self.image(record.target))


# ---------------------------------------------------------------------------
# the training loop


def train_stage(model, adapter, dataset: StageDataset, store: TripletStore, *,
                steps: int, lr: float, rng: Rng, batch_size: int = 1,
                warmup: int = 0, cosine: bool = False, warmup_power: int = 1,
                t_floor: float = 0.0, state_path: str = None,
                save_every: int = 250, resume: bool = False,
                log=None) -> dict:
    """Run one stage for `steps` total optimizer updates.

    Updates only the adapter factors, or every model parameter when
    `adapter` is None (pretraining and overfit checks). Each update
    averages `batch_size` sampled triplets. `t_floor` squeezes the drawn
    flow times into [t_floor, 1]: near t=0 the velocity target needs the
    noise component of x_t amplified by 1/t, which a finite model cannot
    fit, so memorization runs train on the learnable range instead. The
    optimizer starts fresh; `resume` instead restores it from
    `state_path`, and step s of the resumed run draws from the same
    child("step", s) stream an uninterrupted run would have, so the
    results are bit-identical.
    """
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if save_every < 1:
        raise ConfigError(f"save_every must be >= 1, got {save_every}")
    if not 0.0 <= t_floor < 1.0:
        raise ConfigError(f"t_floor must lie in [0, 1), got {t_floor}")
    named = (adapter or model).named_parameters()
    names = sorted(named)
    params = [named[n] for n in names]
    state = adam_state(params)
    start = 0
    losses: list[float] = []
    if state_path and os.path.exists(state_path):
        if not resume:
            raise ConfigError(
                f"{state_path} exists; resume the run or remove it")
        start, losses = ckpt.load_training_state(state_path, names, params,
                                                 state)

    say = log or (lambda msg: None)
    n_records = len(dataset.records)
    for step in range(start, steps):
        r = rng.child("step", step)
        values = []
        for j in range(batch_size):
            idx = int(r.child("pick", j).np().choice(
                n_records, p=dataset.weights))
            rec = dataset.records[idx]
            content, style_raw, target = store.triplet(rec)
            style = prepare_style_ref(style_raw, *target.shape[:2])
            noise_rng = r.child("noise", j)
            if t_floor > 0.0:
                u = float(noise_rng.child("t").np().uniform())
                t = t_floor + (1.0 - t_floor) * u
                batch = flow.make_batch(to_signed(target), noise_rng, t=t)
            else:
                batch = flow.make_batch(to_signed(target), noise_rng)
            cond = flow.Conditioning(content=to_signed(content),
                                     style=to_signed(style))
            loss = flow.fm_loss(model, batch, cond)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(
                    f"loss is not finite at step {step} on triplet {rec.id}")
            loss.backward()
            values.append(value)
        grads = [p.grad if batch_size == 1 or p.grad is None
                 else p.grad / batch_size for p in params]
        adam_step(params, grads, state,
                  lr_at(step, steps, lr, warmup, cosine, warmup_power))
        for p in params:
            p.grad = None
        losses.append(float(np.mean(values)))
        done = step + 1
        if done % 100 == 0 or done == steps:
            say(f"{dataset.name}: step {done}/{steps} "
                f"loss {np.mean(losses[-100:]):.4f}")
        if state_path and (done % save_every == 0 or done == steps):
            ckpt.save_training_state(state_path, names, params, state, done,
                                     losses)
    return {"steps": max(steps, start), "losses": losses}


# ---------------------------------------------------------------------------
# evaluation


def eval_pairs(store: TripletStore, records: list, bench: list, *,
               n_styles: int = None, n_contents: int = 2) -> list:
    """One pair per (style, bench scene), with each style represented by
    the reference image of its first manifest record. `bench` holds
    (id, descriptor, size) tuples as loaded from the corpus."""
    first_by_style = {}
    for rec in sorted(records, key=lambda r: r.id):
        first_by_style.setdefault(rec.style_id, rec)
    sids = sorted(first_by_style)
    if n_styles is not None:
        sids = sids[:n_styles]
    contents = bench[:n_contents]
    if not sids or not contents:
        raise ConfigError("evaluation needs at least one style and one scene")
    pairs = []
    for sid in sids:
        ref = store.image(first_by_style[sid].style_ref)
        for bid, desc, size in contents:
            pairs.append((f"s{sid:03d}_{bid}", sid, ref, desc, tuple(size)))
    return pairs


def make_sampler(model, *, sample_steps: int, rng: Rng):
    """Closure for evaluate_pairs: render the scene clean, then integrate
    the model velocity from noise conditioned on it and the style ref."""
    counter = [0]

    def sampler(style_ref, descriptor, size):
        k = counter[0]
        counter[0] += 1
        content = render(descriptor, size)
        style = prepare_style_ref(style_ref, size[0], size[1])
        cond = flow.Conditioning(content=to_signed(content),
                                 style=to_signed(style))
        seed = int(rng.child("pair", k).np().integers(0, 2 ** 31))
        return to_unit(flow.sample(model, cond, steps=sample_steps, seed=seed))

    return sampler


def _read_aggregates(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        last = f.readlines()[-1]
    return json.loads(last)["aggregates"]


def _stage_eval(model, cfg: CurriculumConfig, store, stage_dir: str,
                tag: str, heldin_pairs: list, heldout_pairs: list,
                reuse: bool = False) -> dict:
    out = {}
    for split, pairs in (("heldin", heldin_pairs), ("heldout", heldout_pairs)):
        path = os.path.join(stage_dir, f"{split}.jsonl")
        if reuse and os.path.exists(path):
            out[split] = _read_aggregates(path)
            continue
        sampler = make_sampler(model, sample_steps=cfg.sample_steps,
                               rng=Rng(cfg.seed).child("eval", tag, split))
        report = evaluate_pairs(sampler, pairs)
        write_report(path, report)
        out[split] = report.aggregates
    return out


# ---------------------------------------------------------------------------
# run orchestration


def _write_json(path: str, payload) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def _base_model(corpus_dir: str, out_dir: str, cfg: CurriculumConfig,
                model_cfg, store: TripletStore, resume: bool, say) -> DiT:
    """Load the shared pretrained base, or pretrain it full-parameter."""
    base_dir = os.path.join(out_dir, "base")
    base_path = os.path.join(base_dir, "model.tsty")
    if os.path.exists(base_path):
        say("base: reusing pretrained model")
        return load_model(base_path)
    os.makedirs(base_dir, exist_ok=True)
    clean = load_manifest(os.path.join(corpus_dir, "clean.jsonl"))
    model = DiT(model_cfg or ModelConfig(), seed=cfg.seed)
    say(f"base: pretraining for {cfg.base_steps} steps")
    result = train_stage(
        model, None, build_d1(clean), store,
        steps=cfg.base_steps, lr=cfg.base_lr,
        rng=Rng(cfg.seed).child("pretrain"),
        state_path=os.path.join(base_dir, "state.tsty"),
        save_every=cfg.save_every, resume=resume, log=say)
    save_model(base_path, model)
    _write_json(os.path.join(base_dir, "losses.json"), result["losses"])
    return model


def run_curriculum(corpus_dir: str, out_dir: str, cfg: CurriculumConfig,
                   model_cfg: ModelConfig = None, *, baseline: bool = False,
                   stages: int = 3, resume: bool = False, log=None) -> dict:
    """Pretrain (or reuse) the base, then train and evaluate each stage.

    `stages` truncates the schedule (1 = q1 only, 3 = all); the baseline
    ignores it. The three-stage schedule and the naive baseline write to
    disjoint subdirectories of `out_dir` and share the pretrained base,
    so both arms of a comparison can run against one directory. Returns
    the summary mapping each stage to its held-in and held-out
    aggregates.
    """
    say = log or (lambda msg: None)
    if not 1 <= stages <= 3:
        raise ConfigError(f"stages must lie in 1..3, got {stages}")
    stage_names = (BASELINE_NAME,) if baseline else STAGE_NAMES[:stages]
    if not resume:
        for name in stage_names:
            if os.path.exists(os.path.join(out_dir, name)):
                raise ConfigError(
                    f"{out_dir}/{name} already exists; resume or start fresh")

    os.makedirs(out_dir, exist_ok=True)
    store = TripletStore(corpus_dir)
    clean = load_manifest(os.path.join(corpus_dir, "clean.jsonl"))
    synth = load_manifest(os.path.join(corpus_dir, "synthetic.jsonl"))
    holdout = load_manifest(os.path.join(corpus_dir, "holdout.jsonl"))
    bench = load_bench_contents(corpus_dir)

    model = _base_model(corpus_dir, out_dir, cfg, model_cfg, store, resume, say)
    heldin_pairs = eval_pairs(store, clean, bench, n_styles=cfg.eval_styles,
                              n_contents=cfg.eval_contents)
    heldout_pairs = eval_pairs(store, holdout, bench,
                               n_contents=cfg.eval_contents)

    if baseline:
        schedule = [(BASELINE_NAME, build_naive_mix(clean, synth),
                     sum(cfg.stage_steps))]
    else:
        d1 = build_d1(clean)
        d2 = build_d2(clean, cfg.consistency_gamma)
        d3 = build_d3(d2, synth, cfg.synth_ratio)
        schedule = list(zip(STAGE_NAMES, (d1, d2, d3),
                            cfg.stage_steps))[:stages]

    adapter = None
    summary = {}
    for name, dataset, steps in schedule:
        stage_dir = os.path.join(out_dir, name)
        os.makedirs(stage_dir, exist_ok=True)
        adapter_path = os.path.join(stage_dir, "adapter.tsty")
        if resume and os.path.exists(adapter_path):
            say(f"{name}: reusing trained adapter")
            adapter = lora.load_adapter(adapter_path, model)
            summary[name] = _stage_eval(model, cfg, store, stage_dir, name,
                                        heldin_pairs, heldout_pairs, reuse=True)
            continue
        if adapter is None:
            adapter = lora.attach(model, rank=cfg.rank, seed=cfg.seed)
        adapter = lora.chain(adapter, name)
        say(f"{name}: {steps} steps over {len(dataset.records)} triplets")
        result = train_stage(
            model, adapter, dataset, store, steps=steps, lr=cfg.lr,
            rng=Rng(cfg.seed).child("stage", name),
            state_path=os.path.join(stage_dir, "state.tsty"),
            save_every=cfg.save_every, resume=resume, log=say)
        lora.save_adapter(adapter_path, adapter)
        _write_json(os.path.join(stage_dir, "losses.json"), result["losses"])
        summary[name] = _stage_eval(model, cfg, store, stage_dir, name,
                                    heldin_pairs, heldout_pairs)

    tag = "naive_summary.json" if baseline else "curriculum_summary.json"
    _write_json(os.path.join(out_dir, tag), summary)
    return summary
