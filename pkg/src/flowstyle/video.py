"""First-frame-anchored video stylization.

The video model predicts the flow velocity for a whole clip at once.
Every frame contributes one token stream built from the channel-wise
concatenation [source frame, noisy frame] (6 input channels), encoded
with (time, y, x) rotary positions. The stylized first frame rides
along as a separate token stream pinned to time index 0, next to one
learned empty-text token, so frames later in the clip can copy its
style while the source stream dictates their motion. Training clips
come from the procedural world and pass a motion filter first: a clip
whose adjacent frames all look alike teaches nothing about motion.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from . import flow
from . import tensor as T
from .dit import (Block, Linear, ModelConfig, grid_positions, patchify,
                  rope_tables, timestep_features, unpatchify, _modulate,
                  _patch_shape)
from .errors import (ConfigError, ContractError, InputError, NumericError,
                     ShapeError)
from .optim import adam_state, adam_step, lr_at
from .rng import Rng
from .tensor import Tensor
from .world import (BASE_PALETTE, gen_video_clip, make_style, read_ppm,
                    sample_video_scene, to_signed, to_unit, write_ppm)


@dataclass
class VideoConfig:
    """Geometry and training defaults for the video model."""

    frames: int = 8
    frame_size: tuple = (32, 32)
    patch_size: int = 4
    dim: int = 128
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    lr: float = 1e-5
    batch_size: int = 4
    motion_threshold: float = 0.995

    def __post_init__(self):
        self.frame_size = tuple(int(v) for v in self.frame_size)
        if self.frames < 2:
            raise ConfigError(f"frames must be >= 2, got {self.frames}")
        if len(self.frame_size) != 2:
            raise ConfigError(f"frame_size needs (H, W), got {self.frame_size}")
        for v in self.frame_size:
            if v <= 0 or v % self.patch_size:
                raise ConfigError(
                    f"frame_size {self.frame_size} not divisible by "
                    f"patch_size {self.patch_size}")
        if self.dim % self.heads:
            raise ConfigError(
                f"dim {self.dim} not divisible by heads {self.heads}")
        if not 0.0 < self.motion_threshold <= 1.0:
            raise ConfigError(
                f"motion_threshold must lie in (0, 1], got "
                f"{self.motion_threshold}")
        if self.lr <= 0 or self.batch_size < 1:
            raise ConfigError("lr must be positive and batch_size >= 1")

    def block_config(self) -> ModelConfig:
        # the rotary axes double as (time, y, x) here
        return ModelConfig(
            image_size=self.frame_size[0], patch_size=self.patch_size,
            dim=self.dim, depth=self.depth, heads=self.heads,
            mlp_ratio=self.mlp_ratio)


# ---------------------------------------------------------------------------
# clips


@dataclass
class VideoClip:
    """A source clip with (for training data) its stylized counterpart."""

    clip_id: str
    source: np.ndarray
    stylized: np.ndarray = None

    def __post_init__(self):
        self.source = np.asarray(self.source, dtype=np.float32)
        if self.source.ndim != 4 or self.source.shape[3] != 3:
            raise InputError(
                f"clip frames must be [T,H,W,3], got {self.source.shape}")
        if self.source.shape[0] < 2:
            raise InputError("a clip needs at least 2 frames")
        if self.stylized is not None:
            self.stylized = np.asarray(self.stylized, dtype=np.float32)
            if self.stylized.shape != self.source.shape:
                raise InputError(
                    f"stylized frames {self.stylized.shape} do not match "
                    f"source {self.source.shape}")

    @property
    def first_frame(self) -> np.ndarray:
        """The stylized first frame, the anchor the sampler conditions on."""
        return self.stylized[0]


def sample_clip(rng: Rng, style_id: int, *, frames: int = 8,
                size: tuple = (32, 32), static: bool = False,
                clip_id: str = None) -> VideoClip:
    """Draw a world scene with motion and render its clip pair."""
    descriptor, motion = sample_video_scene(rng, frames, size, static=static)
    style = make_style(style_id, seed=rng.seed)
    source, stylized = gen_video_clip(descriptor, style, frames, motion,
                                      size=size)
    name = clip_id or f"clip{style_id:03d}"
    return VideoClip(clip_id=name, source=source, stylized=stylized)


# ---------------------------------------------------------------------------
# motion filtering

MOTION_GRID = 8


def motion_feature(frame: np.ndarray) -> np.ndarray:
    """Grid-localized color histogram, unit length.

    Unlike the style feature this is deliberately translation-sensitive:
    a shape moving between grid cells shifts mass between histogram
    blocks, while a static frame maps to the identical vector.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise InputError(f"expected [H,W,3] frame, got {frame.shape}")
    h, w = frame.shape[:2]
    dist = np.linalg.norm(frame[:, :, None, :] - BASE_PALETTE[None, None],
                          axis=3)
    nearest = np.argmin(dist, axis=2)
    rows = np.minimum((np.arange(h) * MOTION_GRID) // h, MOTION_GRID - 1)
    cols = np.minimum((np.arange(w) * MOTION_GRID) // w, MOTION_GRID - 1)
    cell = rows[:, None] * MOTION_GRID + cols[None, :]
    flat_idx = cell * len(BASE_PALETTE) + nearest
    hist = np.bincount(flat_idx.ravel(),
                       minlength=MOTION_GRID * MOTION_GRID * len(BASE_PALETTE))
    feat = np.sqrt(hist.astype(np.float64))
    norm = np.linalg.norm(feat)
    return feat / norm if norm > 0 else feat


def _frame_cosine(a: np.ndarray, b: np.ndarray) -> float:
    # identical features must compare as exactly 1.0 so the threshold = 1
    # boundary keeps anything that moved at all
    if np.array_equal(a, b):
        return 1.0
    return float(np.clip(np.dot(a, b), -1.0, 1.0))


def clip_motion_score(frames: np.ndarray) -> float:
    """min over adjacent pairs of (1 - feature cosine), clipped to [0,1]."""
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[0] < 2:
        raise InputError(f"expected [T>=2,H,W,3] frames, got {frames.shape}")
    feats = [motion_feature(f) for f in frames]
    drops = [1.0 - _frame_cosine(feats[i], feats[i + 1])
             for i in range(len(feats) - 1)]
    return float(np.clip(min(drops), 0.0, 1.0))


def motion_filter(clips: list, threshold: float) -> tuple:
    """Split clips into (kept, report); discard a clip iff every
    adjacent-frame feature cosine is >= threshold (negligible motion)."""
    if not 0.0 < threshold <= 1.0:
        raise ConfigError(f"threshold must lie in (0, 1], got {threshold}")
    kept = []
    discarded = []
    for clip in clips:
        feats = [motion_feature(f) for f in clip.source]
        if all(_frame_cosine(feats[i], feats[i + 1]) >= threshold
               for i in range(len(feats) - 1)):
            discarded.append(clip.clip_id)
        else:
            kept.append(clip)
    report = {"total": len(clips), "kept": len(kept), "discarded": discarded}
    return kept, report


# ---------------------------------------------------------------------------
# the model


def video_positions(frames: int, grid_h: int, grid_w: int, grid_s: int,
                    time_shift: int = 0) -> np.ndarray:
    """(time, y, x) rows for [text | frame 0 .. frame T-1 | style] tokens.

    The text and style tokens always sit at time 0; `time_shift` offsets
    only the frame tokens and exists so tests can show the time anchor
    matters.
    """
    parts = [np.zeros((1, 3), dtype=np.int64)]
    for f in range(frames):
        parts.append(grid_positions(grid_h, grid_w, f + time_shift))
    parts.append(grid_positions(grid_s, grid_s, 0))
    return np.concatenate(parts)


class VideoDiT:
    """Per-frame fused tokens plus a time-0 style stream and text token."""

    def __init__(self, cfg: VideoConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        root = Rng(seed).child("video-init")
        d = cfg.dim
        p = cfg.patch_size
        blk = cfg.block_config()
        self.rope_axes = blk.rope_axes
        self.video_embed = Linear(6 * p * p, d, root.child("video").np(),
                                  dtype=dtype)
        self.style_embed = Linear(3 * p * p, d, root.child("style").np(),
                                  dtype=dtype)
        self.empty_text = T.param(
            0.02 * root.child("text").np().standard_normal((1, d)), dtype)
        self.t_fc1 = Linear(d, d, root.child("t1").np(), dtype=dtype)
        self.t_fc2 = Linear(d, d, root.child("t2").np(), dtype=dtype)
        self.blocks = [Block(blk, root.child("block", i), dtype=dtype)
                       for i in range(cfg.depth)]
        self.ada_out = Linear(d, 2 * d, zero_init=True, dtype=dtype)
        self.head = Linear(d, 3 * p * p, zero_init=True, dtype=dtype)
        self.skip_gate = Linear(d, 1, zero_init=True, dtype=dtype)
        self._gain = Tensor(np.ones(d, dtype=dtype))
        self._rope_cache = {}

    def named_linears(self) -> dict:
        out = {"video_embed": self.video_embed,
               "style_embed": self.style_embed,
               "t_embed.fc1": self.t_fc1, "t_embed.fc2": self.t_fc2,
               "final.ada": self.ada_out, "head": self.head,
               "skip_gate": self.skip_gate}
        for i, blk in enumerate(self.blocks):
            for name in ("ada", "qkv", "proj", "fc1", "fc2"):
                out[f"blocks.{i}.{name}"] = getattr(blk, name)
        return out

    def named_parameters(self) -> dict:
        out = {"text.empty": self.empty_text}
        for name, lin in self.named_linears().items():
            out[f"{name}.W"] = lin.W
            out[f"{name}.b"] = lin.b
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def time_vector(self, t: float) -> Tensor:
        feats = Tensor(timestep_features(t, self.cfg.dim, self.dtype))
        return self.t_fc2(T.silu(self.t_fc1(
            T.reshape(feats, (1, self.cfg.dim)))))

    def forward(self, noisy_frames, source_frames, style_image,
                prompt_id: int, t: float, time_shift: int = 0) -> Tensor:
        if not 0.0 <= float(t) <= 1.0:
            raise ContractError(f"t must lie in [0,1], got {t}")
        if int(prompt_id) != 0:
            raise ConfigError("the video model only has the empty prompt")
        noisy = np.asarray(noisy_frames, dtype=self.dtype)
        source = np.asarray(source_frames, dtype=self.dtype)
        style = np.asarray(style_image, dtype=self.dtype)
        if noisy.ndim != 4 or noisy.shape[3] != 3:
            raise InputError(
                f"noisy frames must be [T,H,W,3], got {noisy.shape}")
        if source.shape != noisy.shape:
            raise InputError(f"source frames {source.shape} do not match "
                             f"noisy frames {noisy.shape}")
        if style.shape != noisy.shape[1:]:
            raise InputError(f"style frame {style.shape} does not match "
                             f"frame shape {noisy.shape[1:]}")
        frames = noisy.shape[0]
        p = self.cfg.patch_size
        gh, gw = _patch_shape(noisy.shape[1:], p)
        gs, _ = _patch_shape(style.shape, p)

        fused = np.concatenate([source, noisy], axis=3)
        toks = [self.empty_text]
        for f in range(frames):
            toks.append(self.video_embed(Tensor(patchify(fused[f], p))))
        toks.append(self.style_embed(Tensor(patchify(style, p))))
        x = T.concat(toks, axis=0)

        key = (frames, gh, gw, gs, time_shift)
        if key not in self._rope_cache:
            self._rope_cache[key] = rope_tables(
                video_positions(frames, gh, gw, gs, time_shift),
                self.rope_axes, dtype=self.dtype)
        rope = self._rope_cache[key]

        tvec = self.time_vector(t)
        for blk in self.blocks:
            x = blk(x, tvec, rope)

        mods = self.ada_out(tvec)
        d = self.cfg.dim
        shift = T.narrow(mods, 1, 0, d)
        scl = T.narrow(mods, 1, d, d)
        h = _modulate(T.rms_norm(x, self._gain), shift, scl)
        lat = self.head(T.narrow(h, 0, 1, frames * gh * gw))
        outs = []
        for f in range(frames):
            frame = unpatchify(T.narrow(lat, 0, f * gh * gw, gh * gw),
                               gh, gw, p)
            outs.append(T.reshape(frame, (1,) + frame.shape))
        out = T.concat(outs, axis=0)
        gate = T.reshape(self.skip_gate(tvec), (1, 1, 1, 1))
        return T.add(out, T.mul(gate, Tensor(noisy)))


def save_video_model(path: str, model: VideoDiT) -> None:
    """Weights at `path`, config in a video.cfg sidecar next to it."""
    ckpt.save(path, {k: v.data for k, v in model.named_parameters().items()})
    cfg = model.cfg
    ckpt.save_sidecar(os.path.join(os.path.dirname(path) or ".", "video.cfg"), {
        "frames": cfg.frames,
        "frame_size": f"{cfg.frame_size[0]},{cfg.frame_size[1]}",
        "patch_size": cfg.patch_size, "dim": cfg.dim, "depth": cfg.depth,
        "heads": cfg.heads, "mlp_ratio": cfg.mlp_ratio, "lr": cfg.lr,
        "batch_size": cfg.batch_size,
        "motion_threshold": cfg.motion_threshold,
    })


def load_video_model(path: str, dtype=np.float32) -> VideoDiT:
    side = ckpt.load_sidecar(
        os.path.join(os.path.dirname(path) or ".", "video.cfg"))
    cfg = VideoConfig(
        frames=int(side["frames"]),
        frame_size=tuple(int(v) for v in side["frame_size"].split(",")),
        patch_size=int(side["patch_size"]), dim=int(side["dim"]),
        depth=int(side["depth"]), heads=int(side["heads"]),
        mlp_ratio=int(side["mlp_ratio"]), lr=float(side["lr"]),
        batch_size=int(side["batch_size"]),
        motion_threshold=float(side["motion_threshold"]))
    model = VideoDiT(cfg, seed=0, dtype=dtype)
    tensors = ckpt.load(path)
    params = model.named_parameters()
    if sorted(tensors) != sorted(params):
        raise ContractError("checkpoint names do not match the video model")
    for name, arr in tensors.items():
        if params[name].data.shape != arr.shape:
            raise ShapeError(
                f"checkpoint tensor {name} has shape {arr.shape}, "
                f"model expects {params[name].data.shape}")
        params[name].data = arr.astype(dtype)
    return model


# ---------------------------------------------------------------------------
# training and propagation


def train_video(model: VideoDiT, clips: list, *, steps: int, lr: float,
                rng: Rng, batch_size: int = 4, warmup: int = 0,
                cosine: bool = False, state_path: str = None,
                save_every: int = 200, resume: bool = False,
                log=None) -> dict:
    """Flow-matching over stylized clips, accumulated to `batch_size`.

    x0 is the stylized clip; the model conditions on the source frames
    and the stylized first frame. Same resume contract as image-side
    stage training: bit-exact from the saved state.
    """
    if not clips:
        raise ConfigError("train_video needs at least one clip")
    for clip in clips:
        if clip.stylized is None:
            raise ConfigError(f"clip {clip.clip_id} has no stylized frames")
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    named = model.named_parameters()
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
    for step in range(start, steps):
        r = rng.child("step", step)
        values = []
        for j in range(batch_size):
            idx = int(r.child("pick", j).np().integers(0, len(clips)))
            clip = clips[idx]
            batch = flow.make_batch(to_signed(clip.stylized),
                                    r.child("noise", j))
            cond = flow.Conditioning(content=to_signed(clip.source),
                                     style=to_signed(clip.first_frame))
            loss = flow.fm_loss(model, batch, cond)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(
                    f"loss is not finite at step {step} on clip "
                    f"{clip.clip_id}")
            loss.backward()
            values.append(value)
        grads = [p.grad if batch_size == 1 or p.grad is None
                 else p.grad / batch_size for p in params]
        adam_step(params, grads, state,
                  lr_at(step, steps, lr, warmup, cosine))
        for p in params:
            p.grad = None
        losses.append(float(np.mean(values)))
        done = step + 1
        if done % 50 == 0 or done == steps:
            say(f"video: step {done}/{steps} "
                f"loss {np.mean(losses[-50:]):.4f}")
        if state_path and (done % save_every == 0 or done == steps):
            ckpt.save_training_state(state_path, names, params, state, done,
                                     losses)
    return {"steps": max(steps, start), "losses": losses}


def propagate(model: VideoDiT, source_frames: np.ndarray,
              first_frame: np.ndarray, *, steps: int = 20,
              seed: int = 0) -> np.ndarray:
    """Stylize a whole clip from its source frames and stylized frame 0."""
    source = np.asarray(source_frames, dtype=np.float32)
    cond = flow.Conditioning(content=to_signed(source),
                             style=to_signed(np.asarray(first_frame,
                                                        dtype=np.float32)))
    out = flow.sample(model, cond, steps=steps, seed=seed)
    return to_unit(out)


# ---------------------------------------------------------------------------
# clip storage


def save_clip(dir_path: str, clip: VideoClip) -> None:
    """One directory per clip: source_XXX.ppm (+ stylized_XXX.ppm)."""
    os.makedirs(dir_path, exist_ok=True)
    for i, frame in enumerate(clip.source):
        write_ppm(os.path.join(dir_path, f"source_{i:03d}.ppm"), frame)
    if clip.stylized is not None:
        for i, frame in enumerate(clip.stylized):
            write_ppm(os.path.join(dir_path, f"stylized_{i:03d}.ppm"), frame)


def load_clip(dir_path: str, clip_id: str = None) -> VideoClip:
    names = sorted(os.listdir(dir_path))
    source = [read_ppm(os.path.join(dir_path, n)) for n in names
              if n.startswith("source_") and n.endswith(".ppm")]
    stylized = [read_ppm(os.path.join(dir_path, n)) for n in names
                if n.startswith("stylized_") and n.endswith(".ppm")]
    if not source:
        raise InputError(f"{dir_path} holds no source frames")
    return VideoClip(clip_id=clip_id or os.path.basename(dir_path.rstrip("/")),
                     source=np.stack(source),
                     stylized=np.stack(stylized) if stylized else None)


def build_clip_corpus(out_dir: str, *, n_clips: int, frames: int = 8,
                      size: tuple = (32, 32), seed: int = 0,
                      static_fraction: float = 0.0) -> list:
    """Sample clips into per-clip directories plus a manifest.jsonl."""
    if n_clips < 1:
        raise ConfigError(f"n_clips must be >= 1, got {n_clips}")
    if not 0.0 <= static_fraction <= 1.0:
        raise ConfigError(
            f"static_fraction must lie in [0,1], got {static_fraction}")
    os.makedirs(out_dir, exist_ok=True)
    root = Rng(seed)
    clips = []
    lines = []
    n_static = int(round(n_clips * static_fraction))
    for k in range(n_clips):
        static = k < n_static
        clip = sample_clip(root.child("clip", k), k, frames=frames,
                           size=size, static=static,
                           clip_id=f"clip{k:03d}")
        save_clip(os.path.join(out_dir, clip.clip_id), clip)
        score = clip_motion_score(clip.source)
        lines.append(json.dumps(
            {"id": clip.clip_id, "dir": clip.clip_id, "frames": frames,
             "static": static, "motion_score": round(score, 6)},
            sort_keys=True))
        clips.append(clip)
    tmp = os.path.join(out_dir, "manifest.jsonl.tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    os.replace(tmp, os.path.join(out_dir, "manifest.jsonl"))
    return clips


def load_clip_corpus(dir_path: str) -> list:
    path = os.path.join(dir_path, "manifest.jsonl")
    clips = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                clips.append(load_clip(os.path.join(dir_path, d["dir"]),
                                       clip_id=d["id"]))
    return clips
