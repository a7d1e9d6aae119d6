"""Multi-reference conditional diffusion transformer.

Patch tokens from the noisy latent, a content reference, and a square
style reference are concatenated with a learned prompt token and run
through timestep-modulated transformer blocks under full self-attention.
A multi-axis rotary encoding splits each attention head's lanes across a
(ref, y, x) position triple; the ref axis is what tells the three image
streams apart (latent 0, content 1, style 2), while (y, x) carry the
patch-grid coordinates within each stream.

Timestep conditioning is the usual shift/scale/gate modulation computed
from a sinusoidal embedding of t; modulation and output head start at
zero so a fresh model is the identity-plus-zero-velocity map.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .errors import ConfigError, ContractError, InputError, ShapeError
from .rng import Rng
from .tensor import Tensor

ROPE_BASE = 10000.0


def default_rope_split(head_dim: int) -> tuple[int, int, int]:
    """Split head lanes into (ref, y, x) sub-dimensions, each even.

    Spatial axes get the larger share; the ref axis only needs to
    separate three discrete streams.
    """
    spatial = 2 * ((3 * head_dim) // 16)
    return (head_dim - 2 * spatial, spatial, spatial)


@dataclass
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    dim: int = 128
    depth: int = 6
    heads: int = 4
    mlp_ratio: int = 4
    prompt_vocab: int = 4
    rope_axes: tuple[int, int, int] = field(default=None)

    def __post_init__(self):
        if self.rope_axes is None:
            if self.dim % self.heads:
                raise ConfigError(
                    f"dim {self.dim} not divisible by heads {self.heads}")
            self.rope_axes = default_rope_split(self.dim // self.heads)
        self.rope_axes = tuple(int(d) for d in self.rope_axes)
        self.validate()

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by "
                f"patch_size {self.patch_size}")
        if self.dim % self.heads:
            raise ConfigError(
                f"dim {self.dim} not divisible by heads {self.heads}")
        for v in ("image_size", "patch_size", "dim", "depth", "heads",
                  "mlp_ratio", "prompt_vocab"):
            if getattr(self, v) <= 0:
                raise ConfigError(f"{v} must be positive")
        if len(self.rope_axes) != 3:
            raise ConfigError(f"rope_axes needs 3 entries, got {self.rope_axes}")
        if sum(self.rope_axes) != self.head_dim:
            raise ConfigError(
                f"rope_axes {self.rope_axes} do not sum to head dim "
                f"{self.head_dim}")
        for d in self.rope_axes:
            if d < 2 or d % 2:
                raise ConfigError(
                    f"rope_axes {self.rope_axes} must be even and >= 2")


# ---------------------------------------------------------------------------
# patch grid


def _patch_shape(image_shape, p: int):
    h, w = image_shape[0], image_shape[1]
    if h % p or w % p:
        raise ShapeError(f"image extents {h}x{w} not divisible by patch {p}")
    return h // p, w // p


def patchify(image, patch_size: int):
    """[H,W,C] -> [(H/p)(W/p), C*p*p], row-major patches.

    Accepts a plain array (data paths) or a Tensor (inside the graph).
    """
    p = patch_size
    if isinstance(image, Tensor):
        gh, gw = _patch_shape(image.shape, p)
        c = image.shape[2]
        x = T.reshape(image, (gh, p, gw, p, c))
        x = T.transpose(x, (0, 2, 1, 3, 4))
        return T.reshape(x, (gh * gw, p * p * c))
    image = np.asarray(image)
    gh, gw = _patch_shape(image.shape, p)
    c = image.shape[2]
    x = image.reshape(gh, p, gw, p, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x).reshape(gh * gw, p * p * c)


def unpatchify(tokens, grid_h: int, grid_w: int, patch_size: int):
    """Inverse of patchify: [gh*gw, C*p*p] -> [gh*p, gw*p, C]."""
    p = patch_size
    n, width = tokens.shape
    if n != grid_h * grid_w or width % (p * p):
        raise ShapeError(
            f"token block {tokens.shape} does not match grid "
            f"{grid_h}x{grid_w} with patch {p}")
    c = width // (p * p)
    if isinstance(tokens, Tensor):
        x = T.reshape(tokens, (grid_h, grid_w, p, p, c))
        x = T.transpose(x, (0, 2, 1, 3, 4))
        return T.reshape(x, (grid_h * p, grid_w * p, c))
    x = np.asarray(tokens).reshape(grid_h, grid_w, p, p, c)
    x = x.transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x).reshape(grid_h * p, grid_w * p, c)


# ---------------------------------------------------------------------------
# rotary position encoding


def grid_positions(grid_h: int, grid_w: int, ref_index: int) -> np.ndarray:
    """(ref, y, x) triples for a row-major patch grid."""
    ys, xs = np.mgrid[0:grid_h, 0:grid_w]
    pos = np.stack([np.full(ys.size, ref_index), ys.ravel(), xs.ravel()], axis=1)
    return pos.astype(np.int64)


def rope_tables(positions: np.ndarray, rope_axes, dtype=np.float32):
    """Angle tables for `tensor.rope_rotate` from (ref, y, x) positions.

    Returns (cos, sin, i1, i2): per-token angle factors [S, head_dim/2]
    and the paired lane indices. Each axis owns a contiguous block of
    lanes; within a block the usual geometric frequency ladder applies.
    """
    positions = np.asarray(positions)
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise ContractError(
            f"positions must be [S,3] (ref,y,x) triples, got {positions.shape}")
    angs, i1s, i2s = [], [], []
    offset = 0
    for axis, d in enumerate(rope_axes):
        pairs = d // 2
        freqs = ROPE_BASE ** (-np.arange(pairs) / pairs)
        angs.append(positions[:, axis:axis + 1].astype(np.float64) * freqs)
        lanes = offset + 2 * np.arange(pairs)
        i1s.append(lanes)
        i2s.append(lanes + 1)
        offset += d
    ang = np.concatenate(angs, axis=1)
    return (np.cos(ang).astype(dtype), np.sin(ang).astype(dtype),
            np.concatenate(i1s), np.concatenate(i2s))


def rope_encode(x: Tensor, positions: np.ndarray, rope_axes) -> Tensor:
    """Rotate [..., S, head_dim] lanes by the per-axis position angles."""
    cos, sin, i1, i2 = rope_tables(positions, rope_axes, dtype=x.dtype)
    return T.rope_rotate(x, cos, sin, i1, i2)


# ---------------------------------------------------------------------------
# layers


class Linear:
    """Affine map y = x W^T + b with an optional low-rank adapter slot."""

    def __init__(self, in_dim: int, out_dim: int, rng=None,
                 zero_init: bool = False, dtype=np.float32):
        if zero_init:
            w = np.zeros((out_dim, in_dim), dtype=dtype)
        else:
            w = rng.standard_normal((out_dim, in_dim)) / np.sqrt(in_dim)
        self.W = T.param(w, dtype)
        self.b = T.param(np.zeros(out_dim), dtype)
        self.lora = None

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, T.transpose_last(self.W)) + self.b
        if self.lora is not None:
            y = y + self.lora.apply(x)
        return y


def timestep_features(t: float, dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal features of t in [0,1] over a geometric frequency ladder."""
    half = dim // 2
    freqs = np.exp(-np.log(ROPE_BASE) * np.arange(half) / half)
    ang = 1000.0 * float(t) * freqs
    feats = np.concatenate([np.cos(ang), np.sin(ang)])
    if feats.size < dim:
        feats = np.concatenate([feats, np.zeros(dim - feats.size)])
    return feats.astype(dtype)


def _modulate(x: Tensor, shift: Tensor, scl: Tensor) -> Tensor:
    return x * T.add_const(scl, 1.0) + shift


class Block:
    """Pre-norm attention + MLP with shift/scale/gate timestep modulation."""

    def __init__(self, cfg: ModelConfig, rng: Rng, dtype=np.float32):
        d = cfg.dim
        self.heads = cfg.heads
        self.head_dim = cfg.head_dim
        self.ada = Linear(d, 6 * d, zero_init=True, dtype=dtype)
        self.qkv = Linear(d, 3 * d, rng.child("qkv").np(), dtype=dtype)
        self.proj = Linear(d, d, rng.child("proj").np(), dtype=dtype)
        self.fc1 = Linear(d, cfg.mlp_ratio * d, rng.child("fc1").np(), dtype=dtype)
        self.fc2 = Linear(cfg.mlp_ratio * d, d, rng.child("fc2").np(), dtype=dtype)
        self._gain = Tensor(np.ones(d, dtype=dtype))

    def attend(self, x: Tensor, rope) -> Tensor:
        s, d = x.shape
        h, hd = self.heads, self.head_dim
        qkv = T.reshape(self.qkv(x), (s, 3, h, hd))
        qkv = T.transpose(qkv, (1, 2, 0, 3))
        q = T.reshape(T.narrow(qkv, 0, 0, 1), (h, s, hd))
        k = T.reshape(T.narrow(qkv, 0, 1, 1), (h, s, hd))
        v = T.reshape(T.narrow(qkv, 0, 2, 1), (h, s, hd))
        cos, sin, i1, i2 = rope
        q = T.rope_rotate(q, cos, sin, i1, i2)
        k = T.rope_rotate(k, cos, sin, i1, i2)
        att = T.softmax(T.scale(T.matmul(q, T.transpose_last(k)),
                                1.0 / np.sqrt(hd)), axis=-1)
        out = T.matmul(att, v)
        out = T.reshape(T.transpose(out, (1, 0, 2)), (s, d))
        return self.proj(out)

    def __call__(self, x: Tensor, tvec: Tensor, rope) -> Tensor:
        mods = self.ada(tvec)
        d = x.shape[-1]
        sh1, sc1, g1, sh2, sc2, g2 = (
            T.narrow(mods, 1, i * d, d) for i in range(6))
        h = _modulate(T.rms_norm(x, self._gain), sh1, sc1)
        x = x + g1 * self.attend(h, rope)
        h = _modulate(T.rms_norm(x, self._gain), sh2, sc2)
        x = x + g2 * self.fc2(T.silu(self.fc1(h)))
        return x


class DiT:
    """The full model; owns weights and the per-layout rope cache."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        root = Rng(seed).child("dit-init")
        d = cfg.dim
        pdim = 3 * cfg.patch_size * cfg.patch_size
        self.patch_embed = Linear(pdim, d, root.child("patch").np(), dtype=dtype)
        table = 0.02 * root.child("prompt").np().standard_normal(
            (cfg.prompt_vocab, d))
        self.prompt_table = T.param(table, dtype)
        self.t_fc1 = Linear(d, d, root.child("t1").np(), dtype=dtype)
        self.t_fc2 = Linear(d, d, root.child("t2").np(), dtype=dtype)
        self.blocks = [Block(cfg, root.child("block", i), dtype=dtype)
                       for i in range(cfg.depth)]
        self.ada_out = Linear(d, 2 * d, zero_init=True, dtype=dtype)
        self.head = Linear(d, pdim, zero_init=True, dtype=dtype)
        # velocity is linear in the noisy input for a memorized image, so
        # give the head a direct timestep-gated path to it
        self.skip_gate = Linear(d, 1, zero_init=True, dtype=dtype)
        self._gain = Tensor(np.ones(d, dtype=dtype))
        self._rope_cache = {}

    # -- parameter plumbing

    def named_linears(self) -> dict:
        out = {"patch_embed": self.patch_embed,
               "t_embed.fc1": self.t_fc1, "t_embed.fc2": self.t_fc2,
               "final.ada": self.ada_out, "head": self.head,
               "skip_gate": self.skip_gate}
        for i, blk in enumerate(self.blocks):
            for name in ("ada", "qkv", "proj", "fc1", "fc2"):
                out[f"blocks.{i}.{name}"] = getattr(blk, name)
        return out

    def named_parameters(self) -> dict:
        out = {"prompt.table": self.prompt_table}
        for name, lin in self.named_linears().items():
            out[f"{name}.W"] = lin.W
            out[f"{name}.b"] = lin.b
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    # -- forward

    def _rope_for(self, positions_key, positions):
        cached = self._rope_cache.get(positions_key)
        if cached is None:
            cached = rope_tables(positions, self.cfg.rope_axes, dtype=self.dtype)
            self._rope_cache[positions_key] = cached
        return cached

    def embed_prompt(self, prompt_id: int) -> Tensor:
        if not 0 <= int(prompt_id) < self.cfg.prompt_vocab:
            raise ConfigError(
                f"prompt id {prompt_id} outside vocab of "
                f"{self.cfg.prompt_vocab}")
        return T.embedding(self.prompt_table, [int(prompt_id)])

    def time_vector(self, t: float) -> Tensor:
        feats = Tensor(timestep_features(t, self.cfg.dim, self.dtype))
        return self.t_fc2(T.silu(self.t_fc1(T.reshape(feats, (1, self.cfg.dim)))))

    def forward(self, noisy_latent, content_ref, style_ref,
                prompt_id: int, t: float) -> Tensor:
        if not 0.0 <= float(t) <= 1.0:
            raise ContractError(f"t must lie in [0,1], got {t}")
        noisy = np.asarray(noisy_latent, dtype=self.dtype)
        content = np.asarray(content_ref, dtype=self.dtype)
        style = np.asarray(style_ref, dtype=self.dtype)
        hn, wn = noisy.shape[:2]
        hc, wc = content.shape[:2]
        if hn * wc != hc * wn:
            raise InputError(
                f"content aspect {hc}x{wc} does not match latent {hn}x{wn}")
        hs, ws = style.shape[:2]
        if hs != ws:
            raise InputError(f"style reference must be square, got {hs}x{ws}")

        p = self.cfg.patch_size
        gh, gw = _patch_shape(noisy.shape, p)
        ghc, gwc = _patch_shape(content.shape, p)
        gs, _ = _patch_shape(style.shape, p)

        lat = self.patch_embed(Tensor(patchify(noisy, p)))
        con = self.patch_embed(Tensor(patchify(content, p)))
        sty = self.patch_embed(Tensor(patchify(style, p)))
        x = T.concat([self.embed_prompt(prompt_id), lat, con, sty], axis=0)

        key = (gh, gw, ghc, gwc, gs)
        if key not in self._rope_cache:
            positions = np.concatenate([
                np.zeros((1, 3), dtype=np.int64),
                grid_positions(gh, gw, 0),
                grid_positions(ghc, gwc, 1),
                grid_positions(gs, gs, 2)])
        else:
            positions = None
        rope = self._rope_for(key, positions)

        tvec = self.time_vector(t)
        for blk in self.blocks:
            x = blk(x, tvec, rope)

        mods = self.ada_out(tvec)
        d = self.cfg.dim
        shift = T.narrow(mods, 1, 0, d)
        scl = T.narrow(mods, 1, d, d)
        h = _modulate(T.rms_norm(x, self._gain), shift, scl)
        lat_out = self.head(T.narrow(h, 0, 1, gh * gw))
        out = unpatchify(lat_out, gh, gw, p)
        gate = T.reshape(self.skip_gate(tvec), (1, 1, 1))
        return T.add(out, T.mul(gate, Tensor(noisy)))


def dit_forward(model: DiT, noisy_latent, content_ref, style_ref,
                prompt_id: int, t: float) -> Tensor:
    return model.forward(noisy_latent, content_ref, style_ref, prompt_id, t)


# ---------------------------------------------------------------------------
# style reference preparation


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resample; same-size input returns a plain copy."""
    image = np.asarray(image)
    if image.size == 0:
        raise InputError("cannot resize an empty image")
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return image.copy()

    def _axis_coords(n_out, n_in):
        c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        c = np.clip(c, 0.0, n_in - 1.0)
        lo = np.floor(c).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (c - lo)

    y0, y1, fy = _axis_coords(out_h, h)
    x0, x1, fx = _axis_coords(out_w, w)
    fy = fy[:, None, None] if image.ndim == 3 else fy[:, None]
    fx = fx[None, :, None] if image.ndim == 3 else fx[None, :]
    top = image[np.ix_(y0, x0)] * (1 - fx) + image[np.ix_(y0, x1)] * fx
    bot = image[np.ix_(y1, x0)] * (1 - fx) + image[np.ix_(y1, x1)] * fx
    return (top * (1 - fy) + bot * fy).astype(image.dtype, copy=False)


def prepare_style_ref(style_image, target_h: int, target_w: int) -> np.ndarray:
    """Resize the style reference to a square of side min(target_h, target_w)."""
    side = min(int(target_h), int(target_w))
    return resize_bilinear(np.asarray(style_image), side, side)


# ---------------------------------------------------------------------------
# persistence


def save_model(path: str, model: DiT) -> None:
    """Weights at `path`, config in a model.cfg sidecar next to it."""
    ckpt.save(path, {k: v.data for k, v in model.named_parameters().items()})
    cfg = model.cfg
    ckpt.save_sidecar(os.path.join(os.path.dirname(path) or ".", "model.cfg"), {
        "image_size": cfg.image_size, "patch_size": cfg.patch_size,
        "dim": cfg.dim, "depth": cfg.depth, "heads": cfg.heads,
        "mlp_ratio": cfg.mlp_ratio, "prompt_vocab": cfg.prompt_vocab,
        "rope_axes": ",".join(str(d) for d in cfg.rope_axes),
    })


def load_model(path: str, dtype=np.float32) -> DiT:
    side = ckpt.load_sidecar(os.path.join(os.path.dirname(path) or ".", "model.cfg"))
    cfg = ModelConfig(
        image_size=int(side["image_size"]), patch_size=int(side["patch_size"]),
        dim=int(side["dim"]), depth=int(side["depth"]), heads=int(side["heads"]),
        mlp_ratio=int(side["mlp_ratio"]), prompt_vocab=int(side["prompt_vocab"]),
        rope_axes=tuple(int(d) for d in side["rope_axes"].split(",")))
    model = DiT(cfg, seed=0, dtype=dtype)
    tensors = ckpt.load(path)
    params = model.named_parameters()
    if sorted(tensors) != sorted(params):
        raise ContractError("checkpoint names do not match the model layout")
    for name, arr in tensors.items():
        if params[name].data.shape != arr.shape:
            raise ShapeError(
                f"checkpoint tensor {name} has shape {arr.shape}, "
                f"model expects {params[name].data.shape}")
        params[name].data = arr.astype(dtype)
    return model
