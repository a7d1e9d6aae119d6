"""Procedural stylization world: scenes, parametric styles, and corpora.

Scenes are 1-4 crisp shapes over a vertical two-color gradient drawn from
a fixed 8-color palette; indices 0 and 1 are light neutrals reserved for
backgrounds, 2-7 are saturated shape colors. A style is a deterministic
function of (style_id, world seed): a palette permutation plus tint, a
periodic texture, an optional edge outline, and a gamma tone curve,
applied in that fixed order. Stylization never sees the descriptor, only
pixels: the palette remap decomposes each pixel as the best blend of two
base colors (exact on rendered images, gradients included) and reblends
with the styled palette, so identity parameters reproduce the input
bit-for-bit on world images.

Style permutations always move the background pair {0,1} onto other
slots. That is what makes a restyle visible to the palette histogram
half of the metrics module, and it keeps unstyled copies of the content
reference far from any styled reference.

Corpora are written as PPM P6 images plus JSONL manifests and are
byte-identical across runs with the same seed and config.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigError, ContractError, InputError
from .rng import Rng

BASE_PALETTE = np.array([
    [0.93, 0.93, 0.88],   # 0: warm near-white (background)
    [0.70, 0.78, 0.84],   # 1: cool light gray-blue (background)
    [0.86, 0.20, 0.18],   # 2: red
    [0.95, 0.72, 0.10],   # 3: amber
    [0.16, 0.62, 0.28],   # 4: green
    [0.15, 0.50, 0.80],   # 5: blue
    [0.48, 0.22, 0.66],   # 6: purple
    [0.92, 0.44, 0.63],   # 7: pink
])

BACKGROUND_SLOTS = (0, 1)
SHAPE_KINDS = ("circle", "rect", "triangle", "line")
TEXTURE_KINDS = ("none", "stripes", "dots", "checker", "value-noise")
SMALL_SHAPE_SIZE = 0.1
DEFAULT_CANVAS = (64, 64)
WIDE_CANVAS = (32, 64)


@dataclass
class Shape:
    kind: str
    cx: float
    cy: float
    size: float
    color: int
    angle: float = 0.0


@dataclass
class SceneDescriptor:
    shapes: list
    bg: tuple = (0, 1)

    def to_dict(self) -> dict:
        return {"shapes": [asdict(s) for s in self.shapes],
                "bg": list(self.bg)}

    @staticmethod
    def from_dict(d: dict) -> "SceneDescriptor":
        return SceneDescriptor(
            shapes=[Shape(**s) for s in d["shapes"]],
            bg=tuple(d["bg"]))


@dataclass
class StyleParams:
    style_id: int
    perm: tuple
    tint: tuple
    texture_kind: str
    texture_period: int
    texture_strength: float
    texture_angle: float
    texture_seed: int
    edge_width: int
    gamma: float

    def is_identity(self) -> bool:
        return (tuple(self.perm) == tuple(range(8))
                and not any(self.tint)
                and self.texture_kind == "none"
                and self.edge_width == 0
                and self.gamma == 1.0)


IDENTITY_STYLE = StyleParams(
    style_id=-1, perm=tuple(range(8)), tint=(0.0, 0.0, 0.0),
    texture_kind="none", texture_period=8, texture_strength=0.0,
    texture_angle=0.0, texture_seed=0, edge_width=0, gamma=1.0)


_NEUTRAL_PROBE_LIMIT = 0.2


def _styled_background_neutral_mass(style: "StyleParams") -> float:
    """Fraction of a styled background probe that quantizes to the
    neutral slots. Texture, blend rows, and tone can all wash a styled
    background back toward the light neutrals even when its endpoint
    colors stay saturated, so the probe runs the whole pipeline."""
    probe = render(SceneDescriptor(shapes=[], bg=(0, 1)), (32, 32))
    styled = apply_style(style, probe)
    d2 = ((styled[:, :, None, :] - BASE_PALETTE[None, None]) ** 2).sum(-1)
    idx = d2.argmin(-1)
    return float(np.isin(idx, BACKGROUND_SLOTS).mean())


def make_style(style_id: int, seed: int) -> StyleParams:
    """Deterministic style from (style_id, world seed).

    The permutation is redrawn until it moves the background pair off
    {0,1}, and the continuous parameters are redrawn until a styled
    background probe keeps nearly all of its mass off the neutral slots,
    so every style reads as a visible restyle. The tint carries a
    golden-ratio hue component so distinct ids always differ even if
    the discrete draws collide.
    """
    root = Rng(seed).child("style", style_id)
    g = root.child("perm").np()
    for _ in range(64):
        perm = tuple(int(v) for v in g.permutation(8))
        if not ({perm[0], perm[1]} & set(BACKGROUND_SLOTS)):
            break
    else:
        raise ContractError("could not draw a background-moving permutation")
    phase = 2.0 * math.pi * ((style_id * 0.6180339887498949) % 1.0)
    texture_seed = int(root.child("lattice").np().integers(0, 2 ** 31))
    for attempt in range(64):
        g = root.child("draw", attempt).np()
        tint = tuple(
            float(g.uniform(-0.06, 0.06) + 0.025 * math.sin(phase + k * 2.1))
            for k in range(3))
        gamma = float(g.uniform(0.6, 1.7))
        kind = str(g.choice(TEXTURE_KINDS,
                            p=[0.12, 0.25, 0.21, 0.21, 0.21]))
        period = int(g.integers(4, 13))
        strength = float(g.uniform(0.10, 0.22))
        angle = float(g.uniform(0.0, math.pi))
        edge_width = int(g.choice([0, 1, 2], p=[0.4, 0.4, 0.2]))
        style = StyleParams(style_id=style_id, perm=perm, tint=tint,
                            texture_kind=kind, texture_period=period,
                            texture_strength=strength, texture_angle=angle,
                            texture_seed=texture_seed, edge_width=edge_width,
                            gamma=gamma)
        if _styled_background_neutral_mass(style) < _NEUTRAL_PROBE_LIMIT:
            return style
    raise ContractError("could not draw a neutral-avoiding style")


def styled_palette(style: StyleParams) -> np.ndarray:
    pal = BASE_PALETTE[list(style.perm)] + np.asarray(style.tint)
    return np.clip(pal, 0.0, 1.0)


# ---------------------------------------------------------------------------
# rasterization


def _shape_mask(shape: Shape, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    pcx, pcy = shape.cx * w, shape.cy * h
    s = shape.size * min(h, w)
    if shape.kind == "circle":
        return (xx - pcx) ** 2 + (yy - pcy) ** 2 <= s * s
    if shape.kind == "rect":
        return np.maximum(np.abs(xx - pcx), np.abs(yy - pcy)) <= 0.8 * s
    if shape.kind == "triangle":
        ax, ay = pcx, pcy - s
        bx, by = pcx - 0.9 * s, pcy + 0.7 * s
        cx2, cy2 = pcx + 0.9 * s, pcy + 0.7 * s

        def half(px, py, qx, qy):
            return (qx - px) * (yy - py) - (qy - py) * (xx - px)

        d0 = half(ax, ay, bx, by)
        d1 = half(bx, by, cx2, cy2)
        d2 = half(cx2, cy2, ax, ay)
        return ((d0 >= 0) & (d1 >= 0) & (d2 >= 0)) | \
               ((d0 <= 0) & (d1 <= 0) & (d2 <= 0))
    if shape.kind == "line":
        c, sn = math.cos(shape.angle), math.sin(shape.angle)
        u = (xx - pcx) * c + (yy - pcy) * sn
        v = -(xx - pcx) * sn + (yy - pcy) * c
        return (np.abs(u) <= s) & (np.abs(v) <= max(1.2, 0.12 * s))
    raise ConfigError(f"unknown shape kind {shape.kind!r}")


def render(descriptor: SceneDescriptor, size=DEFAULT_CANVAS) -> np.ndarray:
    """Crisp rasterization to float RGB in [0,1]; no anti-aliasing."""
    h, w = size
    lam = (np.arange(h) / (h - 1))[:, None, None]
    c0 = BASE_PALETTE[descriptor.bg[0]]
    c1 = BASE_PALETTE[descriptor.bg[1]]
    img = (1.0 - lam) * c0 + lam * c1
    img = np.broadcast_to(img, (h, w, 3)).copy()
    for shape in descriptor.shapes:
        mask = _shape_mask(shape, h, w)
        img[mask] = BASE_PALETTE[shape.color]
    return img


# ---------------------------------------------------------------------------
# stylization


def _remap_palette(img: np.ndarray, style: StyleParams) -> np.ndarray:
    """Reblend each pixel's best two-base-color decomposition.

    Every pixel is projected onto all base-color pairs (i, j); the pair
    and blend fraction with the least residual win, and the pixel becomes
    the same blend of the styled palette. World renders lie exactly on
    such segments (solid fills and the background gradient), so the
    decomposition is lossless there.
    """
    h, w, _ = img.shape
    px = img.reshape(-1, 3)
    pal = BASE_PALETTE
    new = styled_palette(style)
    best_err = np.full(len(px), np.inf)
    best = np.zeros((len(px), 3))
    pairs = [(i, j) for i in range(8) for j in range(i, 8)]
    for i, j in pairs:
        ci, cj = pal[i], pal[j]
        d = cj - ci
        dd = float(d @ d)
        if dd < 1e-12:
            lam = np.zeros(len(px))
        else:
            lam = np.clip((px - ci) @ d / dd, 0.0, 1.0)
        proj = ci + lam[:, None] * d
        err = ((px - proj) ** 2).sum(axis=1)
        take = err < best_err
        if np.any(take):
            best_err[take] = err[take]
            best[take] = new[i] + lam[take, None] * (new[j] - new[i])
    return best.reshape(h, w, 3)


def _value_noise(h: int, w: int, period: int, seed: int) -> np.ndarray:
    """Bilinear value noise on a fixed lattice; canvas-size independent."""
    lattice = Rng(seed).child("lattice").np().uniform(0.0, 1.0, (34, 34))
    ys = np.arange(h) / period
    xs = np.arange(w) / period
    y0 = ys.astype(int) % 33
    x0 = xs.astype(int) % 33
    fy = (ys - ys.astype(int))[:, None]
    fx = (xs - xs.astype(int))[None, :]
    v00 = lattice[np.ix_(y0, x0)]
    v01 = lattice[np.ix_(y0, x0 + 1)]
    v10 = lattice[np.ix_(y0 + 1, x0)]
    v11 = lattice[np.ix_(y0 + 1, x0 + 1)]
    return (v00 * (1 - fy) * (1 - fx) + v01 * (1 - fy) * fx
            + v10 * fy * (1 - fx) + v11 * fy * fx)


def _texture_pattern(style: StyleParams, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    p = style.texture_period
    if style.texture_kind == "stripes":
        c, sn = math.cos(style.texture_angle), math.sin(style.texture_angle)
        return 0.5 * (1.0 + np.sin(2.0 * math.pi * (xx * c + yy * sn) / p))
    if style.texture_kind == "dots":
        return 0.5 * (1.0 + np.sin(2.0 * math.pi * xx / p)
                      * np.sin(2.0 * math.pi * yy / p))
    if style.texture_kind == "checker":
        return (((xx // p).astype(int) + (yy // p).astype(int)) % 2
                ).astype(np.float64)
    if style.texture_kind == "value-noise":
        return _value_noise(h, w, p, style.texture_seed)
    raise ConfigError(f"unknown texture kind {style.texture_kind!r}")


def _boundary_mask(img: np.ndarray, thresh: float = 0.28) -> np.ndarray:
    d = np.zeros(img.shape[:2])
    diff = np.abs(np.diff(img, axis=0)).max(axis=-1)
    d[:-1] = np.maximum(d[:-1], diff)
    d[1:] = np.maximum(d[1:], diff)
    diff = np.abs(np.diff(img, axis=1)).max(axis=-1)
    d[:, :-1] = np.maximum(d[:, :-1], diff)
    d[:, 1:] = np.maximum(d[:, 1:], diff)
    return d > thresh


def _dilate(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    out[:-1] |= mask[1:]
    out[1:] |= mask[:-1]
    out[:, :-1] |= mask[:, 1:]
    out[:, 1:] |= mask[:, :-1]
    return out


def apply_style(style: StyleParams, image: np.ndarray) -> np.ndarray:
    """Palette remap, texture overlay, edge outline, tone curve, in order."""
    img = np.asarray(image, dtype=np.float64)
    if not np.array_equal(styled_palette(style), BASE_PALETTE):
        img = _remap_palette(img, style)
    if style.texture_kind != "none" and style.texture_strength > 0:
        pattern = _texture_pattern(style, *img.shape[:2])
        img = np.clip(
            img + style.texture_strength * (pattern - 0.5)[..., None], 0, 1)
    if style.edge_width > 0:
        mask = _boundary_mask(img)
        for _ in range(style.edge_width - 1):
            mask = _dilate(mask)
        img = img.copy()
        img[mask] *= 0.45
    if style.gamma != 1.0:
        img = np.clip(img, 0.0, 1.0) ** style.gamma
    return img


# ---------------------------------------------------------------------------
# scene sampling and reverse synthesis


def sample_scene(rng: Rng) -> SceneDescriptor:
    """Scene in normalized coordinates; canvas size is chosen at render."""
    g = rng.np()
    n = int(g.integers(1, 5))
    shapes = []
    for _ in range(n):
        kind = str(g.choice(SHAPE_KINDS))
        shapes.append(Shape(
            kind=kind,
            cx=float(g.uniform(0.2, 0.8)),
            cy=float(g.uniform(0.2, 0.8)),
            size=float(g.uniform(0.06, 0.25)),
            color=int(g.integers(2, 8)),
            angle=float(g.choice([0.0, math.pi / 4, math.pi / 2,
                                  3 * math.pi / 4]))))
    bg = (0, 1) if g.uniform() < 0.5 else (1, 0)
    return SceneDescriptor(shapes=shapes, bg=bg)


def destylize_noisify(target: np.ndarray, descriptor: SceneDescriptor,
                      jitter_px: float, drop_prob: float,
                      seed: int) -> np.ndarray:
    """Imperfect reverse edit: clean re-render with jitter and drops."""
    if jitter_px < 0:
        raise ConfigError(f"jitter_px must be >= 0, got {jitter_px}")
    if not 0.0 <= drop_prob <= 1.0:
        raise ConfigError(f"drop_prob must lie in [0,1], got {drop_prob}")
    h, w = target.shape[:2]
    root = Rng(seed).child("noisify")
    shapes = []
    for i, shape in enumerate(descriptor.shapes):
        if shape.size < SMALL_SHAPE_SIZE and drop_prob > 0:
            if root.child("drop", i).np().uniform() < drop_prob:
                continue
        g = root.child("jitter", i).np()
        dx = float(g.uniform(-jitter_px, jitter_px))
        dy = float(g.uniform(-jitter_px, jitter_px))
        shapes.append(Shape(kind=shape.kind, cx=shape.cx + dx / w,
                            cy=shape.cy + dy / h, size=shape.size,
                            color=shape.color, angle=shape.angle))
    return render(SceneDescriptor(shapes=shapes, bg=descriptor.bg), (h, w))


# ---------------------------------------------------------------------------
# video clips


def gen_video_clip(descriptor: SceneDescriptor, style: StyleParams, t: int,
                   motion, size=(32, 32)):
    """Linear per-shape motion; returns (source[T], stylized[T]) arrays."""
    if t < 2:
        raise ConfigError(f"clips need at least 2 frames, got {t}")
    if len(motion) != len(descriptor.shapes):
        raise ContractError(
            f"{len(motion)} velocities for {len(descriptor.shapes)} shapes")
    h, w = size
    source, stylized = [], []
    for step in range(t):
        shapes = [Shape(kind=s.kind, cx=s.cx + vx * step / w,
                        cy=s.cy + vy * step / h, size=s.size,
                        color=s.color, angle=s.angle)
                  for s, (vx, vy) in zip(descriptor.shapes, motion)]
        frame = render(SceneDescriptor(shapes=shapes, bg=descriptor.bg), size)
        source.append(frame)
        stylized.append(apply_style(style, frame))
    return np.stack(source), np.stack(stylized)


def sample_video_scene(rng: Rng, t: int, size=(32, 32), static: bool = False):
    """Scene plus in-bounds linear motion (zeroed when static)."""
    g = rng.np()
    h, w = size
    n = int(g.integers(1, 3))
    shapes, motion = [], []
    for _ in range(n):
        speed = 0.0 if static else float(g.uniform(2.0, 4.0))
        ang = float(g.uniform(0.0, 2.0 * math.pi))
        vx, vy = speed * math.cos(ang), speed * math.sin(ang)
        span_x = vx * (t - 1) / w
        span_y = vy * (t - 1) / h
        # keep the whole trajectory inside the placement box
        overshoot = max(abs(span_x), abs(span_y))
        if overshoot > 0.49:
            vx, vy = vx * 0.49 / overshoot, vy * 0.49 / overshoot
            span_x = vx * (t - 1) / w
            span_y = vy * (t - 1) / h
        cx = float(g.uniform(0.25 - min(0.0, span_x), 0.75 - max(0.0, span_x)))
        cy = float(g.uniform(0.25 - min(0.0, span_y), 0.75 - max(0.0, span_y)))
        kind = str(g.choice(SHAPE_KINDS))
        if kind == "line" and speed > 0:
            # across the motion, so a moving line is visibly moving
            angle = math.atan2(vy, vx) + math.pi / 2
        else:
            angle = float(g.choice([0.0, math.pi / 4, math.pi / 2]))
        shapes.append(Shape(
            kind=kind, cx=cx, cy=cy,
            size=float(g.uniform(0.12, 0.3)), color=int(g.integers(2, 8)),
            angle=angle))
        motion.append((vx, vy))
    bg = (0, 1) if g.uniform() < 0.5 else (1, 0)
    return SceneDescriptor(shapes=shapes, bg=bg), motion


# ---------------------------------------------------------------------------
# PPM storage


def write_ppm(path: str, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InputError(f"PPM wants [H,W,3], got {img.shape}")
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = img.shape[:2]
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(data.tobytes())
    os.replace(tmp, path)


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(b"P6"):
        raise InputError(f"{path} is not a binary PPM")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise InputError(f"{path}: only maxval 255 supported")
    data = np.frombuffer(blob, dtype=np.uint8, count=h * w * 3, offset=pos)
    return (data.reshape(h, w, 3) / 255.0).astype(np.float32)


def quantize(image: np.ndarray) -> np.ndarray:
    """Round-trip through 8-bit exactly as PPM storage does."""
    return (np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
            ).astype(np.float32)


# ---------------------------------------------------------------------------
# corpus construction


@dataclass
class WorldConfig:
    n_clean_styles: int = 12
    n_synth_styles: int = 40
    n_holdout_styles: int = 8
    per_clean: int = 60
    per_synth: int = 50
    per_holdout: int = 10
    n_bench_contents: int = 10
    wide_fraction: float = 0.25
    jitter_px: float = 3.0
    drop_prob: float = 0.3
    seed: int = 0
    clean_ids: tuple = None
    synth_ids: tuple = None
    holdout_ids: tuple = None

    def __post_init__(self):
        for name in ("n_clean_styles", "n_synth_styles", "n_holdout_styles",
                     "per_clean", "per_synth", "per_holdout"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.per_clean < 2 or self.per_synth < 2 or self.per_holdout < 2:
            raise ConfigError("per-style counts must be >= 2 (cluster pairing)")
        if not 0.0 <= self.wide_fraction <= 1.0:
            raise ConfigError("wide_fraction must lie in [0,1]")
        if self.clean_ids is None:
            self.clean_ids = tuple(range(self.n_clean_styles))
        if self.synth_ids is None:
            base = max(self.clean_ids) + 1
            self.synth_ids = tuple(range(base, base + self.n_synth_styles))
        if self.holdout_ids is None:
            base = max(self.clean_ids + self.synth_ids) + 1
            self.holdout_ids = tuple(range(base, base + self.n_holdout_styles))
        groups = (set(self.clean_ids), set(self.synth_ids),
                  set(self.holdout_ids))
        if (groups[0] & groups[1]) or (groups[0] & groups[2]) \
                or (groups[1] & groups[2]):
            raise ConfigError("style id ranges overlap between "
                              "clean/synthetic/held-out groups")


@dataclass
class TripletRecord:
    id: str
    style_id: int
    provenance: str
    consistency: float
    style_ref: str
    content_ref: str
    target: str
    descriptor: dict
    size: tuple

    def to_json(self) -> str:
        return json.dumps({
            "id": self.id, "style_id": self.style_id,
            "provenance": self.provenance, "consistency": self.consistency,
            "style_ref": self.style_ref, "content_ref": self.content_ref,
            "target": self.target, "descriptor": self.descriptor,
            "size": list(self.size)}, sort_keys=True)

    @staticmethod
    def from_json(line: str) -> "TripletRecord":
        d = json.loads(line)
        return TripletRecord(
            id=d["id"], style_id=d["style_id"], provenance=d["provenance"],
            consistency=d["consistency"], style_ref=d["style_ref"],
            content_ref=d["content_ref"], target=d["target"],
            descriptor=d["descriptor"], size=tuple(d["size"]))


def load_manifest(path: str) -> list:
    with open(path) as f:
        return [TripletRecord.from_json(line) for line in f
                if line.strip()]


def _triplet_canvas(cfg: WorldConfig, k: int):
    if cfg.wide_fraction <= 0:
        return DEFAULT_CANVAS
    stride = max(1, round(1.0 / cfg.wide_fraction))
    return WIDE_CANVAS if k % stride == stride - 1 else DEFAULT_CANVAS


def _build_group(images_dir, cfg, style_ids, per_style, prefix,
                 provenance, consistency_fn):
    """One style group: per style, a cluster of scenes; targets double as
    the next triplet's style reference (same cluster, different scene)."""
    records = []
    for sid in style_ids:
        style = make_style(sid, cfg.seed)
        names = []
        for k in range(per_style):
            canvas = _triplet_canvas(cfg, k)
            scene = sample_scene(Rng(cfg.seed).child("scene", sid, k))
            content = render(scene, canvas)
            target = apply_style(style, content)
            name = f"{prefix}{sid:03d}_{k:03d}"
            if provenance == "synthetic":
                noise_seed = int(Rng(cfg.seed).child("noise", sid, k)
                                 .np().integers(0, 2 ** 31))
                content_out = destylize_noisify(
                    target, scene, cfg.jitter_px, cfg.drop_prob, noise_seed)
            else:
                content_out = content
            write_ppm(os.path.join(images_dir, name + "_content.ppm"),
                      content_out)
            write_ppm(os.path.join(images_dir, name + "_target.ppm"), target)
            names.append(name)
            if consistency_fn is not None:
                consist = float(consistency_fn(quantize(content_out), scene))
            else:
                consist = 1.0
            records.append(TripletRecord(
                id=name, style_id=sid, provenance=provenance,
                consistency=consist,
                style_ref="",  # filled below once the cluster exists
                content_ref=f"images/{name}_content.ppm",
                target=f"images/{name}_target.ppm",
                descriptor=scene.to_dict(), size=canvas))
        base = len(records) - per_style
        for k in range(per_style):
            other = names[(k + 1) % per_style]
            records[base + k].style_ref = f"images/{other}_target.ppm"
    return records


def _write_manifest(path: str, records) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        for r in records:
            f.write(r.to_json() + "\n")
    os.replace(tmp, path)


def build_corpus(out_dir: str, cfg: WorldConfig, consistency_fn=None) -> dict:
    """Clean, synthetic, and held-out triplet sets plus benchmark scenes.

    consistency_fn(content_image, descriptor) -> float supplies the
    content-consistency weight (the metrics module's content score);
    None stores 1.0 everywhere.
    """
    images_dir = os.path.join(out_dir, "images")
    os.makedirs(images_dir, exist_ok=True)
    clean = _build_group(images_dir, cfg, cfg.clean_ids,
                         cfg.per_clean, "c", "clean", consistency_fn)
    synth = _build_group(images_dir, cfg, cfg.synth_ids,
                         cfg.per_synth, "s", "synthetic", consistency_fn)
    holdout = _build_group(images_dir, cfg, cfg.holdout_ids,
                           cfg.per_holdout, "h", "clean", consistency_fn)
    _write_manifest(os.path.join(out_dir, "clean.jsonl"), clean)
    _write_manifest(os.path.join(out_dir, "synthetic.jsonl"), synth)
    _write_manifest(os.path.join(out_dir, "holdout.jsonl"), holdout)

    bench = [sample_scene(Rng(cfg.seed).child("bench", k))
             for k in range(cfg.n_bench_contents)]
    tmp = os.path.join(out_dir, "bench_contents.jsonl.tmp")
    with open(tmp, "w") as f:
        for k, scene in enumerate(bench):
            f.write(json.dumps({"id": f"b{k:03d}",
                                "descriptor": scene.to_dict(),
                                "size": list(DEFAULT_CANVAS)},
                               sort_keys=True) + "\n")
    os.replace(tmp, os.path.join(out_dir, "bench_contents.jsonl"))
    return {"clean": len(clean), "synthetic": len(synth),
            "holdout": len(holdout), "bench_contents": len(bench)}


def load_bench_contents(out_dir: str) -> list:
    path = os.path.join(out_dir, "bench_contents.jsonl")
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                out.append((d["id"],
                            SceneDescriptor.from_dict(d["descriptor"]),
                            tuple(d["size"])))
    return out


# ---------------------------------------------------------------------------
# pixel-range conventions shared by the trainers


def to_signed(image: np.ndarray) -> np.ndarray:
    """[0,1] image -> [-1,1] model space."""
    return image.astype(np.float32) * 2.0 - 1.0


def to_unit(x: np.ndarray) -> np.ndarray:
    """Model space -> clipped [0,1] image."""
    return np.clip((np.asarray(x) + 1.0) * 0.5, 0.0, 1.0)
