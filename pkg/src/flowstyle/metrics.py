"""Hand-rolled style and content measurements plus the gated CPC score.

The style feature is a fixed-length descriptor built from image
statistics that track how the world's styles act on pixels: a palette
histogram (nearest base color), a radial FFT energy profile (textures),
an edge-density scalar (outlines), and luminance moments (tone curves).
Blocks are square-rooted where they are histograms, scaled by fixed
per-block weights, and the whole vector is L2-normalized, so style
similarity is a plain cosine.

The content score compares edge structure inside each described shape's
bounding box against a clean render of the descriptor. Boxes are split
into 2x2 cells so translation inside the box is penalized, and each
cell holds an 8-bin edge-orientation histogram from the color structure
tensor, which keeps equal-luminance color boundaries visible.

CPC gates content preservation on a style-similarity threshold; the
range variant averages the gate over evenly spaced thresholds.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError
from .world import BASE_PALETTE, SceneDescriptor, render

LUMA = np.array([0.299, 0.587, 0.114])

PALETTE_BINS = 8
FFT_BINS = 16
FEATURE_DIM = PALETTE_BINS + FFT_BINS + 1 + 2

# per-block weights; see scripts/calibrate_world.py for the sweep that
# picked them. Background bins get extra weight inside the palette block:
# backgrounds dominate every image's mass, so whether it sits on the
# neutral slots is the loudest restyling signal.
PALETTE_WEIGHT = 2.5
PALETTE_BIN_WEIGHTS = np.array([2.0, 2.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0])
FFT_WEIGHT = 1.0
EDGE_WEIGHT = 0.5
LUMINANCE_WEIGHT = 1.0

EDGE_DENSITY_THRESH = 0.08


def style_feature(image: np.ndarray) -> np.ndarray:
    """Fixed-length style descriptor; L2-normalized float64."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InputError(f"style_feature wants [H,W,3], got {img.shape}")
    h, w = img.shape[:2]

    d2 = ((img[:, :, None, :] - BASE_PALETTE[None, None]) ** 2).sum(-1)
    idx = d2.argmin(-1)
    pal = np.bincount(idx.ravel(), minlength=PALETTE_BINS) / idx.size

    lum = img @ LUMA
    spectrum = np.abs(np.fft.fft2(lum - lum.mean())) ** 2
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    radius = np.hypot(fy, fx) / (0.5 * math.sqrt(2.0))
    bins = np.minimum((radius * FFT_BINS).astype(int), FFT_BINS - 1)
    energy = np.bincount(bins.ravel(), weights=spectrum.ravel(),
                         minlength=FFT_BINS)
    energy = energy / (energy.sum() + 1e-12)

    gy, gx = np.gradient(lum)
    density = float((np.hypot(gx, gy) > EDGE_DENSITY_THRESH).mean())

    # the palette histogram stays raw so disjoint color usage reads as
    # near-orthogonal; the energy profile is square-rooted so texture
    # spikes survive next to the low-frequency bulk
    feats = np.concatenate([
        PALETTE_WEIGHT * PALETTE_BIN_WEIGHTS * pal,
        FFT_WEIGHT * np.sqrt(energy),
        [EDGE_WEIGHT * density],
        LUMINANCE_WEIGHT * np.array([2.0 * (lum.mean() - 0.5),
                                     4.0 * lum.var()]),
    ])
    norm = np.linalg.norm(feats)
    return feats / norm


def style_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the two style features, in [-1, 1]."""
    fa, fb = style_feature(a), style_feature(b)
    return float(np.dot(fa, fb))


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; inf for identical arrays."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise InputError(f"psnr wants matching shapes, got {x.shape} "
                         f"vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * math.log10(peak * peak / mse))


# ---------------------------------------------------------------------------
# content score


def _structure_orientation(img: np.ndarray):
    """Per-pixel edge magnitude and orientation in [0, pi) from the
    color structure tensor (so equal-luminance boundaries still count)."""
    gy = np.gradient(img, axis=0)
    gx = np.gradient(img, axis=1)
    jxx = (gx * gx).sum(-1)
    jyy = (gy * gy).sum(-1)
    jxy = (gx * gy).sum(-1)
    mag = np.sqrt(jxx + jyy)
    theta = 0.5 * np.arctan2(2.0 * jxy, jxx - jyy)
    return mag, np.mod(theta, math.pi)


def _shape_bbox(shape, h: int, w: int, margin: int = 2):
    s = shape.size * min(h, w)
    half = max(s, 1.2) + margin
    pcx, pcy = shape.cx * w, shape.cy * h
    y0 = max(0, int(math.floor(pcy - half)))
    y1 = min(h, int(math.ceil(pcy + half)))
    x0 = max(0, int(math.floor(pcx - half)))
    x1 = min(w, int(math.ceil(pcx + half)))
    return y0, y1, x0, x1


_ORIENT_BINS = 8
_CELLS = 2
_EMPTY_CELL_ENERGY = 1e-4
_PRESENCE_FRACTION = 0.35


def _orient_hist(theta, weights):
    """Energy histogram over [0, pi) with circular soft binning, so a
    hair of orientation noise cannot flip mass across a bin edge."""
    u = theta / math.pi * _ORIENT_BINS - 0.5
    base = np.floor(u)
    frac = u - base
    b0 = base.astype(int) % _ORIENT_BINS
    b1 = (b0 + 1) % _ORIENT_BINS
    return (np.bincount(b0, weights=weights * (1.0 - frac),
                        minlength=_ORIENT_BINS)
            + np.bincount(b1, weights=weights * frac,
                          minlength=_ORIENT_BINS))


def _background_density(mag, theta, boxes):
    """Per-pixel orientation energy density outside all shape boxes;
    this is the texture/background signature to subtract inside them."""
    mask = np.ones(mag.shape, dtype=bool)
    for y0, y1, x0, x1 in boxes:
        mask[y0:y1, x0:x1] = False
    if mask.sum() < 16:
        return np.zeros(_ORIENT_BINS)
    m = mag[mask]
    return _orient_hist(theta[mask], m * m) / mask.sum()


def _cell_stats(mag, theta, box, density):
    """Per 2x2 cell: texture-corrected orientation energy histogram,
    linear edge mass (for the presence test), and pixel count."""
    y0, y1, x0, x1 = box
    hists, masses, sizes = [], [], []
    ys = np.linspace(y0, y1, _CELLS + 1).astype(int)
    xs = np.linspace(x0, x1, _CELLS + 1).astype(int)
    for i in range(_CELLS):
        for j in range(_CELLS):
            m = mag[ys[i]:ys[i + 1], xs[j]:xs[j + 1]].ravel()
            t = theta[ys[i]:ys[i + 1], xs[j]:xs[j + 1]].ravel()
            hist = _orient_hist(t, m * m)
            hists.append(np.maximum(hist - density * m.size, 0.0))
            masses.append(float(m.sum()))
            sizes.append(m.size)
    return hists, masses, sizes


def content_score(image: np.ndarray, descriptor: SceneDescriptor) -> float:
    """Edge-structure agreement with a clean render, in [0, 1].

    Per shape: 2x2 sub-cell orientation-histogram intersections against
    the clean render (energy-weighted, with the global texture signature
    subtracted), scaled by an edge-presence ratio so a missing shape
    scores near zero. An empty descriptor scores 1.0 by definition.
    """
    if not descriptor.shapes:
        return 1.0
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    clean = render(descriptor, (h, w))
    mag_i, th_i = _structure_orientation(img)
    mag_c, th_c = _structure_orientation(clean)
    boxes = [_shape_bbox(s, h, w) for s in descriptor.shapes]
    dens_i = _background_density(mag_i, th_i, boxes)
    dens_c = _background_density(mag_c, th_c, boxes)
    scores = []
    for box in boxes:
        hi, mi, sizes = _cell_stats(mag_i, th_i, box, dens_i)
        hc, mc, _ = _cell_stats(mag_c, th_c, box, dens_c)
        cell_scores = []
        for hist_i, hist_c, n_px in zip(hi, hc, sizes):
            e_i, e_c = float(hist_i.sum()), float(hist_c.sum())
            # the floor scales with area so 8-bit quantization noise in
            # an otherwise flat cell still reads as empty
            floor = _EMPTY_CELL_ENERGY + 5e-6 * n_px
            empty_i = e_i <= floor
            empty_c = e_c <= floor
            if empty_i and empty_c:
                cell_scores.append(1.0)
            elif empty_i or empty_c:
                cell_scores.append(0.0)
            else:
                cell_scores.append(float(np.minimum(hist_i / e_i,
                                                    hist_c / e_c).sum()))
        if sum(mc) <= 1e-4 * sum(sizes):
            # the clean render shows no edges here (the shape is hidden
            # behind a later one); nothing to be present
            presence = 1.0
        else:
            presence = min(1.0, sum(mi) / (_PRESENCE_FRACTION * sum(mc)))
        scores.append(presence * float(np.mean(cell_scores)))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# gated content preservation


def _pair_scores(output, style_ref, descriptor):
    return (style_similarity(output, style_ref),
            content_score(output, descriptor))


def cpc_at(output: np.ndarray, style_ref: np.ndarray,
           descriptor: SceneDescriptor, thresh: float) -> float:
    """Content score gated on style similarity reaching thresh, else 0."""
    sim, content = _pair_scores(output, style_ref, descriptor)
    return content if sim >= thresh else 0.0


def cpc_range(output: np.ndarray, style_ref: np.ndarray,
              descriptor: SceneDescriptor, lo: float, hi: float,
              step: float = 0.1) -> float:
    """Mean gated score over thresholds lo, lo+step, ..., up to hi."""
    if step <= 0:
        raise ConfigError(f"threshold step must be > 0, got {step}")
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    if hi < lo or n < 1:
        raise ConfigError(f"empty threshold set [{lo}, {hi}] step {step}")
    sim, content = _pair_scores(output, style_ref, descriptor)
    gated = [content if sim >= lo + i * step else 0.0 for i in range(n)]
    return float(np.mean(gated))


# ---------------------------------------------------------------------------
# batch evaluation


@dataclass
class PairResult:
    pair_id: str
    style_id: int
    style_sim: float
    content: float
    cpc_05: float
    cpc_range: float
    failed: bool = False
    error: str = ""


@dataclass
class EvalReport:
    pairs: list
    aggregates: dict

    def ok_pairs(self):
        return [p for p in self.pairs if not p.failed]


def evaluate_pairs(sampler, pairs, lo: float = 0.3, hi: float = 0.9,
                   step: float = 0.1) -> EvalReport:
    """Run sampler(style_ref, descriptor, size) over (id, style_id,
    style_ref, descriptor, size) tuples and score each output.

    A sampler exception marks the pair failed and excludes it from the
    aggregates instead of aborting the sweep.
    """
    if not pairs:
        raise ConfigError("evaluate_pairs needs at least one pair")
    results = []
    for pair_id, style_id, style_ref, descriptor, size in pairs:
        try:
            out = sampler(style_ref, descriptor, size)
            sim, content = _pair_scores(out, style_ref, descriptor)
        except Exception as exc:  # noqa: BLE001 - recorded, not silenced
            results.append(PairResult(pair_id=pair_id, style_id=style_id,
                                      style_sim=0.0, content=0.0,
                                      cpc_05=0.0, cpc_range=0.0,
                                      failed=True, error=str(exc)))
            continue
        n = int(math.floor((hi - lo) / step + 1e-9)) + 1
        gated = [content if sim >= lo + i * step else 0.0 for i in range(n)]
        results.append(PairResult(
            pair_id=pair_id, style_id=style_id, style_sim=sim,
            content=content, cpc_05=content if sim >= 0.5 else 0.0,
            cpc_range=float(np.mean(gated))))
    ok = [p for p in results if not p.failed]
    if ok:
        aggregates = {
            "n": len(results), "n_ok": len(ok),
            "style_sim_mean": float(np.mean([p.style_sim for p in ok])),
            "style_sim_median": float(np.median([p.style_sim for p in ok])),
            "content_mean": float(np.mean([p.content for p in ok])),
            "content_median": float(np.median([p.content for p in ok])),
            "cpc_05_mean": float(np.mean([p.cpc_05 for p in ok])),
            "cpc_range_mean": float(np.mean([p.cpc_range for p in ok])),
        }
    else:
        aggregates = {"n": len(results), "n_ok": 0}
    return EvalReport(pairs=results, aggregates=aggregates)


def write_report(path: str, report: EvalReport) -> None:
    """JSONL: one line per pair, aggregate footer line; stable bytes."""
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        for p in report.pairs:
            f.write(json.dumps({
                "pair_id": p.pair_id, "style_id": p.style_id,
                "style_sim": p.style_sim, "content": p.content,
                "cpc_05": p.cpc_05, "cpc_range": p.cpc_range,
                "failed": p.failed, "error": p.error}, sort_keys=True) + "\n")
        f.write(json.dumps({"aggregates": report.aggregates},
                           sort_keys=True) + "\n")
    os.replace(tmp, path)
