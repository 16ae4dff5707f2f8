"""Synthetic training pairs: crop a reference from a source image, then
resample the source through a random corner-offset homography (optionally
plus a smooth sinusoidal field and brightness jitter) to get the target.

Difficulty buckets are defined by the corner displacement budget at the
128px base size: easy 4px, moderate 10px, hard 20px, scaled linearly
with the pair size.  Ground truth is the inverse homography, recorded as
corner displacements.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .imaging import check_image

DIFFICULTY_CORNER_PX = {"easy": 4.0, "moderate": 10.0, "hard": 20.0}
BASE_SIZE = 128.0


@dataclass
class SynthPair:
    pair_id: str
    ref: np.ndarray                # (size, size, c) in [0, 1]
    tar: np.ndarray
    corner_offsets: np.ndarray     # (4, 2) gt displacements for warping tar onto ref
    difficulty: str
    flow: np.ndarray | None = None  # optional (size, size, 2) gt sampling grid


def procedural_image(rng: np.random.Generator, h: int, w: int, channels: int = 3) -> np.ndarray:
    """Smooth multi-scale random texture with structure at every pyramid
    level (cosine plaids plus Gaussian blobs)."""
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    base = np.zeros((h, w))
    for _ in range(6):
        fx, fy = rng.uniform(-6.0, 6.0, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        base += rng.uniform(0.3, 1.0) * np.cos(2.0 * np.pi * (fx * xs / w + fy * ys / h) + phase)
    for _ in range(5):
        cx, cy = rng.uniform(0.1, 0.9) * w, rng.uniform(0.1, 0.9) * h
        s = rng.uniform(0.03, 0.2) * min(h, w)
        base += rng.uniform(-1.5, 1.5) * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * s * s))
    img = np.empty((h, w, channels))
    for ch in range(channels):
        fx, fy = rng.uniform(-3.0, 3.0, size=2)
        tint = 0.25 * np.cos(2.0 * np.pi * (fx * xs / w + fy * ys / h) + rng.uniform(0, 2 * np.pi))
        img[:, :, ch] = base + tint
    lo, hi = img.min(), img.max()
    return 0.08 + 0.84 * (img - lo) / max(hi - lo, 1e-9)


def _bilinear(src: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Zero-border bilinear lookup of an (H, W, c) array at float coords."""
    hs, ws, c = src.shape
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    out = np.zeros((x.size, c))
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            valid = (xi >= 0) & (xi < ws) & (yi >= 0) & (yi < hs)
            vals = src[np.clip(yi, 0, hs - 1), np.clip(xi, 0, ws - 1)] * valid[:, None]
            wgt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            out += vals * wgt
    return out


def gen_pair(rng: np.random.Generator, source: np.ndarray, difficulty: str,
             size: int = 128, local_amp: float = 0.0, jitter: float = 0.0,
             with_flow: bool = False, pair_id: str = "pair") -> SynthPair:
    """Sample one aligned/misaligned pair from a source image."""
    source = check_image(source)
    hs, ws, _ = source.shape
    if hs < size or ws < size:
        raise ValueError(f"source {hs}x{ws} smaller than requested pair size {size}")
    if difficulty not in DIFFICULTY_CORNER_PX:
        raise ValueError(f"difficulty must be one of {sorted(DIFFICULTY_CORNER_PX)}")
    d = DIFFICULTY_CORNER_PX[difficulty] * size / BASE_SIZE

    oy = int(rng.integers(0, hs - size + 1))
    ox = int(rng.integers(0, ws - size + 1))
    ref = np.ascontiguousarray(source[oy:oy + size, ox:ox + size])

    delta = rng.uniform(-d, d, size=(4, 2))
    hom = geo.dlt_solve(delta, size, size).value

    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    pts = np.stack([xs.ravel(), ys.ravel(), np.ones(size * size)])
    q = hom @ pts
    sx = q[0] / q[2]
    sy = q[1] / q[2]
    if local_amp > 0.0:
        f1, f2 = rng.uniform(0.5, 2.0, size=2)
        p1, p2 = rng.uniform(0.0, 2.0 * np.pi, size=2)
        amp = rng.uniform(0.3, 1.0) * local_amp
        sx = sx + amp * np.sin(2.0 * np.pi * f1 * ys.ravel() / size + p1)
        sy = sy + amp * np.sin(2.0 * np.pi * f2 * xs.ravel() / size + p2)
    tar = _bilinear(source, sx + ox, sy + oy).reshape(size, size, -1)
    if jitter > 0.0:
        tar = np.clip(tar + rng.uniform(-jitter, jitter), 0.0, 1.0)

    hinv = np.linalg.inv(hom)
    hinv /= hinv[2, 2]
    corners = geo.image_corners(size, size)
    ch = hinv @ np.concatenate([corners.T, np.ones((1, 4))])
    gt_offsets = (ch[:2] / ch[2]).T - corners

    flow = None
    if with_flow:
        qi = hinv @ pts
        flow = np.stack([qi[0] / qi[2], qi[1] / qi[2]], axis=-1).reshape(size, size, 2)

    return SynthPair(pair_id=pair_id, ref=ref, tar=tar,
                     corner_offsets=gt_offsets, difficulty=difficulty, flow=flow)


def make_dataset(rng: np.random.Generator, count: int, difficulty: str,
                 size: int = 128, local_amp: float = 0.0, jitter: float = 0.0,
                 margin: int = 48, prefix: str = "pair") -> list[SynthPair]:
    """Pairs drawn from fresh procedural sources (one source per pair)."""
    pairs = []
    for i in range(count):
        src = procedural_image(rng, size + margin, size + margin)
        pairs.append(gen_pair(rng, src, difficulty, size=size, local_amp=local_amp,
                              jitter=jitter, pair_id=f"{prefix}{i:04d}"))
    return pairs
