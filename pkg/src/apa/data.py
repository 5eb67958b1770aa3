"""Deterministic generator for the labeled geometric-shape corpus.

Four classes (circle, square, triangle, cross) rendered anti-aliased at 32x32
over a two-color gradient background. Running the module writes a preview
grid::

    python -m apa.data --out shapes.png
"""

from __future__ import annotations

import argparse
import math

import numpy as np
import torch

CLASSES = ("circle", "square", "triangle", "cross")
SIZE = 32
_SUPERSAMPLE = 4


JITTER = 2.0  # centre offset range in pixels
MAX_ROT = math.pi / 9  # rotation range in radians, symmetric about axis-aligned


def _shape_mask(kind, rng, size=SIZE, ss=_SUPERSAMPLE):
    n = size * ss
    coords = (np.arange(n) + 0.5) / ss
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    cx, cy = size / 2 + rng.uniform(-JITTER, JITTER, size=2)
    r = rng.uniform(8.0, 11.0)
    rot = rng.uniform(-MAX_ROT, MAX_ROT)
    dx, dy = xx - cx, yy - cy
    u = dx * math.cos(rot) + dy * math.sin(rot)
    v = -dx * math.sin(rot) + dy * math.cos(rot)
    if kind == "circle":
        m = dx**2 + dy**2 <= r**2
    elif kind == "square":
        s = 0.8 * r
        m = (np.abs(u) <= s) & (np.abs(v) <= s)
    elif kind == "triangle":
        # equilateral triangle as the intersection of three half-planes
        rr = 1.25 * r
        m = np.ones_like(u, dtype=bool)
        for k in range(3):
            ang = 2 * math.pi * k / 3
            m &= (u * math.cos(ang) + v * math.sin(ang)) <= rr / 2
    elif kind == "cross":
        w = 0.33 * r
        m = ((np.abs(u) <= w) & (np.abs(v) <= r)) | ((np.abs(v) <= w) & (np.abs(u) <= r))
    else:
        raise ValueError(f"unknown shape {kind!r}")
    return m.reshape(size, ss, size, ss).mean(axis=(1, 3))


def render(label, rng, size=SIZE):
    """One ``3 x size x size`` float image in [0, 1] of class ``label``."""
    mask = _shape_mask(CLASSES[label], rng, size)
    c1, c2 = rng.uniform(0.0, 1.0, size=(2, 3))
    ang = rng.uniform(0, 2 * math.pi)
    g = np.linspace(-1, 1, size)
    yy, xx = np.meshgrid(g, g, indexing="ij")
    ramp = (0.5 + 0.5 * (xx * math.cos(ang) + yy * math.sin(ang)) / math.sqrt(2))[None]
    bg = c1[:, None, None] * (1 - ramp) + c2[:, None, None] * ramp
    bg_mean = bg.mean(axis=(1, 2))
    for _ in range(100):
        fg = rng.uniform(0.0, 1.0, size=3)
        if np.linalg.norm(fg - bg_mean) >= 0.5:
            break
    img = bg * (1 - mask[None]) + fg[:, None, None] * mask[None]
    img = img + rng.normal(0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def make_split(n, seed, split, size=SIZE, num_classes=len(CLASSES)):
    """Balanced split of ``n`` images; ``split`` picks an independent stream."""
    rng = np.random.default_rng([seed, {"train": 0, "eval": 1}[split]])
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    images = np.stack([render(int(y), rng, size) for y in labels]).astype(np.float32)
    return torch.from_numpy(images), torch.from_numpy(labels.astype(np.int64))


def make_dataset(n_train=512, n_eval=128, seed=0):
    """``{"train": (x, y), "eval": (x, y)}`` with x in [0, 1], shape ``[n, 3, 32, 32]``."""
    return {
        "train": make_split(n_train, seed, "train"),
        "eval": make_split(n_eval, seed, "eval"),
    }


def main(argv=None):
    from apa.io import save_png

    ap = argparse.ArgumentParser(description="Render a preview grid of the shape corpus.")
    ap.add_argument("--out", default="shapes.png")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n", type=int, default=64)
    args = ap.parse_args(argv)
    x, _ = make_split(args.n, args.seed, "train")
    rows = int(math.ceil(args.n / 8))
    grid = torch.ones(3, rows * (SIZE + 2), 8 * (SIZE + 2))
    for i in range(args.n):
        r, c = divmod(i, 8)
        grid[:, r * (SIZE + 2):r * (SIZE + 2) + SIZE, c * (SIZE + 2):c * (SIZE + 2) + SIZE] = x[i]
    save_png(grid, args.out)


if __name__ == "__main__":
    main()
