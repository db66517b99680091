"""Procedurally rendered labeled image corpus used as the desk-scale "real" data.

Eight shape classes on textured, noisy backgrounds. Nuisance factors (colours,
position, scale, edge softness, sensor noise, blur) are drawn per image so
that no single low-level statistic separates real images from decoder output.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .manifest import Record, write_manifest
from .seeding import substream

CLASSES = ("circle", "square", "triangle", "hstripes", "vstripes", "checker", "ring", "cross")


def _grid(size):
    c = (np.arange(size) + 0.5) / size * 2 - 1
    return np.meshgrid(c, c, indexing="xy")


def _shape_sdf(kind, X, Y, rng):
    """Signed distance-like field, negative inside the shape (units of the [-1,1] frame)."""
    cx, cy = rng.uniform(-0.2, 0.2, 2)
    r = rng.uniform(0.45, 0.75)
    th = rng.uniform(0, np.pi)
    x, y = X - cx, Y - cy
    xr = np.cos(th) * x + np.sin(th) * y
    yr = -np.sin(th) * x + np.cos(th) * y
    if kind == "circle":
        return np.hypot(x, y) - r
    if kind == "square":
        return np.maximum(np.abs(xr), np.abs(yr)) - r * 0.8
    if kind == "triangle":
        d = -np.inf
        for k in range(3):
            a = th + 2 * np.pi * k / 3
            d = np.maximum(d, np.cos(a) * x + np.sin(a) * y - r * 0.5)
        return d
    if kind == "ring":
        return np.abs(np.hypot(x, y) - r * 0.75) - r * 0.22
    if kind == "cross":
        w = r * 0.28
        return np.minimum(np.maximum(np.abs(xr) - w, np.abs(yr) - r),
                          np.maximum(np.abs(yr) - w, np.abs(xr) - r))
    period = rng.uniform(0.7, 1.1)
    phase = rng.uniform(0, period)
    if kind == "hstripes":
        return (np.abs(((Y + phase) % period) - period / 2) - period / 4)
    if kind == "vstripes":
        return (np.abs(((X + phase) % period) - period / 2) - period / 4)
    if kind == "checker":
        a = np.sign(np.sin(np.pi * (X + phase) / period * 2)) * np.sign(np.sin(np.pi * (Y + phase) / period * 2))
        return -a * 0.05
    raise ValueError(f"unknown shape class {kind!r}")


def _colour(rng):
    return rng.uniform(0.05, 0.95, 3)


def render(class_id: int, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """Render one image as uint8 (size, size, 3)."""
    X, Y = _grid(size)
    bg0, bg1 = _colour(rng), _colour(rng)
    g_ang = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(g_ang) * X + np.sin(g_ang) * Y + 1.5) / 3
    img = bg0 * (1 - ramp[..., None]) + bg1 * ramp[..., None]
    # low-frequency texture
    for _ in range(2):
        f = rng.uniform(0.3, 1.2, 2)
        ph = rng.uniform(0, 2 * np.pi)
        img += rng.uniform(0, 0.1) * np.sin(np.pi * (f[0] * X + f[1] * Y) + ph)[..., None]

    fg = _colour(rng)
    while np.abs(fg - img.mean(axis=(0, 1))).sum() < 0.6:
        fg = _colour(rng)
    sdf = _shape_sdf(CLASSES[class_id], X, Y, rng)
    soft = rng.uniform(0.8, 2.0) * 2 / size
    alpha = 1 / (1 + np.exp(np.clip(sdf / soft, -50, 50)))
    shading = 1 + rng.uniform(-0.15, 0.15) * X + rng.uniform(-0.15, 0.15) * Y
    img = img * (1 - alpha[..., None]) + (fg * shading[..., None]) * alpha[..., None]

    blur = rng.choice([0.0, 0.0, rng.uniform(0.3, 1.0)])
    if blur > 0:
        img = gaussian_filter(img, sigma=(blur, blur, 0), mode="nearest")
    noise = rng.uniform(0.0, 0.02)
    img = img + rng.standard_normal(img.shape) * noise
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def write_corpus(root, seed: int, splits: dict, prefix: str = "real", size: int = 32,
                 manifest_name: str | None = None) -> list[Record]:
    """Render a balanced labeled corpus to PNG files plus a JSON-lines manifest.

    ``splits`` maps split name to image count. Files land in ``root/images``
    and paths in the manifest are relative to ``root``.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    records = []
    i = 0
    for split, n in splits.items():
        for j in range(n):
            cls = j % len(CLASSES)
            rng = substream(seed, f"toydata/{prefix}", i)
            arr = render(cls, rng, size)
            rid = f"{prefix}-{i:05d}"
            rel = f"images/{rid}.png"
            Image.fromarray(arr).save(root / rel, format="PNG", optimize=False)
            records.append(Record(id=rid, path=rel, label="real", generator="procedural",
                                  split=split, class_label=cls))
            i += 1
    if manifest_name:
        write_manifest(root / manifest_name, records)
    return records
