"""Low-level image transforms shared by augmentation and the corruption harness.

Images are float32 ``(C, H, W)`` in [-1, 1] unless noted.
"""

from __future__ import annotations

import io

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter


def to_uint8_hwc(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round((np.asarray(x) + 1.0) * 127.5), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def from_uint8_hwc(a: np.ndarray) -> np.ndarray:
    return (a.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1).copy()


def resize(x: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bicubic resize without quantisation (each channel through a float PIL image)."""
    if x.shape[1:] == (h, w):
        return x.astype(np.float32, copy=True)
    chans = [np.asarray(Image.fromarray(np.ascontiguousarray(c, dtype=np.float32), mode="F")
                        .resize((w, h), Image.BICUBIC)) for c in x]
    return np.clip(np.stack(chans), -1.0, 1.0).astype(np.float32)


def crop_resize(x: np.ndarray, top: int, left: int, side_h: int, side_w: int) -> np.ndarray:
    _, H, W = x.shape
    return resize(x[:, top:top + side_h, left:left + side_w], H, W)


def center_crop_fraction(x: np.ndarray, frac: float) -> np.ndarray:
    """Keep the central ``frac`` of each side, then resize back."""
    _, H, W = x.shape
    h = max(1, int(round(H * frac)))
    w = max(1, int(round(W * frac)))
    if (h, w) == (H, W):
        return x.astype(np.float32, copy=True)
    return crop_resize(x, (H - h) // 2, (W - w) // 2, h, w)


def jpeg(x: np.ndarray, quality: int) -> np.ndarray:
    buf = io.BytesIO()
    Image.fromarray(to_uint8_hwc(x)).save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    return from_uint8_hwc(np.asarray(Image.open(buf).convert("RGB")))


def blur(x: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return x.astype(np.float32, copy=True)
    return gaussian_filter(x, sigma=(0, sigma, sigma), mode="reflect").astype(np.float32)


def add_noise(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise with ``sigma`` in [0, 1] intensity units (so 2*sigma in [-1, 1] units)."""
    if sigma <= 0:
        return x.astype(np.float32, copy=True)
    n = rng.standard_normal(x.shape).astype(np.float32) * np.float32(2 * sigma)
    return np.clip(x + n, -1.0, 1.0).astype(np.float32)


def rotate(x: np.ndarray, degrees: float) -> np.ndarray:
    chans = [np.asarray(Image.fromarray(np.ascontiguousarray(c, dtype=np.float32), mode="F")
                        .rotate(degrees, resample=Image.BILINEAR, fillcolor=0.0)) for c in x]
    return np.clip(np.stack(chans), -1.0, 1.0).astype(np.float32)


def grayscale(x: np.ndarray) -> np.ndarray:
    g = (0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2]).astype(np.float32)
    return np.stack([g, g, g])


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB treating the [-1, 1] range as peak-to-peak 2."""
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    return float("inf") if mse == 0 else 10 * np.log10(4.0 / mse)
