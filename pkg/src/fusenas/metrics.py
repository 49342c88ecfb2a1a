"""PSNR and SSIM on float images in [0, 1]."""

from __future__ import annotations

import json

import numpy as np
from scipy import ndimage

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10 * np.log10(peak ** 2 / mse)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    h = len(g) // 2
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    return out[h:img.shape[0] - h, h:img.shape[1] - h]


def ssim_map(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> np.ndarray:
    """Single-channel SSIM map over the fully-covered ('valid') window positions."""
    g = gaussian_window()
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2))


def ssim(a, b, peak: float = 1.0) -> float:
    """Gaussian-window SSIM averaged over positions and channels."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[:2]}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return float(np.mean([ssim_map(a[..., c], b[..., c], peak).mean() for c in range(a.shape[-1])]))


def write_report(path, rows) -> dict:
    """rows: iterable of (id, restored, reference). Writes JSON lines plus a mean row."""
    records = [{"id": i, "psnr_db": psnr(x, ref), "ssim": ssim(x, ref)} for i, x, ref in rows]
    summary = {
        "id": "__mean__",
        "psnr_db": float(np.mean([r["psnr_db"] for r in records])) if records else None,
        "ssim": float(np.mean([r["ssim"] for r in records])) if records else None,
    }
    with open(path, "w") as fh:
        for r in records + [summary]:
            fh.write(json.dumps(r) + "\n")
    return summary
