"""Seeded procedural face-like images standing in for a face dataset."""

from __future__ import annotations

import numpy as np
from scipy import ndimage


def _ellipse(h, w, cy, cx, ry, rx, angle=0.0):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    ys, xs = (ys + 0.5) / h - cy, (xs + 0.5) / w - cx
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * xs + s * ys, -s * xs + c * ys
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def toy_face(seed: int, size: int = 32) -> np.ndarray:
    """Head, hair, eyes and mouth on a vertical-gradient background, lightly smoothed."""
    rng = np.random.default_rng(seed)
    h = w = size
    top, bottom = rng.uniform(0.45, 0.95, 3), rng.uniform(0.3, 0.9, 3)
    t = np.linspace(0, 1, h)[:, None, None]
    img = np.broadcast_to(top * (1 - t) + bottom * t, (h, w, 3)).copy()

    skin = np.array([0.85, 0.65, 0.5]) * rng.uniform(0.6, 1.1) + rng.uniform(-0.08, 0.08, 3)
    hair = rng.uniform(0.05, 0.6, 3)
    cy, cx = 0.52 + rng.uniform(-0.04, 0.04), 0.5 + rng.uniform(-0.05, 0.05)
    ry, rx = rng.uniform(0.32, 0.4), rng.uniform(0.24, 0.32)
    tilt = rng.uniform(-0.2, 0.2)

    img[_ellipse(h, w, cy - 0.06, cx, ry, rx * 1.1, tilt)] = hair
    face = _ellipse(h, w, cy + 0.04, cx, ry * 0.9, rx, tilt)
    img[face] = skin
    eye_dx, eye_y = rx * rng.uniform(0.35, 0.5), cy - ry * rng.uniform(0.05, 0.2)
    eye = rng.uniform(0.0, 0.35, 3)
    for side in (-1, 1):
        img[_ellipse(h, w, eye_y, cx + side * eye_dx, 0.045, 0.07, tilt)] = [0.95, 0.95, 0.95]
        img[_ellipse(h, w, eye_y, cx + side * eye_dx, 0.035, 0.035)] = eye
    mouth = skin * np.array([0.8, 0.45, 0.45])
    img[_ellipse(h, w, cy + ry * rng.uniform(0.45, 0.6), cx, 0.035, rx * rng.uniform(0.3, 0.55), tilt)] = mouth
    img = ndimage.gaussian_filter(img, sigma=(0.6, 0.6, 0))
    return np.clip(img, 0.0, 1.0)


def photometric_variants(img: np.ndarray, seed: int, n: int = 3) -> list[np.ndarray]:
    """Mild gamma / contrast jitter of one image, mimicking other photos of the same person."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        gamma = rng.uniform(0.85, 1.15)
        contrast = rng.uniform(0.9, 1.1)
        v = img ** gamma
        v = (v - v.mean()) * contrast + v.mean()
        out.append(np.clip(v, 0.0, 1.0))
    return out
