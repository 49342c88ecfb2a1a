"""Synthetic blur + low-light + noise degradation.

Images are H x W x 3 float arrays in [0, 1]. The camera part of the pipeline
works on a single-channel RGGB mosaic of linear irradiance:

    clean -> blur (intensity domain) -> inverse CRF -> mosaic -> * r
          -> + shot/read noise -> bilinear demosaic -> CRF -> clip
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

GAMMA = 2.2
KERNEL_MIN, KERNEL_MAX = 13, 27
R_RANGE = (0.05, 0.5)
SIGMA_S_RANGE = (0.01, 0.16)
# training draws sigma_c from [0.01, 0.06]; the evaluation grids go up to 0.1
SIGMA_C_RANGE = (0.01, 0.1)
SIGMA_C_TRAIN = (0.01, 0.06)
GAUSS_SIGMA_RANGE = (1.0, 3.0)

MANIFEST_FIELDS = ("id", "clean_path", "degraded_path", "label", "kernel_kind", "kernel_size",
                   "r", "sigma_s", "sigma_c", "seed")


class ConfigError(ValueError):
    pass


def derive_seed(seed: int, key: str) -> int:
    digest = hashlib.sha256(f"{seed}:{key}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


# -- kernels -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BlurKernel:
    data: np.ndarray
    kind: str  # motion | gaussian | delta
    params: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.data.shape[0]


def _check_size(size: int) -> None:
    if size % 2 == 0:
        raise ConfigError(f"kernel size must be odd, got {size}")
    if not KERNEL_MIN <= size <= KERNEL_MAX:
        raise ConfigError(f"kernel size must lie in [{KERNEL_MIN}, {KERNEL_MAX}], got {size}")


def delta_kernel(size: int = KERNEL_MIN) -> BlurKernel:
    _check_size(size)
    k = np.zeros((size, size))
    k[size // 2, size // 2] = 1.0
    return BlurKernel(k, "delta", {"size": size})


def motion_trajectory(seed: int, steps: int = 50, velocity: float = 0.7,
                      turn_sigma: float = 0.5, jump_prob: float = 0.05) -> np.ndarray:
    """Markov random walk of ``steps`` points, shape (steps, 2) as (x, y)."""
    rng = np.random.default_rng(seed)
    angle = rng.uniform(0, 2 * np.pi)
    pts = np.zeros((steps, 2))
    for t in range(1, steps):
        if rng.random() < jump_prob:
            angle = rng.uniform(0, 2 * np.pi)
        else:
            angle += rng.normal(0.0, turn_sigma)
        pts[t] = pts[t - 1] + velocity * np.array([np.cos(angle), np.sin(angle)])
    return pts


def rasterize_trajectory(pts: np.ndarray, size: int) -> np.ndarray:
    """Centre the path, shrink it to fit if needed, bilinear-splat equal weights."""
    pts = pts - (pts.min(axis=0) + pts.max(axis=0)) / 2
    half = (size - 1) / 2
    reach = np.abs(pts).max()
    if reach > half:
        pts = pts * (half / reach)
    k = np.zeros((size, size))
    for x, y in pts + half:
        x0, y0 = int(np.floor(x)), int(np.floor(y))
        fx, fy = x - x0, y - y0
        for dx, dy, w in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                          (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
            if w > 0 and x0 + dx < size and y0 + dy < size:
                k[y0 + dy, x0 + dx] += w
    return k / k.sum()


def gen_motion_kernel(seed: int, size: int, steps: int = 50, velocity: float = 0.7) -> BlurKernel:
    _check_size(size)
    k = rasterize_trajectory(motion_trajectory(seed, steps, velocity), size)
    return BlurKernel(k, "motion", {"seed": seed, "size": size})


def gen_gaussian_kernel(sigma_x: float, sigma_y: float, angle: float, size: int | None = None) -> BlurKernel:
    if sigma_x <= 0 or sigma_y <= 0:
        raise ConfigError(f"Gaussian sigmas must be positive, got {sigma_x}, {sigma_y}")
    lo, hi = GAUSS_SIGMA_RANGE
    if not (lo <= sigma_x <= hi and lo <= sigma_y <= hi):
        raise ConfigError(f"Gaussian sigmas must lie in [{lo}, {hi}], got {sigma_x}, {sigma_y}")
    if size is None:
        size = max(KERNEL_MIN, 2 * math.ceil(3 * max(sigma_x, sigma_y)) + 1)
    _check_size(size)
    half = size // 2
    ys, xs = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    c, s = np.cos(angle), np.sin(angle)
    u = c * xs + s * ys
    v = -s * xs + c * ys
    k = np.exp(-u ** 2 / (2 * sigma_x ** 2) - v ** 2 / (2 * sigma_y ** 2))
    return BlurKernel(k / k.sum(), "gaussian",
                      {"sigma_x": sigma_x, "sigma_y": sigma_y, "angle": angle, "size": size})


def gaussian_grid(count: int = 12) -> list[BlurKernel]:
    """Anisotropic kernels over sigma pairs x orientations (3 x 4 = 12 by default)."""
    pairs = [(1.0, 2.0), (1.0, 3.0), (2.0, 3.0)]
    angles = [0.0, np.pi / 4, np.pi / 2, 3 * np.pi / 4]
    grid = [gen_gaussian_kernel(a, b, t) for (a, b), t in product(pairs, angles)]
    return grid[:count]


def motion_bank(count: int = 40, seed: int = 0) -> list[BlurKernel]:
    sizes = list(range(KERNEL_MIN, KERNEL_MAX + 1, 2))
    return [gen_motion_kernel(derive_seed(seed, f"motion{i}"), sizes[i % len(sizes)]) for i in range(count)]


# -- configuration -------------------------------------------------------------

@dataclass(frozen=True)
class DegradationLabel:
    b: int = 0
    n: int = 0
    l: int = 0

    def as_list(self) -> list[int]:
        return [self.b, self.n, self.l]


@dataclass(frozen=True, eq=False)
class DegradationConfig:
    blur: BlurKernel | None = None
    low_light_r: float | None = None
    sigma_s: float | None = None
    sigma_c: float | None = None
    seed: int = 0

    @property
    def noisy(self) -> bool:
        return self.sigma_s is not None

    @property
    def label(self) -> DegradationLabel:
        return DegradationLabel(int(self.blur is not None), int(self.noisy), int(self.low_light_r is not None))

    def validate(self) -> None:
        if self.blur is not None:
            k = self.blur.data
            if k.ndim != 2 or k.shape[0] != k.shape[1]:
                raise ConfigError(f"blur kernel must be square, got {k.shape}")
            _check_size(k.shape[0])
            if k.min() < 0 or abs(k.sum() - 1) > 1e-6:
                raise ConfigError("blur kernel must be non-negative and sum to 1")
        if self.low_light_r is not None and not R_RANGE[0] <= self.low_light_r <= R_RANGE[1]:
            raise ConfigError(f"low-light factor {self.low_light_r} outside {R_RANGE}")
        if (self.sigma_s is None) != (self.sigma_c is None):
            raise ConfigError("sigma_s and sigma_c must be given together")
        if self.noisy:
            if not SIGMA_S_RANGE[0] <= self.sigma_s <= SIGMA_S_RANGE[1]:
                raise ConfigError(f"sigma_s {self.sigma_s} outside {SIGMA_S_RANGE}")
            if not SIGMA_C_RANGE[0] <= self.sigma_c <= SIGMA_C_RANGE[1]:
                raise ConfigError(f"sigma_c {self.sigma_c} outside {SIGMA_C_RANGE}")


@dataclass(eq=False)
class SamplePair:
    clean: np.ndarray
    degraded: np.ndarray
    label: DegradationLabel
    config: DegradationConfig
    id: str


def sample_config(rng: np.random.Generator, label: DegradationLabel, seed: int) -> DegradationConfig:
    """Random configuration with exactly the degradations flagged in ``label``."""
    blur = None
    if label.b:
        if rng.random() < 0.5:
            size = int(rng.choice(np.arange(KERNEL_MIN, KERNEL_MAX + 1, 2)))
            blur = gen_motion_kernel(int(rng.integers(2 ** 31)), size)
        else:
            sx, sy = rng.uniform(*GAUSS_SIGMA_RANGE, size=2)
            blur = gen_gaussian_kernel(float(sx), float(sy), float(rng.uniform(0, np.pi)))
    r = float(rng.uniform(*R_RANGE)) if label.l else None
    ss = float(rng.uniform(*SIGMA_S_RANGE)) if label.n else None
    sc = float(rng.uniform(*SIGMA_C_TRAIN)) if label.n else None
    return DegradationConfig(blur, r, ss, sc, seed)


# -- camera model --------------------------------------------------------------

def crf(t: np.ndarray) -> np.ndarray:
    """Gamma camera response; odd-extended so noisy negatives survive until the final clip."""
    return np.sign(t) * np.abs(t) ** (1 / GAMMA)


def inverse_crf(t: np.ndarray) -> np.ndarray:
    return np.clip(t, 0, None) ** GAMMA


def bayer_masks(h: int, w: int) -> np.ndarray:
    """Boolean RGGB masks, shape (3, h, w)."""
    rows, cols = np.mgrid[0:h, 0:w]
    r = (rows % 2 == 0) & (cols % 2 == 0)
    b = (rows % 2 == 1) & (cols % 2 == 1)
    return np.stack([r, ~(r | b), b])


def mosaic(rgb: np.ndarray) -> np.ndarray:
    m = bayer_masks(*rgb.shape[:2])
    return (rgb.transpose(2, 0, 1) * m).sum(axis=0)


_K_RB = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.float64) / 4
_K_G = np.array([[0, 1, 0], [1, 4, 1], [0, 1, 0]], dtype=np.float64) / 4


def demosaic(bayer: np.ndarray) -> np.ndarray:
    """Bilinear demosaic as normalised convolution (exact on constant images, border-safe)."""
    masks = bayer_masks(*bayer.shape).astype(np.float64)
    out = []
    for c, kern in enumerate((_K_RB, _K_G, _K_RB)):
        num = ndimage.convolve(bayer * masks[c], kern, mode="constant")
        den = ndimage.convolve(masks[c], kern, mode="constant")
        out.append(num / den)
    return np.stack(out, axis=-1)


def camera_noise(irradiance: np.ndarray, sigma_s: float, sigma_c: float,
                 rng: np.random.Generator) -> np.ndarray:
    """Signal-dependent plus stationary Gaussian noise: Var = L * sigma_s^2 + sigma_c^2."""
    shot = np.sqrt(np.clip(irradiance, 0, None)) * sigma_s * rng.standard_normal(irradiance.shape)
    read = sigma_c * rng.standard_normal(irradiance.shape)
    return shot + read


def blur_image(x: np.ndarray, kernel: BlurKernel) -> np.ndarray:
    return np.stack([ndimage.convolve(x[..., c], kernel.data, mode="reflect")
                     for c in range(x.shape[-1])], axis=-1)


def apply_degradation(x: np.ndarray, cfg: DegradationConfig, sample_id: str = "") -> SamplePair:
    cfg.validate()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[-1] != 3:
        raise ConfigError(f"expected an H x W x 3 image, got {x.shape}")
    if x.min() < 0 or x.max() > 1:
        raise ConfigError("clean image must lie in [0, 1]")
    out = x.copy()
    if cfg.blur is not None:
        out = blur_image(out, cfg.blur)
    if cfg.low_light_r is not None or cfg.noisy:
        irr = mosaic(inverse_crf(out))
        if cfg.low_light_r is not None:
            irr = cfg.low_light_r * irr
        if cfg.noisy:
            irr = irr + camera_noise(irr, cfg.sigma_s, cfg.sigma_c, np.random.default_rng(cfg.seed))
        out = crf(demosaic(irr))
    out = np.clip(out, 0.0, 1.0)
    return SamplePair(x, out, cfg.label, cfg, sample_id)


# -- image io ------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_image(path, img: np.ndarray) -> None:
    arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def list_images(directory) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))


# -- test sets -----------------------------------------------------------------

TESTSETS = ("Test-B", "Test-N", "Test-L", "Test-BN", "Test-BNL")


def testset_grid(name: str, n_motion: int = 40, n_gauss: int = 12, seed: int = 0) -> list[dict]:
    """Parameter combinations of one evaluation set, as dicts of config fields."""
    kernels = motion_bank(n_motion, seed) + gaussian_grid(n_gauss)
    noise_grid = list(product([0.05, 0.1], [0.05, 0.1]))
    if name == "Test-B":
        return [{"blur": k} for k in kernels]
    if name == "Test-N":
        return [{"sigma_s": s, "sigma_c": c} for s, c in noise_grid]
    if name == "Test-L":
        rs = [0.1, 0.15, 0.2, 0.25, 0.3, 0.35]
        return [{"low_light_r": r, "sigma_s": s, "sigma_c": c} for r, (s, c) in product(rs, noise_grid)]
    if name == "Test-BN":
        return [{"blur": k, "sigma_s": 0.1, "sigma_c": 0.05} for k in kernels]
    if name == "Test-BNL":
        return [{"blur": k, "low_light_r": r, "sigma_s": 0.1, "sigma_c": 0.05}
                for k, r in product(kernels, [0.15, 0.3])]
    raise ConfigError(f"unknown test set {name!r}; expected one of {TESTSETS}")


def manifest_record(pair: SamplePair, clean_path, degraded_path) -> dict:
    cfg = pair.config
    rec = {
        "id": pair.id,
        "clean_path": str(clean_path),
        "degraded_path": str(degraded_path),
        "label": pair.label.as_list(),
        "kernel_kind": cfg.blur.kind if cfg.blur is not None else None,
        "kernel_size": cfg.blur.size if cfg.blur is not None else None,
        "r": cfg.low_light_r,
        "sigma_s": cfg.sigma_s,
        "sigma_c": cfg.sigma_c,
        "seed": cfg.seed,
    }
    assert tuple(rec) == MANIFEST_FIELDS
    return rec


def write_manifest(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_manifest(path) -> list[dict]:
    base = Path(path).parent
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        for key in ("clean_path", "degraded_path"):
            p = Path(rec[key])
            rec[key] = str(p if p.is_absolute() else base / p)
        out.append(rec)
    return out


def _emit(pairs_and_ids, clean_paths, out_dir: Path) -> list[dict]:
    img_dir = out_dir / "degraded"
    img_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for pair, clean_path in zip(pairs_and_ids, clean_paths):
        dpath = img_dir / f"{pair.id}.png"
        write_image(dpath, pair.degraded)
        records.append(manifest_record(pair, Path(clean_path).resolve(), dpath.relative_to(out_dir)))
    write_manifest(out_dir / "manifest.jsonl", records)
    return records


def build_testset(name: str, clean_dir, out_dir, seed: int = 0, count: int | None = None,
                  n_motion: int = 40, n_gauss: int = 12) -> list[dict]:
    """Degrade every clean image with every grid setting of ``name``; writes PNGs + manifest."""
    clean = list_images(clean_dir)[:count]
    if not clean:
        raise ConfigError(f"no clean images found in {clean_dir}")
    grid = testset_grid(name, n_motion, n_gauss, seed)
    out_dir = Path(out_dir)
    pairs, paths = [], []
    for path in clean:
        x = read_image(path)
        for g, params in enumerate(grid):
            sid = f"{name}_{path.stem}_{g:04d}"
            cfg = DegradationConfig(seed=derive_seed(seed, sid), **params)
            pairs.append(apply_degradation(x, cfg, sid))
            paths.append(path)
    return _emit(pairs, paths, out_dir)


ALL_LABELS = [DegradationLabel(*bits) for bits in product((0, 1), repeat=3)]


def build_trainset(clean_dir, out_dir, seed: int = 0, count: int | None = None) -> list[dict]:
    """One sample per label combination (8 per clean image), parameters drawn at random."""
    clean = list_images(clean_dir)[:count]
    if not clean:
        raise ConfigError(f"no clean images found in {clean_dir}")
    pairs, paths = [], []
    for path in clean:
        x = read_image(path)
        for label in ALL_LABELS:
            sid = f"train_{path.stem}_{label.b}{label.n}{label.l}"
            s = derive_seed(seed, sid)
            cfg = sample_config(np.random.default_rng(s), label, s)
            pairs.append(apply_degradation(x, cfg, sid))
            paths.append(path)
    return _emit(pairs, paths, Path(out_dir))
