"""Restoration network: task encoders, classifier, identity prior, fusion, decoder."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from safetensors import safe_open
from safetensors.torch import load_file, save_file
from torch import Tensor, nn

from . import diffcore as dc
from .fusion import BlockSpec, FusionNetwork

TASKS = ("blur", "noise", "lowlight")
EMBED_SEED = 20210101
EMBED_CH = 32


def to_tensor(img, dtype=torch.float32) -> Tensor:
    """H x W x 3 (or a stack N x H x W x 3) array -> N x 3 x H x W tensor."""
    arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def to_image(t: Tensor) -> np.ndarray:
    return t.detach().cpu().double().numpy().transpose(0, 2, 3, 1)


def _conv(in_ch, out_ch, k=3):
    return nn.Conv2d(in_ch, out_ch, k, padding=k // 2)


class Embedder(nn.Module):
    """Frozen, seeded stand-in for a pretrained face network.

    Four conv stages (3 -> 8 -> 16 -> 32 -> 32); the first three halve the
    resolution, so the output is 32 x H/8 x W/8.
    """

    widths = (3, 8, 16, 32, EMBED_CH)

    def __init__(self, seed: int = EMBED_SEED):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            w = torch.randn(b, a, 3, 3, generator=g, dtype=torch.float64) * np.sqrt(2.0 / (9 * a))
            bias = torch.randn(b, generator=g, dtype=torch.float64) * 0.05
            self.register_buffer(f"w{i}", w.float())
            self.register_buffer(f"b{i}", bias.float())

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for i in range(4):
            h = dc.leaky_relu(dc.conv2d(h, getattr(self, f"w{i}"), getattr(self, f"b{i}")))
            if i < 3:
                h = F.avg_pool2d(h, 2)
        return h


_EMBEDDER: dict[torch.dtype, Embedder] = {}


def shared_embedder(dtype=torch.float32) -> Embedder:
    if dtype not in _EMBEDDER:
        _EMBEDDER[dtype] = Embedder().to(dtype)
    return _EMBEDDER[dtype]


def embed(face, embedder: Embedder | None = None) -> Tensor:
    """Features of one image (H x W x 3 array) or a batch tensor."""
    x = face if isinstance(face, Tensor) else to_tensor(face)
    embedder = embedder or shared_embedder(x.dtype)
    with torch.no_grad():
        return embedder(x)


def adain(content: Tensor, style: Tensor, floor: float = 1e-8) -> Tensor:
    """Re-normalise each channel of ``content`` to the spatial mean/std of ``style``.

    Channels of ``content`` with std <= ``floor`` are passed through unchanged.
    """
    if content.shape != style.shape:
        raise dc.ShapeError(f"adain shape mismatch {tuple(content.shape)} vs {tuple(style.shape)}")
    mu_c, sd_c = dc.spatial_mean(content), dc.spatial_std(content)
    mu_s, sd_s = dc.spatial_mean(style), dc.spatial_std(style)
    ok = sd_c > floor
    normed = (content - mu_c) / torch.where(ok, sd_c, torch.ones_like(sd_c))
    return torch.where(ok, sd_s * normed + mu_s, content)


def _content_key(t: Tensor) -> str:
    return hashlib.sha256(t.detach().cpu().numpy().tobytes()).hexdigest()


def identity_from_features(f_y: Tensor, clean_feats) -> Tensor:
    """Elementwise mean of the AdaIN-aligned clean features (fixed, order-free summation)."""
    clean_feats = list(clean_feats)
    if not clean_feats:
        raise ValueError("identity information needs at least one clean image")
    clean_feats.sort(key=_content_key)
    return torch.stack([adain(f, f_y) for f in clean_feats]).mean(dim=0)


def identity_info(y, clean_set, embedder: Embedder | None = None) -> Tensor:
    if len(clean_set) == 0:
        raise ValueError("identity information needs at least one clean image")
    return identity_from_features(embed(y, embedder), [embed(c, embedder) for c in clean_set])


class Encoder(nn.Module):
    """Three conv stages; the first two downsample, giving out_ch x H/4 x W/4."""

    def __init__(self, in_ch: int, width: int = 16, out_ch: int = 32):
        super().__init__()
        self.convs = nn.ModuleList([
            _conv(in_ch, width), _conv(width, width),
            _conv(width, out_ch), _conv(out_ch, out_ch),
            _conv(out_ch, out_ch), _conv(out_ch, out_ch),
        ])

    def stages(self, x: Tensor) -> list[Tensor]:
        """Outputs at full, half and quarter resolution."""
        outs, h = [], x
        for i, conv in enumerate(self.convs):
            h = dc.leaky_relu(conv(h))
            if i in (1, 3):
                outs.append(h)
                h = F.avg_pool2d(h, 2)
        return outs + [h]

    def forward(self, x: Tensor) -> Tensor:
        return self.stages(x)[-1]


class Decoder(nn.Module):
    """Two nearest-upsample + conv stages and a 3-channel head.

    ``skip_ch`` = (half-res, full-res, input) channel counts of optional
    skip tensors concatenated at the matching stage.
    """

    def __init__(self, in_ch: int, width: int = 32, skip_ch: tuple[int, int, int] = (0, 0, 0)):
        super().__init__()
        s_half, s_full, s_in = skip_ch
        self.up1 = _conv(in_ch + s_half, width)
        self.up2 = _conv(width + s_full, width // 2)
        self.merge = _conv(width // 2 + s_in, width // 2) if s_in else None
        self.head = _conv(width // 2, 3)

    def forward(self, z: Tensor, skips: tuple | None = None) -> Tensor:
        half, full, inp = skips or (None, None, None)

        def join(h, s):
            return h if s is None else dc.cat([h, s])

        h = dc.leaky_relu(self.up1(join(F.interpolate(z, scale_factor=2, mode="nearest"), half)))
        h = dc.leaky_relu(self.up2(join(F.interpolate(h, scale_factor=2, mode="nearest"), full)))
        if self.merge is not None:
            h = dc.leaky_relu(self.merge(dc.cat([h, inp])))
        return self.head(h)


_LAPLACIAN = torch.tensor([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


class Classifier(nn.Module):
    """Predicts which of (blur, noise, low-light) are present.

    The image is stacked with its Laplacian so fine-scale noise is visible
    to the first layer. Every stage contributes its per-channel mean and log
    standard deviation; ratios of band energies (the blur cue) then become
    differences the linear head can read.
    """

    def __init__(self, width: int = 16):
        super().__init__()
        self.register_buffer("laplacian", _LAPLACIAN.view(1, 1, 3, 3).repeat(3, 1, 1, 1), persistent=False)
        self.c1 = _conv(6, width)
        self.c2 = nn.Conv2d(width, 2 * width, 3, stride=2, padding=1)
        self.c3 = nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1)
        self.fc1 = nn.Linear(10 * width, 2 * width)
        self.fc2 = nn.Linear(2 * width, 3)

    def logits(self, y: Tensor) -> Tensor:
        high = F.conv2d(F.pad(y, (1, 1, 1, 1), mode="reflect"), self.laplacian.to(y.dtype), groups=3)
        h = dc.cat([y, high])
        stats = []
        for conv in (self.c1, self.c2, self.c3):
            h = dc.leaky_relu(conv(h))
            stats += [dc.spatial_mean(h), torch.log(dc.spatial_std(h) + 1e-3)]
        return self.fc2(dc.leaky_relu(self.fc1(dc.cat(stats).flatten(1))))

    def forward(self, y: Tensor) -> Tensor:
        return torch.sigmoid(self.logits(y))


def threshold(probs) -> np.ndarray:
    return (np.asarray(probs) >= 0.5).astype(np.int64)


@dataclass
class ModelConfig:
    enc_width: int = 16
    enc_ch: int = 32
    fusion_width: int = 32
    block_ch: int = 8
    dec_width: int = 128
    blocks: int = 2
    cells: int = 3
    iden_ch: int = 4
    skip: bool = True
    kinds: list[str] | None = None
    shared_alpha: bool = True
    genotype: list | None = field(default=None)

    def genotype_specs(self):
        if self.genotype is None:
            return None
        if self.genotype and isinstance(self.genotype[0], list):
            return [[BlockSpec(**b) for b in cell] for cell in self.genotype]
        return [BlockSpec(**b) for b in self.genotype]


class Restorer(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        c = self.cfg
        in_ch = 3 + 3 + c.iden_ch
        self.iden_proj = nn.Conv2d(EMBED_CH, c.iden_ch, 1)
        self.encoders = nn.ModuleDict({t: Encoder(in_ch, c.enc_width, c.enc_ch) for t in TASKS})
        self.film = nn.Linear(3, 3 * c.enc_ch)
        nn.init.zeros_(self.film.weight)
        nn.init.zeros_(self.film.bias)
        self.fusion = FusionNetwork(3 * c.enc_ch, c.fusion_width, c.block_ch, c.blocks, c.cells,
                                    c.kinds, c.shared_alpha, c.genotype_specs())
        skips = (3 * c.enc_ch, 3 * c.enc_width, in_ch) if c.skip else (0, 0, 0)
        self.decoder = Decoder(c.fusion_width, c.dec_width, skip_ch=skips)

    def condition(self, y: Tensor, c_hat: Tensor, iden: Tensor | None) -> Tensor:
        n, _, h, w = y.shape
        cls = c_hat.to(y.dtype).view(n, 3, 1, 1).expand(n, 3, h, w)
        if iden is None:
            prior = torch.zeros(n, self.cfg.iden_ch, h, w, dtype=y.dtype)
        else:
            prior = self.iden_proj(F.interpolate(iden, size=(h, w), mode="bilinear", align_corners=False))
        return dc.cat([y, cls, prior])

    def features(self, x: Tensor) -> dict[str, list[Tensor]]:
        """Per-task encoder stage outputs (full, half, quarter resolution)."""
        return {t: enc.stages(x) for t, enc in self.encoders.items()}

    def forward(self, y: Tensor, c_hat: Tensor, iden: Tensor | None = None,
                drop: dict[str, bool] | None = None) -> Tensor:
        """``drop`` zeroes every output of the named encoders (ablation / sanity checks)."""
        x = self.condition(y, c_hat, iden)
        feats = self.features(x)
        if drop:
            feats = {t: [torch.zeros_like(f) for f in fs] if drop.get(t) else fs for t, fs in feats.items()}
        fused = dc.cat([feats[t][2] for t in TASKS])
        scale = 1 + self.film(c_hat.to(y.dtype))
        fused = fused * scale[:, :, None, None]
        skips = None
        if self.cfg.skip:
            skips = (dc.cat([feats[t][1] for t in TASKS]), dc.cat([feats[t][0] for t in TASKS]), x)
        out = self.decoder(self.fusion(fused), skips)
        return torch.clamp(out + 0.5, 0.0, 1.0)

    def weight_parameters(self):
        return [p for n, p in self.named_parameters() if not n.endswith("fusion.alpha")]

    def arch_parameters(self):
        return [self.fusion.alpha] if self.fusion.searching else []


# -- checkpoints ---------------------------------------------------------------

def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


META_KEY = "fusenas"


def save_checkpoint(path, module: nn.Module, config: dict, kind: str) -> str:
    """Named arrays plus JSON config in the metadata. Returns the file's sha256.

    All metadata sits under one key as a sorted JSON string: safetensors
    writes its metadata map in arbitrary key order, which would make the
    bytes differ between otherwise identical saves.
    """
    tensors = {k: v.detach().cpu().contiguous().clone() for k, v in module.state_dict().items()}
    meta = {"kind": kind, "config": config, "config_hash": config_hash(config)}
    save_file(tensors, str(path), metadata={META_KEY: json.dumps(meta, sort_keys=True)})
    return file_hash(path)


def read_checkpoint(path) -> tuple[dict[str, Tensor], dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with safe_open(str(path), framework="pt") as fh:
        raw = (fh.metadata() or {}).get(META_KEY)
    if raw is None:
        raise ValueError(f"{path} is not a fusenas checkpoint")
    return load_file(str(path)), json.loads(raw)


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def restorer_config(model: Restorer) -> dict:
    return {"model": asdict(model.cfg)}


def load_restorer(path) -> tuple[Restorer, dict]:
    tensors, meta = read_checkpoint(path)
    if meta.get("kind") != "restorer":
        raise ValueError(f"{path} is a {meta.get('kind')!r} checkpoint, not a restorer")
    model = Restorer(ModelConfig(**meta["config"]["model"]))
    model.load_state_dict(tensors)
    return model, meta


def load_classifier(path) -> Classifier:
    tensors, meta = read_checkpoint(path)
    cls = Classifier(**meta["config"].get("classifier", {}))
    cls.load_state_dict(tensors)
    return cls
