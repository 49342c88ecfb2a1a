"""Training: encoder pretraining, alternating architecture search, final training."""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import diffcore as dc
from .degrade import DegradationLabel, apply_degradation, derive_seed, read_image, read_manifest, sample_config
from .faces import photometric_variants, toy_face
from .fusion import FusionCell, derive_architecture, edge_count
from .losses import LossWeights, final_loss, l2_loss
from .model import (Classifier, Decoder, Encoder, ModelConfig, Restorer, shared_embedder,
                    identity_from_features, restorer_config, save_checkpoint, to_tensor)
from .ops import OPERATOR_KINDS, WIENER_EPS

TASK_LABELS = {"blur": (1, 0, 0), "noise": (0, 1, 0), "lowlight": (0, 0, 1)}


# -- configuration -------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 1e-3
    iterations: int = 2000
    alpha_lr: float = 3e-3
    seed: int = 0
    iden_dropout: float = 0.25
    resolution: int = 32
    lambda_per: float = 0.04
    lambda_iden: float = 0.003
    blocks: int = 2
    warmup: int = 0
    checkpoint_every: int = 0

    def validate(self) -> None:
        for name in ("batch_size", "lr", "alpha_lr", "resolution", "blocks"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("iterations", "seed", "warmup", "checkpoint_every", "lambda_per", "lambda_iden"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.resolution % 8:
            raise ValueError(f"resolution must be a multiple of 8, got {self.resolution}")
        if not 0 <= self.iden_dropout <= 1:
            raise ValueError(f"iden_dropout must be a probability, got {self.iden_dropout}")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_per, self.lambda_iden)


DESK_PRESET = TrainConfig()
# reference values of the original large-scale setup; never exercised at desk scale
REFERENCE_PRESET = TrainConfig(batch_size=40, lr=5e-4, iterations=1_000_000, resolution=224, blocks=12)


def parse_config_text(text: str) -> dict[str, str]:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.optionxform = str
    cp.read_string("[train]\n" + text)
    return dict(cp["train"])


def load_train_config(path=None, overrides: dict | None = None) -> TrainConfig:
    """Flat ``key = value`` file; ``overrides`` (e.g. CLI flags) win over file values."""
    raw = parse_config_text(Path(path).read_text()) if path else {}
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    types = {f.name: f.type for f in fields(TrainConfig)}
    unknown = set(raw) - set(types)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for k, v in raw.items():
        kwargs[k] = (float if types[k] == "float" else int)(v)
    cfg = replace(DESK_PRESET, **kwargs)
    cfg.validate()
    return cfg


def seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


# -- data ----------------------------------------------------------------------

@dataclass
class PairSet:
    ids: list[str]
    degraded: Tensor
    clean: Tensor
    labels: Tensor
    clean_sets: Tensor | None = None  # N x n x 3 x H x W

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "PairSet":
        idx = list(idx)
        t = torch.as_tensor(idx, dtype=torch.long)
        return PairSet([self.ids[i] for i in idx], self.degraded[t], self.clean[t], self.labels[t],
                       None if self.clean_sets is None else self.clean_sets[t])


@dataclass
class Prior:
    """Embedder-derived tensors cached once per run."""
    iden: Tensor          # N x C x h x w
    clean_feats: Tensor   # N x n x C x h x w


def compute_prior(data: PairSet) -> Prior | None:
    if data.clean_sets is None:
        return None
    emb = shared_embedder()
    with torch.no_grad():
        f_y = emb(data.degraded)
        n, k = data.clean_sets.shape[:2]
        feats = emb(data.clean_sets.flatten(0, 1)).view(n, k, *f_y.shape[1:])
        iden = torch.stack([identity_from_features(f_y[i:i + 1], list(feats[i, :, None]))[0]
                            for i in range(n)])
    return Prior(iden, feats)


def make_pairs(count: int, labels, resolution: int = 32, seed: int = 0, n_variants: int = 3,
               prefix: str = "toy") -> PairSet:
    """Toy faces degraded with random parameters; labels cycle through ``labels``."""
    ids, ys, xs, cs, sets = [], [], [], [], []
    labels = [lb if isinstance(lb, DegradationLabel) else DegradationLabel(*lb) for lb in labels]
    for i in range(count):
        sid = f"{prefix}{i:05d}"
        s = derive_seed(seed, sid)
        face = toy_face(s, resolution)
        label = labels[i % len(labels)]
        pair = apply_degradation(face, sample_config(np.random.default_rng(s), label, s), sid)
        ids.append(sid)
        ys.append(pair.degraded)
        xs.append(pair.clean)
        cs.append(label.as_list())
        if n_variants:
            sets.append(np.stack(photometric_variants(face, s + 1, n_variants)))
    return PairSet(ids, to_tensor(np.stack(ys)), to_tensor(np.stack(xs)),
                   torch.tensor(cs, dtype=torch.float32),
                   torch.stack([to_tensor(s) for s in sets]) if n_variants else None)


def load_pairs(manifest, n_variants: int = 3) -> PairSet:
    """Pairs from a synth manifest; identity sets are photometric variants of each clean image."""
    records = read_manifest(manifest)
    if not records:
        raise ValueError(f"manifest {manifest} is empty")
    ids, ys, xs, cs, sets = [], [], [], [], []
    for rec in records:
        x = read_image(rec["clean_path"])
        ids.append(rec["id"])
        xs.append(x)
        ys.append(read_image(rec["degraded_path"]))
        cs.append(rec["label"])
        if n_variants:
            sets.append(np.stack(photometric_variants(x, derive_seed(0, rec["id"]), n_variants)))
    shapes = {a.shape for a in xs + ys}
    if len(shapes) != 1:
        raise ValueError(f"all images must share one size, got {sorted(shapes)}")
    return PairSet(ids, to_tensor(np.stack(ys)), to_tensor(np.stack(xs)),
                   torch.tensor(cs, dtype=torch.float32),
                   torch.stack([to_tensor(s) for s in sets]) if n_variants else None)


def split_by_hash(ids) -> tuple[list[int], list[int]]:
    """Deterministic ~50/50 split: (weight-split indices, alpha-split indices)."""
    w, a = [], []
    for i, sid in enumerate(ids):
        (a if hashlib.sha256(sid.encode()).digest()[0] & 1 else w).append(i)
    return w, a


# -- batching ------------------------------------------------------------------

@dataclass(frozen=True)
class Batch:
    split: str
    index: Tensor


def batches(indices, batch_size: int, split: str, gen: torch.Generator) -> Iterator[Batch]:
    """Endless stream of shuffled batches drawn from ``indices``, tagged with ``split``."""
    pool = torch.as_tensor(list(indices), dtype=torch.long)
    if len(pool) == 0:
        raise ValueError(f"split {split!r} is empty")
    size = min(batch_size, len(pool))
    while True:
        perm = pool[torch.randperm(len(pool), generator=gen)]
        for s in range(0, len(perm) - size + 1, size):
            yield Batch(split, perm[s:s + size])


# -- logging -------------------------------------------------------------------

def curve_record(iteration: int, split: str, comps: dict) -> dict:
    return {"iteration": iteration, "split": split, "l2": comps["l2"], "per": comps["per"],
            "iden": comps["iden"], "total": comps["total"]}


def write_curve(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def smoothed(values, window: int = 50) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    window = min(window, len(v))
    return np.convolve(v, np.ones(window) / window, mode="valid")


# -- core steps ----------------------------------------------------------------

def condition_input(y: Tensor, labels: Tensor, iden_ch: int = 4) -> Tensor:
    """Encoder input without identity information (used for pretraining)."""
    n, _, h, w = y.shape
    return torch.cat([y, labels.view(n, 3, 1, 1).expand(n, 3, h, w), torch.zeros(n, iden_ch, h, w)], 1)


def restorer_loss(model: Restorer, data: PairSet, prior: Prior | None, batch: Batch,
                  weights: LossWeights, gen: torch.Generator, dropout: float):
    idx = batch.index
    y, x, c = data.degraded[idx], data.clean[idx], data.labels[idx]
    iden = clean_feats = None
    if prior is not None:
        iden, clean_feats = prior.iden[idx], prior.clean_feats[idx]
        keep = (torch.rand(len(idx), generator=gen) >= dropout).to(iden.dtype)
        iden = iden * keep[:, None, None, None]
    return final_loss(model(y, c, iden), x, clean_feats, weights)


GRAD_CLIP = 1.0


def _step(opt: torch.optim.Optimizer, loss: Tensor) -> None:
    opt.zero_grad(set_to_none=True)
    dc.backward(loss)
    params = [p for g in opt.param_groups for p in g["params"] if p.grad is not None]
    nn.utils.clip_grad_norm_(params, GRAD_CLIP)
    opt.step()


def alternate(weight_params, arch_params, weight_loss: Callable[[Batch], tuple],
              arch_loss: Callable[[Batch], tuple], weight_batches: Iterator[Batch],
              arch_batches: Iterator[Batch], iterations: int, lr: float, alpha_lr: float,
              warmup: int = 0, freeze_alpha: bool = False) -> list[dict]:
    """Bilevel search loop: one weight step on the weight split, then one
    architecture step on the architecture split, repeated.

    ``warmup`` weight-only steps precede the alternation. Loss functions take
    a Batch and return (loss tensor, components dict).
    """
    opt_w = torch.optim.Adam(weight_params, lr=lr)
    opt_a = torch.optim.Adam(arch_params, lr=alpha_lr) if arch_params else None
    all_params = list(weight_params) + list(arch_params)
    log = []
    for it in range(warmup + iterations):
        b = next(weight_batches)
        if b.split != "weights":
            raise RuntimeError(f"weight step received a {b.split!r} batch")
        for p in all_params:
            p.grad = None
        loss, comps = weight_loss(b)
        _step(opt_w, loss)
        log.append(curve_record(it, "weights", comps))
        if it < warmup:
            continue
        b = next(arch_batches)
        if b.split != "alpha":
            raise RuntimeError(f"architecture step received a {b.split!r} batch")
        for p in all_params:
            p.grad = None
        loss, comps = arch_loss(b)
        if freeze_alpha or opt_a is None:
            pass
        else:
            _step(opt_a, loss)
        log.append(curve_record(it, "alpha", comps))
    return log


# -- public training entry points -----------------------------------------------------

def model_config_for(cfg: TrainConfig, **kw) -> ModelConfig:
    return ModelConfig(blocks=cfg.blocks, **kw)


def pretrain_encoder(task: str, data: PairSet, cfg: TrainConfig, model_cfg: ModelConfig | None = None):
    """Train one task encoder with a throwaway decoder on single-degradation pairs.

    Returns (encoder, loss curve).
    """
    if task not in TASK_LABELS:
        raise ValueError(f"unknown task {task!r}; expected one of {tuple(TASK_LABELS)}")
    cfg.validate()
    want = torch.tensor(TASK_LABELS[task], dtype=torch.float32)
    bad = [sid for sid, lb in zip(data.ids, data.labels) if not torch.equal(lb, want)]
    if bad:
        raise ValueError(f"{len(bad)} samples do not carry the {task} label {TASK_LABELS[task]}, e.g. {bad[0]}")
    mc = model_cfg or model_config_for(cfg)
    gen = seed_everything(cfg.seed)
    enc = Encoder(3 + 3 + mc.iden_ch, mc.enc_width, mc.enc_ch)
    dec = Decoder(mc.enc_ch)
    opt = torch.optim.Adam(list(enc.parameters()) + list(dec.parameters()), lr=cfg.lr)
    stream = batches(range(len(data)), cfg.batch_size, "all", gen)
    log = []
    for it in range(cfg.iterations):
        idx = next(stream).index
        x_in = condition_input(data.degraded[idx], data.labels[idx], mc.iden_ch)
        out = torch.clamp(dec(enc(x_in)) + 0.5, 0.0, 1.0)
        loss = l2_loss(out, data.clean[idx])
        _step(opt, loss)
        v = float(loss.detach())
        log.append(curve_record(it, "all", {"l2": v, "per": 0.0, "iden": 0.0, "total": v}))
    return enc, log


def search(data: PairSet, cfg: TrainConfig, model_cfg: ModelConfig | None = None, freeze_alpha: bool = False):
    """Alternating weight / architecture optimisation of the relaxed network.

    Returns (model, derived genotype, loss curve).
    """
    cfg.validate()
    w_idx, a_idx = split_by_hash(data.ids)
    if not w_idx or not a_idx:
        raise ValueError(f"hash split left an empty side ({len(w_idx)} weight / {len(a_idx)} alpha samples)")
    mc = model_cfg or model_config_for(cfg)
    if mc.genotype is not None:
        raise ValueError("search needs the relaxed network, got a fixed genotype")
    gen = seed_everything(cfg.seed)
    model = Restorer(mc)
    prior = compute_prior(data)
    lw = cfg.loss_weights

    def loss_fn(b):
        return restorer_loss(model, data, prior, b, lw, gen, cfg.iden_dropout)

    log = alternate(model.weight_parameters(), model.arch_parameters(), loss_fn, loss_fn,
                    batches(w_idx, cfg.batch_size, "weights", gen),
                    batches(a_idx, cfg.batch_size, "alpha", gen),
                    cfg.iterations, cfg.lr, cfg.alpha_lr, cfg.warmup, freeze_alpha)
    return model, model.fusion.derive(), log


def train_final(data: PairSet, cfg: TrainConfig, model_cfg: ModelConfig | None = None,
                encoders: dict[str, dict] | None = None, init_state: dict | None = None,
                out_dir=None, progress: Callable[[int, dict], None] | None = None):
    """Train the whole restorer on all pairs with the composite loss.

    Relaxed mode keeps the architecture logits fixed at their initial (or
    ``init_state``) values. Returns (model, loss curve).
    """
    cfg.validate()
    if cfg.lambda_iden > 0 and cfg.iden_dropout < 1 and data.clean_sets is None:
        raise ValueError("identity loss is enabled but the dataset has no identity sets")
    mc = model_cfg or model_config_for(cfg)
    gen = seed_everything(cfg.seed)
    model = Restorer(mc)
    if init_state is not None:
        model.load_state_dict(init_state, strict=False)
    for task, state in (encoders or {}).items():
        model.encoders[task].load_state_dict(state)
    prior = compute_prior(data)
    lw = cfg.loss_weights
    opt = torch.optim.Adam(model.weight_parameters(), lr=cfg.lr)
    stream = batches(range(len(data)), cfg.batch_size, "all", gen)
    log = []
    for it in range(cfg.iterations):
        loss, comps = restorer_loss(model, data, prior, next(stream), lw, gen, cfg.iden_dropout)
        _step(opt, loss)
        log.append(curve_record(it, "all", comps))
        if progress is not None:
            progress(it, comps)
        if out_dir is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(Path(out_dir) / f"ckpt_{it + 1:07d}.safetensors", model,
                            {**restorer_config(model), "train": asdict(cfg)}, "restorer")
    return model, log


def train_classifier(data: PairSet, cfg: TrainConfig, width: int = 16):
    """Per-component binary cross-entropy on (degraded, label) pairs. Returns (classifier, curve)."""
    cfg.validate()
    gen = seed_everything(cfg.seed)
    net = Classifier(width)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    stream = batches(range(len(data)), cfg.batch_size, "all", gen)
    log = []
    for it in range(cfg.iterations):
        idx = next(stream).index
        loss = F.binary_cross_entropy_with_logits(net.logits(data.degraded[idx]), data.labels[idx])
        _step(opt, loss)
        v = float(loss.detach())
        log.append({"iteration": it, "split": "all", "bce": v, "total": v})
    return net, log


def predict_labels(net: Classifier, degraded: Tensor) -> np.ndarray:
    with torch.no_grad():
        return (net(degraded).numpy() >= 0.5).astype(np.int64)


def restore_batch(model: Restorer, y: Tensor, labels: Tensor, iden: Tensor | None) -> Tensor:
    with torch.no_grad():
        return model(y, labels, iden)


# -- Wiener-synthetic search task -------------------------------------------------

def wiener_pairs(count: int, channels: int = 4, size: int = 8, seed: int = 0):
    """Features whose first half holds blurred signals and second half the per-sample
    (origin-centred, symmetric) blur kernel; the target is the Wiener quotient
    ``ifft(K Y / (|K|^2 + eps))`` of every signal channel, tiled to full width.
    """
    if channels % 4:
        raise ValueError("wiener task needs channels divisible by 4")
    g = torch.Generator().manual_seed(seed)
    half = channels // 2
    signal = torch.randn(count, half, size, size, generator=g)
    sigma = 0.5 + torch.rand(count, generator=g)
    d = torch.minimum(torch.arange(size), size - torch.arange(size)).float()
    r2 = d[:, None] ** 2 + d[None, :] ** 2
    k = torch.exp(-r2[None] / (2 * sigma[:, None, None] ** 2))
    k = k / k.sum(dim=(1, 2), keepdim=True)
    K = torch.fft.fft2(k)[:, None]
    Y = torch.fft.fft2(signal) * K
    blurred = torch.fft.ifft2(Y).real
    restored = torch.fft.ifft2(K * Y / (K.abs() ** 2 + WIENER_EPS)).real
    z = torch.cat([blurred, k[:, None].expand(count, half, size, size)], 1)
    return z, torch.cat([restored, restored], 1)


def wiener_search(cfg: TrainConfig, blocks: int = 1, channels: int = 4, size: int = 8, count: int = 128):
    """Search a single relaxed cell on the Wiener task.

    Returns (cell, alpha, genotype, loss curve).
    """
    gen = seed_everything(cfg.seed)
    zw, tw = wiener_pairs(count, channels, size, derive_seed(cfg.seed, "wiener-w") % 2 ** 31)
    za, ta = wiener_pairs(count, channels, size, derive_seed(cfg.seed, "wiener-a") % 2 ** 31)
    cell = FusionCell(channels, channels, channels, channels, blocks)
    alpha = nn.Parameter(torch.zeros(edge_count(blocks), len(OPERATOR_KINDS)))

    def make_loss(z, t):
        def fn(b):
            out = cell(z[b.index], z[b.index], dc.softmax(alpha, -1))
            loss = l2_loss(out, t[b.index])
            v = float(loss.detach())
            return loss, {"l2": v, "per": 0.0, "iden": 0.0, "total": v}
        return fn

    log = alternate(list(cell.parameters()), [alpha], make_loss(zw, tw), make_loss(za, ta),
                    batches(range(count), cfg.batch_size, "weights", gen),
                    batches(range(count), cfg.batch_size, "alpha", gen),
                    cfg.iterations, cfg.lr, cfg.alpha_lr, cfg.warmup)
    genotype = derive_architecture(alpha.detach().numpy(), blocks)
    return cell, alpha, genotype, log
