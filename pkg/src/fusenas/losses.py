"""Reconstruction, perceptual and identity losses and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from . import diffcore as dc
from .model import Embedder, shared_embedder


@dataclass(frozen=True)
class LossWeights:
    per: float = 0.04
    iden: float = 0.003

    def __post_init__(self):
        if self.per < 0 or self.iden < 0:
            raise ValueError("loss weights must be non-negative")


def l2_loss(x_hat: Tensor, x: Tensor) -> Tensor:
    """Mean squared error over every element."""
    if x_hat.shape != x.shape:
        raise dc.ShapeError(f"l2_loss shape mismatch {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    return dc.global_mean((x_hat - x) ** 2)


def feature_l1(f_hat: Tensor, f: Tensor) -> Tensor:
    if f_hat.shape != f.shape:
        raise dc.ShapeError(f"feature shape mismatch {tuple(f_hat.shape)} vs {tuple(f.shape)}")
    return dc.global_mean((f_hat - f).abs())


def perceptual_loss(x_hat: Tensor, x: Tensor, embedder: Embedder | None = None) -> Tensor:
    """Mean absolute difference of embedder features, i.e. normalised by channels x H x W."""
    if x_hat.shape != x.shape:
        raise dc.ShapeError(f"perceptual_loss shape mismatch {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    embedder = embedder or shared_embedder(x_hat.dtype)
    with torch.no_grad():
        f = embedder(x)
    return feature_l1(embedder(x_hat), f)


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of flattened per-sample features; a: N x ..., b: N x ... -> N."""
    a, b = a.flatten(1), b.flatten(1)
    return (a * b).sum(1) / (a.norm(dim=1) * b.norm(dim=1)).clamp_min(1e-12)


def identity_from_cosines(cos: Tensor) -> Tensor:
    return dc.global_mean(dc.arccos(cos))


def identity_loss_features(f_hat: Tensor, clean_feats: Tensor) -> Tensor:
    """f_hat: N x C x h x w; clean_feats: N x n x C x h x w. Mean angle over set and batch."""
    if clean_feats.dim() != f_hat.dim() + 1 or clean_feats.shape[0] != f_hat.shape[0] or clean_feats.shape[1] == 0:
        raise ValueError(f"clean feature set of shape {tuple(clean_feats.shape)} does not match {tuple(f_hat.shape)}")
    n = clean_feats.shape[1]
    cos = torch.stack([cosine(f_hat, clean_feats[:, i]) for i in range(n)], dim=1)
    return identity_from_cosines(cos)


def identity_loss(x_hat: Tensor, clean_set, embedder: Embedder | None = None) -> Tensor:
    """``clean_set``: N x n x 3 x H x W tensor, or a list of n tensors shaped like ``x_hat``."""
    if isinstance(clean_set, (list, tuple)):
        if not clean_set:
            raise ValueError("identity loss needs a non-empty clean set")
        clean_set = torch.stack(list(clean_set), dim=1)
    if clean_set.shape[1] == 0:
        raise ValueError("identity loss needs a non-empty clean set")
    embedder = embedder or shared_embedder(x_hat.dtype)
    n, k = clean_set.shape[:2]
    with torch.no_grad():
        feats = embedder(clean_set.flatten(0, 1))
    feats = feats.view(n, k, *feats.shape[1:])
    return identity_loss_features(embedder(x_hat), feats)


def final_loss(x_hat: Tensor, x: Tensor, clean_feats: Tensor | None,
               weights: LossWeights = LossWeights(), embedder: Embedder | None = None):
    """Weighted sum L2 + per * perceptual + iden * identity.

    ``clean_feats`` are precomputed embedder features of the clean sets
    (N x n x C x h x w). Returns (total, components) with float components.
    """
    embedder = embedder or shared_embedder(x_hat.dtype)
    l2 = l2_loss(x_hat, x)
    zero = torch.zeros((), dtype=x_hat.dtype)
    need_feats = weights.per > 0 or weights.iden > 0
    f_hat = embedder(x_hat) if need_feats else None
    if weights.per > 0:
        with torch.no_grad():
            f_x = embedder(x)
        per = feature_l1(f_hat, f_x)
    else:
        per = zero
    if weights.iden > 0:
        if clean_feats is None:
            raise ValueError("identity weight is positive but no clean set was given")
        iden = identity_loss_features(f_hat, clean_feats)
    else:
        iden = zero
    total = l2 + weights.per * per + weights.iden * iden
    comps = {k: float(v.detach()) for k, v in (("l2", l2), ("per", per), ("iden", iden), ("total", total))}
    return total, comps
