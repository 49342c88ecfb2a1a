"""Differentiable primitives used throughout the package.

Thin, shape-checked functional layer over torch autograd. Everything the
operators, the fusion cell and the losses need is funnelled through here so
that one finite-difference harness (:func:`gradcheck`) covers the lot.
"""

from __future__ import annotations

from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

Parameter = torch.nn.Parameter

LEAKY_SLOPE = 0.2
ARCCOS_MARGIN = 1e-6


class ShapeError(ValueError):
    pass


def _need(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


def _check_map(x: Tensor, name: str = "input") -> None:
    _need(x.dim() == 4, f"{name} must be N x C x H x W, got shape {tuple(x.shape)}")


# -- convolution ---------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           dilation: int = 1, groups: int = 1) -> Tensor:
    """Stride-1 convolution with zero 'same' padding."""
    _check_map(x)
    _need(weight.dim() == 4, f"weight must be out x in/groups x k x k, got {tuple(weight.shape)}")
    out_ch, in_per_group, kh, kw = weight.shape
    _need(kh == kw and kh % 2 == 1, f"kernel must be square with odd side, got {kh}x{kw}")
    _need(dilation >= 1, f"dilation must be >= 1, got {dilation}")
    _need(x.shape[1] % groups == 0 and out_ch % groups == 0,
          f"channels {x.shape[1]} -> {out_ch} not divisible by groups={groups}")
    _need(x.shape[1] // groups == in_per_group,
          f"input has {x.shape[1]} channels, weight expects {in_per_group * groups}")
    if bias is not None:
        _need(bias.shape == (out_ch,), f"bias shape {tuple(bias.shape)} != ({out_ch},)")
    pad = dilation * (kh - 1) // 2
    return F.conv2d(x, weight, bias, padding=pad, dilation=dilation, groups=groups)


# -- spectral ------------------------------------------------------------------

def fft2(x: Tensor) -> Tensor:
    """2-D DFT over the last two axes; returns a complex spectrum."""
    _need(x.dim() >= 2 and x.shape[-1] >= 1 and x.shape[-2] >= 1, "fft2 needs spatial dims >= 1")
    return torch.fft.fft2(x)


def ifft2(spec: Tensor, real: bool = True) -> Tensor:
    """Inverse 2-D DFT. With ``real`` the imaginary residue is discarded."""
    _need(spec.dim() >= 2, "ifft2 needs spatial dims")
    out = torch.fft.ifft2(spec)
    return out.real if real else out


def cmul(a: Tensor, b: Tensor) -> Tensor:
    _need(a.shape == b.shape, f"complex multiply shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return a * b


def conj(a: Tensor) -> Tensor:
    return torch.conj_physical(a)


def cabs2(a: Tensor) -> Tensor:
    """Squared magnitude as a real tensor (smooth at zero, unlike |a|)."""
    return a.real * a.real + a.imag * a.imag


def cabs(a: Tensor) -> Tensor:
    return torch.sqrt(cabs2(a))


# -- elementwise ---------------------------------------------------------------

def _same(a: Tensor, b: Tensor, op: str) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _same(a, b, "add")
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same(a, b, "mul")
    return a * b


def div(a: Tensor, b: Tensor) -> Tensor:
    _same(a, b, "div")
    return a / b


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    return F.leaky_relu(x, slope)


def softmax(logits: Tensor, dim: int = -1) -> Tensor:
    # torch subtracts the max internally, so saturated logits stay finite
    return torch.softmax(logits, dim=dim)


# -- structural ----------------------------------------------------------------

def cat(maps: Sequence[Tensor]) -> Tensor:
    _need(len(maps) > 0, "cat needs at least one map")
    ref = maps[0].shape
    for m in maps:
        _check_map(m)
        _need(m.shape[0] == ref[0] and m.shape[2:] == ref[2:],
              f"cat: {tuple(m.shape)} incompatible with {tuple(ref)}")
    return torch.cat(list(maps), dim=1)


def split(x: Tensor, parts: int) -> tuple[Tensor, ...]:
    _check_map(x)
    _need(x.shape[1] % parts == 0, f"cannot split {x.shape[1]} channels into {parts} parts")
    return torch.chunk(x, parts, dim=1)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _need(a.shape[-1] == b.shape[-2], f"matmul: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


# -- reductions ----------------------------------------------------------------

def spatial_mean(x: Tensor) -> Tensor:
    """Per-sample, per-channel mean over H, W (keeps dims)."""
    _check_map(x)
    return x.mean(dim=(2, 3), keepdim=True)


def spatial_std(x: Tensor) -> Tensor:
    """Per-channel population standard deviation over H, W (keeps dims)."""
    _check_map(x)
    mu = x.mean(dim=(2, 3), keepdim=True)
    return torch.sqrt(((x - mu) ** 2).mean(dim=(2, 3), keepdim=True))


def global_mean(x: Tensor) -> Tensor:
    return x.mean()


def arccos(x: Tensor, margin: float = ARCCOS_MARGIN) -> Tensor:
    """arccos with its argument clamped to [-1 + margin, 1 - margin]."""
    return torch.acos(torch.clamp(x, -1.0 + margin, 1.0 - margin))


# -- autograd plumbing -------------------------------------------------------------

def backward(loss: Tensor) -> None:
    if loss.numel() != 1 or loss.dim() > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()


def zero_grad(params) -> None:
    for p in params:
        if p.grad is not None:
            p.grad.zero_()
        else:
            p.grad = torch.zeros_like(p)


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, step: float = 1e-4) -> Tensor:
    """Central finite differences of scalar ``fn()`` w.r.t. the entries of ``x``."""
    grad = torch.zeros_like(x)
    flat = x.data.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            fp = float(fn())
            flat[i] = orig - step
            fm = float(fn())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * step)
    return grad


def relative_error(analytic: Tensor, numeric: Tensor, floor: float = 1e-4) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()),
                          torch.full_like(analytic, floor))
    return float(((analytic - numeric).abs() / denom).max())


def gradcheck(fn: Callable[[], Tensor], tensors: Sequence[Tensor], step: float = 1e-4) -> float:
    """Compare autograd gradients of scalar ``fn()`` against finite differences.

    ``tensors`` must be double-precision leaves with ``requires_grad``.
    Returns the worst relative error over all of them.
    """
    for t in tensors:
        t.grad = None
    out = fn()
    backward(out)
    analytic = [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t) for t in tensors]
    worst = 0.0
    for t, a in zip(tensors, analytic):
        n = numeric_grad(fn, t, step)
        worst = max(worst, relative_error(a, n))
    return worst
