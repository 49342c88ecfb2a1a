"""Candidate operators of the fusion cell.

Every operator maps N x C x H x W to the same shape. Parameter counts as a
function of the channel count C (biases included where listed):

    identity, zero      0
    dilconv3            9 C^2
    dilconv5            25 C^2
    sepconv3            9 C + C^2
    sepconv5            25 C + C^2
    self_attention      2 (C q + q) + C^2 + C + 1,  q = max(1, C // 8)
    res2block           3 (9 (C/4)^2 + C/4) + C^2 + C
    res_op              2 (9 C^2 + C)
    deveil_op           2 (9 C^2 + C)
    fft_op              2 * 9 (C/2) C
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn

from . import diffcore as dc

OPERATOR_KINDS = (
    "dilconv3",
    "dilconv5",
    "sepconv3",
    "sepconv5",
    "identity",
    "zero",
    "self_attention",
    "res2block",
    "res_op",
    "deveil_op",
    "fft_op",
)

WIENER_EPS = 0.01
ATTENTION_MAX_POSITIONS = 4096


def _conv_param(out_ch: int, in_ch: int, k: int) -> nn.Parameter:
    w = torch.empty(out_ch, in_ch, k, k)
    nn.init.kaiming_uniform_(w, a=math.sqrt(5))
    return nn.Parameter(w)


def _bias_param(ch: int) -> nn.Parameter:
    return nn.Parameter(torch.zeros(ch))


class Identity(nn.Module):
    def forward(self, x: Tensor) -> Tensor:
        return x


class Zero(nn.Module):
    def forward(self, x: Tensor) -> Tensor:
        return torch.zeros_like(x)


class DilConv(nn.Module):
    """Activation followed by a k x k convolution with dilation 2."""

    def __init__(self, channels: int, k: int):
        super().__init__()
        self.weight = _conv_param(channels, channels, k)

    def forward(self, x: Tensor) -> Tensor:
        return dc.conv2d(dc.leaky_relu(x), self.weight, dilation=2)


class SepConv(nn.Module):
    """Activation, depthwise k x k, pointwise 1 x 1."""

    def __init__(self, channels: int, k: int):
        super().__init__()
        self.channels = channels
        self.depthwise = _conv_param(channels, 1, k)
        self.pointwise = _conv_param(channels, channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        h = dc.conv2d(dc.leaky_relu(x), self.depthwise, groups=self.channels)
        return dc.conv2d(h, self.pointwise)


class SelfAttention(nn.Module):
    """Single-head attention over spatial positions with a zero-initialised gate."""

    def __init__(self, channels: int, max_positions: int = ATTENTION_MAX_POSITIONS):
        super().__init__()
        self.qk_ch = max(1, channels // 8)
        self.max_positions = max_positions
        self.wq = _conv_param(self.qk_ch, channels, 1)
        self.bq = _bias_param(self.qk_ch)
        self.wk = _conv_param(self.qk_ch, channels, 1)
        self.bk = _bias_param(self.qk_ch)
        self.wv = _conv_param(channels, channels, 1)
        self.bv = _bias_param(channels)
        self.gamma = nn.Parameter(torch.zeros(()))

    def attention(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (attention matrix N x P x P, values N x C x P)."""
        n, c, h, w = x.shape
        if h * w > self.max_positions:
            raise dc.ShapeError(f"self-attention over {h * w} positions exceeds limit {self.max_positions}")
        q = dc.conv2d(x, self.wq, self.bq).reshape(n, self.qk_ch, h * w)
        k = dc.conv2d(x, self.wk, self.bk).reshape(n, self.qk_ch, h * w)
        v = dc.conv2d(x, self.wv, self.bv).reshape(n, c, h * w)
        logits = dc.matmul(q.transpose(1, 2), k) / math.sqrt(self.qk_ch)
        return dc.softmax(logits, dim=-1), v

    def forward(self, x: Tensor) -> Tensor:
        attn, v = self.attention(x)
        # out[:, :, i] = sum_j v[:, :, j] attn[i, j]
        out = dc.matmul(v, attn.transpose(1, 2)).reshape(x.shape)
        return x + self.gamma * out


class Res2Block(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        if channels % 4:
            raise dc.ShapeError(f"res2block needs channels divisible by 4, got {channels}")
        w = channels // 4
        self.weights = nn.ParameterList([_conv_param(w, w, 3) for _ in range(3)])
        self.biases = nn.ParameterList([_bias_param(w) for _ in range(3)])
        self.fuse = _conv_param(channels, channels, 1)
        self.fuse_bias = _bias_param(channels)

    def forward(self, x: Tensor) -> Tensor:
        s = dc.split(x, 4)
        ys = [s[0]]
        for i in range(1, 4):
            ys.append(dc.leaky_relu(dc.conv2d(s[i] + ys[-1], self.weights[i - 1], self.biases[i - 1])))
        return x + dc.conv2d(dc.cat(ys), self.fuse, self.fuse_bias)


class ResOp(nn.Module):
    """Subtracts a learned residual (noise estimate) from the input."""

    def __init__(self, channels: int):
        super().__init__()
        self.w1 = _conv_param(channels, channels, 3)
        self.b1 = _bias_param(channels)
        self.w2 = _conv_param(channels, channels, 3)
        self.b2 = _bias_param(channels)

    def forward(self, x: Tensor) -> Tensor:
        r = dc.conv2d(dc.leaky_relu(dc.conv2d(x, self.w1, self.b1)), self.w2, self.b2)
        return x - r


class DeveilOp(nn.Module):
    """Multiplies the input by a mask predicted from the input itself."""

    def __init__(self, channels: int):
        super().__init__()
        self.w1 = _conv_param(channels, channels, 3)
        self.b1 = _bias_param(channels)
        self.w2 = _conv_param(channels, channels, 3)
        self.b2 = _bias_param(channels)

    def mask(self, x: Tensor) -> Tensor:
        return dc.conv2d(dc.leaky_relu(dc.conv2d(x, self.w1, self.b1)), self.w2, self.b2)

    def forward(self, x: Tensor) -> Tensor:
        return dc.mul(self.mask(x), x)


class FFTOp(nn.Module):
    """Wiener-style division of two learned feature branches in the Fourier domain.

    The input is split in half along channels; each half is convolved back
    up to full width, giving x1 and x2, and the output is
    ``ifft2(X2 * X1 / (|X2|^2 + eps))`` keeping the real part.
    """

    def __init__(self, channels: int, eps: float = WIENER_EPS):
        super().__init__()
        if channels % 2:
            raise dc.ShapeError(f"fft_op needs an even channel count, got {channels}")
        self.eps = eps
        self.w1 = _conv_param(channels, channels // 2, 3)
        self.w2 = _conv_param(channels, channels // 2, 3)

    def branches(self, x: Tensor) -> tuple[Tensor, Tensor]:
        a, b = dc.split(x, 2)
        return dc.conv2d(a, self.w1), dc.conv2d(b, self.w2)

    def spectra(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (X1, X2, X_out)."""
        x1, x2 = self.branches(x)
        X1, X2 = dc.fft2(x1), dc.fft2(x2)
        out = dc.cmul(X2, X1) / (dc.cabs2(X2) + self.eps)
        return X1, X2, out

    def forward(self, x: Tensor) -> Tensor:
        return dc.ifft2(self.spectra(x)[2])


_BUILDERS = {
    "dilconv3": lambda c: DilConv(c, 3),
    "dilconv5": lambda c: DilConv(c, 5),
    "sepconv3": lambda c: SepConv(c, 3),
    "sepconv5": lambda c: SepConv(c, 5),
    "identity": lambda c: Identity(),
    "zero": lambda c: Zero(),
    "self_attention": SelfAttention,
    "res2block": Res2Block,
    "res_op": ResOp,
    "deveil_op": DeveilOp,
    "fft_op": FFTOp,
}


def build_op(kind: str, channels: int) -> nn.Module:
    try:
        builder = _BUILDERS[kind]
    except KeyError:
        raise ValueError(f"unknown operator kind {kind!r}; expected one of {OPERATOR_KINDS}") from None
    return builder(channels)


def registry(kinds=None) -> tuple[str, ...]:
    """Operator kinds in canonical order, optionally filtered to ``kinds``."""
    if kinds is None:
        return OPERATOR_KINDS
    unknown = set(kinds) - set(OPERATOR_KINDS)
    if unknown:
        raise ValueError(f"unknown operator kinds: {sorted(unknown)}")
    return tuple(k for k in OPERATOR_KINDS if k in set(kinds))


def param_count(kind: str, c: int) -> int:
    q = max(1, c // 8)
    w = c // 4
    return {
        "identity": 0,
        "zero": 0,
        "dilconv3": 9 * c * c,
        "dilconv5": 25 * c * c,
        "sepconv3": 9 * c + c * c,
        "sepconv5": 25 * c + c * c,
        "self_attention": 2 * (c * q + q) + c * c + c + 1,
        "res2block": 3 * (9 * w * w + w) + c * c + c,
        "res_op": 2 * (9 * c * c + c),
        "deveil_op": 2 * (9 * c * c + c),
        "fft_op": 2 * 9 * (c // 2) * c,
    }[kind]
