"""Finite-difference gradient suite over every primitive and every operator."""

from __future__ import annotations

from typing import Callable

import torch

from . import diffcore as dc
from .ops import OPERATOR_KINDS, build_op

TOLERANCE = 1e-3
PRIMITIVE_STEP = 1e-4
# the Wiener quotient has large third derivatives where |X2|^2 is small, so a
# 1e-4 step leaves ~3e-3 truncation error on fft_op; 1e-6 is still far above
# double-precision round-off for these sizes
OPERATOR_STEP = 1e-6


def _leaf(g, *shape, low=-1.0, high=1.0):
    return (torch.rand(*shape, generator=g, dtype=torch.float64) * (high - low) + low).requires_grad_(True)


def _probe(g, like):
    return torch.randn(like.shape, generator=g, dtype=torch.float64)


def _real_probe(g, out):
    """Scalar projection of a (possibly complex) output onto fixed random weights."""
    if out.is_complex():
        a, b = _probe(g, out.real), _probe(g, out.real)
        return lambda t: (t.real * a + t.imag * b).sum()
    w = _probe(g, out)
    return lambda t: (t * w).sum()


def _check(g, fn: Callable, inputs) -> float:
    proj = _real_probe(g, fn(*inputs))
    return dc.gradcheck(lambda: proj(fn(*inputs)), inputs, PRIMITIVE_STEP)


def primitive_cases() -> dict[str, Callable[[torch.Generator], float]]:
    def conv(g):
        return _check(g, lambda x, w, b: dc.conv2d(x, w, b, dilation=2, groups=2),
                      [_leaf(g, 1, 4, 6, 6), _leaf(g, 4, 2, 3, 3), _leaf(g, 4)])

    def complex_input(g):
        re, im = _leaf(g, 1, 2, 4, 4), _leaf(g, 1, 2, 4, 4)
        return re, im

    def cmul(g):
        a, b, c, d = (_leaf(g, 1, 2, 4, 4) for _ in range(4))
        return _check(g, lambda a, b, c, d: dc.cmul(torch.complex(a, b), torch.complex(c, d)), [a, b, c, d])

    def conj(g):
        return _check(g, lambda a, b: dc.conj(torch.complex(a, b)), list(complex_input(g)))

    def cabs(g):
        re = _leaf(g, 1, 2, 4, 4, low=0.5, high=1.5)
        return _check(g, lambda a, b: dc.cabs(torch.complex(a, b)), [re, _leaf(g, 1, 2, 4, 4)])

    return {
        "conv2d": conv,
        "fft2": lambda g: _check(g, dc.fft2, [_leaf(g, 1, 2, 6, 6)]),
        "ifft2": lambda g: _check(g, lambda a, b: dc.ifft2(torch.complex(a, b), real=False), list(complex_input(g))),
        "softmax": lambda g: _check(g, dc.softmax, [_leaf(g, 3, 11, low=-2, high=2)]),
        "add": lambda g: _check(g, dc.add, [_leaf(g, 1, 3, 4, 4), _leaf(g, 1, 3, 4, 4)]),
        "mul": lambda g: _check(g, dc.mul, [_leaf(g, 1, 3, 4, 4), _leaf(g, 1, 3, 4, 4)]),
        "div": lambda g: _check(g, dc.div, [_leaf(g, 1, 3, 4, 4), _leaf(g, 1, 3, 4, 4, low=0.5, high=2.0)]),
        "leaky_relu": lambda g: _check(g, dc.leaky_relu, [_leaf(g, 1, 3, 6, 6)]),
        "cat": lambda g: _check(g, lambda a, b: dc.cat([a, b]), [_leaf(g, 1, 2, 4, 4), _leaf(g, 1, 3, 4, 4)]),
        "split": lambda g: _check(g, lambda a: dc.split(a, 2)[1] * 2 + dc.split(a, 2)[0], [_leaf(g, 1, 4, 4, 4)]),
        "spatial_mean": lambda g: _check(g, dc.spatial_mean, [_leaf(g, 1, 3, 6, 6)]),
        "spatial_std": lambda g: _check(g, dc.spatial_std, [_leaf(g, 1, 3, 6, 6)]),
        "global_mean": lambda g: _check(g, lambda a: dc.global_mean(a).reshape(1), [_leaf(g, 1, 3, 6, 6)]),
        "matmul": lambda g: _check(g, dc.matmul, [_leaf(g, 1, 5, 4), _leaf(g, 1, 4, 6)]),
        "cmul": cmul,
        "conj": conj,
        "cabs": cabs,
        "arccos": lambda g: _check(g, dc.arccos, [_leaf(g, 2, 5, low=-0.9, high=0.9)]),
    }


def operator_case(kind: str, channels: int = 8, size: int = 6) -> Callable[[torch.Generator], float]:
    def run(g):
        torch.manual_seed(int(torch.randint(0, 2 ** 31, (1,), generator=g)))
        op = build_op(kind, channels).double()
        if kind == "self_attention":
            with torch.no_grad():
                op.gamma.fill_(0.7)
        params = [p for p in op.parameters()]
        x = _leaf(g, 1, channels, size, size)
        proj = _real_probe(g, op(x))
        return dc.gradcheck(lambda: proj(op(x)) + (x * 0).sum(), [x] + params, OPERATOR_STEP)
    return run


def all_cases() -> dict[str, Callable[[torch.Generator], float]]:
    cases = {f"primitive:{k}": v for k, v in primitive_cases().items()}
    cases.update({f"op:{k}": operator_case(k) for k in OPERATOR_KINDS})
    return cases


def run_suite(name: str | None = None, seed: int = 0) -> dict[str, float]:
    """Worst relative error per case. ``name`` filters by substring (e.g. 'fft')."""
    results = {}
    for key, case in all_cases().items():
        if name and name not in key:
            continue
        results[key] = case(torch.Generator().manual_seed(seed))
    if name and not results:
        raise KeyError(f"no gradient check matches {name!r}")
    return results
