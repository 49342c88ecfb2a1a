import math

import numpy as np
import pytest
import torch

from fusenas import losses as ls
from fusenas.diffcore import gradcheck
from fusenas.model import Embedder


@pytest.fixture(scope="module")
def emb64():
    return Embedder().double()


def test_default_weights():
    w = ls.LossWeights()
    assert (w.per, w.iden) == (0.04, 0.003)
    with pytest.raises(ValueError):
        ls.LossWeights(per=-1.0)


def test_l2_cases():
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    assert float(ls.l2_loss(x, x)) == 0.0
    assert abs(float(ls.l2_loss(x + 0.1, x)) - 0.01) < 1e-12
    with pytest.raises(ValueError):
        ls.l2_loss(x, x[:, :2])


def test_l2_loop_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.random((1, 3, 5, 4)), rng.random((1, 3, 5, 4))
    total = 0.0
    for v in (a - b).flat:
        total += v * v
    got = float(ls.l2_loss(torch.from_numpy(a), torch.from_numpy(b)))
    assert abs(got - total / a.size) < 1e-7


def test_perceptual_cases(emb64):
    rng = np.random.default_rng(1)
    x = torch.from_numpy(rng.random((2, 3, 16, 16)))
    y = torch.from_numpy(rng.random((2, 3, 16, 16)))
    assert float(ls.perceptual_loss(x, x, emb64)) == 0.0
    got = float(ls.perceptual_loss(x, y, emb64))
    assert got > 0
    fx, fy = emb64(x).numpy(), emb64(y).numpy()
    n, c, h, w = fx.shape
    total = 0.0
    for i in range(n):
        for k in range(c):
            for u in range(h):
                for v in range(w):
                    total += abs(fx[i, k, u, v] - fy[i, k, u, v])
    assert abs(got - total / (n * c * h * w)) < 1e-6


def test_identity_loss_closed_forms():
    f = torch.randn(3, 4, 2, 2, dtype=torch.float64)
    same = f[:, None].expand(3, 2, 4, 2, 2)
    assert float(ls.identity_loss_features(f, same)) < 2e-3
    a = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    b = torch.tensor([[[0.0, 1.0]]], dtype=torch.float64)
    assert abs(float(ls.identity_loss_features(a, b)) - math.pi / 2) < 1e-12
    c = torch.tensor([[[0.5, math.sqrt(3) / 2]]], dtype=torch.float64)
    assert abs(float(ls.identity_loss_features(a, c)) - math.pi / 3) < 1e-12
    assert abs(math.pi / 3 - 1.0472) < 1e-4


def test_identity_loss_bounds_and_monotone():
    a = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    prev = -1.0
    for t in np.linspace(0, math.pi, 13):
        b = torch.tensor([[[math.cos(t), math.sin(t)]]], dtype=torch.float64)
        v = float(ls.identity_loss_features(a, b))
        assert 0 <= v <= math.pi
        assert v > prev
        prev = v


def test_identity_loss_empty_rejected(emb64):
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    with pytest.raises(ValueError):
        ls.identity_loss(x, [], emb64)
    with pytest.raises(ValueError):
        ls.identity_loss_features(torch.zeros(1, 2), torch.zeros(1, 0, 2))


def test_identity_loss_image_level(emb64):
    x = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    assert float(ls.identity_loss(x, [x, x], emb64)) < 2e-3


def test_final_loss_weighting_arithmetic():
    w = ls.LossWeights()
    assert abs(1.0 + w.per * 0.5 + w.iden * 1.0 - 1.023) < 1e-12


def test_final_loss_component_sum(emb64):
    g = torch.Generator().manual_seed(2)
    xh = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64)
    x = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64)
    clean = torch.stack([emb64(torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64)) for _ in range(3)], 1)
    total, comps = ls.final_loss(xh, x, clean, ls.LossWeights(), emb64)
    l2 = float(ls.l2_loss(xh, x))
    per = float(ls.perceptual_loss(xh, x, emb64))
    iden = float(ls.identity_loss_features(emb64(xh), clean))
    assert abs(float(total) - (l2 + 0.04 * per + 0.003 * iden)) < 1e-7
    assert comps["l2"] == pytest.approx(l2, abs=1e-12)
    assert comps["total"] == float(total)


def test_final_loss_zero_at_match(emb64):
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    clean = emb64(x)[:, None]
    total, comps = ls.final_loss(x, x, clean, ls.LossWeights(), emb64)
    assert comps["l2"] == 0 and comps["per"] == 0
    assert float(total) < 1e-5


def test_final_loss_requires_clean_set(emb64):
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    with pytest.raises(ValueError):
        ls.final_loss(x, x, None, ls.LossWeights(), emb64)
    total, comps = ls.final_loss(x + 0.1, x, None, ls.LossWeights(0.0, 0.0), emb64)
    assert abs(float(total) - comps["l2"]) < 1e-9


@pytest.mark.parametrize("which", ["l2", "per", "iden", "final"])
def test_loss_gradients(which, emb64):
    g = torch.Generator().manual_seed(3)
    xh = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64).requires_grad_(True)
    x = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64)
    clean = emb64(torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64))[None]
    fns = {
        "l2": lambda: ls.l2_loss(xh, x),
        "per": lambda: ls.perceptual_loss(xh, x, emb64),
        "iden": lambda: ls.identity_loss_features(emb64(xh), clean),
        "final": lambda: ls.final_loss(xh, x, clean, ls.LossWeights(), emb64)[0],
    }
    assert gradcheck(fns[which], [xh]) < 1e-3
