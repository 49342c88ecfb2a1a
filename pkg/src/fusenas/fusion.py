"""Searchable fusion cell and the fusion network built from it.

Cell state indexing, shared by search and derived modes:

    0           projection of the previous cell output (Z^{l-1})
    1           projection of the cell output before that (Z^{l-2})
    2 + i       output of block i

Block i (0-based) may read states 0 .. i + 1, so the edges feeding it are
numbered consecutively after those of block i - 1.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from . import diffcore as dc
from .ops import build_op, registry


@dataclass(frozen=True)
class BlockSpec:
    block_index: int
    input_1: int
    op_1: str
    input_2: int
    op_2: str

    def __post_init__(self):
        for j in (self.input_1, self.input_2):
            if not 0 <= j < self.block_index + 2:
                raise ValueError(f"block {self.block_index} cannot read state {j}")


def edge_count(blocks: int) -> int:
    return sum(i + 2 for i in range(blocks))


def block_edges(block: int) -> range:
    """Global edge indices of the edges entering ``block``."""
    start = edge_count(block)
    return range(start, start + block + 2)


class MixedOp(nn.Module):
    """Softmax-weighted sum of every candidate operator on one edge."""

    def __init__(self, channels: int, kinds):
        super().__init__()
        self.kinds = tuple(kinds)
        self.ops = nn.ModuleList([build_op(k, channels) for k in self.kinds])

    def forward(self, x: Tensor, weights: Tensor) -> Tensor:
        if weights.shape != (len(self.kinds),):
            raise dc.ShapeError(f"expected {len(self.kinds)} op weights, got {tuple(weights.shape)}")
        out = 0
        for w, op, kind in zip(weights, self.ops, self.kinds):
            if kind == "zero":
                continue
            out = out + w * op(x)
        if isinstance(out, int):
            return torch.zeros_like(x)
        return out


def _pointwise(in_ch: int, out_ch: int) -> nn.Conv2d:
    conv = nn.Conv2d(in_ch, out_ch, 1)
    if in_ch == out_ch:
        # square projections start as the identity so candidate ops see the raw layout
        with torch.no_grad():
            conv.weight.copy_(torch.eye(in_ch).view(in_ch, in_ch, 1, 1))
            conv.bias.zero_()
    return conv


class FusionCell(nn.Module):
    """One cell of B blocks.

    In search mode (``genotype is None``) every admissible edge carries a
    :class:`MixedOp`; otherwise only the two chosen operators of each block
    are instantiated.
    """

    def __init__(self, in_prev: int, in_prev2: int, block_ch: int, out_ch: int,
                 blocks: int, kinds=None, genotype: list[BlockSpec] | None = None):
        super().__init__()
        self.blocks = blocks
        self.block_ch = block_ch
        self.kinds = registry(kinds)
        self.genotype = genotype
        self.pre0 = _pointwise(in_prev, block_ch)
        self.pre1 = _pointwise(in_prev2, block_ch)
        if genotype is None:
            self.edges = nn.ModuleList([MixedOp(block_ch, self.kinds) for _ in range(edge_count(blocks))])
        else:
            if len(genotype) != blocks:
                raise ValueError(f"genotype has {len(genotype)} blocks, cell expects {blocks}")
            self.chosen = nn.ModuleList()
            for spec in genotype:
                self.chosen.append(nn.ModuleList([build_op(spec.op_1, block_ch), build_op(spec.op_2, block_ch)]))
        self.post = _pointwise(blocks * block_ch, out_ch)

    def project(self, z_prev: Tensor, z_prev2: Tensor) -> list[Tensor]:
        if z_prev.shape[1] != self.pre0.in_channels or z_prev2.shape[1] != self.pre1.in_channels:
            raise dc.ShapeError(
                f"cell expects inputs with {self.pre0.in_channels}/{self.pre1.in_channels} channels, "
                f"got {z_prev.shape[1]}/{z_prev2.shape[1]}")
        return [self.pre0(z_prev), self.pre1(z_prev2)]

    def block_forward(self, i: int, states: list[Tensor], weights: Tensor) -> Tensor:
        """Sum of mixed-op outputs over every edge entering block ``i``."""
        out = 0
        for j, e in enumerate(block_edges(i)):
            out = out + self.edges[e](states[j], weights[e])
        return out

    def inner(self, z_prev: Tensor, z_prev2: Tensor, weights: Tensor | None = None) -> Tensor:
        """Concatenated block outputs, before the exit projection."""
        states = self.project(z_prev, z_prev2)
        for i in range(self.blocks):
            if self.genotype is None:
                states.append(self.block_forward(i, states, weights))
            else:
                spec = self.genotype[i]
                op1, op2 = self.chosen[i]
                states.append(op1(states[spec.input_1]) + op2(states[spec.input_2]))
        return dc.cat(states[2:])

    def forward(self, z_prev: Tensor, z_prev2: Tensor, weights: Tensor | None = None) -> Tensor:
        return self.post(self.inner(z_prev, z_prev2, weights))


class FusionNetwork(nn.Module):
    """Linear chain of cells fed by two 1x1 projections of the fused encoder features."""

    def __init__(self, in_ch: int, width: int, block_ch: int, blocks: int, cells: int = 3,
                 kinds=None, shared_alpha: bool = True, genotype=None):
        super().__init__()
        self.kinds = registry(kinds)
        self.blocks = blocks
        self.shared_alpha = shared_alpha
        self.seed_prev = _pointwise(in_ch, width)
        self.seed_prev2 = _pointwise(in_ch, width)
        if genotype is not None and shared_alpha:
            genotype = [genotype] * cells
        self.cells = nn.ModuleList([
            FusionCell(width, width, block_ch, width, blocks, self.kinds,
                       None if genotype is None else genotype[c])
            for c in range(cells)
        ])
        self.searching = genotype is None
        if self.searching:
            shape = (edge_count(blocks), len(self.kinds))
            if not shared_alpha:
                shape = (cells,) + shape
            self.alpha = nn.Parameter(torch.zeros(shape))

    def op_weights(self, cell: int) -> Tensor:
        a = self.alpha if self.shared_alpha else self.alpha[cell]
        return dc.softmax(a, dim=-1)

    def forward(self, x: Tensor) -> Tensor:
        z_prev2, z_prev = self.seed_prev2(x), self.seed_prev(x)
        for c, cell in enumerate(self.cells):
            w = self.op_weights(c) if self.searching else None
            z_prev2, z_prev = z_prev, cell(z_prev, z_prev2, w)
        return z_prev

    def weight_parameters(self):
        return [p for n, p in self.named_parameters() if n != "alpha"]

    def derive(self) -> list[BlockSpec] | list[list[BlockSpec]]:
        a = self.alpha.detach().cpu().numpy()
        if self.shared_alpha:
            return derive_architecture(a, self.blocks, self.kinds)
        return [derive_architecture(ac, self.blocks, self.kinds) for ac in a]


def _softmax_np(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def derive_architecture(alpha, blocks: int, kinds=None) -> list[BlockSpec]:
    """Discretise relaxed logits into two (input, operator) picks per block.

    Edges are ranked by their strongest non-zero operator weight; the top two
    survive, each with its argmax non-zero operator. Ties go to the lowest
    edge index, then the lowest operator index.
    """
    kinds = registry(kinds)
    probs = _softmax_np(alpha)
    if probs.shape != (edge_count(blocks), len(kinds)):
        raise ValueError(f"alpha shape {probs.shape} does not match {blocks} blocks x {len(kinds)} ops")
    usable = [k for k, name in enumerate(kinds) if name != "zero"]
    if not usable:
        raise ValueError("cannot derive an architecture from the zero operator alone")
    specs = []
    for i in range(blocks):
        scored = []
        for j, e in enumerate(block_edges(i)):
            row = probs[e, usable]
            best = int(np.argmax(row))
            scored.append((-row[best], j, usable[best]))
        scored.sort()
        (_, j1, k1), (_, j2, k2) = scored[:2]
        if j2 < j1:
            (j1, k1), (j2, k2) = (j2, k2), (j1, k1)
        specs.append(BlockSpec(i, j1, kinds[k1], j2, kinds[k2]))
    return specs


def save_architecture(specs, path) -> None:
    """One JSON record per block; nested lists (per-cell genotypes) get a ``cell`` field."""
    lines = []
    if specs and isinstance(specs[0], list):
        for c, cell in enumerate(specs):
            lines += [json.dumps({"cell": c, **asdict(s)}) for s in cell]
    else:
        lines = [json.dumps(asdict(s)) for s in specs]
    Path(path).write_text("\n".join(lines) + "\n")


def load_architecture(path):
    records = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    if records and "cell" in records[0]:
        cells: dict[int, list[BlockSpec]] = {}
        for r in records:
            cells.setdefault(r.pop("cell"), []).append(BlockSpec(**r))
        return [cells[c] for c in sorted(cells)]
    return [BlockSpec(**r) for r in records]
