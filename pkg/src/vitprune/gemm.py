"""Tiled int8 GEMM engine plus MAC and cycle cost models.

Layer ids follow the six GEMMs of one transformer block:

    1  Q/K/V linear transformation   N x D_ch    -> N x h*d
    2  Q x K^T (per head)            N x h*d     -> N x h*N
    3  QK^T x V (per head)           N x h*N     -> N x h*d
    4  output projection             N x h*d     -> N x D_ch
    5  FFN fc1                       N x D_ch    -> N x 4*D_fc
    6  FFN fc2                       N x 4*D_fc  -> N x D_ch

Per-head layout: in ``PerHead(h)`` mode the input's columns split into h
equal groups and the weight's rows split into the same h groups; group g
multiplies ``A[:, g]`` by ``W[g, :]`` and the h results are concatenated
along columns. So for Q x K^T the weight is K^T as is (h*d x N), and for
scores x V the weight is the per-head V blocks stacked vertically (h*N x d).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fixedpoint import AccTensor, QTensor, to_acc

FREQ_MHZ = 150.0
CYCLES_PER_MS = FREQ_MHZ * 1000.0
DEFAULT_MAC_BUDGET = 2048
DEFAULT_PIPELINE_FILL = 12

ATTENTION_LAYERS = (2, 3)


@dataclass(frozen=True)
class TilingConfig:
    Ti: int = 32
    To: int = 32
    Th: int = 2
    mac_budget: int = DEFAULT_MAC_BUDGET

    def __post_init__(self):
        if min(self.Ti, self.To, self.Th) < 1:
            raise ValueError("tiling factors must be positive")
        if self.Ti * self.To * self.Th > self.mac_budget:
            raise ValueError(
                f"Ti*To*Th = {self.Ti * self.To * self.Th} exceeds MAC budget {self.mac_budget}")


@dataclass(frozen=True)
class GemmMode:
    """``heads=None`` accumulates over the full input dim; ``heads=h`` keeps h groups."""

    heads: int | None = None

    def __post_init__(self):
        if self.heads is not None and self.heads < 1:
            raise ValueError("PerHead needs a positive head count")

    @property
    def per_head(self) -> bool:
        return self.heads is not None


ACCUMULATE = GemmMode()


def PerHead(h: int) -> GemmMode:  # noqa: N802 - reads like the enum variant it stands for
    return GemmMode(h)


@dataclass(frozen=True)
class LayerDims:
    N: int
    Di: int
    Do: int
    layer_id: int | str = 0

    def __post_init__(self):
        if min(self.N, self.Di, self.Do) < 1:
            raise ValueError(f"layer dims must be positive: {self}")


def _int_matmul(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    # int8 x int8 products summed over < 2**38 terms stay exact in float64
    return (a.astype(np.float64) @ w.astype(np.float64)).astype(np.int64)


def _tiled_product(a: np.ndarray, w: np.ndarray, Ti: int, To: int) -> np.ndarray:
    n, di = a.shape
    do = w.shape[1]
    out = np.zeros((n, do), dtype=np.int64)
    for o0 in range(0, do, To):
        o1 = min(o0 + To, do)
        for i0 in range(0, di, Ti):
            i1 = min(i0 + Ti, di)
            out[:, o0:o1] += _int_matmul(a[:, i0:i1], w[i0:i1, o0:o1])
    return out


def tiled_gemm(A: QTensor, W: QTensor, mode: GemmMode = ACCUMULATE,
               tiling: TilingConfig | None = None) -> AccTensor:
    tiling = tiling or TilingConfig()
    a, w = A.data, W.data
    if a.ndim != 2 or w.ndim != 2:
        raise ValueError("tiled_gemm expects 2-D operands")
    if a.shape[1] != w.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} x {w.shape}")
    in_frac = A.frac_bits + W.frac_bits
    if not mode.per_head:
        return to_acc(_tiled_product(a, w, tiling.Ti, tiling.To), in_frac)

    h = mode.heads
    if a.shape[1] % h:
        raise ValueError(f"input dim {a.shape[1]} not divisible into {h} heads")
    dh = a.shape[1] // h
    do = w.shape[1]
    out = np.empty((a.shape[0], h * do), dtype=np.int64)
    # Th heads are in flight per outer iteration; groups never share an accumulator
    for g0 in range(0, h, tiling.Th):
        for g in range(g0, min(g0 + tiling.Th, h)):
            rows = slice(g * dh, (g + 1) * dh)
            out[:, g * do:(g + 1) * do] = _tiled_product(
                a[:, rows], w[rows, :], tiling.Ti, tiling.To)
    return to_acc(out, in_frac)


def naive_gemm(A: QTensor, W: QTensor) -> np.ndarray:
    """Triple-loop integer product, kept as a brute-force reference."""
    a = A.data.astype(int).tolist()
    w = W.data.astype(int).tolist()
    n, di, do = len(a), len(w), len(w[0]) if w else 0
    out = [[0] * do for _ in range(n)]
    for r in range(n):
        for c in range(do):
            s = 0
            for k in range(di):
                s += a[r][k] * w[k][c]
            out[r][c] = s
    return np.array(out, dtype=np.int64).reshape(n, do)


def mac_count(N: int, D_ch: int, h: int, D_attn_s: int, D_fc: int) -> int:
    """MACs of one transformer block."""
    if min(N, D_ch, h, D_attn_s, D_fc) < 1:
        raise ValueError("all block dimensions must be positive")
    hd = h * D_attn_s
    return 4 * N * D_ch * hd + 2 * N * N * hd + 8 * N * D_ch * D_fc


def block_layers(N: int, D_ch: int, h: int, D_attn_s: int, D_fc: int):
    """(LayerDims, GemmMode, macs) for the six GEMMs of one block."""
    hd = h * D_attn_s
    return [
        (LayerDims(N, D_ch, 3 * hd, 1), ACCUMULATE, 3 * N * D_ch * hd),
        (LayerDims(N, hd, h * N, 2), PerHead(h), N * N * hd),
        (LayerDims(N, h * N, hd, 3), PerHead(h), N * N * hd),
        (LayerDims(N, hd, D_ch, 4), ACCUMULATE, N * hd * D_ch),
        (LayerDims(N, D_ch, 4 * D_fc, 5), ACCUMULATE, 4 * N * D_ch * D_fc),
        (LayerDims(N, 4 * D_fc, D_ch, 6), ACCUMULATE, 4 * N * D_fc * D_ch),
    ]


def cycle_estimate(dims: LayerDims, mode: GemmMode = ACCUMULATE,
                   tiling: TilingConfig | None = None,
                   pipeline_fill: int = DEFAULT_PIPELINE_FILL) -> int:
    """One tile-MAC step per cycle, fully overlapped transfers, plus a fill constant.

    ``dims.Do`` is the total output width; in per-head mode each head
    produces ``Do / h`` columns from ``Di / h`` inputs.
    """
    tiling = tiling or TilingConfig()
    if not mode.per_head:
        return (dims.N * math.ceil(dims.Di / tiling.Ti) * math.ceil(dims.Do / tiling.To)
                + pipeline_fill)
    h = mode.heads
    if dims.Di % h or dims.Do % h:
        raise ValueError(f"{dims} not divisible into {h} heads")
    return (math.ceil(h / tiling.Th) * dims.N
            * math.ceil(dims.Di // h / tiling.Ti) * math.ceil(dims.Do // h / tiling.To)
            + pipeline_fill)


def cycles_to_ms(cycles: float) -> float:
    return cycles / CYCLES_PER_MS


def block_cycles(N: int, D_ch: int, h: int, D_attn_s: int, D_fc: int,
                 tiling: TilingConfig | None = None,
                 pipeline_fill: int = DEFAULT_PIPELINE_FILL) -> int:
    return sum(cycle_estimate(dims, mode, tiling, pipeline_fill)
               for dims, mode, _ in block_layers(N, D_ch, h, D_attn_s, D_fc))
