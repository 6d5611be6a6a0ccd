"""Linear-layer executor shared by the backbone and the token selectors.

In quantized mode every GEMM input is quantized to 8 bits with the
activation policy, multiplied on :func:`tiled_gemm`, and the int32 result is
requantized back to 8 bits. In float mode the same calls run in float64,
which is what the reference comparisons use.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fixedpoint import (
    AccTensor, QTensor, QuantPolicy, choose_format, dequantize, dequantize_acc,
    quantize, requantize, shift_round_even, to_acc,
)
from .gemm import ACCUMULATE, GemmMode, PerHead, TilingConfig, tiled_gemm


def as_float(w) -> np.ndarray:
    return dequantize(w) if isinstance(w, QTensor) else np.asarray(w, dtype=np.float64)


def as_q(w) -> QTensor:
    if isinstance(w, QTensor):
        return w
    arr = np.asarray(w, dtype=np.float64)
    return quantize(arr, choose_format(arr))


def _align_bias(bias: QTensor, acc_frac: int) -> np.ndarray:
    b = bias.data.astype(np.int64)
    diff = acc_frac - bias.frac_bits
    if diff >= 0:
        return b << diff
    return shift_round_even(b, -diff)


@dataclass
class Engine:
    quantized: bool = False
    tiling: TilingConfig = field(default_factory=TilingConfig)
    policy: QuantPolicy = field(default_factory=QuantPolicy)

    def quant(self, x: np.ndarray) -> np.ndarray:
        """Round an activation onto the 8-bit grid (no-op in float mode)."""
        if not self.quantized:
            return x
        q = quantize(x, self.policy.format_for(x), self.policy.counter)
        return dequantize(q)

    def _requant(self, acc: AccTensor) -> np.ndarray:
        real = dequantize_acc(acc)
        fmt = self.policy.format_for(real)
        if fmt.frac_bits > acc.in_frac_bits:
            fmt = type(fmt)(acc.in_frac_bits)
        return dequantize(requantize(acc, fmt, self.policy.counter))

    def _gemm(self, x: np.ndarray, w, mode: GemmMode, bias=None) -> np.ndarray:
        qx = quantize(x, self.policy.format_for(x), self.policy.counter)
        qw = as_q(w)
        acc = tiled_gemm(qx, qw, mode, self.tiling)
        if bias is not None:
            total = acc.data.astype(np.int64) + _align_bias(as_q(bias), acc.in_frac_bits)
            acc = to_acc(total, acc.in_frac_bits)
        return self._requant(acc)

    def linear(self, x: np.ndarray, w, b=None) -> np.ndarray:
        if self.quantized:
            return self._gemm(x, w, ACCUMULATE, b)
        y = np.asarray(x, dtype=np.float64) @ as_float(w)
        if b is not None:
            y = y + as_float(b)
        return y

    def per_head(self, a: np.ndarray, w: np.ndarray, h: int) -> np.ndarray:
        """Grouped product: column group g of ``a`` times row group g of ``w``."""
        if self.quantized:
            return self._gemm(a, w, PerHead(h))
        di = a.shape[1] // h
        return np.concatenate(
            [a[:, g * di:(g + 1) * di] @ w[g * di:(g + 1) * di] for g in range(h)], axis=1)
