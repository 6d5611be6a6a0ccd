"""8-bit fixed-point tensors with power-of-two scales.

Every quantized value is ``stored * 2**-frac_bits`` with ``stored`` a
two's-complement int8. Wide GEMM results live in int32 accumulators that
carry ``in_frac_bits`` (input frac + weight frac) and are brought back to
8 bits with a rounding arithmetic shift.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

QMIN = -128
QMAX = 127
ACC_MIN = -(1 << 31)
ACC_MAX = (1 << 31) - 1


@dataclass(frozen=True)
class FxFormat:
    frac_bits: int
    total_bits: int = 8
    signed: bool = True

    def __post_init__(self):
        if self.total_bits != 8 or not self.signed:
            raise ValueError("only signed 8-bit formats are supported")
        if not 0 <= self.frac_bits <= 7:
            raise ValueError(f"frac_bits must be in [0, 7], got {self.frac_bits}")

    @property
    def lsb(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def min_value(self) -> float:
        return QMIN * self.lsb

    @property
    def max_value(self) -> float:
        return QMAX * self.lsb


@dataclass
class SaturationCounter:
    """Diagnostic tally of elements clipped by quantize/requantize."""

    count: int = 0


@dataclass(frozen=True)
class QTensor:
    data: np.ndarray  # int8, already shaped
    fmt: FxFormat

    def __post_init__(self):
        if self.data.dtype != np.int8:
            raise TypeError(f"QTensor payload must be int8, got {self.data.dtype}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def frac_bits(self) -> int:
        return self.fmt.frac_bits


@dataclass(frozen=True)
class AccTensor:
    data: np.ndarray  # int32
    in_frac_bits: int

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


def _finite(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


def choose_format(values) -> FxFormat:
    """Largest frac_bits for which no element saturates."""
    arr = _finite(values)
    if arr.size == 0:
        raise ValueError("cannot choose a format for an empty tensor")
    hi = float(arr.max())
    lo = float(arr.min())
    for frac in range(7, -1, -1):
        scale = float(1 << frac)
        if np.rint(hi * scale) <= QMAX and np.rint(lo * scale) >= QMIN:
            return FxFormat(frac)
    # too large even for frac_bits=0; quantize will saturate
    return FxFormat(0)


def quantize(values, fmt: FxFormat, counter: SaturationCounter | None = None) -> QTensor:
    arr = _finite(values)
    scaled = np.rint(np.ldexp(arr, fmt.frac_bits))
    if counter is not None:
        counter.count += int(np.count_nonzero((scaled > QMAX) | (scaled < QMIN)))
    return QTensor(np.clip(scaled, QMIN, QMAX).astype(np.int8), fmt)


def dequantize(q: QTensor) -> np.ndarray:
    return np.ldexp(q.data.astype(np.float64), -q.fmt.frac_bits)


def dequantize_acc(acc: AccTensor) -> np.ndarray:
    return np.ldexp(acc.data.astype(np.float64), -acc.in_frac_bits)


def shift_round_even(values: np.ndarray, shift: int) -> np.ndarray:
    """Arithmetic right shift of int64 values with round-half-to-even."""
    v = np.asarray(values, dtype=np.int64)
    if shift == 0:
        return v.copy()
    q = v >> shift  # floor
    rem = v - (q << shift)
    half = np.int64(1) << (shift - 1)
    up = (rem > half) | ((rem == half) & ((q & 1) == 1))
    return q + up.astype(np.int64)


def requantize(acc: AccTensor, out_fmt: FxFormat,
               counter: SaturationCounter | None = None) -> QTensor:
    shift = acc.in_frac_bits - out_fmt.frac_bits
    if shift < 0:
        raise ValueError(
            f"cannot requantize from {acc.in_frac_bits} to {out_fmt.frac_bits} "
            "fractional bits (upshift not supported)")
    rounded = shift_round_even(acc.data, shift)
    if counter is not None:
        counter.count += int(np.count_nonzero((rounded > QMAX) | (rounded < QMIN)))
    return QTensor(np.clip(rounded, QMIN, QMAX).astype(np.int8), out_fmt)


def to_acc(values: np.ndarray, in_frac_bits: int) -> AccTensor:
    """Wrap int64 results as an int32 accumulator, refusing silent wraparound."""
    v = np.asarray(values, dtype=np.int64)
    if v.size and (v.max() > ACC_MAX or v.min() < ACC_MIN):
        raise OverflowError("accumulator exceeds 32 bits")
    return AccTensor(v.astype(np.int32), in_frac_bits)


def fake_quantize(values, fmt: FxFormat | None = None,
                  counter: SaturationCounter | None = None) -> np.ndarray:
    """Round values onto the 8-bit grid (dynamic format when fmt is None)."""
    arr = _finite(values)
    if fmt is None:
        fmt = choose_format(arr)
    return dequantize(quantize(arr, fmt, counter))


@dataclass
class QuantPolicy:
    """Activation format policy: dynamic per-tensor choice or a fixed frac_bits."""

    fixed_frac_bits: int | None = None
    counter: SaturationCounter = field(default_factory=SaturationCounter)

    def format_for(self, values) -> FxFormat:
        if self.fixed_frac_bits is not None:
            return FxFormat(self.fixed_frac_bits)
        return choose_format(values)
