"""Hardware-friendly approximations of erf/GELU, exp/Softmax and Sigmoid.

All functions accept scalars or numpy arrays and operate on real values.
``delta1``/``delta2`` scale the erf and softmax outputs; values below one
shrink the propagated quantization error.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import mpmath
import numpy as np

LN2 = math.log(2.0)


@dataclass(frozen=True)
class ApproxParams:
    a: float = -0.2888
    b: float = -1.769
    exp_c0: float = 0.3585
    exp_c1: float = 1.353
    exp_c2: float = 0.344
    delta1: float = 0.5
    delta2: float = 0.5

    def __post_init__(self):
        for name in ("delta1", "delta2"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must be in (0, 1], got {v}")


DEFAULT = ApproxParams()


def erf_aprx(x, delta1: float = DEFAULT.delta1):
    x = np.asarray(x, dtype=np.float64)
    a, b = DEFAULT.a, DEFAULT.b
    clipped = np.minimum(np.abs(x), -b)
    out = np.sign(x) * delta1 * (a * (clipped + b) ** 2 + 1.0)
    return out if out.ndim else float(out)


def gelu_aprx(x, delta1: float = DEFAULT.delta1):
    x = np.asarray(x, dtype=np.float64)
    out = 0.5 * x * (1.0 + erf_aprx(x / math.sqrt(2.0), delta1))
    return out if np.ndim(out) else float(out)


def exp_aprx(x):
    """exp on non-positive inputs via range reduction to (-ln2, 0] plus a shift."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x > 0):
        raise ValueError("exp_aprx requires x <= 0 (subtract the max first)")
    z = np.floor(-x / LN2)
    p = x + z * LN2
    poly = DEFAULT.exp_c0 * (p + DEFAULT.exp_c1) ** 2 + DEFAULT.exp_c2
    out = np.ldexp(poly, -z.astype(np.int32))
    return out if out.ndim else float(out)


def softmax_aprx(x, delta2: float = DEFAULT.delta2, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("softmax of an empty vector")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = exp_aprx(shifted)
    return delta2 * e / e.sum(axis=axis, keepdims=True)


# (lower bound of |x|, slope, intercept), scanned top-down
_PLAN_SEGMENTS = (
    (5.0, 0.0, 1.0),
    (2.375, 0.03125, 0.84375),
    (1.0, 0.125, 0.625),
    (0.0, 0.25, 0.5),
)


def sigmoid_plan(x):
    x = np.asarray(x, dtype=np.float64)
    y = np.abs(x)
    out = np.empty_like(y)
    done = np.zeros(y.shape, dtype=bool)
    for lo, slope, icpt in _PLAN_SEGMENTS:
        sel = (y >= lo) & ~done
        out[sel] = slope * y[sel] + icpt
        done |= sel
    out = np.where(x < 0, 1.0 - out, out)
    return out if out.ndim else float(out)


# exact references, evaluated with mpmath
def _gelu_exact(x):
    x = mpmath.mpf(x)
    return x / 2 * (1 + mpmath.erf(x / mpmath.sqrt(2)))


def _sigmoid_exact(x):
    return 1 / (1 + mpmath.exp(-mpmath.mpf(x)))


_SWEEP_FNS = {
    "gelu": (lambda xs, d: gelu_aprx(xs, d), _gelu_exact),
    "erf": (lambda xs, d: erf_aprx(xs, d), lambda x: mpmath.erf(mpmath.mpf(x))),
    "exp": (lambda xs, d: exp_aprx(xs), lambda x: mpmath.exp(mpmath.mpf(x))),
    "sigmoid": (lambda xs, d: sigmoid_plan(xs), _sigmoid_exact),
}

SWEEP_FUNCTIONS = tuple(_SWEEP_FNS)


def sweep_grid(lo: float, hi: float, step: float) -> np.ndarray:
    if step <= 0:
        raise ValueError("step must be positive")
    if hi < lo:
        raise ValueError("empty range: hi < lo")
    n = int(math.floor((hi - lo) / step + 1e-9))
    return lo + step * np.arange(n + 1, dtype=np.float64)


def error_sweep(fn_id: str, lo: float, hi: float, step: float,
                delta: float = 1.0) -> list[tuple[float, float, float, float]]:
    """Rows of (x, approx, exact, abs_err) on lo, lo+step, ..., <= hi."""
    if fn_id not in _SWEEP_FNS:
        raise KeyError(f"unknown function {fn_id!r}; choose from {', '.join(SWEEP_FUNCTIONS)}")
    approx_fn, exact_fn = _SWEEP_FNS[fn_id]
    xs = sweep_grid(lo, hi, step)
    approx = np.atleast_1d(approx_fn(xs, delta))
    rows = []
    with mpmath.workdps(30):
        for x, ap in zip(xs.tolist(), approx.tolist()):
            ex = float(exact_fn(x))
            rows.append((x, ap, ex, abs(ap - ex)))
    return rows


def sweep_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "approx", "exact", "abs_err"])
    for row in rows:
        w.writerow([f"{v:.9g}" for v in row])
    return buf.getvalue()
