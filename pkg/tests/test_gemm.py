import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vitprune.fixedpoint import FxFormat, QTensor
from vitprune.gemm import (
    ACCUMULATE, LayerDims, PerHead, TilingConfig, block_cycles, block_layers,
    cycle_estimate, cycles_to_ms, mac_count, naive_gemm, tiled_gemm,
)
from vitprune.planner import LatencyTable


def rand_q(rng, shape, frac=4):
    return QTensor(rng.integers(-128, 128, size=shape, dtype=np.int8), FxFormat(frac))


def test_identity_pattern():
    A = QTensor(np.array([[64, 0], [0, 64]], np.int8), FxFormat(6))   # 1.0 on the diagonal
    W = QTensor(np.array([[3, -7], [12, 5]], np.int8), FxFormat(2))
    acc = tiled_gemm(A, W)
    assert acc.in_frac_bits == 8
    assert np.array_equal(acc.data, W.data.astype(np.int32) * 64)


def test_all_tilings_match_naive():
    rng = np.random.default_rng(0)
    A, W = rand_q(rng, (5, 7)), rand_q(rng, (7, 3))
    ref = naive_gemm(A, W)
    for Ti, To in itertools.product((1, 2, 4, 8), repeat=2):
        out = tiled_gemm(A, W, ACCUMULATE, TilingConfig(Ti, To, 1))
        assert np.array_equal(out.data, ref), (Ti, To)


def test_per_head_two_independent_products():
    rng = np.random.default_rng(1)
    A, W = rand_q(rng, (4, 6)), rand_q(rng, (6, 3))
    out = tiled_gemm(A, W, PerHead(2), TilingConfig(2, 2, 1)).data
    for g in range(2):
        a = QTensor(A.data[:, 3 * g:3 * g + 3], A.fmt)
        w = QTensor(W.data[3 * g:3 * g + 3], W.fmt)
        assert np.array_equal(out[:, 3 * g:3 * g + 3], naive_gemm(a, w))


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 16), h=st.integers(1, 4), dh=st.integers(1, 4), do=st.integers(1, 16),
       ti=st.integers(1, 16), to=st.integers(1, 16), th=st.integers(1, 4), seed=st.integers(0, 2**16))
def test_tiling_invariance_property(n, h, dh, do, ti, to, th, seed):
    rng = np.random.default_rng(seed)
    A, W = rand_q(rng, (n, h * dh)), rand_q(rng, (h * dh, do))
    tiling = TilingConfig(ti, to, th)
    assert np.array_equal(tiled_gemm(A, W, ACCUMULATE, tiling).data, naive_gemm(A, W))
    per = tiled_gemm(A, W, PerHead(h), tiling).data
    ref = np.hstack([naive_gemm(QTensor(A.data[:, g * dh:(g + 1) * dh], A.fmt),
                                QTensor(W.data[g * dh:(g + 1) * dh], W.fmt)) for g in range(h)])
    assert np.array_equal(per, ref)


def test_gemm_errors():
    rng = np.random.default_rng(2)
    with pytest.raises(ValueError):
        tiled_gemm(rand_q(rng, (2, 3)), rand_q(rng, (4, 2)))
    with pytest.raises(ValueError):
        tiled_gemm(rand_q(rng, (2, 5)), rand_q(rng, (5, 2)), PerHead(2))
    with pytest.raises(ValueError):
        TilingConfig(64, 64, 1)    # exceeds the 2048-MAC budget


def test_worst_case_accumulator_fits():
    A = QTensor(np.full((1, 2048), -128, np.int8), FxFormat(0))
    W = QTensor(np.full((2048, 1), -128, np.int8), FxFormat(0))
    assert tiled_gemm(A, W).data[0, 0] == 2048 * 128 * 128


def _macs_by_hand(N, D, h, d, F):
    qkv = 3 * N * D * h * d
    attn = 2 * N * N * h * d
    proj = N * h * d * D
    ffn = 2 * 4 * N * D * F
    return qkv + attn + proj + ffn


def test_mac_count_examples():
    assert mac_count(197, 192, 3, 64, 192) == 102_049_152
    assert mac_count(197, 384, 6, 64, 384) == 378_391_296
    assert mac_count(1, 192, 3, 64, 192) == 4 * 192 * 192 + 2 * 192 + 8 * 192 * 192
    assert mac_count(197, 192, 3, 64, 192) == _macs_by_hand(197, 192, 3, 64, 192)
    assert 12 * mac_count(197, 192, 3, 64, 192) / 1e9 == pytest.approx(1.2246, abs=1e-4)


def test_block_layers_sum_to_mac_count():
    for n in (1, 7, 197):
        assert sum(m for *_, m in block_layers(n, 384, 6, 64, 384)) == mac_count(n, 384, 6, 64, 384)


def test_mac_count_quadratic_coefficient():
    ns = np.arange(1, 9)
    D, h, d, F = 32, 4, 8, 32
    vals = [mac_count(int(n), D, h, d, F) for n in ns]
    coef = np.polyfit(ns, vals, 2)
    assert coef[0] == pytest.approx(2 * h * d, rel=1e-9)
    assert coef[2] == pytest.approx(0.0, abs=1e-6)


def test_cycle_estimate_examples():
    dims = LayerDims(10, 64, 48, 1)
    assert cycle_estimate(dims, ACCUMULATE, TilingConfig(64, 48, 1, mac_budget=4096), 0) == 10
    assert cycle_estimate(dims, ACCUMULATE, TilingConfig(8, 16, 1), 0) == 10 * 8 * 3
    assert cycle_estimate(dims, ACCUMULATE, TilingConfig(16, 16, 1), 0) == 10 * 4 * 3
    per = LayerDims(10, 3 * 16, 3 * 10, 2)
    assert cycle_estimate(per, PerHead(3), TilingConfig(16, 10, 3), 0) == 10
    assert cycle_estimate(per, PerHead(3), TilingConfig(16, 10, 2), 5) == 2 * 10 + 5
    assert cycles_to_ms(150_000) == 1.0


def test_block_latency_decreases_with_keep_ratio():
    table = LatencyTable.builtin("deit-t")
    tiling = TilingConfig(32, 32, 2)
    lat = [cycles_to_ms(block_cycles(int(r * 196) + 2, 192, 3, 64, 192, tiling))
           for r in table.ratios]
    assert all(a > b for a, b in zip(lat, lat[1:]))
    ns = range(2, 198)
    cyc = [block_cycles(n, 192, 3, 64, 192, tiling) for n in ns]
    assert all(a < b for a, b in zip(cyc, cyc[1:]))
