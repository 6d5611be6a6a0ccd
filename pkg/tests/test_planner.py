import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vitprune.planner import (
    Infeasible, LatencyTable, Plan, exhaustive_search, lookup, merge_stages,
    model_latency, parse_oracle, plan_step1, quadratic_oracle, ratio_for_latency,
    ratio_loss, total_loss,
)

DEIT_T = LatencyTable.builtin("deit-t")
DEIT_S = LatencyTable.builtin("deit-s")


def test_lookup_reproduces_table():
    for table in (DEIT_T, DEIT_S):
        for r, t in zip(table.ratios, table.latencies):
            assert lookup(table, r) == t
    assert lookup(DEIT_T, 1.0) == 1.034
    assert lookup(DEIT_T, 0.5) == 0.636
    assert lookup(DEIT_S, 0.75) == pytest.approx(2.410, abs=1e-12)


def test_lookup_clamps_and_rejects():
    assert lookup(DEIT_T, 0.2) == 0.636
    with pytest.raises(ValueError):
        lookup(DEIT_T, 1.2)
    with pytest.raises(ValueError):
        lookup(DEIT_T, 0.0)


@settings(max_examples=200)
@given(st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_lookup_monotone(a, b):
    lo, hi = sorted((a, b))
    assert lookup(DEIT_T, lo) <= lookup(DEIT_T, hi)


def test_inverse_lookup_on_grid():
    for r, t in zip(DEIT_S.ratios, DEIT_S.latencies):
        assert ratio_for_latency(DEIT_S, t) == pytest.approx(r, abs=1e-12)


def test_model_latency():
    assert model_latency([1.0] * 12, DEIT_T) == pytest.approx(12.408, abs=1e-9)
    assert model_latency([], DEIT_T) == 0.0


def test_ratio_loss_examples():
    full = np.ones((1, 10))
    assert ratio_loss([1.0], [full]) == 0.0
    assert ratio_loss([0.5], [full]) == pytest.approx(0.25)
    batch = np.zeros((2, 10))
    batch[0, :4] = 1
    batch[1, :6] = 1
    assert ratio_loss([0.5], [batch]) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        ratio_loss([0.5], [np.zeros((0, 10))])


def test_ratio_loss_batch_permutation_invariant():
    rng = np.random.default_rng(0)
    masks = [rng.random((5, 20)) < 0.6, rng.random((5, 20)) < 0.3]
    perm = rng.permutation(5)
    assert ratio_loss([0.7, 0.4], masks) == ratio_loss([0.7, 0.4], [m[perm] for m in masks])


def test_total_loss():
    assert total_loss(1.0, 0.4, 0.05) == pytest.approx(1.3)
    assert total_loss(0, 0, 0) == 0
    assert total_loss(0.8, 0.3, 0.2, lambda_ratio=0) == pytest.approx(0.8 + 0.15)


def test_plan_unpruned_when_limit_is_loose():
    plan = plan_step1(12, DEIT_T, quadratic_oracle(10), 13.0)
    assert isinstance(plan, Plan)
    assert plan.ratios == [1.0] * 12


def test_plan_unreachable_limit():
    out = plan_step1(12, DEIT_T, quadratic_oracle(10), 1.0)
    assert isinstance(out, Infeasible)
    assert out.binding == "latency_limit"
    assert json.loads(out.to_json())["feasible"] is False


def test_plan_limit_11_agrees_with_exhaustive_search():
    # 10 * sum((1 - rho)^2) < 0.5 caps total savings near 0.36 ms, so 11 ms cannot be met
    oracle = quadratic_oracle(10)
    out = plan_step1(12, DEIT_T, oracle, 11.0, a_drop=0.5)
    # the oracle and latency are symmetric in the tunable blocks, so multisets suffice
    brute = [c for c in itertools.combinations_with_replacement(DEIT_T.ratios, 9)
             if model_latency([1.0] * 3 + list(c), DEIT_T) <= 11.0 and oracle(c) < 0.5]
    assert isinstance(out, Infeasible) and not brute


def test_plan_feasible_with_gentle_oracle():
    oracle = quadratic_oracle(0.1)
    plan = plan_step1(12, DEIT_T, oracle, 9.0)
    assert isinstance(plan, Plan)
    assert plan.est_latency_ms <= 9.0 and oracle(plan.ratios) < 0.5
    assert plan.ratios[:3] == [1.0, 1.0, 1.0]


def random_scenario(rng):
    depth = int(rng.integers(4, 8))
    coef = float(rng.uniform(0.1, 10))
    rho_init = float(rng.choice(DEIT_T.ratios))
    lo, hi = depth * DEIT_T.latencies[-1], depth * DEIT_T.latencies[0]
    limit = float(rng.uniform(lo - 0.3, hi + 0.1))
    return depth, coef, rho_init, limit


def test_returned_plans_are_always_feasible():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        depth, coef, rho_init, limit = random_scenario(rng)
        oracle = quadratic_oracle(coef)
        out = plan_step1(depth, DEIT_T, oracle, limit, 0.5, rho_init)
        if isinstance(out, Plan):
            assert model_latency(out.ratios, DEIT_T) <= limit
            assert oracle(out.ratios) < 0.5
            assert out.ratios[:3] == [1.0] * 3


def test_greedy_counterexample_documented():
    # Two blocks at 0.9 save more latency than one at 0.8 for the same drop budget,
    # but the block-by-block walk commits to the last block first.
    oracle = quadratic_oracle(12.0)
    limit = 5 * 1.034 - 0.17
    brute = exhaustive_search(5, DEIT_T, oracle, limit, 0.5)
    assert brute
    assert isinstance(plan_step1(5, DEIT_T, oracle, limit, 0.5, 1.0), Infeasible)


def test_merge_example():
    plan = Plan([1.0, 1.0, 1.0, 0.70, 0.68, 0.65, 0.40], 0.0, 0.0)
    merged = merge_stages(plan, table=DEIT_T)
    assert merged.stages == [(4, 0.70), (7, 0.40)]
    assert merged.ratios == [1.0, 1.0, 1.0, 0.70, 0.70, 0.70, 0.40]
    assert merged.est_latency_ms == pytest.approx(model_latency(merged.ratios, DEIT_T))


def test_merge_trivial_cases():
    same = merge_stages(Plan([1.0] * 3 + [0.6] * 4, 0, 0))
    assert same.stages == [(4, 0.6)]
    alt = merge_stages(Plan([1.0] * 3 + [0.9, 0.5, 0.9, 0.5], 0, 0))
    assert [r for _, r in alt.stages] == [0.9, 0.5, 0.9, 0.5]


@settings(max_examples=200)
@given(st.lists(st.sampled_from([1.0, 0.9, 0.8, 0.7, 0.6, 0.5]), min_size=0, max_size=9))
def test_merge_never_adds_selectors(tail):
    plan = Plan([1.0] * 3 + tail, 0, 0)
    merged = merge_stages(plan)
    assert merged.ratios[:3] == [1.0] * 3
    assert len(merged.selector_blocks) <= len(plan.selector_blocks)


def test_table_csv_round_trip():
    text = DEIT_S.to_csv()
    assert text.splitlines()[:2] == ["model=deit-s", "keep_ratio,latency_ms"]
    assert LatencyTable.from_csv(text) == DEIT_S


@pytest.mark.parametrize("text", [
    "",
    "model=x\nratio,ms\n1.0,1.0\n",
    "model=x\nkeep_ratio,latency_ms\n1.0,abc\n",
    "model=x\nkeep_ratio,latency_ms\n1.0,1.0,3\n",
    "model=x\nkeep_ratio,latency_ms\n0.9,1.0\n",
    "model=x\nkeep_ratio,latency_ms\n1.0,1.0\n0.5,2.0\n",
])
def test_malformed_tables(text):
    with pytest.raises(ValueError):
        LatencyTable.from_csv(text)


def test_parse_oracle():
    assert parse_oracle("quadratic:2")([0.5, 1.0]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        parse_oracle("measured")
