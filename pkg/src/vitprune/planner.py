"""Latency-aware selector placement.

Per-block keep ratios are looked up in a measured latency table; the
planner walks blocks from last to fourth, lowering each block's ratio one
table step at a time while an accuracy oracle stays under budget, then
merges neighbouring blocks with similar ratios into stages.
"""
from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

FIRST_TUNABLE_BLOCK = 4
MERGE_EPS = 0.085

AccuracyOracle = Callable[[Sequence[float]], float]

# measured single-block latency (ms) on the reference FPGA, keep ratio 1.0 .. 0.5
_TABLE_RATIOS = (1.0, 0.9, 0.8, 0.7, 0.6, 0.5)
_TABLE_MS = {
    "deit-t": (1.034, 0.945, 0.881, 0.764, 0.702, 0.636),
    "deit-s": (3.161, 2.837, 2.565, 2.255, 1.973, 1.682),
}


@dataclass(frozen=True)
class LatencyTable:
    model: str
    ratios: tuple[float, ...]        # strictly decreasing
    latencies: tuple[float, ...]

    def __post_init__(self):
        if len(self.ratios) != len(self.latencies) or not self.ratios:
            raise ValueError("latency table needs matching, non-empty columns")
        order = sorted(zip(self.ratios, self.latencies), reverse=True)
        object.__setattr__(self, "ratios", tuple(r for r, _ in order))
        object.__setattr__(self, "latencies", tuple(t for _, t in order))
        if any(not 0.0 < r <= 1.0 for r in self.ratios):
            raise ValueError("keep ratios must lie in (0, 1]")
        if self.ratios[0] != 1.0:
            raise ValueError("latency table must contain keep ratio 1.0")
        if any(t <= 0 for t in self.latencies):
            raise ValueError("latencies must be positive")
        for (r0, t0), (r1, t1) in zip(order, order[1:]):
            if r0 == r1 or t1 >= t0:
                raise ValueError("latency must strictly decrease with keep ratio")

    @classmethod
    def builtin(cls, model: str) -> "LatencyTable":
        try:
            return cls(model, _TABLE_RATIOS, _TABLE_MS[model])
        except KeyError:
            raise KeyError(f"no built-in latency table for {model!r}") from None

    @classmethod
    def from_csv(cls, text: str) -> "LatencyTable":
        """First line names the model; then ``keep_ratio,latency_ms`` and rows."""
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if len(lines) < 3:
            raise ValueError("latency table CSV needs a model line, a header and rows")
        model = lines[0].strip().lstrip("#").strip()
        model = model.split("=", 1)[1].strip() if "=" in model else model
        rows = list(csv.reader(lines[1:]))
        if [c.strip() for c in rows[0]] != ["keep_ratio", "latency_ms"]:
            raise ValueError("latency table header must be 'keep_ratio,latency_ms'")
        ratios, lat = [], []
        for i, row in enumerate(rows[1:], start=3):
            if len(row) != 2:
                raise ValueError(f"line {i}: expected 2 columns")
            try:
                ratios.append(float(row[0]))
                lat.append(float(row[1]))
            except ValueError:
                raise ValueError(f"line {i}: non-numeric entry") from None
        return cls(model, tuple(ratios), tuple(lat))

    def to_csv(self) -> str:
        out = [f"model={self.model}", "keep_ratio,latency_ms"]
        out += [f"{r:g},{t:g}" for r, t in zip(self.ratios, self.latencies)]
        return "\n".join(out) + "\n"

    @property
    def min_latency(self) -> float:
        return self.latencies[-1]


def lookup(table: LatencyTable, rho: float) -> float:
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"keep ratio {rho} outside (0, 1]")
    if rho <= table.ratios[-1]:
        return table.latencies[-1]
    # np.interp wants increasing x
    return float(np.interp(rho, table.ratios[::-1], table.latencies[::-1]))


def ratio_for_latency(table: LatencyTable, ms: float) -> float:
    """Inverse lookup: keep ratio whose latency equals ``ms`` (clamped to the table)."""
    if ms >= table.latencies[0]:
        return 1.0
    if ms <= table.latencies[-1]:
        return table.ratios[-1]
    return float(np.interp(ms, table.latencies[::-1], table.ratios[::-1]))


def model_latency(ratios: Sequence[float], table: LatencyTable) -> float:
    return float(sum(lookup(table, r) for r in ratios))


def ratio_loss(targets: Sequence[float], masks) -> float:
    """Squared gap between each stage target and the batch-mean keep fraction.

    ``masks[i]`` is a (B, N) array of 0/1 keep decisions for stage i.
    """
    total = 0.0
    if len(targets) != len(masks):
        raise ValueError("one mask batch per target ratio")
    for kappa, m in zip(targets, masks):
        m = np.asarray(m, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
            raise ValueError("mask batch must be a non-empty (B, N) array")
        total += (kappa - m.mean(axis=1).mean()) ** 2
    return float(total)


def total_loss(cls_loss: float, distill_loss: float, ratio_term: float,
               lambda_distill: float = 0.5, lambda_ratio: float = 2.0) -> float:
    return cls_loss + lambda_distill * distill_loss + lambda_ratio * ratio_term


@dataclass
class Plan:
    ratios: list[float]                       # per block, index 0 = block 1
    est_latency_ms: float
    oracle_drop: float
    stages: list[tuple[int, float]] = field(default_factory=list)   # (start block, ratio)

    @property
    def selector_blocks(self) -> list[int]:
        if self.stages:
            return [b for b, r in self.stages if r < 1.0]
        return [i + 1 for i, r in enumerate(self.ratios) if r < 1.0]

    def to_json(self) -> str:
        return json.dumps({
            "feasible": True,
            "block_ids": list(range(1, len(self.ratios) + 1)),
            "ratios": self.ratios,
            "selector_blocks": self.selector_blocks,
            "stages": [{"start_block": b, "ratio": r} for b, r in self.stages],
            "est_latency_ms": round(self.est_latency_ms, 9),
            "oracle_drop": round(self.oracle_drop, 9),
        }, indent=2)


@dataclass
class Infeasible:
    reason: str
    binding: str      # "latency_limit" or "a_drop"
    best_latency_ms: float

    def to_json(self) -> str:
        return json.dumps({"feasible": False, "binding_constraint": self.binding,
                           "reason": self.reason,
                           "best_latency_ms": round(self.best_latency_ms, 9)}, indent=2)


def _next_lower(table: LatencyTable, current_ms: float) -> float | None:
    lower = [t for t in table.latencies if t < current_ms - 1e-12]
    return max(lower) if lower else None


def plan_step1(depth: int, table: LatencyTable, oracle: AccuracyOracle,
               latency_limit: float, a_drop: float = 0.5, rho_init: float = 1.0):
    """Greedy block-by-block ratio search; returns a Plan or Infeasible."""
    if not 0.0 < rho_init <= 1.0:
        raise ValueError("rho_init must be in (0, 1]")
    if a_drop <= 0:
        raise ValueError("a_drop must be positive")
    rho = [1.0] * depth
    t = model_latency(rho, table)
    a = oracle(rho)
    if t <= latency_limit and a < a_drop:
        return Plan(rho, t, a)
    for i in range(depth - 1, FIRST_TUNABLE_BLOCK - 2, -1):
        last_ok = rho[i]
        rho[i] = rho_init
        a, t = oracle(rho), model_latency(rho, table)
        while a < a_drop:
            last_ok = rho[i]
            if t <= latency_limit:
                return Plan(list(rho), t, a)
            target = _next_lower(table, lookup(table, rho[i]))
            if target is None:
                break
            rho[i] = ratio_for_latency(table, target)
            a, t = oracle(rho), model_latency(rho, table)
        rho[i] = last_ok
    t = model_latency(rho, table)
    return Infeasible(
        f"block {FIRST_TUNABLE_BLOCK} reached at {t:.3f} ms > limit {latency_limit:.3f} ms",
        "latency_limit", t)


def merge_stages(plan: Plan, oracle: AccuracyOracle | None = None,
                 table: LatencyTable | None = None, eps: float = MERGE_EPS) -> Plan:
    """Fold runs of blocks whose ratio is within ``eps`` of the run's first block."""
    ratios = list(plan.ratios)
    stages: list[tuple[int, float]] = []
    start = FIRST_TUNABLE_BLOCK - 1
    for i in range(start, len(ratios)):
        if stages and abs(ratios[i] - stages[-1][1]) < eps:
            ratios[i] = stages[-1][1]
        else:
            stages.append((i + 1, ratios[i]))
    est = model_latency(ratios, table) if table is not None else plan.est_latency_ms
    drop = oracle(ratios) if oracle is not None else plan.oracle_drop
    return Plan(ratios, est, drop, stages)


def exhaustive_search(depth: int, table: LatencyTable, oracle: AccuracyOracle,
                      latency_limit: float, a_drop: float):
    """All grid assignments of the tunable blocks that meet both constraints."""
    tunable = depth - FIRST_TUNABLE_BLOCK + 1
    feasible = []
    for combo in itertools.product(table.ratios, repeat=max(tunable, 0)):
        rho = [1.0] * (depth - len(combo)) + list(combo)
        if model_latency(rho, table) <= latency_limit and oracle(rho) < a_drop:
            feasible.append(rho)
    return feasible


def quadratic_oracle(coef: float) -> AccuracyOracle:
    """Synthetic drop model ``coef * sum((1 - rho)^2)``."""
    def drop(rho):
        return coef * float(sum((1.0 - r) ** 2 for r in rho))
    return drop


def parse_oracle(spec: str) -> AccuracyOracle:
    kind, _, arg = spec.partition(":")
    if kind == "quadratic":
        return quadratic_oracle(float(arg) if arg else 10.0)
    raise ValueError(f"unknown oracle {spec!r} (supported: quadratic:<coef>)")


