"""Command-line entry point: ``vitprune <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import container, kernels, planner
from .container import ContainerError
from .engine import Engine
from .fixedpoint import QTensor, QuantPolicy, choose_format, quantize, FxFormat
from .gemm import TilingConfig, block_cycles, block_layers, cycle_estimate, cycles_to_ms
from .selector import GumbelSample, Threshold
from .vit import (
    PRESETS, ModelWeights, RunOptions, ViTConfig, is_real_only, forward,
    model_mac_breakdown, preset, random_weights, stage_token_counts,
)

log = logging.getLogger("vitprune")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    model: str = "deit-t"
    selector_blocks: tuple[int, ...] | None = None
    ratios: tuple[float, ...] | None = None
    delta1: float = 0.5
    delta2: float = 0.5
    mode: str = "threshold"
    tau: float = 0.5
    temperature: float = 1.0
    seed: int = 0
    frac_bits: int | None = None     # None = dynamic per tensor
    quantized: bool = True

    def validate(self) -> None:
        if self.model not in PRESETS:
            raise UsageError(f"unknown model {self.model!r}")
        if not 0.0 < self.tau < 1.0:
            raise UsageError(f"tau must be in (0, 1), got {self.tau}")
        for r in self.ratios or ():
            if not 0.0 < r <= 1.0:
                raise UsageError(f"keep ratio {r} outside (0, 1]")
        if self.mode not in ("threshold", "gumbel"):
            raise UsageError(f"unknown decision mode {self.mode!r}")
        for name in ("delta1", "delta2"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise UsageError(f"{name} must be in (0, 1]")

    def vit_config(self) -> ViTConfig:
        cfg = preset(self.model)
        if self.selector_blocks is not None:
            cfg = replace(cfg, selector_blocks=tuple(self.selector_blocks))
        return cfg

    def decision(self):
        if self.mode == "gumbel":
            return GumbelSample(self.temperature, self.seed)
        return Threshold(self.tau)


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip()) if text.strip() else ()


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def load_run_config(path: str | None, args) -> RunConfig:
    cfg = RunConfig()
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"config {path}: {e}") from None
        unknown = set(raw) - set(RunConfig.__dataclass_fields__)
        if unknown:
            raise UsageError(f"config {path}: unknown keys {sorted(unknown)}")
        for k in ("selector_blocks", "ratios"):
            if raw.get(k) is not None:
                raw[k] = tuple(raw[k])
        cfg = replace(cfg, **raw)
    overrides = {}
    for flag, key in (("model", "model"), ("delta1", "delta1"), ("delta2", "delta2"),
                      ("tau", "tau"), ("mode", "mode"), ("seed", "seed"),
                      ("temperature", "temperature")):
        v = getattr(args, flag, None)
        if v is not None:
            overrides[key] = v
    if getattr(args, "selector_blocks", None) is not None:
        overrides["selector_blocks"] = _int_list(args.selector_blocks)
    if getattr(args, "ratios", None) is not None:
        overrides["ratios"] = _float_list(args.ratios)
    if getattr(args, "frac_bits", None) is not None:
        overrides["frac_bits"] = None if args.frac_bits == "auto" else int(args.frac_bits)
    if getattr(args, "float", False):
        overrides["quantized"] = False
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------- commands

def cmd_init_weights(args) -> int:
    cfg = load_run_config(None, args).vit_config()
    container.save(args.out, dict(random_weights(cfg, args.seed)))
    return 0


def cmd_make_input(args) -> int:
    cfg = preset(args.model or "deit-t")
    shape = (cfg.image_side, cfg.image_side, cfg.in_chans)
    if args.zero:
        img = np.zeros(shape, dtype=np.float32)
    else:
        img = np.random.default_rng(args.seed or 0).normal(size=shape).astype(np.float32)
    container.save(args.out, {"input": img})
    return 0


def quantize_container(tensors: dict, frac_bits: int | None = None) -> dict:
    out = {}
    for name, t in tensors.items():
        if isinstance(t, QTensor):
            raise UsageError(f"tensor {name!r} is already dtype 1")
        if is_real_only(name):
            out[name] = t
            continue
        fmt = FxFormat(frac_bits) if frac_bits is not None else choose_format(t)
        out[name] = quantize(t, fmt)
    return out


def cmd_quantize(args) -> int:
    frac = None if args.frac_bits in (None, "auto") else int(args.frac_bits)
    tensors = container.load(args.weights)
    container.save(args.out, quantize_container(tensors, frac))
    return 0


def cmd_infer(args) -> int:
    rc = load_run_config(args.config, args)
    cfg = rc.vit_config()
    weights = ModelWeights(container.load(args.weights))
    try:
        weights.check(cfg)
    except (KeyError, ValueError) as e:
        raise UsageError(f"weights do not match {rc.model}: {e}") from None
    inputs = container.load(args.input)
    if "input" not in inputs:
        raise UsageError("input file has no tensor named 'input'")
    image = np.asarray(inputs["input"], dtype=np.float64)
    engine = Engine(quantized=rc.quantized, policy=QuantPolicy(rc.frac_bits))
    opts = RunOptions(rc.delta1, rc.delta2, rc.decision(), rc.quantized)
    logits, trace = forward(image, weights, cfg, opts, engine)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    container.save(out / "logits.hvtw", {"logits": logits.astype(np.float32)})
    container.atomic_write(out / "trace.csv", trace.to_csv())
    log.info("tokens per block: %s; saturated elements: %d",
             trace.block_token_counts, engine.policy.counter.count)
    return 0


def bench_rows(cfg: ViTConfig, ratios, tiling: TilingConfig, fill: int):
    """Per-layer (layer_id, N, macs, cycles, ms) rows plus a total row."""
    counts = stage_token_counts(cfg, ratios)
    rows = []
    for block, n in enumerate(counts, 1):
        for dims, mode, macs in block_layers(n, cfg.D_ch, cfg.heads, cfg.D_attn_s, cfg.D_fc):
            cyc = cycle_estimate(dims, mode, tiling, fill)
            rows.append((f"b{block}.L{dims.layer_id}", n, macs, cyc, cycles_to_ms(cyc)))
    extra = model_mac_breakdown(cfg, ratios)
    for key in ("embed", "selectors", "head"):
        rows.append((key, "", extra[key], "", ""))
    total_cyc = sum(block_cycles(n, cfg.D_ch, cfg.heads, cfg.D_attn_s, cfg.D_fc, tiling, fill)
                    for n in counts)
    rows.append(("total", "", sum(extra.values()), total_cyc, cycles_to_ms(total_cyc)))
    return rows


def cmd_bench(args) -> int:
    rc = load_run_config(args.config, args)
    cfg = rc.vit_config()
    ratios = rc.ratios if rc.ratios is not None else (1.0,) * len(cfg.selector_blocks)
    try:
        tiling = TilingConfig(args.ti, args.to, args.th)
    except ValueError as e:
        raise UsageError(str(e)) from None
    if tiling.Th > cfg.heads:
        raise UsageError(f"Th={tiling.Th} exceeds head count {cfg.heads}")
    try:
        rows = bench_rows(cfg, ratios, tiling, args.pipeline_fill)
    except ValueError as e:
        raise UsageError(str(e)) from None
    lines = ["layer_id,N,macs,cycles,ms"]
    for lid, n, macs, cyc, ms in rows:
        ms_s = f"{ms:.6f}" if ms != "" else ""
        lines.append(f"{lid},{n},{macs},{cyc},{ms_s}")
    text = "\n".join(lines) + "\n"
    _emit(text, args.out)
    print(f"GMACs: {rows[-1][2] / 1e9:.4f}", file=sys.stderr)
    return 0


def cmd_plan(args) -> int:
    src = args.latency_table
    if src in planner._TABLE_MS:
        table = planner.LatencyTable.builtin(src)
    else:
        try:
            table = planner.LatencyTable.from_csv(Path(src).read_text())
        except ValueError as e:
            raise UsageError(f"latency table {src}: {e}") from None
    try:
        oracle = planner.parse_oracle(args.oracle)
    except ValueError as e:
        raise UsageError(str(e)) from None
    depth = args.depth or preset(args.model or "deit-t").depth
    result = planner.plan_step1(depth, table, oracle, args.limit_ms, args.a_drop, args.rho_init)
    if isinstance(result, planner.Plan):
        result = planner.merge_stages(result, oracle, table)
        if result.est_latency_ms > args.limit_ms:
            result = planner.Infeasible(
                f"merged plan needs {result.est_latency_ms:.3f} ms > limit {args.limit_ms:.3f} ms",
                "latency_limit", result.est_latency_ms)
        elif result.oracle_drop >= args.a_drop:
            result = planner.Infeasible(
                f"merged plan drop {result.oracle_drop:.4f} >= a_drop {args.a_drop}",
                "a_drop", result.est_latency_ms)
    _emit(result.to_json() + "\n", args.out)
    return 0


def cmd_approx_check(args) -> int:
    try:
        rows = kernels.error_sweep(args.fn, args.lo, args.hi, args.step, args.delta)
    except (KeyError, ValueError) as e:
        raise UsageError(str(e).strip("'\"")) from None
    _emit(kernels.sweep_to_csv(rows), args.out)
    return 0


def _emit(text: str, out: str | None) -> None:
    if out:
        container.atomic_write(out, text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vitprune",
                                description="Fixed-point ViT with adaptive token pruning")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def model_flags(sp, selectors=True):
        sp.add_argument("--model", choices=sorted(PRESETS))
        if selectors:
            sp.add_argument("--selector-blocks", help="comma-separated 1-indexed blocks")

    sp = sub.add_parser("init-weights", help="write random float weights")
    model_flags(sp)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_init_weights)

    sp = sub.add_parser("make-input", help="write a random or zero input image tensor")
    model_flags(sp, selectors=False)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--zero", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_make_input)

    sp = sub.add_parser("quantize", help="quantize a float weight container to 8 bits")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--frac-bits", default="auto", help="'auto' or a fixed value 0-7")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_quantize)

    sp = sub.add_parser("infer", help="run the forward pass")
    model_flags(sp)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--config")
    sp.add_argument("--delta1", type=float)
    sp.add_argument("--delta2", type=float)
    sp.add_argument("--tau", type=float)
    sp.add_argument("--mode", choices=["threshold", "gumbel"])
    sp.add_argument("--temperature", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--frac-bits", help="activation policy: 'auto' or 0-7")
    sp.add_argument("--float", action="store_true", help="run without quantization")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("bench", help="per-layer MACs and cycle estimates")
    model_flags(sp)
    sp.add_argument("--config")
    sp.add_argument("--ratios", help="per-stage keep ratios, e.g. 0.7,0.39,0.21")
    sp.add_argument("--ti", type=int, default=32)
    sp.add_argument("--to", type=int, default=32)
    sp.add_argument("--th", type=int, default=2)
    sp.add_argument("--pipeline-fill", type=int, default=12)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("plan", help="latency-aware selector placement")
    sp.add_argument("--model", choices=sorted(PRESETS))
    sp.add_argument("--depth", type=int)
    sp.add_argument("--latency-table", required=True,
                    help="CSV path or a built-in table name (deit-t, deit-s)")
    sp.add_argument("--oracle", default="quadratic:0.1")
    sp.add_argument("--limit-ms", type=float, required=True)
    sp.add_argument("--a-drop", type=float, default=0.5)
    sp.add_argument("--rho-init", type=float, default=1.0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("approx-check", help="error sweep of an approximation kernel")
    sp.add_argument("--fn", required=True)
    sp.add_argument("--lo", type=float, required=True)
    sp.add_argument("--hi", type=float, required=True)
    sp.add_argument("--step", type=float, default=0.001)
    sp.add_argument("--delta", type=float, default=1.0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_approx_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ContainerError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (UsageError, ValueError, KeyError, OSError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
