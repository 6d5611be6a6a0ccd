"""ViT forward pass over the GEMM engine, model presets and MAC accounting."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .engine import Engine, as_float
from .gemm import mac_count
from .kernels import gelu_aprx, softmax_aprx
from .selector import (
    CLS, SelectorParams, Threshold, TokenSet, TokenTrace, apply_selector, selector_macs,
)

LN_EPS = 1e-6


@dataclass(frozen=True)
class ViTConfig:
    depth: int
    heads: int
    D_ch: int
    patch: int = 16
    image_side: int = 224
    in_chans: int = 3
    num_classes: int = 1000
    selector_blocks: tuple[int, ...] = ()
    name: str = "custom"

    def __post_init__(self):
        if self.D_ch % self.heads:
            raise ValueError(f"D_ch={self.D_ch} not divisible by heads={self.heads}")
        if self.image_side % self.patch:
            raise ValueError("image side must be a multiple of the patch size")
        bad = [b for b in self.selector_blocks if not 1 <= b <= self.depth]
        if bad:
            raise ValueError(f"selector blocks out of range: {bad}")
        if list(self.selector_blocks) != sorted(set(self.selector_blocks)):
            raise ValueError("selector blocks must be strictly increasing")

    @property
    def D_attn_s(self) -> int:
        return self.D_ch // self.heads

    @property
    def D_fc(self) -> int:
        return self.D_ch

    @property
    def num_patches(self) -> int:
        return (self.image_side // self.patch) ** 2

    @property
    def N(self) -> int:
        return self.num_patches + 1


def default_selector_blocks(depth: int) -> tuple[int, ...]:
    return tuple(int(round(b * depth / 12)) for b in (4, 7, 10))


def _preset(name, heads, dim, depth):
    return ViTConfig(depth=depth, heads=heads, D_ch=dim, name=name,
                     selector_blocks=default_selector_blocks(depth))


PRESETS = {
    "deit-t": _preset("deit-t", 3, 192, 12),
    "deit-s": _preset("deit-s", 6, 384, 12),
    "deit-b": _preset("deit-b", 12, 768, 12),
    "lvvit-s": _preset("lvvit-s", 6, 384, 16),
    "lvvit-m": _preset("lvvit-m", 8, 512, 20),
}


def preset(name: str, **overrides) -> ViTConfig:
    try:
        cfg = PRESETS[name.lower()]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; choose from {', '.join(PRESETS)}") from None
    return replace(cfg, **overrides) if overrides else cfg


# ---------------------------------------------------------------- weights

def is_real_only(name: str) -> bool:
    # LayerNorm parameters stay real-valued
    return ".norm" in name or name.startswith("norm.")


class ModelWeights(dict):
    """Name -> float array or QTensor, using the container's naming scheme."""

    def f(self, name: str) -> np.ndarray:
        return as_float(self[name])

    def selector(self, block: int) -> SelectorParams:
        pre = f"selectors.{block}."
        return SelectorParams(*(self[pre + n] for n in SelectorParams.NAMES))

    def check(self, cfg: ViTConfig) -> None:
        for name, shape in expected_shapes(cfg).items():
            if name not in self:
                raise KeyError(f"missing weight {name!r}")
            got = tuple(self[name].shape)
            if got != shape:
                raise ValueError(f"weight {name!r} has shape {got}, expected {shape}")


def expected_shapes(cfg: ViTConfig) -> dict[str, tuple[int, ...]]:
    D, hd, hid = cfg.D_ch, cfg.heads * cfg.D_attn_s, 4 * cfg.D_fc
    d = cfg.D_attn_s
    pin = cfg.patch * cfg.patch * cfg.in_chans
    shapes = {
        "patch_embed.weight": (pin, D), "patch_embed.bias": (D,),
        "cls_token": (1, D), "pos_embed": (cfg.N, D),
        "norm.weight": (D,), "norm.bias": (D,),
        "head.weight": (D, cfg.num_classes), "head.bias": (cfg.num_classes,),
    }
    for i in range(1, cfg.depth + 1):
        p = f"blocks.{i}."
        shapes.update({
            p + "norm1.weight": (D,), p + "norm1.bias": (D,),
            p + "attn.qkv.weight": (D, 3 * hd), p + "attn.qkv.bias": (3 * hd,),
            p + "attn.proj.weight": (hd, D), p + "attn.proj.bias": (D,),
            p + "norm2.weight": (D,), p + "norm2.bias": (D,),
            p + "mlp.fc1.weight": (D, hid), p + "mlp.fc1.bias": (hid,),
            p + "mlp.fc2.weight": (hid, D), p + "mlp.fc2.bias": (D,),
        })
    for b in cfg.selector_blocks:
        p = f"selectors.{b}."
        shapes.update({
            p + "local_w": (d, d // 2), p + "local_b": (d // 2,),
            p + "score1_w": (d, d // 2), p + "score1_b": (d // 2,),
            p + "score2_w": (d // 2, 2), p + "score2_b": (2,),
            p + "attn_w": (cfg.heads, cfg.heads), p + "attn_b": (cfg.heads,),
        })
    return shapes


def random_weights(cfg: ViTConfig, seed: int = 0, dtype=np.float32) -> ModelWeights:
    rng = np.random.default_rng(seed)
    w = ModelWeights()
    for name, shape in expected_shapes(cfg).items():
        if name.endswith("norm1.weight") or name.endswith("norm2.weight") or name == "norm.weight":
            arr = np.ones(shape)
        elif len(shape) == 1 or name.endswith("_b"):
            arr = rng.normal(0.0, 0.02, shape)
        elif name in ("cls_token", "pos_embed"):
            arr = rng.normal(0.0, 0.1, shape)
        else:
            arr = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
        w[name] = arr.astype(dtype)
    return w


# ---------------------------------------------------------------- layers

def layer_norm(x: np.ndarray, scale=None, bias=None, eps: float = LN_EPS) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 2:
        raise ValueError("layer_norm needs width >= 2")
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    y = (x - mu) / np.sqrt(var + eps)
    if scale is not None:
        y = y * np.asarray(scale, dtype=np.float64)
    if bias is not None:
        y = y + np.asarray(bias, dtype=np.float64)
    return y


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """(side, side, C) -> (num_patches, P*P*C), patches row-major, pixels row-major."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != image.shape[1]:
        raise ValueError(f"expected a square (side, side, C) image, got {image.shape}")
    side, _, c = image.shape
    if side % patch:
        raise ValueError(f"image side {side} not divisible by patch {patch}")
    g = side // patch
    return (image.reshape(g, patch, g, patch, c)
            .transpose(0, 2, 1, 3, 4)
            .reshape(g * g, patch * patch * c))


def patch_embed(image: np.ndarray, w: ModelWeights, cfg: ViTConfig,
                engine: Engine | None = None) -> TokenSet:
    engine = engine or Engine()
    if image.shape != (cfg.image_side, cfg.image_side, cfg.in_chans):
        raise ValueError(f"image shape {image.shape} does not match config "
                         f"({cfg.image_side}, {cfg.image_side}, {cfg.in_chans})")
    patches = engine.linear(patchify(image, cfg.patch), w["patch_embed.weight"],
                            w["patch_embed.bias"])
    tokens = np.vstack([w.f("cls_token"), patches]) + w.f("pos_embed")
    origin = [CLS] + list(range(cfg.num_patches))
    return TokenSet(engine.quant(tokens), origin)


def attention(x: np.ndarray, w: ModelWeights, prefix: str, cfg: ViTConfig,
              engine: Engine, delta2: float) -> np.ndarray:
    """Multi-head self-attention on already-normalized tokens (no residual)."""
    n = x.shape[0]
    h, d = cfg.heads, cfg.D_attn_s
    qkv = engine.linear(x, w[prefix + "qkv.weight"], w[prefix + "qkv.bias"])
    q, k, v = qkv[:, :h * d], qkv[:, h * d:2 * h * d], qkv[:, 2 * h * d:]
    scores = engine.per_head(q, k.T, h) / math.sqrt(d)             # (n, h*n)
    probs = softmax_aprx(scores.reshape(n, h, n), delta2).reshape(n, h * n)
    v_stacked = v.reshape(n, h, d).transpose(1, 0, 2).reshape(h * n, d)
    ctx = engine.per_head(probs, v_stacked, h)                        # (n, h*d)
    return engine.linear(ctx, w[prefix + "proj.weight"], w[prefix + "proj.bias"])


def msa_block(tokens: np.ndarray, w: ModelWeights, block: int, cfg: ViTConfig,
              engine: Engine | None = None, delta2: float = 0.5) -> np.ndarray:
    engine = engine or Engine()
    p = f"blocks.{block}."
    normed = layer_norm(tokens, w.f(p + "norm1.weight"), w.f(p + "norm1.bias"))
    return engine.quant(tokens + attention(normed, w, p + "attn.", cfg, engine, delta2))


def ffn_block(tokens: np.ndarray, w: ModelWeights, block: int, cfg: ViTConfig,
              engine: Engine | None = None, delta1: float = 0.5) -> np.ndarray:
    engine = engine or Engine()
    p = f"blocks.{block}."
    normed = layer_norm(tokens, w.f(p + "norm2.weight"), w.f(p + "norm2.bias"))
    hidden = gelu_aprx(engine.linear(normed, w[p + "mlp.fc1.weight"], w[p + "mlp.fc1.bias"]),
                       delta1)
    out = engine.linear(hidden, w[p + "mlp.fc2.weight"], w[p + "mlp.fc2.bias"])
    return engine.quant(tokens + out)


@dataclass
class RunOptions:
    delta1: float = 0.5
    delta2: float = 0.5
    decision: object = field(default_factory=Threshold)
    quantized: bool = True


def forward(image: np.ndarray, w: ModelWeights, cfg: ViTConfig,
            opts: RunOptions | None = None, engine: Engine | None = None):
    """Returns (logits, TokenTrace)."""
    opts = opts or RunOptions()
    engine = engine or Engine(quantized=opts.quantized)
    ts = patch_embed(image, w, cfg, engine)
    trace = TokenTrace(cfg.num_patches)
    trace.record(ts)
    for block in range(1, cfg.depth + 1):
        if block in cfg.selector_blocks:
            res = apply_selector(ts, w.selector(block), cfg.heads, opts.decision, engine)
            ts = res.tokens
            ts.stage_id = cfg.selector_blocks.index(block) + 1
            trace.record(ts)
        trace.block_token_counts.append(len(ts))
        x = msa_block(ts.tokens, w, block, cfg, engine, opts.delta2)
        ts.tokens = ffn_block(x, w, block, cfg, engine, opts.delta1)
    cls = ts.tokens[ts.origin.index(CLS)][None, :]
    cls = layer_norm(cls, w.f("norm.weight"), w.f("norm.bias"))
    logits = engine.linear(cls, w["head.weight"], w["head.bias"])[0]
    return logits, trace


# ---------------------------------------------------------------- MACs

def stage_token_counts(cfg: ViTConfig, ratios) -> list[int]:
    """Tokens entering each block for cumulative per-stage keep ratios."""
    ratios = list(ratios)
    if len(ratios) != len(cfg.selector_blocks):
        raise ValueError(f"need {len(cfg.selector_blocks)} ratios, got {len(ratios)}")
    for r in ratios:
        if not 0.0 < r <= 1.0:
            raise ValueError(f"keep ratio {r} outside (0, 1]")
    counts = []
    n = cfg.N
    for block in range(1, cfg.depth + 1):
        if block in cfg.selector_blocks:
            kappa = ratios[cfg.selector_blocks.index(block)]
            # CLS + kept patches + package token
            n = math.floor(kappa * cfg.num_patches + 1e-9) + 2
        counts.append(n)
    return counts


def model_mac_breakdown(cfg: ViTConfig, ratios=None) -> dict[str, int]:
    if ratios is None:
        ratios = [1.0] * len(cfg.selector_blocks)
    counts = stage_token_counts(cfg, ratios)
    blocks = sum(mac_count(n, cfg.D_ch, cfg.heads, cfg.D_attn_s, cfg.D_fc) for n in counts)
    sel = 0
    for b in cfg.selector_blocks:
        n_in = counts[b - 2] if b > 1 else cfg.N
        sel += selector_macs(n_in, cfg.D_ch, cfg.heads)
    embed = cfg.num_patches * cfg.patch ** 2 * cfg.in_chans * cfg.D_ch
    head = cfg.D_ch * cfg.num_classes
    return {"blocks": blocks, "selectors": sel, "embed": embed, "head": head}


def model_macs(cfg: ViTConfig, ratios=None) -> float:
    """Whole-model GMACs."""
    return sum(model_mac_breakdown(cfg, ratios).values()) / 1e9
