"""Image-adaptive token selector.

A selector scores every token per attention head, fuses the head scores
with learned head weights, thresholds (or samples) a keep mask, folds the
pruned tokens into one package token and repacks the survivors densely.

Token origins: patch tokens carry their patch index (0-based), the class
token is :data:`CLS` and the package token is :data:`PACKAGE`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import Engine
from .kernels import gelu_aprx, sigmoid_plan, softmax_aprx

CLS = -1
PACKAGE = -2


@dataclass(frozen=True)
class SelectorParams:
    """Weights are (in, out) matrices; float arrays or QTensors.

    local:  d -> d/2 (+GELU), shared by all heads and by the global branch
    score1: d -> d/2 (+GELU), score2: d/2 -> 2
    attn:   h -> h (+sigmoid)
    """

    local_w: object
    local_b: object
    score1_w: object
    score1_b: object
    score2_w: object
    score2_b: object
    attn_w: object
    attn_b: object

    NAMES = ("local_w", "local_b", "score1_w", "score1_b",
             "score2_w", "score2_b", "attn_w", "attn_b")

    @classmethod
    def random(cls, d: int, h: int, rng: np.random.Generator, scale: float = 0.5):
        if d % 2:
            raise ValueError(f"head dim must be even, got {d}")

        def mat(i, o):
            return rng.normal(0.0, scale / np.sqrt(i), size=(i, o))

        return cls(mat(d, d // 2), rng.normal(0, 0.02, d // 2),
                   mat(d, d // 2), rng.normal(0, 0.02, d // 2),
                   mat(d // 2, 2), rng.normal(0, 0.02, 2),
                   mat(h, h), rng.normal(0, 0.02, h))


def selector_macs(N: int, D_ch: int, h: int) -> int:
    d = D_ch // h
    local = N * h * d * (d // 2)
    score = N * h * (d * (d // 2) + (d // 2) * 2)
    attn = N * h * h
    return local + score + attn


@dataclass
class ScoreMap:
    s: np.ndarray      # (h, N, 2) per-head [keep, prune] probabilities
    A: np.ndarray      # (N, h) head weights
    S: np.ndarray      # (N, 2) fused scores

    @property
    def keep_prob(self) -> np.ndarray:
        return self.S[:, 0]


def fuse_scores(s: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Head-weighted mean of per-head scores; equal weights if a row's weights sum to 0."""
    w = A.T[:, :, None]                      # (h, N, 1)
    total = w.sum(axis=0)                    # (N, 1)
    fused = (s * w).sum(axis=0)
    zero = total[:, 0] <= 0
    if np.any(zero):
        fused[zero] = s[:, zero, :].mean(axis=0)
        total = np.where(total > 0, total, 1.0)
    return fused / total


def classify(X: np.ndarray, p: SelectorParams, h: int, engine: Engine | None = None) -> ScoreMap:
    engine = engine or Engine()
    X = np.asarray(X, dtype=np.float64)
    n, width = X.shape
    if width % h:
        raise ValueError(f"token width {width} not divisible into {h} heads")
    d = width // h
    s = np.empty((h, n, 2))
    for i in range(h):
        x_i = X[:, i * d:(i + 1) * d]
        e_local = gelu_aprx(engine.linear(x_i, p.local_w, p.local_b))
        e_global = np.broadcast_to(e_local.mean(axis=0), e_local.shape)
        e_i = np.concatenate([e_local, e_global], axis=1)
        hidden = gelu_aprx(engine.linear(e_i, p.score1_w, p.score1_b))
        s[i] = softmax_aprx(engine.linear(hidden, p.score2_w, p.score2_b), 1.0)
    x_bar = X.reshape(n, h, d).mean(axis=2)
    A = sigmoid_plan(engine.linear(x_bar, p.attn_w, p.attn_b))
    return ScoreMap(s, np.asarray(A), fuse_scores(s, np.asarray(A)))


@dataclass(frozen=True)
class Threshold:
    tau: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must be in (0, 1), got {self.tau}")


@dataclass(frozen=True)
class GumbelSample:
    temperature: float = 1.0
    seed: int = 0


def decide(S: np.ndarray, mode=Threshold(), cls_index: int | None = 0) -> np.ndarray:
    """Boolean keep mask from fused scores (rows of [keep, prune] probabilities)."""
    S = np.asarray(S, dtype=np.float64)
    if isinstance(mode, Threshold):
        keep = S[:, 0] >= mode.tau
    elif isinstance(mode, GumbelSample):
        rng = np.random.default_rng(mode.seed)
        g = rng.gumbel(size=S.shape)
        with np.errstate(divide="ignore"):
            logits = np.log(S) + mode.temperature * g
        # ties resolve to keep
        keep = logits[:, 0] >= logits[:, 1]
    else:
        raise TypeError(f"unknown decision mode {mode!r}")
    if cls_index is not None:
        keep[cls_index] = True
    return keep


def package(X: np.ndarray, keep_scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    pruned = ~np.asarray(mask, dtype=bool)
    if not pruned.any():
        raise ValueError("no pruned tokens to package")
    toks = X[pruned]
    w = np.asarray(keep_scores, dtype=np.float64)[pruned]
    total = w.sum()
    if total <= 0:
        return toks.mean(axis=0)
    return (toks * w[:, None]).sum(axis=0) / total


def compose_mask(M: np.ndarray, M2: np.ndarray) -> np.ndarray:
    M = np.asarray(M, dtype=bool)
    M2 = np.asarray(M2, dtype=bool)
    if M.shape != M2.shape:
        raise ValueError(f"mask lengths differ: {M.shape} vs {M2.shape}")
    return M & M2


@dataclass
class TokenSet:
    tokens: np.ndarray
    origin: list[int]
    stage_id: int = 0
    package_members: tuple[int, ...] = ()

    def __post_init__(self):
        if len(self.origin) != self.tokens.shape[0]:
            raise ValueError("origin length must match token count")
        if self.origin.count(CLS) != 1:
            raise ValueError("a token set holds exactly one CLS token")
        if self.origin.count(PACKAGE) > 1:
            raise ValueError("at most one package token per token set")

    def __len__(self):
        return len(self.origin)

    @property
    def patch_indices(self) -> list[int]:
        return [o for o in self.origin if o >= 0]


def repack(X: TokenSet, mask: np.ndarray, P: np.ndarray | None = None) -> TokenSet:
    """Kept tokens in order, then the package token if anything was pruned."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (len(X),):
        raise ValueError("mask does not match the token set")
    if mask.all():
        return TokenSet(X.tokens.copy(), list(X.origin), X.stage_id + 1, X.package_members)
    if P is None:
        raise ValueError("tokens were pruned but no package token was given")
    kept = [o for o, m in zip(X.origin, mask) if m]
    members: list[int] = []
    for o, m in zip(X.origin, mask):
        if m:
            continue
        members.extend(X.package_members if o == PACKAGE else [o])
    tokens = np.vstack([X.tokens[mask], np.asarray(P, dtype=np.float64)[None, :]])
    return TokenSet(tokens, kept + [PACKAGE], X.stage_id + 1, tuple(sorted(members)))


@dataclass
class SelectorResult:
    tokens: TokenSet
    scores: ScoreMap
    mask: np.ndarray


def apply_selector(X: TokenSet, p: SelectorParams, h: int, mode=Threshold(),
                   engine: Engine | None = None) -> SelectorResult:
    engine = engine or Engine()
    scores = classify(X.tokens, p, h, engine)
    mask = decide(scores.S, mode, cls_index=X.origin.index(CLS))
    if PACKAGE in X.origin and not mask.all():
        # an earlier package token folds into the new one so only one survives
        mask[X.origin.index(PACKAGE)] = False
    P = None
    if not mask.all():
        P = engine.quant(package(X.tokens, scores.keep_prob, mask))
    return SelectorResult(repack(X, mask, P), scores, mask)


@dataclass
class TokenTrace:
    """Per-image record of which original patches survive each stage."""

    num_patches: int
    stages: list[tuple[int, list[int], tuple[int, ...]]] = field(default_factory=list)
    block_token_counts: list[int] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)

    def record(self, ts: TokenSet) -> None:
        alive = np.zeros(self.num_patches, dtype=bool)
        alive[ts.patch_indices] = True
        if self.masks:
            alive = compose_mask(self.masks[-1], alive)
        self.masks.append(alive)
        self.stages.append((ts.stage_id, list(ts.origin), ts.package_members))

    def to_csv(self) -> str:
        def fmt(o):
            return "CLS" if o == CLS else "PKG" if o == PACKAGE else str(o)

        lines = ["stage,kept_indices,package_members"]
        for stage, origin, members in self.stages:
            lines.append(f"{stage},{' '.join(fmt(o) for o in origin)},"
                         f"{' '.join(str(m) for m in members)}")
        return "\n".join(lines) + "\n"
