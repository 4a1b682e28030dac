"""Full and low-rank scaled dot-product attention with a declared FLOPs model.

The low-rank path factorizes the post-softmax attention matrix by truncated
SVD.  Rows of the truncated matrix are left as they are (they can dip below
zero) so that the approximation stays the Frobenius-optimal one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .constants import SVD_OVERHEAD_COEFF
from .errors import DegenerateInput, InvalidInput, RankOutOfBounds
from .spectral import SpectralDecomposition, svd_full, truncate


@dataclass(frozen=True)
class AttentionInput:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        for name in ("q", "k", "v"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 2:
                raise InvalidInput(f"{name} must be 2-D, got shape {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise InvalidInput(f"{name} contains NaN or Inf")
            object.__setattr__(self, name, arr)
        if not (self.q.shape == self.k.shape == self.v.shape):
            raise InvalidInput(
                f"q, k, v shapes differ: {self.q.shape}, {self.k.shape}, {self.v.shape}"
            )
        n, d = self.q.shape
        if n < 1:
            raise InvalidInput("sequence length must be >= 1")
        if d < 1:
            raise InvalidInput("head dimension must be >= 1")

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.q.shape[1]


@dataclass(frozen=True)
class AttentionOutput:
    attn: np.ndarray
    output: np.ndarray
    flops: int
    rank_used: int | None  # None marks the full-rank path
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class FlopsModel:
    """Analytic operation counts; a convention, not a hardware measurement."""

    svd_overhead_coeff: float = SVD_OVERHEAD_COEFF

    def full(self, n: int, d: int) -> int:
        return 4 * n * n * d + 3 * n * n

    def low_rank(self, n: int, d: int, r: int, incremental_from: int | None = None) -> int:
        extra = r if incremental_from is None else max(r - incremental_from, 0)
        return 4 * n * r * d + 3 * n * n + int(round(self.svd_overhead_coeff * n * extra * extra))

    def break_even(self, n: int, d: int, r: int) -> float:
        """Low-rank is cheaper than full whenever ``r`` is below this value."""
        return n * d / (d + self.svd_overhead_coeff * r / 4.0)


DEFAULT_FLOPS = FlopsModel()


def count_flops(n: int, d: int, r: int | None = None, incremental_from: int | None = None,
                model: FlopsModel = DEFAULT_FLOPS) -> int:
    if n < 1 or d < 1:
        raise InvalidInput(f"n and d must be >= 1, got n={n}, d={d}")
    if r is None:
        return model.full(n, d)
    if not 1 <= r <= n:
        raise RankOutOfBounds(f"r={r} outside [1, {n}]")
    if incremental_from is not None and not 0 <= incremental_from <= n:
        raise RankOutOfBounds(f"incremental_from={incremental_from} outside [0, {n}]")
    return model.low_rank(n, d, r, incremental_from)


def flops_audit(n: int, d: int, r: int, model: FlopsModel = DEFAULT_FLOPS) -> dict:
    """Low-rank count next to the full count, flagging ranks that save nothing."""
    low = count_flops(n, d, r, model=model)
    full = count_flops(n, d, model=model)
    return {
        "low_rank": low,
        "full": full,
        "exceeds_full": low >= full,
        "below_break_even": r < model.break_even(n, d, r),
    }


def softmax_rows(s: np.ndarray) -> np.ndarray:
    z = s - np.max(s, axis=1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=1, keepdims=True)


def attention_matrix(inp: AttentionInput) -> np.ndarray:
    return softmax_rows(inp.q @ inp.k.T / math.sqrt(inp.head_dim))


def full_attention(inp: AttentionInput, model: FlopsModel = DEFAULT_FLOPS) -> AttentionOutput:
    a = attention_matrix(inp)
    return AttentionOutput(a, a @ inp.v, count_flops(inp.n, inp.head_dim, model=model), None)


def low_rank_attention(inp: AttentionInput, r: int, *, model: FlopsModel = DEFAULT_FLOPS,
                       decomposition: SpectralDecomposition | None = None,
                       incremental_from: int | None = None) -> AttentionOutput:
    """Attention with the softmax matrix replaced by its rank-``r`` SVD truncation.

    The reference softmax matrix is materialized here for exactness, but its
    cost is not counted: the count describes the factorized pipeline.
    A precomputed ``decomposition`` of the attention matrix may be passed in.
    """
    n, d = inp.n, inp.head_dim
    if not 1 <= r <= n:
        raise RankOutOfBounds(f"r={r} outside [1, {n}]")
    dec = decomposition if decomposition is not None else svd_full(attention_matrix(inp))
    a_r = truncate(dec, r).reconstruct()
    flops = count_flops(n, d, r, incremental_from=incremental_from, model=model)
    meta = {"exceeds_full": flops >= count_flops(n, d, model=model)}
    return AttentionOutput(a_r, a_r @ inp.v, flops, r, meta)


def fidelity(a_full, a_low) -> float:
    """Cosine of the Frobenius angle between two equally shaped matrices."""
    x = np.asarray(a_full, dtype=np.float64)
    y = np.asarray(a_low, dtype=np.float64)
    if x.shape != y.shape:
        raise InvalidInput(f"shape mismatch {x.shape} vs {y.shape}")
    nx = float(np.linalg.norm(x))
    if nx == 0.0:
        raise DegenerateInput("reference matrix is zero")
    ny = float(np.linalg.norm(y))
    if ny == 0.0:
        return 0.0
    return float(np.clip(np.vdot(x, y) / (nx * ny), -1.0, 1.0))


def split_heads(x: np.ndarray, heads: int) -> list[np.ndarray]:
    n, d = x.shape
    if heads < 1 or d % heads:
        raise InvalidInput(f"width {d} not divisible into {heads} heads")
    w = d // heads
    return [x[:, h * w:(h + 1) * w] for h in range(heads)]


def multi_head_attention(q, k, v, heads: int, ranks=None, *,
                         model: FlopsModel = DEFAULT_FLOPS) -> AttentionOutput:
    """Heads run independently, each at its own rank (``None`` for full).

    The result concatenates head outputs along the feature axis; ``attn``
    stacks the per-head matrices into shape ``(heads, n, n)``.
    """
    qs, ks, vs = split_heads(np.asarray(q, float), heads), split_heads(np.asarray(k, float), heads), \
        split_heads(np.asarray(v, float), heads)
    if ranks is None:
        ranks = [None] * heads
    if len(ranks) != heads:
        raise InvalidInput(f"{len(ranks)} ranks for {heads} heads")
    outs = []
    for qh, kh, vh, r in zip(qs, ks, vs, ranks):
        inp = AttentionInput(qh, kh, vh)
        outs.append(full_attention(inp, model) if r is None else low_rank_attention(inp, r, model=model))
    return AttentionOutput(
        np.stack([o.attn for o in outs]),
        np.hstack([o.output for o in outs]),
        sum(o.flops for o in outs),
        None,
        {"ranks": list(ranks)},
    )
