"""Adaptive token sampling: significance scores, inverse-transform selection
over the score CDF, and soft attention downsampling.

Token index 0 is the classification token and is always retained; scores are
defined over the N non-CLS tokens only. Scoring and index selection are pure
functions of detached arrays, so no gradient flows through the selection; the
downsampled attention product stays differentiable through the retained rows
and the full value set.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .attention import AttentionState
from .autograd import Node
from .numerics import Rng


class Scoring(enum.Enum):
    """Score assignment variants. CLS_VNORM is the default: CLS attention
    weights times value-row norms. The others exist for ablations."""
    CLS_VNORM = "cls-vnorm"
    CLS = "cls"
    ROWSUM = "rowsum"
    RANDOM_TOKEN = "random-token"


class Policy(enum.Enum):
    INVERSE = "inverse"
    TOPK = "topk"
    RANDOM = "random"


class InverseRule(enum.Enum):
    CEIL = "ceil"          # generalized inverse: smallest index with cdf >= k
    NEAREST = "nearest"    # piecewise-linear inverse, rounded to nearest index


@dataclass(frozen=True)
class SamplerConfig:
    k: int                                   # token budget, K' <= k
    inverse_rule: InverseRule = InverseRule.CEIL
    policy: Policy = Policy.INVERSE

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("budget must be at least 1")

    @property
    def grid(self) -> np.ndarray:
        """Fixed evaluation points {1/K, ..., K/K}; last is exactly 1."""
        return np.arange(1, self.k + 1, dtype=np.float64) / self.k


@dataclass
class ScoreVector:
    """Normalized significance scores over non-CLS tokens plus their CDF."""
    scores: np.ndarray
    cdf: np.ndarray
    uniform_fallback: bool = False


@dataclass(frozen=True)
class SampleResult:
    """Retained token indices (sorted, always containing the CLS index 0),
    the realized non-CLS count, and the raw per-grid-point evaluations."""
    kept: tuple[int, ...]
    k_prime: int
    psi: tuple[int, ...]

    def to_json(self) -> str:
        return json.dumps({"kept": list(self.kept), "k_prime": self.k_prime,
                           "psi": list(self.psi)})

    @staticmethod
    def from_json(text: str) -> "SampleResult":
        obj = json.loads(text)
        return SampleResult(kept=tuple(obj["kept"]), k_prime=obj["k_prime"],
                            psi=tuple(obj["psi"]))


def build_cdf(scores: np.ndarray, uniform_fallback: bool = False) -> ScoreVector:
    """Prefix sums of normalized scores; the final entry is re-clamped to
    exactly 1 so the grid point k=1 always resolves."""
    scores = np.asarray(scores, dtype=np.float64)
    cdf = np.minimum(np.cumsum(scores), 1.0)
    cdf[-1] = 1.0
    return ScoreVector(scores=scores, cdf=cdf, uniform_fallback=uniform_fallback)


def compute_scores(attn: Sequence[np.ndarray], values: Sequence[np.ndarray],
                   method: Scoring = Scoring.CLS_VNORM,
                   rng: Rng | None = None) -> ScoreVector:
    """Significance scores from per-head attention matrices and value rows.

    Per-head unnormalized scores are summed over heads, then normalized once.
    If every unnormalized score is zero (e.g. all-zero values early in
    training) the result falls back to uniform and is flagged.
    """
    n = attn[0].shape[0] - 1
    if n < 1:
        raise ValueError("need at least one non-CLS token to score")
    total = np.zeros(n, dtype=np.float64)
    for h, a in enumerate(attn):
        if method is Scoring.CLS_VNORM:
            raw = a[0, 1:] * np.linalg.norm(values[h][1:], axis=1)
        elif method is Scoring.CLS:
            raw = a[0, 1:].copy()
        elif method is Scoring.ROWSUM:
            raw = a[:, 1:].sum(axis=0)
        elif method is Scoring.RANDOM_TOKEN:
            if rng is None:
                raise ValueError("random-token scoring requires an rng")
            if h == 0:
                row = 1 + rng.integers(0, n)
            raw = a[row, 1:].copy()
        else:
            raise ValueError(f"unknown scoring method {method}")
        total += raw
    mass = total.sum()
    if mass == 0.0:
        return build_cdf(np.full(n, 1.0 / n), uniform_fallback=True)
    return build_cdf(total / mass)


def _inverse_ceil(cdf: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Generalized inverse: smallest 1-based token index i with cdf[i] >= k."""
    return np.searchsorted(cdf, grid, side="left").astype(np.int64) + 1


def _inverse_nearest(cdf: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Piecewise-linear inverse through (0, 0) and (i, cdf[i]), rounded
    half-away-from-zero and clamped to [1, N]."""
    n = len(cdf)
    out = np.empty(len(grid), dtype=np.int64)
    for j, k in enumerate(grid):
        i = int(np.searchsorted(cdf, k, side="left"))  # 0-based segment end
        lo = cdf[i - 1] if i > 0 else 0.0
        hi = cdf[min(i, n - 1)]
        if hi > lo:
            x = i + (k - lo) / (hi - lo)
        else:
            x = float(i + 1)
        out[j] = min(max(int(np.floor(x + 0.5)), 1), n)
    return out


def sample_indices(sv: ScoreVector, cfg: SamplerConfig,
                   rng: Rng | None = None) -> SampleResult:
    """Select retained token indices under the configured policy.

    The inverse-transform policy evaluates the CDF inverse on the fixed grid,
    collapses duplicates, and prepends the CLS index. topk keeps the highest
    scores (ties to the lower index); random draws without replacement.
    """
    n = len(sv.scores)
    if n == 0:
        raise ValueError("empty score vector")

    if cfg.policy is Policy.INVERSE:
        grid = cfg.grid
        if cfg.inverse_rule is InverseRule.CEIL:
            psi = _inverse_ceil(sv.cdf, grid)
        else:
            psi = _inverse_nearest(sv.cdf, grid)
    elif cfg.policy is Policy.TOPK:
        take = min(cfg.k, n)
        order = np.argsort(-sv.scores, kind="stable")[:take]
        psi = order.astype(np.int64) + 1
    elif cfg.policy is Policy.RANDOM:
        if rng is None:
            raise ValueError("random policy requires an rng")
        psi = rng.choice(n, min(cfg.k, n)).astype(np.int64) + 1
    else:
        raise ValueError(f"unknown policy {cfg.policy}")

    kept = (0,) + tuple(sorted(set(int(i) for i in psi)))
    return SampleResult(kept=kept, k_prime=len(kept) - 1,
                        psi=tuple(int(i) for i in psi))


def refine_attention(attn, result: SampleResult):
    """Row-gather of the attention matrix at the retained indices.

    Columns are untouched, so each surviving row still sums to 1. Accepts a
    plain array or a graph Node.
    """
    if isinstance(attn, Node):
        return ag.gather_rows(attn, result.kept)
    attn = np.asarray(attn)
    idx = np.asarray(result.kept, dtype=np.intp)
    if idx.max() >= attn.shape[0]:
        raise IndexError(f"kept index {idx.max()} out of range for {attn.shape}")
    return attn[idx].copy()


def sampled_attend(state: AttentionState, result: SampleResult,
                   out_w: Node, out_b: Node) -> Node:
    """Soft downsampling: refined per-head attention times the full value
    set, concatenated across heads and projected. Output row 0 is CLS."""
    if not state.attn:
        raise ValueError("attention_matrix was not applied")
    mixed = [ag.matmul(refine_attention(a, result), v)
             for a, v in zip(state.attn, state.v)]
    return ag.add_row(ag.matmul(ag.concat_cols(mixed), out_w), out_b)
