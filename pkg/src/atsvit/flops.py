"""Analytic multiply-accumulate accounting driven by the per-stage token
trace, so adaptive savings are measured exactly rather than timed.

Counts are MACs (1 MAC = 2 FLOPs). The attention-score matrix is charged at
full t_in x t_in because scores are computed before sampling; savings come
from the downsampled value mix, the output projection, and every later
stage. Softmax, layernorm, GELU, and the sampler's own linear-cost work are
excluded, as is conventional; the exclusions are recorded on the report.
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import ForwardTrace, ModelConfig

ESTIMATE_EXCLUDES = ("softmax", "layernorm", "gelu", "token-sampler")


@dataclass(frozen=True)
class StageCost:
    attn_macs: int
    mlp_macs: int
    tokens_in: int
    tokens_out: int


@dataclass(frozen=True)
class FlopsReport:
    per_stage: tuple[StageCost, ...]
    embed_macs: int
    head_macs: int
    total_macs: int
    estimate_excludes: tuple[str, ...] = ESTIMATE_EXCLUDES

    def to_json_dict(self) -> dict:
        return {
            "schema": 1,
            "embed_macs": self.embed_macs,
            "head_macs": self.head_macs,
            "total_macs": self.total_macs,
            "per_stage": [
                {"attn_macs": s.attn_macs, "mlp_macs": s.mlp_macs,
                 "tokens_in": s.tokens_in, "tokens_out": s.tokens_out}
                for s in self.per_stage
            ],
            "estimate_excludes": list(self.estimate_excludes),
        }

    def csv_row(self) -> dict:
        return {
            "schema": 1,
            "embed_macs": self.embed_macs,
            "head_macs": self.head_macs,
            "attn_macs": sum(s.attn_macs for s in self.per_stage),
            "mlp_macs": sum(s.mlp_macs for s in self.per_stage),
            "total_macs": self.total_macs,
        }


def block_macs(t_in: int, t_out: int, d: int, h: int,
               mlp_ratio: int) -> tuple[int, int]:
    """MACs of one transformer block processing t_in tokens and emitting
    t_out. The head count h does not change the totals (per-head widths
    cancel); it is kept for interface symmetry.

    attn: QKV projection 3*t_in*d^2, score matrix t_in^2*d (computed for all
    rows pre-sampling), value mix t_out*t_in*d, output projection t_out*d^2.
    mlp: 2*mlp_ratio*t_out*d^2.
    """
    if not 1 <= t_out <= t_in:
        raise ValueError(f"need 1 <= t_out <= t_in, got {t_out} > {t_in}")
    attn = 3 * t_in * d * d + t_in * t_in * d + t_out * t_in * d + t_out * d * d
    mlp = 2 * mlp_ratio * t_out * d * d
    return attn, mlp


def model_macs(trace: ForwardTrace, cfg: ModelConfig) -> FlopsReport:
    """Sum block costs over the traced token counts, plus patch-embedding
    and classifier-head terms."""
    counts = trace.stage_counts
    if len(counts) != cfg.depth:
        raise ValueError(f"trace has {len(counts)} stages, config {cfg.depth}")
    if counts[0][0] != cfg.num_tokens:
        raise ValueError("trace starts at the wrong token count")
    for (a_in, a_out), (b_in, _) in zip(counts, counts[1:]):
        if a_out != b_in:
            raise ValueError("trace token counts are not chained")

    per_stage = []
    for t_in, t_out in counts:
        attn, mlp = block_macs(t_in, t_out, cfg.dim, cfg.heads, cfg.mlp_ratio)
        per_stage.append(StageCost(attn, mlp, t_in, t_out))
    embed = cfg.num_patches * cfg.patch_size ** 2 * cfg.channels * cfg.dim
    head = cfg.dim * cfg.num_classes
    total = embed + head + sum(s.attn_macs + s.mlp_macs for s in per_stage)
    return FlopsReport(per_stage=tuple(per_stage), embed_macs=embed,
                       head_macs=head, total_macs=total)


def static_macs(cfg: ModelConfig) -> int:
    """Cost of the architecture with no token sampling (constant per image)."""
    t = cfg.num_tokens
    attn, mlp = block_macs(t, t, cfg.dim, cfg.heads, cfg.mlp_ratio)
    embed = cfg.num_patches * cfg.patch_size ** 2 * cfg.channels * cfg.dim
    return embed + cfg.dim * cfg.num_classes + cfg.depth * (attn + mlp)
