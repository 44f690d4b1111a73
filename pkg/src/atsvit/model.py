"""Small ViT with token sampling insertable at configurable stages.

Pre-norm blocks: x <- x + Attn(LN(x)); x <- x + MLP(LN(x)). At a sampling
stage the attention output is downsampled to the retained tokens and the
residual branch is row-gathered with the same indices, which preserves the
no-drop identity exactly. Positional embeddings are added once at input;
sampling only ever filters rows, so tokens keep their identity.

Weight files are architecture plus parameters only. Sampling settings are
runtime configuration and never enter the file: the module is parameter-free,
so enabling it on a trained model cannot change the weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from . import autograd as ag
from . import container
from .attention import AttentionConfig, attend, attention_matrix, project_qkv
from .autograd import Node
from .numerics import FAST_DTYPE, Rng
from .sampling import (InverseRule, Policy, SampleResult, SamplerConfig,
                       Scoring, compute_scores, sample_indices, sampled_attend)

WEIGHT_MAGIC = b"ATSW1\n"

ARCH_FIELDS = ("image_size", "patch_size", "dim", "heads", "depth",
               "mlp_ratio", "num_classes", "channels")


class ShapeMismatchError(container.ContainerError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    dim: int = 64
    heads: int = 4
    depth: int = 6
    mlp_ratio: int = 4
    num_classes: int = 4
    channels: int = 1
    # runtime sampling settings (not persisted in weight files)
    ats_stages: tuple[int, ...] = ()
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(k=16))
    scoring: Scoring = Scoring.CLS_VNORM

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        for s in self.ats_stages:
            if not 0 <= s < self.depth:
                raise ValueError(f"sampling stage {s} outside [0, {self.depth})")
        if self.ats_stages and self.sampler.k > self.num_patches:
            raise ValueError(
                f"budget {self.sampler.k} exceeds patch count {self.num_patches}")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def budget_k(self) -> int:
        return self.sampler.k

    @property
    def attn(self) -> AttentionConfig:
        return AttentionConfig(dim=self.dim, heads=self.heads)

    def arch_dict(self) -> dict:
        return {k: getattr(self, k) for k in ARCH_FIELDS}

    def runtime_dict(self) -> dict:
        return {
            "ats_stages": list(self.ats_stages),
            "k": self.sampler.k,
            "inverse_rule": self.sampler.inverse_rule.value,
            "policy": self.sampler.policy.value,
            "scoring": self.scoring.value,
        }

    @staticmethod
    def from_arch_dict(arch: dict, **runtime) -> "ModelConfig":
        return ModelConfig(**{k: arch[k] for k in ARCH_FIELDS}, **runtime)

    def with_sampling(self, ats_stages: Iterable[int], k: int | None = None,
                      inverse_rule: InverseRule | None = None,
                      policy: Policy | None = None,
                      scoring: Scoring | None = None) -> "ModelConfig":
        sampler = SamplerConfig(
            k=self.sampler.k if k is None else k,
            inverse_rule=inverse_rule or self.sampler.inverse_rule,
            policy=policy or self.sampler.policy,
        )
        return replace(self, ats_stages=tuple(sorted(set(ats_stages))),
                       sampler=sampler, scoring=scoring or self.scoring)


@dataclass
class ForwardTrace:
    """Per-stage token counts, per-sampling-stage results with the surviving
    original token ids, and the classifier logits."""
    stage_counts: list[tuple[int, int]]
    samples: dict[int, SampleResult]
    alive: dict[int, tuple[int, ...]]    # original token ids after each sampling stage
    logits: np.ndarray
    logits_node: Node | None = field(default=None, repr=False)

    def to_json_dict(self) -> dict:
        return {
            "stage_counts": [list(c) for c in self.stage_counts],
            "samples": {str(s): {"kept": list(r.kept), "k_prime": r.k_prime,
                                 "psi": list(r.psi)}
                        for s, r in self.samples.items()},
            "alive": {str(s): list(a) for s, a in self.alive.items()},
            "logits": [float(v) for v in self.logits],
        }


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, r = cfg.dim, cfg.mlp_ratio
    pdim = cfg.patch_size * cfg.patch_size * cfg.channels
    shapes: dict[str, tuple[int, ...]] = {
        "patch.w": (pdim, d),
        "patch.b": (d,),
        "cls": (1, d),
        "pos": (cfg.num_tokens, d),
    }
    for i in range(cfg.depth):
        p = f"block{i}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        shapes[p + "qkv.w"] = (d, 3 * d)
        shapes[p + "qkv.b"] = (3 * d,)
        shapes[p + "out.w"] = (d, d)
        shapes[p + "out.b"] = (d,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "mlp1.w"] = (d, r * d)
        shapes[p + "mlp1.b"] = (r * d,)
        shapes[p + "mlp2.w"] = (r * d, d)
        shapes[p + "mlp2.b"] = (d,)
    shapes["norm.g"] = (d,)
    shapes["norm.b"] = (d,)
    shapes["head.w"] = (d, cfg.num_classes)
    shapes["head.b"] = (cfg.num_classes,)
    return shapes


def init_weights(cfg: ModelConfig, rng: Rng, dtype=FAST_DTYPE) -> dict[str, Node]:
    """Fresh parameters: normal(0, 0.02) projections, unit gammas, zero biases."""
    weights: dict[str, Node] = {}
    for name, shape in _param_shapes(cfg).items():
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif name.endswith(".b") or name.endswith("head.b"):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(shape, std=0.02)
        weights[name] = ag.leaf(arr.astype(dtype))
    return weights


def as_nodes(arrays: dict[str, np.ndarray], dtype=FAST_DTYPE) -> dict[str, Node]:
    return {name: ag.leaf(a.astype(dtype)) for name, a in arrays.items()}


def parameter_count(weights: dict[str, Node]) -> int:
    return sum(w.value.size for w in weights.values())


def extract_patches(image: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Flatten non-overlapping patches in raster order (rows of patches,
    then columns); each row is one patch, row-major within the patch."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape != (cfg.image_size, cfg.image_size, cfg.channels):
        raise ValueError(f"image shape {img.shape}, expected "
                         f"{(cfg.image_size, cfg.image_size, cfg.channels)}")
    g, p = cfg.grid_size, cfg.patch_size
    return (img.reshape(g, p, g, p, cfg.channels)
               .transpose(0, 2, 1, 3, 4)
               .reshape(cfg.num_patches, p * p * cfg.channels))


def patch_embed(image: np.ndarray, weights: dict[str, Node],
                cfg: ModelConfig) -> Node:
    """Linear projection of flattened patches, CLS prepended at row 0,
    learned positional embeddings added."""
    dtype = weights["patch.w"].value.dtype
    patches = ag.leaf(extract_patches(image, cfg).astype(dtype))
    projected = ag.add_row(ag.matmul(patches, weights["patch.w"]), weights["patch.b"])
    tokens = ag.concat_rows([weights["cls"], projected])
    return ag.add(tokens, weights["pos"])


def forward(image: np.ndarray, cfg: ModelConfig, weights: dict[str, Node],
            rng: Rng | None = None) -> ForwardTrace:
    """Run the transformer, sampling tokens at the configured stages.

    rng is only consumed by the random-token scoring variant and the random
    sampling policy; the default configuration is fully deterministic.
    """
    tokens = patch_embed(image, weights, cfg)
    acfg = cfg.attn
    stage_counts: list[tuple[int, int]] = []
    samples: dict[int, SampleResult] = {}
    alive: dict[int, tuple[int, ...]] = {}
    ids = tuple(range(cfg.num_tokens))

    for i in range(cfg.depth):
        p = f"block{i}."
        t_in = tokens.shape[0]
        normed = ag.layer_norm(tokens, weights[p + "ln1.g"], weights[p + "ln1.b"])
        state = attention_matrix(project_qkv(normed, weights[p + "qkv.w"],
                                             weights[p + "qkv.b"], acfg))
        if i in cfg.ats_stages:
            sv = compute_scores([a.value for a in state.attn],
                                [v.value for v in state.v],
                                cfg.scoring, rng)
            result = sample_indices(sv, cfg.sampler, rng)
            attn_out = sampled_attend(state, result,
                                      weights[p + "out.w"], weights[p + "out.b"])
            tokens = ag.add(ag.gather_rows(tokens, result.kept), attn_out)
            ids = tuple(ids[j] for j in result.kept)
            samples[i] = result
            alive[i] = ids
        else:
            tokens = ag.add(tokens, attend(state, weights[p + "out.w"],
                                           weights[p + "out.b"]))
        stage_counts.append((t_in, tokens.shape[0]))

        normed = ag.layer_norm(tokens, weights[p + "ln2.g"], weights[p + "ln2.b"])
        hidden = ag.gelu(ag.add_row(ag.matmul(normed, weights[p + "mlp1.w"]),
                                    weights[p + "mlp1.b"]))
        mlp_out = ag.add_row(ag.matmul(hidden, weights[p + "mlp2.w"]),
                             weights[p + "mlp2.b"])
        tokens = ag.add(tokens, mlp_out)

    final = ag.layer_norm(tokens, weights["norm.g"], weights["norm.b"])
    cls = ag.gather_rows(final, (0,))
    logits = ag.add_row(ag.matmul(cls, weights["head.w"]), weights["head.b"])
    return ForwardTrace(stage_counts=stage_counts, samples=samples, alive=alive,
                        logits=logits.value.reshape(-1).copy(),
                        logits_node=logits)


def save_weights(path: str, cfg: ModelConfig, weights: dict[str, Node]) -> None:
    """Persist architecture config and parameters; bit-exact round trip."""
    tensors = {name: w.value for name, w in weights.items()}
    container.write(path, WEIGHT_MAGIC,
                    {"schema": 1, "config": cfg.arch_dict()}, tensors)


def load_weights(path: str) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    """Load and validate a weight file. Every tensor shape is checked against
    what the header config implies."""
    meta, tensors = container.read(path, WEIGHT_MAGIC)
    cfg = ModelConfig.from_arch_dict(meta["config"])
    expected = _param_shapes(cfg)
    if set(tensors) != set(expected):
        missing = set(expected) ^ set(tensors)
        raise ShapeMismatchError(f"{path}: tensor set mismatch: {sorted(missing)}")
    for name, arr in tensors.items():
        if tuple(arr.shape) != expected[name]:
            raise ShapeMismatchError(
                f"{path}: {name} has shape {tuple(arr.shape)}, "
                f"expected {expected[name]}")
    return cfg, tensors
