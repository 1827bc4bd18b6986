"""Four-stage backbone assembly: hybrid stages with global attention feed
windowed switching stages, with stride-2 downsampling between stages.

Stage s runs at channels d·2^s on a grid of extent (image/patch)/2^s.
Stages 1-2 are hybrid stages (transformer blocks plus the fused conv
branch); stages 3-4 are chains of switching blocks with windowed attention.
A classification head (token mean pool, then linear) exists for the
training harness; the four per-stage feature maps stay available so denser
heads can attach later.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .attention import (AttentionParams, BlockParams, TokenGrid, flatten,
                        patch_partition, re_view)
from .dual_switching import ds_block
from .hnb import ConvTriple, HnbStageParams, hnb_stage
from .tensor import Tensor

__all__ = [
    "ModelConfig",
    "Model",
    "VARIANTS",
    "resolve_variant",
    "variant_config",
    "build_variant",
    "forward",
    "count_params",
    "config_param_count",
    "stage_plan",
]

_KERNELS = (1, 3, 5)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; stage channels are d, 2d, 4d, 8d."""

    d: int
    cnn_layers: tuple[int, int, int, int]
    transformer_blocks: tuple[int, int, int, int]
    heads: tuple[int, int, int, int]
    patch: int = 4
    window: int = 7
    delta: float = 1.0
    enable_hnb: bool = True
    enable_ds: bool = True
    mlp_ratio: float = 4.0
    num_classes: int = 3
    image_size: int = 224

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key in ("cnn_layers", "transformer_blocks", "heads"):
            out[key] = list(out[key])
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        kw = dict(raw)
        for key in ("cnn_layers", "transformer_blocks", "heads"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


@dataclass
class Model:
    """A built backbone: immutable config plus the named parameter arrays.

    params is insertion-ordered; that order is the manifest order used by
    checkpoints and the optimizer.
    """

    config: ModelConfig
    params: dict[str, np.ndarray]


VARIANTS: dict[str, dict] = {
    "hyneter-1.0": dict(d=96, cnn_layers=(2, 2, 2, 2),
                        transformer_blocks=(2, 2, 2, 2), heads=(3, 6, 12, 24),
                        window=7, image_size=224),
    "hyneter-plus": dict(d=96, cnn_layers=(2, 2, 3, 2),
                         transformer_blocks=(2, 2, 6, 2), heads=(3, 6, 12, 24),
                         window=7, image_size=224),
    "hyneter-max": dict(d=128, cnn_layers=(2, 2, 6, 2),
                        transformer_blocks=(2, 2, 18, 2), heads=(4, 8, 16, 32),
                        window=7, image_size=224),
    "hyneter-micro": dict(d=16, cnn_layers=(1, 1, 1, 1),
                          transformer_blocks=(1, 1, 1, 1), heads=(1, 2, 4, 8),
                          window=4, image_size=32),
}

_ALIASES = {name.removeprefix("hyneter-"): name for name in VARIANTS}


def resolve_variant(name: str) -> str:
    full = _ALIASES.get(name, name)
    if full not in VARIANTS:
        valid = ", ".join(sorted(VARIANTS))
        raise ValueError(f"unknown variant {name!r}; valid variants: {valid}")
    return full


def variant_config(spec: Union[str, "ModelConfig"],
                   **overrides) -> "ModelConfig":
    """Resolve a variant name or config, apply overrides, and validate."""
    if isinstance(spec, ModelConfig):
        cfg = dataclasses.replace(spec, **overrides) if overrides else spec
    else:
        kw = dict(VARIANTS[resolve_variant(spec)])
        kw.update(overrides)
        cfg = ModelConfig(**kw)
    _validate(cfg)
    return cfg


def stage_plan(cfg: ModelConfig) -> list[tuple[int, int, Optional[int]]]:
    """Per stage: (channels, grid extent, attention window or None=global).

    The windowed stages clamp the configured window to the grid extent, so
    a window larger than the whole grid degrades to global attention.
    """
    base = cfg.image_size // cfg.patch
    plan = []
    for s in range(4):
        c = cfg.d << s
        g = base >> s
        window = None if s < 2 else min(cfg.window, g)
        plan.append((c, g, window))
    return plan


def _validate(cfg: ModelConfig) -> None:
    for name, tup in (("cnn_layers", cfg.cnn_layers),
                      ("transformer_blocks", cfg.transformer_blocks),
                      ("heads", cfg.heads)):
        if len(tup) != 4 or any(int(v) != v or v < 0 for v in tup):
            raise ValueError(f"{name} must be 4 non-negative ints, got {tup}")
    if cfg.d < 1 or cfg.patch < 1 or cfg.num_classes < 1:
        raise ValueError("d, patch, and num_classes must be positive")
    if cfg.delta <= 0:
        raise ValueError(f"delta must be positive, got {cfg.delta}")
    if cfg.window < 1:
        raise ValueError(f"window must be positive, got {cfg.window}")
    if cfg.image_size % (cfg.patch * 8):
        raise ValueError(
            f"image_size {cfg.image_size} must be divisible by "
            f"patch*8 = {cfg.patch * 8} so every stage has an integral grid")
    for s, (c, g, window) in enumerate(stage_plan(cfg), start=1):
        if c % cfg.heads[s - 1]:
            raise ValueError(
                f"stage {s} channels {c} not divisible by heads "
                f"{cfg.heads[s - 1]}")
        if window is not None and g % window:
            raise ValueError(
                f"stage {s} grid {g}x{g} is not divisible by its effective "
                f"window {window}; adjust window or image_size")


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) with draws beyond 2 sigma redrawn."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def _he(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return _trunc_normal(rng, shape, math.sqrt(2.0 / fan_in))


def _hidden(c: int, ratio: float) -> int:
    return int(c * ratio)


def build_variant(spec: Union[str, ModelConfig], seed: int = 0,
                  **overrides) -> Model:
    """Construct a model with deterministic seed-driven initialization.

    spec is a variant name (long or short form) or a ModelConfig; keyword
    overrides replace individual config fields either way.
    """
    cfg = variant_config(spec, **overrides)

    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}

    def proj(path, shape):
        p[path] = _trunc_normal(rng, shape, 0.02)

    def conv(path, shape):
        p[path] = _he(rng, shape)

    def zeros(path, shape):
        p[path] = np.zeros(shape)

    base_grid = cfg.image_size // cfg.patch
    conv("patch_embed.weight", (cfg.d, 3, cfg.patch, cfg.patch))
    proj("pos_embed", (base_grid * base_grid, cfg.d))

    for s, (c, _, _) in enumerate(stage_plan(cfg)):
        if s < 2 and cfg.enable_hnb:
            for j in range(cfg.cnn_layers[s]):
                for k in _KERNELS:
                    conv(f"stages.{s}.conv.{j}.k{k}.weight", (c, c, k, k))
        for i in range(cfg.transformer_blocks[s]):
            b = f"stages.{s}.blocks.{i}"
            p[f"{b}.ln1.gain"] = np.ones(c)
            zeros(f"{b}.ln1.shift", c)
            for name in ("wq", "wk", "wv", "wo"):
                proj(f"{b}.attn.{name}", (c, c))
            p[f"{b}.ln2.gain"] = np.ones(c)
            zeros(f"{b}.ln2.shift", c)
            hid = _hidden(c, cfg.mlp_ratio)
            proj(f"{b}.mlp.w1", (c, hid))
            zeros(f"{b}.mlp.b1", hid)
            proj(f"{b}.mlp.w2", (hid, c))
            zeros(f"{b}.mlp.b2", c)
        if s < 3:
            conv(f"downsample.{s}.weight", (2 * c, c, 2, 2))
            zeros(f"downsample.{s}.bias", 2 * c)

    proj("head.weight", (8 * cfg.d, cfg.num_classes))
    zeros("head.bias", cfg.num_classes)
    return Model(config=cfg, params=p)


# ---------------------------------------------------------------------------
# forward


def _bind(params: dict[str, np.ndarray],
          record: Optional[T.DiffRecord]) -> dict[str, Tensor]:
    if record is None:
        return {path: Tensor(arr) for path, arr in params.items()}
    return {path: record.parameter(path, arr) for path, arr in params.items()}


def _block_params(p: dict[str, Tensor], prefix: str, heads: int,
                  delta: float) -> BlockParams:
    c = p[f"{prefix}.attn.wq"].shape[0]
    return BlockParams(
        ln1_gain=p[f"{prefix}.ln1.gain"], ln1_shift=p[f"{prefix}.ln1.shift"],
        attn=AttentionParams(
            wq=p[f"{prefix}.attn.wq"], wk=p[f"{prefix}.attn.wk"],
            wv=p[f"{prefix}.attn.wv"], wo=p[f"{prefix}.attn.wo"],
            heads=heads, head_dim=c // heads, delta=delta),
        ln2_gain=p[f"{prefix}.ln2.gain"], ln2_shift=p[f"{prefix}.ln2.shift"],
        mlp_w1=p[f"{prefix}.mlp.w1"], mlp_b1=p[f"{prefix}.mlp.b1"],
        mlp_w2=p[f"{prefix}.mlp.w2"], mlp_b2=p[f"{prefix}.mlp.b2"])


def forward(model: Model, images, record: Optional[T.DiffRecord] = None
            ) -> tuple[list[Tensor], Tensor]:
    """Run the backbone; returns the four stage feature maps and logits.

    images: [N, 3, H, W] with H = W = config.image_size (the positional
    table is learned per token, which pins the input extent).  Pass a
    DiffRecord to make the pass differentiable.
    """
    cfg = model.config
    shape = images.shape if isinstance(images, Tensor) else np.shape(images)
    if len(shape) != 4 or shape[1] != 3:
        raise ValueError(f"images must be [N,3,H,W], got {shape}")
    if shape[2] != cfg.image_size or shape[3] != cfg.image_size:
        raise ValueError(
            f"input extent {shape[2]}x{shape[3]} does not match the model's "
            f"image_size {cfg.image_size}")

    p = _bind(model.params, record)
    plan = stage_plan(cfg)
    tg = patch_partition(images, cfg.patch, p["patch_embed.weight"],
                         p["pos_embed"])

    stage_maps: list[Tensor] = []
    for s, (c, _, window) in enumerate(plan):
        if s < 2:
            conv_layers = None
            if cfg.enable_hnb and cfg.cnn_layers[s] > 0:
                conv_layers = tuple(
                    ConvTriple(w1=p[f"stages.{s}.conv.{j}.k1.weight"],
                               w3=p[f"stages.{s}.conv.{j}.k3.weight"],
                               w5=p[f"stages.{s}.conv.{j}.k5.weight"])
                    for j in range(cfg.cnn_layers[s]))
            blocks = tuple(
                _block_params(p, f"stages.{s}.blocks.{i}", cfg.heads[s],
                              cfg.delta)
                for i in range(cfg.transformer_blocks[s]))
            tg = hnb_stage(tg, HnbStageParams(conv_branch=conv_layers,
                                              transformer_branch=blocks),
                           window=None)
        else:
            for i in range(cfg.transformer_blocks[s]):
                bp = _block_params(p, f"stages.{s}.blocks.{i}", cfg.heads[s],
                                   cfg.delta)
                tg = ds_block(tg, bp, window=window, enable_ds=cfg.enable_ds)
        fmap = re_view(tg)
        stage_maps.append(fmap)
        if s < 3:
            down = T.conv2d(fmap, p[f"downsample.{s}.weight"],
                            p[f"downsample.{s}.bias"], stride=2)
            tg = flatten(down)

    pooled = T.mean(tg.tokens, axes=(1,))
    logits = T.linear(pooled, p["head.weight"], p["head.bias"])
    return stage_maps, logits


# ---------------------------------------------------------------------------
# parameter accounting


def count_params(model: Model, include_head: bool = True) -> int:
    """Exact scalar parameter count by enumerating the built arrays."""
    total = 0
    for path, arr in model.params.items():
        if not include_head and path.startswith("head."):
            continue
        total += arr.size
    return total


def config_param_count(cfg: ModelConfig, include_head: bool = True) -> int:
    """Closed-form parameter count derived per layer from the config alone."""
    g1 = cfg.image_size // cfg.patch
    total = cfg.d * 3 * cfg.patch * cfg.patch    # patch embedding
    total += g1 * g1 * cfg.d                     # positional table
    for s in range(4):
        c = cfg.d << s
        hid = _hidden(c, cfg.mlp_ratio)
        per_block = (4 * c * c                   # q, k, v, o projections
                     + 4 * c                     # two layer norms
                     + c * hid + hid             # mlp in
                     + hid * c + c)              # mlp out
        total += cfg.transformer_blocks[s] * per_block
        if s < 2 and cfg.enable_hnb:
            ksum = sum(k * k for k in _KERNELS)
            total += cfg.cnn_layers[s] * c * c * ksum
        if s < 3:
            total += (2 * c) * c * 4 + 2 * c     # downsample conv + bias
    if include_head:
        total += 8 * cfg.d * cfg.num_classes + cfg.num_classes
    return total
