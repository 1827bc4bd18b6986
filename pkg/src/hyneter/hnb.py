"""Hybrid stage: a parallel multi-granularity convolution branch fused into
the transformer branch.

The stage runs its transformer blocks on the tokens, re-views the result as
a feature map X, computes S1 by convolving the re-viewed stage input with
kernel sizes 1/3/5 (summed, same padding, no bias), and emits
X + tanh(X ⊙ S1) flattened back to tokens.  With the conv branch absent or
all-zero the fusion contributes exactly nothing and the stage degrades to a
plain transformer stack, bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from . import tensor as T
from .attention import BlockParams, TokenGrid, flatten, re_view, transformer_block
from .tensor import Tensor

__all__ = [
    "ConvTriple",
    "HnbStageParams",
    "multi_granularity_conv",
    "conv_branch",
    "fuse",
    "hnb_stage",
]


@dataclass(frozen=True)
class ConvTriple:
    """One multi-granularity layer: parallel 1x1, 3x3, 5x5 kernels, no bias."""

    w1: Tensor
    w3: Tensor
    w5: Tensor

    def __post_init__(self):
        for w, k in ((self.w1, 1), (self.w3, 3), (self.w5, 5)):
            if w.data.ndim != 4 or w.shape[2:] != (k, k):
                raise ValueError(
                    f"kernel expected [Cout,Cin,{k},{k}], got {w.shape}")
        couts = {self.w1.shape[0], self.w3.shape[0], self.w5.shape[0]}
        cins = {self.w1.shape[1], self.w3.shape[1], self.w5.shape[1]}
        if len(couts) != 1 or len(cins) != 1:
            raise ValueError(
                f"kernel channel counts disagree across the triple: "
                f"{self.w1.shape}, {self.w3.shape}, {self.w5.shape}")


@dataclass(frozen=True)
class HnbStageParams:
    """Branches of one hybrid stage.

    conv_branch None (or empty) means the branch is absent and no fusion
    happens; transformer_branch may be empty, leaving tokens untouched.
    """

    conv_branch: Optional[tuple[ConvTriple, ...]]
    transformer_branch: tuple[BlockParams, ...]


def multi_granularity_conv(fmap: Tensor, layer: ConvTriple) -> Tensor:
    """Sum of the three parallel convolutions; spatial shape preserved."""
    if fmap.shape[1] != layer.w1.shape[1]:
        raise ValueError(
            f"input has {fmap.shape[1]} channels but kernels expect "
            f"{layer.w1.shape[1]}")
    out = T.conv2d(fmap, layer.w1, stride=1, padding=0)
    out = T.add(out, T.conv2d(fmap, layer.w3, stride=1, padding=1))
    return T.add(out, T.conv2d(fmap, layer.w5, stride=1, padding=2))


def conv_branch(fmap: Tensor, layers: tuple[ConvTriple, ...]) -> Tensor:
    """Stacked multi-granularity layers, GELU between layers only."""
    out = multi_granularity_conv(fmap, layers[0])
    for layer in layers[1:]:
        out = multi_granularity_conv(T.gelu(out), layer)
    return out


def fuse(x_map: Tensor, s1_map: Tensor) -> Tensor:
    """X + tanh(X ⊙ S1): the parameter-free branch combination."""
    return T.add(x_map, T.tanh(T.mul(x_map, s1_map)))


def hnb_stage(tg: TokenGrid, p: HnbStageParams,
              window: Optional[int] = None) -> TokenGrid:
    """Run the transformer branch, then fuse the conv branch computed from
    the stage input."""
    x = tg
    for bp in p.transformer_branch:
        x = transformer_block(x, bp, window)
    if not p.conv_branch:
        return x
    s1 = conv_branch(re_view(tg), p.conv_branch)
    return flatten(fuse(re_view(x), s1))
