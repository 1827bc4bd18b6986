"""Token embedding, grid reshaping, and multi-head self-attention with an
off-diagonal score scaler.

Tokens travel as a :class:`TokenGrid`: a [N, L, C] tensor plus the (Hg, Wg)
spatial grid it was flattened from.  `re_view` and `flatten` convert between
token form and [N, C, Hg, Wg] feature-map form without touching values.

Attention scores use the usual q·k/sqrt(head_dim) logits, after which every
off-diagonal entry is multiplied by a scalar `delta` (`offdiag_scale`).
delta=1.0 bypasses that branch entirely, returning the score tensor object
unchanged, so the scaled and unscaled paths are bit-identical there.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "TokenGrid",
    "AttentionParams",
    "BlockParams",
    "patch_partition",
    "re_view",
    "flatten",
    "scaled_scores",
    "offdiag_scale",
    "attend",
    "gmsa",
    "mlp",
    "transformer_block",
]


@dataclass(frozen=True)
class TokenGrid:
    """[N, L, C] tokens plus the spatial grid they came from (L = Hg*Wg)."""

    tokens: Tensor
    grid: tuple[int, int]

    def __post_init__(self):
        hg, wg = self.grid
        if self.tokens.data.ndim != 3:
            raise ValueError(
                f"tokens must be [N, L, C], got shape {self.tokens.shape}")
        if self.tokens.shape[1] != hg * wg:
            raise ValueError(
                f"token count {self.tokens.shape[1]} does not match grid "
                f"{hg}x{wg}")

    @property
    def channels(self) -> int:
        return self.tokens.shape[2]


@dataclass(frozen=True)
class AttentionParams:
    """Projections for multi-head attention over C channels.

    wq/wk/wv/wo are merged [C, C] matrices; head h owns columns
    [h*head_dim, (h+1)*head_dim).  No projection biases.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int
    head_dim: int
    delta: float

    def __post_init__(self):
        c = self.wq.shape[0]
        if self.heads * self.head_dim != c:
            raise ValueError(
                f"heads ({self.heads}) x head_dim ({self.head_dim}) must "
                f"equal channels ({c})")
        if self.delta <= 0:
            raise ValueError(f"delta must be positive, got {self.delta}")


@dataclass(frozen=True)
class BlockParams:
    """One pre-norm transformer block: LN, attention, LN, 2-layer MLP."""

    ln1_gain: Tensor
    ln1_shift: Tensor
    attn: AttentionParams
    ln2_gain: Tensor
    ln2_shift: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor


# ---------------------------------------------------------------------------
# layout conversions


def patch_partition(images, patch: int, embed_weight, pos) -> TokenGrid:
    """Embed non-overlapping patch*patch pixel blocks into tokens.

    images: [N, 3, H, W]; embed_weight: [C, 3, patch, patch] applied as a
    stride-`patch` convolution (no bias); pos: [L, C] positional table added
    to every sample, or None to skip.  H and W must be divisible by patch.
    """
    shape = images.shape if isinstance(images, Tensor) else np.shape(images)
    n, cin, h, w = shape
    if h % patch or w % patch:
        raise ValueError(
            f"image extent {h}x{w} must be divisible by patch size {patch}")
    fmap = T.conv2d(images, embed_weight, stride=patch)
    tg = flatten(fmap)
    if pos is None:
        return tg
    return TokenGrid(T.add(tg.tokens, pos), tg.grid)


def re_view(tg: TokenGrid) -> Tensor:
    """Tokens [N, L, C] to feature map [N, C, Hg, Wg]; pure relayout."""
    hg, wg = tg.grid
    n, _, c = tg.tokens.shape
    spatial = T.reshape(tg.tokens, (n, hg, wg, c))
    return T.transpose(spatial, (0, 3, 1, 2))


def flatten(fmap: Tensor) -> TokenGrid:
    """Feature map [N, C, Hg, Wg] to tokens [N, Hg*Wg, C]; inverse of
    re_view."""
    if fmap.data.ndim != 4:
        raise ValueError(f"feature map must be [N,C,Hg,Wg], got {fmap.shape}")
    n, c, hg, wg = fmap.shape
    tokens = T.reshape(T.transpose(fmap, (0, 2, 3, 1)), (n, hg * wg, c))
    return TokenGrid(tokens, (hg, wg))


# ---------------------------------------------------------------------------
# scores


def offdiag_scale(scores: Tensor, delta: float) -> Tensor:
    """Multiply every off-diagonal score by delta, keeping the diagonal.

    The trailing two axes must be square.  delta == 1.0 returns `scores`
    itself: no scaling node exists on that path, so downstream values are
    bit-identical to a build without this feature.
    """
    if delta == 1.0:
        return scores
    length = scores.shape[-1]
    if scores.shape[-2] != length:
        raise ValueError(f"score matrix must be square, got {scores.shape}")
    m = np.full((length, length), float(delta))
    np.fill_diagonal(m, 1.0)
    return T.mul_const(scores, m)


def scaled_scores(q: Tensor, k: Tensor, delta: float) -> Tensor:
    """Pairwise attention logits for one head: q_i·k_l / sqrt(dh), with
    off-diagonal entries further multiplied by delta."""
    if q.shape != k.shape or q.data.ndim != 2:
        raise ValueError(
            f"q and k must both be [L, dh], got {q.shape} and {k.shape}")
    dh = q.shape[1]
    raw = T.matmul(q, T.transpose(k, (1, 0)))
    return offdiag_scale(T.mul_const(raw, 1.0 / math.sqrt(dh)), delta)


# ---------------------------------------------------------------------------
# attention


def attend(x: Tensor, p: AttentionParams) -> Tensor:
    """Multi-head self-attention over [B, T, C] token batches."""
    b, t, c = x.shape
    h, dh = p.heads, p.head_dim

    def split(proj):
        return T.transpose(T.reshape(proj, (b, t, h, dh)), (0, 2, 1, 3))

    q = split(T.matmul(x, p.wq))
    k = split(T.matmul(x, p.wk))
    v = split(T.matmul(x, p.wv))
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
    scores = T.mul_const(scores, 1.0 / math.sqrt(dh))
    scores = offdiag_scale(scores, p.delta)
    mixed = T.matmul(T.softmax_rows(scores), v)
    merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (b, t, c))
    return T.matmul(merged, p.wo)


def _window_split(tokens: Tensor, hg: int, wg: int, w: int) -> Tensor:
    """[N, Hg*Wg, C] -> [N*tiles, w*w, C] over non-overlapping w*w tiles."""
    n, _, c = tokens.shape
    nh, nw = hg // w, wg // w
    x = T.reshape(tokens, (n, nh, w, nw, w, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (n * nh * nw, w * w, c))


def _window_join(tokens: Tensor, hg: int, wg: int, w: int, n: int) -> Tensor:
    """Inverse of _window_split."""
    c = tokens.shape[2]
    nh, nw = hg // w, wg // w
    x = T.reshape(tokens, (n, nh, nw, w, w, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (n, hg * wg, c))


def gmsa(tg: TokenGrid, p: AttentionParams,
         window: Optional[int] = None) -> TokenGrid:
    """Multi-head self-attention over the token grid.

    window=None attends globally over all L tokens.  An integer window
    partitions the grid into window*window tiles and attends within each
    tile independently; both grid extents must be divisible by it.
    """
    hg, wg = tg.grid
    if window is None:
        return TokenGrid(attend(tg.tokens, p), tg.grid)
    if hg % window or wg % window:
        raise ValueError(
            f"grid {hg}x{wg} is not divisible by window {window}")
    n = tg.tokens.shape[0]
    tiled = _window_split(tg.tokens, hg, wg, window)
    mixed = attend(tiled, p)
    return TokenGrid(_window_join(mixed, hg, wg, window, n), tg.grid)


def mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Two-layer feed-forward expansion with a GELU between."""
    return T.linear(T.gelu(T.linear(x, w1, b1)), w2, b2)


def transformer_block(tg: TokenGrid, bp: BlockParams,
                      window: Optional[int] = None) -> TokenGrid:
    """Pre-norm block: x + attn(LN(x)), then x + mlp(LN(x))."""
    x = tg.tokens
    normed = T.layer_norm(x, bp.ln1_gain, bp.ln1_shift)
    attn_out = gmsa(TokenGrid(normed, tg.grid), bp.attn, window).tokens
    x = T.add(x, attn_out)
    normed = T.layer_norm(x, bp.ln2_gain, bp.ln2_shift)
    x = T.add(x, mlp(normed, bp.mlp_w1, bp.mlp_b1, bp.mlp_w2, bp.mlp_b2))
    return TokenGrid(x, tg.grid)
