"""Dual Switching: a fixed spatial permutation applied before attention.

The permutation rearranges a feature grid in three steps: swap adjacent
column pairs, swap adjacent row pairs, then an interlaced pass that swaps
stride-2 pairs inside each aligned group of four (columns, then rows).
Rows or columns without a complete pair/group in a step stay fixed there.
The net effect reverses positions inside each aligned 4x4 tile, so tokens
cross small window boundaries while staying spatially near where they were.

The permutation depends only on the grid shape, never on values, so it is
computed once per shape and cached.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .attention import BlockParams, TokenGrid, flatten, re_view, transformer_block
from .tensor import Tensor

__all__ = ["DsPermutation", "ds_mapping", "ds_permute", "ds_block"]


def _pair_swap(n: int) -> np.ndarray:
    """Gather index swapping (0,1), (2,3), ...; a trailing odd element
    stays."""
    p = np.arange(n)
    m = (n // 2) * 2
    evens = p[0:m:2].copy()
    p[0:m:2] = p[1:m:2]
    p[1:m:2] = evens
    return p

def _interlaced_swap(n: int) -> np.ndarray:
    """Gather index swapping (4k,4k+2) and (4k+1,4k+3) inside each aligned
    group of four; a trailing partial group stays."""
    p = np.arange(n)
    m = (n // 4) * 4
    first = p[0:m:4].copy()
    p[0:m:4] = p[2:m:4]
    p[2:m:4] = first
    second = p[1:m:4].copy()
    p[1:m:4] = p[3:m:4]
    p[3:m:4] = second
    return p


@dataclass(frozen=True)
class DsPermutation:
    """The switching permutation for one grid shape.

    mapping[src] = dst over flattened row-major positions; gather is the
    inverse view (gather[dst] = src), which is what array indexing wants.
    """

    grid: tuple[int, int]
    mapping: np.ndarray
    gather: np.ndarray

    def __post_init__(self):
        hg, wg = self.grid
        if sorted(self.mapping.tolist()) != list(range(hg * wg)):
            raise ValueError("mapping is not a bijection on the grid")


_cache: dict[tuple[int, int], DsPermutation] = {}
_cache_lock = threading.Lock()


def ds_mapping(hg: int, wg: int) -> DsPermutation:
    """The cached switching permutation for an hg-by-wg grid."""
    key = (hg, wg)
    got = _cache.get(key)
    if got is not None:
        return got
    with _cache_lock:
        got = _cache.get(key)
        if got is None:
            got = _build(hg, wg)
            _cache[key] = got
        return got


def _build(hg: int, wg: int) -> DsPermutation:
    # columns move in steps 1 and 3a, rows in steps 2 and 3b; the axes
    # never mix, so each axis is the composition of its two gathers
    col = _pair_swap(wg)[_interlaced_swap(wg)]
    row = _pair_swap(hg)[_interlaced_swap(hg)]
    gather = (row[:, None] * wg + col[None, :]).reshape(-1)
    mapping = np.empty_like(gather)
    mapping[gather] = np.arange(hg * wg)
    return DsPermutation(grid=(hg, wg), mapping=mapping, gather=gather)


def ds_permute(fmap: Tensor) -> Tensor:
    """Apply the switching permutation to a [N, C, Hg, Wg] feature map."""
    if fmap.data.ndim != 4:
        raise ValueError(f"feature map must be [N,C,Hg,Wg], got {fmap.shape}")
    n, c, hg, wg = fmap.shape
    perm = ds_mapping(hg, wg)
    flat = T.reshape(fmap, (n, c, hg * wg))
    # reuse the token gather by treating channels as the token axis ([N,C,L]
    # permutes its last axis the same way [N,L,C] permutes its middle one)
    moved = T.permute_tokens(T.transpose(flat, (0, 2, 1)), perm.gather)
    return T.reshape(T.transpose(moved, (0, 2, 1)), (n, c, hg, wg))


def ds_block(tg: TokenGrid, bp: BlockParams, window: Optional[int] = None,
             enable_ds: bool = True) -> TokenGrid:
    """Transformer block with the switching permutation applied first.

    Token order: switch positions, then pre-norm attention with residual,
    then pre-norm MLP with residual.  enable_ds=False skips the switch,
    leaving a standard block.
    """
    if enable_ds:
        hg, wg = tg.grid
        perm = ds_mapping(hg, wg)
        tg = TokenGrid(T.permute_tokens(tg.tokens, perm.gather), tg.grid)
    return transformer_block(tg, bp, window)
