"""An independently wired plain 4-stage windowed-transformer forward pass.

Built from a model's parameter arrays but assembled from scratch out of the
numeric primitives: no switching step, no conv branch, no score scaler
branch anywhere.  Used to pin down what the backbone must collapse to when
those features are disabled.  Kernel-level primitives are shared with the
package (they are verified separately against loop oracles); the stage and
block wiring here is deliberately re-derived.
"""
import math

from hyneter import tensor as T
from hyneter.tensor import Tensor


def _attend_plain(x, wq, wk, wv, wo, heads):
    """Multi-head attention with no delta branch at all."""
    b, t, c = x.shape
    dh = c // heads
    q = T.transpose(T.reshape(T.matmul(x, wq), (b, t, heads, dh)),
                    (0, 2, 1, 3))
    k = T.transpose(T.reshape(T.matmul(x, wk), (b, t, heads, dh)),
                    (0, 2, 1, 3))
    v = T.transpose(T.reshape(T.matmul(x, wv), (b, t, heads, dh)),
                    (0, 2, 1, 3))
    scores = T.mul_const(T.matmul(q, T.transpose(k, (0, 1, 3, 2))),
                         1.0 / math.sqrt(dh))
    mixed = T.matmul(T.softmax_rows(scores), v)
    return T.matmul(T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (b, t, c)),
                    wo)


def _split_windows(x, hg, wg, w):
    n, _, c = x.shape
    nh, nw = hg // w, wg // w
    t = T.transpose(T.reshape(x, (n, nh, w, nw, w, c)), (0, 1, 3, 2, 4, 5))
    return T.reshape(t, (n * nh * nw, w * w, c))


def _join_windows(x, hg, wg, w, n):
    c = x.shape[2]
    nh, nw = hg // w, wg // w
    t = T.transpose(T.reshape(x, (n, nh, nw, w, w, c)), (0, 1, 3, 2, 4, 5))
    return T.reshape(t, (n, hg * wg, c))


def _plain_block(x, p, prefix, heads, window, hg, wg):
    """Pre-norm block: x + attn(LN(x)); x + mlp(LN(x))."""
    normed = T.layer_norm(x, p[f"{prefix}.ln1.gain"], p[f"{prefix}.ln1.shift"])
    if window is None:
        attn = _attend_plain(normed, p[f"{prefix}.attn.wq"],
                             p[f"{prefix}.attn.wk"], p[f"{prefix}.attn.wv"],
                             p[f"{prefix}.attn.wo"], heads)
    else:
        n = x.shape[0]
        tiles = _split_windows(normed, hg, wg, window)
        mixed = _attend_plain(tiles, p[f"{prefix}.attn.wq"],
                              p[f"{prefix}.attn.wk"], p[f"{prefix}.attn.wv"],
                              p[f"{prefix}.attn.wo"], heads)
        attn = _join_windows(mixed, hg, wg, window, n)
    x = T.add(x, attn)
    normed = T.layer_norm(x, p[f"{prefix}.ln2.gain"], p[f"{prefix}.ln2.shift"])
    up = T.linear(normed, p[f"{prefix}.mlp.w1"], p[f"{prefix}.mlp.b1"])
    down = T.linear(T.gelu(up), p[f"{prefix}.mlp.w2"], p[f"{prefix}.mlp.b2"])
    return T.add(x, down)


def plain_forward(config, params, images):
    """Plain windowed-transformer logits for [N,3,H,W] images (numpy in,
    numpy out)."""
    p = {path: Tensor(arr) for path, arr in params.items()}
    n = images.shape[0]
    grid = config.image_size // config.patch

    fmap = T.conv2d(Tensor(images), p["patch_embed.weight"],
                    stride=config.patch)
    x = T.reshape(T.transpose(fmap, (0, 2, 3, 1)), (n, grid * grid, config.d))
    x = T.add(x, p["pos_embed"])

    for s in range(4):
        g = grid >> s
        heads = config.heads[s]
        window = None if s < 2 else min(config.window, g)
        for i in range(config.transformer_blocks[s]):
            x = _plain_block(x, p, f"stages.{s}.blocks.{i}", heads, window,
                             g, g)
        if s < 3:
            c = config.d << s
            spatial = T.transpose(T.reshape(x, (n, g, g, c)), (0, 3, 1, 2))
            down = T.conv2d(spatial, p[f"downsample.{s}.weight"],
                            p[f"downsample.{s}.bias"], stride=2)
            x = T.reshape(T.transpose(down, (0, 2, 3, 1)),
                          (n, (g // 2) * (g // 2), 2 * c))

    pooled = T.mean(x, axes=(1,))
    return T.linear(pooled, p["head.weight"], p["head.bias"]).data
