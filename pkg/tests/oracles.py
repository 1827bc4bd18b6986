"""Hand-built reference implementations the real code is checked against.

Everything here is written the slow, obvious way (explicit loops, direct
summation) so a disagreement points at the fast implementation, not the test.
"""
import numpy as np


def matmul_loops(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop 2-D matrix product."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def conv2d_loops(x: np.ndarray, w: np.ndarray, b=None, stride: int = 1,
                 padding: int = 0) -> np.ndarray:
    """Direct-summation 2-D cross-correlation over [N,Cin,H,W]."""
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, cout, oh, ow))
    for ni in range(n):
        for co in range(cout):
            for oi in range(oh):
                for oj in range(ow):
                    s = 0.0
                    for ci in range(cin):
                        for ki in range(k):
                            for kj in range(k):
                                s += (xp[ni, ci, oi * stride + ki,
                                         oj * stride + kj]
                                      * w[co, ci, ki, kj])
                    if b is not None:
                        s += b[co]
                    out[ni, co, oi, oj] = s
    return out


def softmax_rows_ref(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm_ref(x: np.ndarray, gain: np.ndarray, shift: np.ndarray,
                   eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + shift


def cross_entropy_ref(logits: np.ndarray, labels: np.ndarray) -> float:
    """Per-sample -log p[label], averaged, via explicit normalization."""
    total = 0.0
    for i in range(logits.shape[0]):
        row = logits[i] - logits[i].max()
        p = np.exp(row) / np.exp(row).sum()
        total += -np.log(p[labels[i]])
    return total / logits.shape[0]


def pearson_ref(xs, ys):
    """Pearson correlation from raw covariance sums; None when degenerate."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    n = xs.size
    mx = sum(xs) / n
    my = sum(ys) / n
    sxy = sum((xs[i] - mx) * (ys[i] - my) for i in range(n))
    sxx = sum((xs[i] - mx) ** 2 for i in range(n))
    syy = sum((ys[i] - my) ** 2 for i in range(n))
    if sxx == 0.0 or syy == 0.0:
        return None
    return sxy / np.sqrt(sxx * syy)


def attend_loops(x: np.ndarray, wq, wk, wv, wo, heads: int,
                 delta: float) -> np.ndarray:
    """Per-token, per-head self-attention over [T, C], explicit loops.

    Head h uses columns [h*dh, (h+1)*dh) of each projection.  Off-diagonal
    logits are multiplied by delta after the 1/sqrt(dh) scaling.
    """
    t, c = x.shape
    dh = c // heads
    out_heads = np.zeros((t, c))
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        q = x @ wq[:, cols]
        k = x @ wk[:, cols]
        v = x @ wv[:, cols]
        for i in range(t):
            logits = np.zeros(t)
            for l in range(t):
                s = float(q[i] @ k[l]) / np.sqrt(dh)
                logits[l] = s if i == l else delta * s
            p = np.exp(logits - logits.max())
            p /= p.sum()
            mixed = np.zeros(dh)
            for l in range(t):
                mixed += p[l] * v[l]
            out_heads[i, cols] = mixed
    return out_heads @ wo


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f at x, one coordinate at a time."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = f(x)
        flat[i] = keep - h
        fm = f(x)
        flat[i] = keep
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Worst elementwise relative error with an absolute floor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.abs(a) + np.abs(b), floor)
    return float((np.abs(a - b) / denom).max())
