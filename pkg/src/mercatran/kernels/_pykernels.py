"""NumPy implementations of the row kernels (fallback backend)."""
import numpy as np


def softmax_rows_fwd(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_bwd(y, g):
    dot = (y * g).sum(axis=1, keepdims=True)
    return y * (g - dot)


def layer_norm_fwd(x, gamma, beta, eps):
    mean = x.mean(axis=1, keepdims=True)
    diff = x - mean
    var = (diff * diff).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = diff * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layer_norm_bwd(g, xhat, rstd, gamma):
    gh = g * gamma
    m1 = gh.mean(axis=1, keepdims=True)
    m2 = (gh * xhat).mean(axis=1, keepdims=True)
    gx = rstd[:, None] * (gh - m1 - xhat * m2)
    return gx, (g * xhat).sum(axis=0), g.sum(axis=0)


def topk_scan(emb, query, id_rank, k):
    n, d = emb.shape
    k = min(k, n)
    if k == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
    # sequential accumulation over dims keeps scores bit-identical to the C scan
    acc = np.zeros(n, dtype=np.float64)
    for j in range(d):
        acc = acc + emb[:, j].astype(np.float64) * query[j]
    if k < n:
        kth = np.partition(acc, n - k)[n - k]
        cand = np.flatnonzero(acc >= kth)
    else:
        cand = np.arange(n)
    order = np.lexsort((id_rank[cand], -acc[cand]))[:k]
    idx = cand[order].astype(np.int64)
    return idx, acc[idx]
