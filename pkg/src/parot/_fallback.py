"""Pure-numpy versions of the hot kernels.

Selected at import when the compiled ``_kernels`` extension is missing.  The
sampling, neighbour and pooling kernels return bit-identical results to their
compiled twins (squared distances are accumulated as ``(dx*dx + dy*dy) + dz*dz``
on both sides); the batch-norm reductions agree up to summation order.
"""

import numpy as np


def _sqdist(query, base):
    d = query[:, None, 0] - base[None, :, 0]
    out = d * d
    d = query[:, None, 1] - base[None, :, 1]
    out += d * d
    d = query[:, None, 2] - base[None, :, 2]
    out += d * d
    return out


def fps(points, m, start):
    n = points.shape[0]
    selected = np.empty(m, dtype=np.int64)
    dist = np.full(n, np.inf)
    cur = start
    for i in range(m):
        selected[i] = cur
        d = points - points[cur]
        d2 = (d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]) + d[:, 2] * d[:, 2]
        np.minimum(dist, d2, out=dist)
        dist[cur] = -1.0
        cur = int(np.argmax(dist))
    return selected


def knn(query, base, k):
    d2 = _sqdist(query, base)
    return np.argsort(d2, axis=1, kind="stable")[:, :k].astype(np.int64)


def ball_query(query, base, radius, k_max):
    d2 = _sqdist(query, base)
    r2 = radius * radius
    out = np.empty((query.shape[0], k_max), dtype=np.int64)
    fallback = 0
    for i in range(query.shape[0]):
        inside = np.flatnonzero(d2[i] < r2)[:k_max]
        if inside.size == 0:
            fallback += 1
            out[i] = np.argsort(d2[i], kind="stable")[0]
            continue
        out[i, : inside.size] = inside
        out[i, inside.size :] = inside[0]
    return out, fallback


def maxpool(x):
    arg = np.argmax(x, axis=1)
    vals = np.take_along_axis(x, arg[:, None, :], axis=1)[:, 0, :]
    return vals, arg.astype(np.int64)


def maxpool_backward(grad, arg, k):
    r, c = grad.shape
    out = np.zeros((r, k, c), dtype=grad.dtype)
    np.put_along_axis(out, arg[:, None, :], grad[:, None, :], axis=1)
    return out


def scatter_add_rows(src, idx, n):
    out = np.zeros((n, src.shape[1]), dtype=src.dtype)
    np.add.at(out, idx, src)
    return out


def channel_stats(x):
    mean = x.mean(axis=0, dtype=np.float64)
    xc = x - mean
    return mean, np.einsum("ij,ij->j", xc, xc) / x.shape[0]


def bn_act_forward(x, scale, shift, slope, act):
    out = x * scale + shift
    if act:
        out = np.maximum(out, 0) + out.dtype.type(slope) * np.minimum(out, 0)
    return out


def bn_act_backward(g, x, out, mean, inv, gamma, slope, act, training):
    gy = np.where(out > 0, g, g * g.dtype.type(slope)) if act else g
    xhat = (x - mean) * inv
    dbeta = gy.sum(axis=0, dtype=np.float64)
    dgamma = np.einsum("ij,ij->j", gy, xhat, dtype=np.float64)
    scale = gamma * inv
    m = g.shape[0]
    if training:
        gx = scale * (gy - (dbeta / m).astype(g.dtype) - xhat * (dgamma / m).astype(g.dtype))
    else:
        gx = scale * gy
    return gx, dgamma.astype(g.dtype), dbeta.astype(g.dtype)
