"""Hot-kernel dispatch.

The compiled extension is used when it imports; otherwise the numpy versions in
``_fallback`` take over.  Set ``PAROT_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("PAROT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback


def _coords(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"expected an (n, 3) coordinate array, got shape {a.shape}")
    return a


def fps(points, m, start=0):
    """Farthest point sampling; returns ``m`` indices beginning at ``start``."""
    pts = _coords(points)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"fps: need 1 <= m <= N, got m={m}, N={n}")
    if not 0 <= start < n:
        raise ValueError(f"fps: start index {start} out of range for N={n}")
    return _impl.fps(pts, int(m), int(start))


def knn(query, base, k):
    q, b = _coords(query), _coords(base)
    if not 1 <= k <= b.shape[0]:
        raise ValueError(f"knn: need 1 <= k <= |base|, got k={k}, |base|={b.shape[0]}")
    return _impl.knn(q, b, int(k))


def ball_query(query, base, radius, k_max):
    q, b = _coords(query), _coords(base)
    if radius <= 0:
        raise ValueError(f"ball_query: radius must be positive, got {radius}")
    if k_max < 1:
        raise ValueError(f"ball_query: k_max must be >= 1, got {k_max}")
    return _impl.ball_query(q, b, float(radius), int(k_max))


def maxpool(x):
    """Max over axis 1 of an (r, k, c) array; ties resolve to the lowest index."""
    return _impl.maxpool(np.ascontiguousarray(x))


def maxpool_backward(grad, arg, k):
    return _impl.maxpool_backward(
        np.ascontiguousarray(grad), np.ascontiguousarray(arg, dtype=np.int64), int(k)
    )


def scatter_add_rows(src, idx, n):
    return _impl.scatter_add_rows(
        np.ascontiguousarray(src), np.ascontiguousarray(idx, dtype=np.int64), int(n)
    )


def channel_stats(x):
    """Mean and biased variance of every column of a 2-D array (float64 results)."""
    return _impl.channel_stats(np.ascontiguousarray(x))


def bn_act_forward(x, scale, shift, slope=0.0, act=False):
    """``act(x * scale + shift)`` over the columns of a 2-D array; ``act`` is a (leaky) ReLU."""
    dt = x.dtype
    return _impl.bn_act_forward(
        np.ascontiguousarray(x), np.ascontiguousarray(scale, dtype=dt),
        np.ascontiguousarray(shift, dtype=dt), float(slope), bool(act),
    )


def bn_act_backward(g, x, out, mean, inv, gamma, slope=0.0, act=False, training=True):
    """Gradients ``(gx, dgamma, dbeta)`` of batch norm with ``xhat = (x - mean) * inv`` plus activation."""
    dt = g.dtype
    return _impl.bn_act_backward(
        np.ascontiguousarray(g), np.ascontiguousarray(x), np.ascontiguousarray(out),
        *(np.ascontiguousarray(v, dtype=dt) for v in (mean, inv, gamma)),
        float(slope), bool(act), bool(training),
    )
