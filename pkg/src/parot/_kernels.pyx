# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: sampling, neighbour search, max-pool routing, scatter-add.

Results are bit-identical to ``parot._fallback``; build with -ffp-contract=off so
the distance sums are not fused into FMA instructions.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()

ctypedef fused real:
    float
    double


def fps(const double[:, ::1] points, Py_ssize_t m, Py_ssize_t start):
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t i, j, cur = start, best
    cdef double dx, dy, dz, d2, bestd
    out = np.empty(m, dtype=np.int64)
    dist_arr = np.full(n, INFINITY)
    cdef cnp.int64_t[::1] sel = out
    cdef double[::1] dist = dist_arr
    for i in range(m):
        sel[i] = cur
        bestd = -INFINITY
        best = 0
        for j in range(n):
            dx = points[j, 0] - points[cur, 0]
            dy = points[j, 1] - points[cur, 1]
            dz = points[j, 2] - points[cur, 2]
            d2 = (dx * dx + dy * dy) + dz * dz
            if d2 < dist[j]:
                dist[j] = d2
            if j == cur:
                dist[j] = -1.0
            if dist[j] > bestd:
                bestd = dist[j]
                best = j
        cur = best
    return out


def knn(const double[:, ::1] query, const double[:, ::1] base, Py_ssize_t k):
    cdef Py_ssize_t m = query.shape[0], n = base.shape[0]
    cdef Py_ssize_t i, j, p, fill
    cdef double dx, dy, dz, d2
    out = np.empty((m, k), dtype=np.int64)
    bufd_arr = np.empty(k, dtype=np.float64)
    cdef cnp.int64_t[:, ::1] idx = out
    cdef double[::1] bufd = bufd_arr
    for i in range(m):
        fill = 0
        for j in range(n):
            dx = query[i, 0] - base[j, 0]
            dy = query[i, 1] - base[j, 1]
            dz = query[i, 2] - base[j, 2]
            d2 = (dx * dx + dy * dy) + dz * dz
            if fill == k and d2 >= bufd[k - 1]:
                continue
            # insertion keeps (distance, index) order; equal distances stay behind
            if fill < k:
                fill += 1
            p = fill - 1
            while p > 0 and bufd[p - 1] > d2:
                bufd[p] = bufd[p - 1]
                idx[i, p] = idx[i, p - 1]
                p -= 1
            bufd[p] = d2
            idx[i, p] = j
    return out


def ball_query(const double[:, ::1] query, const double[:, ::1] base, double radius, Py_ssize_t k_max):
    cdef Py_ssize_t m = query.shape[0], n = base.shape[0]
    cdef Py_ssize_t i, j, cnt, nearest
    cdef double dx, dy, dz, d2, r2 = radius * radius, bestd
    cdef Py_ssize_t fallback = 0
    out = np.empty((m, k_max), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] idx = out
    for i in range(m):
        cnt = 0
        nearest = 0
        bestd = INFINITY
        for j in range(n):
            dx = query[i, 0] - base[j, 0]
            dy = query[i, 1] - base[j, 1]
            dz = query[i, 2] - base[j, 2]
            d2 = (dx * dx + dy * dy) + dz * dz
            if d2 < bestd:
                bestd = d2
                nearest = j
            if d2 < r2 and cnt < k_max:
                idx[i, cnt] = j
                cnt += 1
        if cnt == 0:
            fallback += 1
            for j in range(k_max):
                idx[i, j] = nearest
        else:
            for j in range(cnt, k_max):
                idx[i, j] = idx[i, 0]
    return out, fallback


def maxpool(real[:, :, ::1] x):
    cdef Py_ssize_t r = x.shape[0], k = x.shape[1], c = x.shape[2]
    cdef Py_ssize_t a, b, ch
    cdef real v
    dtype = np.float32 if real is float else np.float64
    vals_arr = np.empty((r, c), dtype=dtype)
    arg_arr = np.zeros((r, c), dtype=np.int64)
    if r == 0 or c == 0:
        return vals_arr, arg_arr
    cdef real[:, ::1] valsv = vals_arr
    cdef cnp.int64_t[:, ::1] argv = arg_arr
    cdef real *vals = &valsv[0, 0]
    cdef cnp.int64_t *arg = &argv[0, 0]
    cdef real *px = &x[0, 0, 0]
    for a in range(r):
        for ch in range(c):
            vals[a * c + ch] = px[a * k * c + ch]
        for b in range(1, k):
            for ch in range(c):
                v = px[(a * k + b) * c + ch]
                if v > vals[a * c + ch]:
                    vals[a * c + ch] = v
                    arg[a * c + ch] = b
    return vals_arr, arg_arr


def maxpool_backward(real[:, ::1] grad, const cnp.int64_t[:, ::1] arg, Py_ssize_t k):
    cdef Py_ssize_t r = grad.shape[0], c = grad.shape[1]
    cdef Py_ssize_t a, ch
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((r, k, c), dtype=dtype)
    cdef real[:, :, ::1] out = out_arr
    for a in range(r):
        for ch in range(c):
            out[a, arg[a, ch], ch] = grad[a, ch]
    return out_arr


def scatter_add_rows(real[:, ::1] src, const cnp.int64_t[::1] idx, Py_ssize_t n):
    cdef Py_ssize_t m = src.shape[0], c = src.shape[1]
    cdef Py_ssize_t i, ch, row
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, c), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    for i in range(m):
        row = idx[i]
        for ch in range(c):
            out[row, ch] += src[i, ch]
    return out_arr


def channel_stats(real[:, ::1] x):
    """Per-channel mean and biased variance (float64 results, two-pass)."""
    cdef Py_ssize_t m = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t i, ch, start, stop, block = 64
    cdef real d
    mean_arr = np.zeros(c)
    var_arr = np.zeros(c)
    if m == 0:
        return mean_arr, var_arr
    dtype = np.float32 if real is float else np.float64
    row_arr = np.zeros(c, dtype=dtype)
    cdef double[::1] mean = mean_arr
    cdef double[::1] var = var_arr
    cdef real[::1] rowv = row_arr
    cdef real *row = &rowv[0]
    cdef real *px = &x[0, 0]
    start = 0
    while start < m:
        stop = min(start + block, m)
        for ch in range(c):
            row[ch] = 0
        for i in range(start, stop):
            for ch in range(c):
                row[ch] += px[i * c + ch]
        for ch in range(c):
            mean[ch] += row[ch]
        start = stop
    for ch in range(c):
        mean[ch] /= m
    mw_arr = mean_arr.astype(dtype)
    cdef real[::1] mwv = mw_arr
    cdef real *mw = &mwv[0]
    start = 0
    while start < m:
        stop = min(start + block, m)
        for ch in range(c):
            row[ch] = 0
        for i in range(start, stop):
            for ch in range(c):
                d = px[i * c + ch] - mw[ch]
                row[ch] += d * d
        for ch in range(c):
            var[ch] += row[ch]
        start = stop
    for ch in range(c):
        var[ch] /= m
    return mean_arr, var_arr


def bn_act_forward(real[:, ::1] x, real[::1] scale, real[::1] shift, double slope, bint act):
    """``out = act(x * scale + shift)`` column-wise; the activation is branch-free so it vectorises."""
    cdef Py_ssize_t m = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t i, ch
    cdef real y, s = <real>slope
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((m, c), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    if m == 0:
        return out_arr
    cdef real *px = &x[0, 0]
    cdef real *po = &out[0, 0]
    cdef real *pa = &scale[0]
    cdef real *pb = &shift[0]
    for i in range(m):
        for ch in range(c):
            y = px[i * c + ch] * pa[ch] + pb[ch]
            if act:
                y = max(y, 0) + s * min(y, 0)
            po[i * c + ch] = y
    return out_arr


cdef void _act_grad(real *g, real *out, real *dst, Py_ssize_t n, real s) noexcept nogil:
    # kept as its own loop: a select in a simple loop vectorises, a branch in the fused loop does not
    cdef Py_ssize_t k
    cdef real f
    for k in range(n):
        f = 1 if out[k] > 0 else s
        dst[k] = g[k] * f


def bn_act_backward(real[:, ::1] g, real[:, ::1] x, real[:, ::1] out, real[::1] mean, real[::1] inv,
                    real[::1] gamma, double slope, bint act, bint training):
    """Gradients of :func:`bn_act_forward` with ``scale = gamma * inv``; returns (gx, dgamma, dbeta)."""
    cdef Py_ssize_t m = g.shape[0], c = g.shape[1]
    cdef Py_ssize_t i, ch, k, start, stop, block = 64
    cdef real gy, xh
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.empty((m, c), dtype=dtype)
    if m == 0:
        return gx_arr, np.zeros(c, dtype=dtype), np.zeros(c, dtype=dtype)
    cdef real[:, ::1] gxv = gx_arr
    cdef real *pgx = &gxv[0, 0]
    cdef real *pg = &g[0, 0]
    cdef real *px = &x[0, 0]
    cdef real *pm = &mean[0]
    cdef real *pi = &inv[0]
    if act:
        _act_grad(pg, &out[0, 0], pgx, m * c, <real>slope)
    else:
        gx_arr[...] = g
    acc_g_arr = np.zeros(c)
    acc_b_arr = np.zeros(c)
    row_g_arr = np.zeros(c, dtype=dtype)
    row_b_arr = np.zeros(c, dtype=dtype)
    cdef double[::1] acc_g = acc_g_arr
    cdef double[::1] acc_b = acc_b_arr
    cdef real[::1] rgv = row_g_arr
    cdef real[::1] rbv = row_b_arr
    cdef real *rg = &rgv[0]
    cdef real *rb = &rbv[0]
    # blocks of rows are summed in working precision, block totals in double
    start = 0
    while start < m:
        stop = min(start + block, m)
        for ch in range(c):
            rg[ch] = 0
            rb[ch] = 0
        for i in range(start, stop):
            for ch in range(c):
                k = i * c + ch
                gy = pgx[k]
                rb[ch] += gy
                rg[ch] += gy * ((px[k] - pm[ch]) * pi[ch])
        for ch in range(c):
            acc_g[ch] += rg[ch]
            acc_b[ch] += rb[ch]
        start = stop
    sc_arr = (np.asarray(gamma) * np.asarray(inv)).astype(dtype)
    mb_arr = (acc_b_arr / m).astype(dtype)
    mg_arr = (acc_g_arr / m).astype(dtype)
    cdef real[::1] scv = sc_arr
    cdef real[::1] mbv = mb_arr
    cdef real[::1] mgv = mg_arr
    cdef real *sc = &scv[0]
    cdef real *mb = &mbv[0]
    cdef real *mg = &mgv[0]
    for i in range(m):
        for ch in range(c):
            k = i * c + ch
            if training:
                xh = (px[k] - pm[ch]) * pi[ch]
                pgx[k] = sc[ch] * (pgx[k] - mb[ch] - xh * mg[ch])
            else:
                pgx[k] = sc[ch] * pgx[k]
    return gx_arr, acc_g_arr.astype(dtype), acc_b_arr.astype(dtype)
