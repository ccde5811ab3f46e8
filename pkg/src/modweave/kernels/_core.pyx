# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Reference semantics live in _ref.py.

Every function mirrors its _ref twin: same signatures, same shape
conventions, per-dtype parity within float rounding. Arithmetic runs in
double and is cast back on store, except fps distance accumulation which
stays in the input precision so tie-breaking matches the NumPy path.
"""

from libc.math cimport exp, sqrt, tanh

import numpy as np

BACKEND = "compiled"

cdef double C0 = 0.7978845608  # sqrt(2/pi), keep in sync with _ref.GELU_C0
cdef double C1 = 0.044715

ctypedef fused real:
    float
    double


def gelu_fwd(real[::1] x):
    cdef Py_ssize_t i, n = x.shape[0]
    out_arr = np.empty(n, dtype=np.float32 if real is float else np.float64)
    cdef real[::1] out = out_arr
    cdef double xi, t
    for i in range(n):
        xi = x[i]
        t = tanh(C0 * (xi + C1 * xi * xi * xi))
        out[i] = <real>(0.5 * xi * (1.0 + t))
    return out_arr


def gelu_bwd(real[::1] x, real[::1] gy):
    cdef Py_ssize_t i, n = x.shape[0]
    out_arr = np.empty(n, dtype=np.float32 if real is float else np.float64)
    cdef real[::1] out = out_arr
    cdef double xi, x2, t, dt
    for i in range(n):
        xi = x[i]
        x2 = xi * xi
        t = tanh(C0 * (xi + C1 * xi * x2))
        dt = (1.0 - t * t) * C0 * (1.0 + 3.0 * C1 * x2)
        out[i] = <real>(gy[i] * (0.5 * (1.0 + t) + 0.5 * xi * dt))
    return out_arr


def softmax_fwd(real[:, ::1] x):
    cdef Py_ssize_t r, c, n = x.shape[0], d = x.shape[1]
    out_arr = np.empty((n, d), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] out = out_arr
    cdef double m, s, e, inv
    for r in range(n):
        m = x[r, 0]
        for c in range(1, d):
            if x[r, c] > m:
                m = x[r, c]
        s = 0.0
        for c in range(d):
            e = exp(x[r, c] - m)
            out[r, c] = <real>e
            s += e
        inv = 1.0 / s
        for c in range(d):
            out[r, c] = <real>(out[r, c] * inv)
    return out_arr


def softmax_bwd(real[:, ::1] y, real[:, ::1] gy):
    cdef Py_ssize_t r, c, n = y.shape[0], d = y.shape[1]
    out_arr = np.empty((n, d), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] out = out_arr
    cdef double dot
    for r in range(n):
        dot = 0.0
        for c in range(d):
            dot += gy[r, c] * y[r, c]
        for c in range(d):
            out[r, c] = <real>(y[r, c] * (gy[r, c] - dot))
    return out_arr


def layernorm_fwd(real[:, ::1] x, real[::1] gain, real[::1] bias, double eps):
    cdef Py_ssize_t r, c, n = x.shape[0], d = x.shape[1]
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((n, d), dtype=dtype)
    mean_arr = np.empty(n, dtype=dtype)
    rstd_arr = np.empty(n, dtype=dtype)
    cdef real[:, ::1] y = y_arr
    cdef real[::1] mean = mean_arr
    cdef real[::1] rstd = rstd_arr
    cdef double mu, var, rs, xc
    for r in range(n):
        mu = 0.0
        for c in range(d):
            mu += x[r, c]
        mu /= d
        var = 0.0
        for c in range(d):
            xc = x[r, c] - mu
            var += xc * xc
        var /= d
        rs = 1.0 / sqrt(var + eps)
        mean[r] = <real>mu
        rstd[r] = <real>rs
        for c in range(d):
            y[r, c] = <real>((x[r, c] - mu) * rs * gain[c] + bias[c])
    return y_arr, mean_arr, rstd_arr


def layernorm_bwd(real[:, ::1] x, real[::1] gain, real[::1] mean,
                  real[::1] rstd, real[:, ::1] gy):
    cdef Py_ssize_t r, c, n = x.shape[0], d = x.shape[1]
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.empty((n, d), dtype=dtype)
    cdef real[:, ::1] gx = gx_arr
    ggain_w = np.zeros(d, dtype=np.float64)
    gbias_w = np.zeros(d, dtype=np.float64)
    cdef double[::1] ggain = ggain_w
    cdef double[::1] gbias = gbias_w
    cdef double mu, rs, m1, m2, xhat, gxh
    for r in range(n):
        mu = mean[r]
        rs = rstd[r]
        m1 = 0.0
        m2 = 0.0
        for c in range(d):
            xhat = (x[r, c] - mu) * rs
            gxh = gy[r, c] * gain[c]
            m1 += gxh
            m2 += gxh * xhat
            ggain[c] += gy[r, c] * xhat
            gbias[c] += gy[r, c]
        m1 /= d
        m2 /= d
        for c in range(d):
            xhat = (x[r, c] - mu) * rs
            gxh = gy[r, c] * gain[c]
            gx[r, c] = <real>(rs * (gxh - m1 - xhat * m2))
    return gx_arr, ggain_w.astype(dtype), gbias_w.astype(dtype)


def adam_update(real[::1] p, real[::1] g, real[::1] m, real[::1] v,
                long t, double lr, double beta1, double beta2, double eps):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double bc1 = 1.0 - beta1 ** t
    cdef double bc2 = 1.0 - beta2 ** t
    cdef double scale = lr / bc1
    cdef double mi, vi
    for i in range(n):
        mi = beta1 * m[i] + (1.0 - beta1) * g[i]
        vi = beta2 * v[i] + (1.0 - beta2) * (g[i] * g[i])
        m[i] = <real>mi
        v[i] = <real>vi
        p[i] = <real>(p[i] - scale * mi / (sqrt(vi / bc2) + eps))


def sgd_momentum_update(real[::1] p, real[::1] g, real[::1] buf,
                        double lr, double momentum):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double b
    for i in range(n):
        b = momentum * buf[i] + g[i]
        buf[i] = <real>b
        p[i] = <real>(p[i] - lr * b)


def fps(real[:, ::1] points, Py_ssize_t count):
    cdef Py_ssize_t i, j, best, n = points.shape[0]
    out_arr = np.empty(count, dtype=np.int64)
    cdef long long[::1] out = out_arr
    dist_arr = np.empty(n, dtype=np.float32 if real is float else np.float64)
    cdef real[::1] dist = dist_arr
    cdef real dx, dy, dz, nd, bd
    for j in range(n):
        dx = points[j, 0] - points[0, 0]
        dy = points[j, 1] - points[0, 1]
        dz = points[j, 2] - points[0, 2]
        dist[j] = dx * dx + dy * dy + dz * dz
    out[0] = 0
    for i in range(1, count):
        best = 0
        bd = dist[0]
        for j in range(1, n):
            if dist[j] > bd:
                bd = dist[j]
                best = j
        out[i] = best
        for j in range(n):
            dx = points[j, 0] - points[best, 0]
            dy = points[j, 1] - points[best, 1]
            dz = points[j, 2] - points[best, 2]
            nd = dx * dx + dy * dy + dz * dz
            if nd < dist[j]:
                dist[j] = nd
    return out_arr
