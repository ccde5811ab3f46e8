"""Pure NumPy implementations of the hot kernels.

These are the reference semantics for the compiled extension and the
fallback used when the extension is missing or disabled. matmul is not a
kernel here: both backends hand it to NumPy's BLAS.

Shape conventions: gelu kernels take flat 1-d views, softmax/layernorm
take 2-d (rows, width) views with the reduced axis last, optimizer
updates take flat views and mutate them in place.
"""

import numpy as np

BACKEND = "python"

GELU_C0 = 0.7978845608  # sqrt(2/pi), fixed so both backends agree digit for digit
GELU_C1 = 0.044715


def gelu_fwd(x):
    t = np.tanh(GELU_C0 * (x + GELU_C1 * x * x * x))
    return 0.5 * x * (1.0 + t)


def gelu_bwd(x, gy):
    x2 = x * x
    t = np.tanh(GELU_C0 * (x + GELU_C1 * x * x2))
    dt = (1.0 - t * t) * GELU_C0 * (1.0 + 3.0 * GELU_C1 * x2)
    return gy * (0.5 * (1.0 + t) + 0.5 * x * dt)


def softmax_fwd(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(y, gy):
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def layernorm_fwd(x, gain, bias, eps):
    mean = x.mean(axis=1)
    xc = x - mean[:, None]
    var = (xc * xc).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = xc * rstd[:, None] * gain + bias
    return y, mean, rstd


def layernorm_bwd(x, gain, mean, rstd, gy):
    xhat = (x - mean[:, None]) * rstd[:, None]
    gxh = gy * gain
    m1 = gxh.mean(axis=1, keepdims=True)
    m2 = (gxh * xhat).mean(axis=1, keepdims=True)
    gx = rstd[:, None] * (gxh - m1 - xhat * m2)
    return gx, (gy * xhat).sum(axis=0), gy.sum(axis=0)


def adam_update(p, g, m, v, t, lr, beta1, beta2, eps):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    p -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)


def sgd_momentum_update(p, g, buf, lr, momentum):
    buf *= momentum
    buf += g
    p -= lr * buf


def fps(points, count):
    """Farthest-point sampling over (N, 3) coordinates.

    First pick is index 0; each next pick maximizes the min squared
    distance to the picked set. np.argmax takes the first maximum, so
    ties resolve to the lowest index.
    """
    out = np.empty(count, dtype=np.int64)
    out[0] = 0
    d = ((points - points[0]) ** 2).sum(axis=1)
    for i in range(1, count):
        nxt = int(np.argmax(d))
        out[i] = nxt
        nd = ((points - points[nxt]) ** 2).sum(axis=1)
        np.minimum(d, nd, out=d)
    return out
