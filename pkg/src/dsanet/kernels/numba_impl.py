"""Numba-compiled loop implementations of the hot kernels.

Same shape contract as numpy_impl. fastmath stays off: reassociation
would break run-to-run bit stability and the finite-difference checks.
"""

import numpy as np
from numba import njit

_JIT = dict(cache=True, fastmath=False)


@njit(**_JIT)
def relu_fwd(x):
    n = x.shape[0]
    y = np.empty(n)
    for i in range(n):
        y[i] = x[i] if x[i] > 0.0 else 0.0
    return y


@njit(**_JIT)
def relu_bwd(x, g):
    n = x.shape[0]
    dx = np.empty(n)
    for i in range(n):
        dx[i] = g[i] if x[i] > 0.0 else 0.0
    return dx


@njit(**_JIT)
def sigmoid_fwd(x):
    n = x.shape[0]
    y = np.empty(n)
    for i in range(n):
        y[i] = 1.0 / (1.0 + np.exp(-x[i]))
    return y


@njit(**_JIT)
def sigmoid_bwd(y, g):
    n = y.shape[0]
    dx = np.empty(n)
    for i in range(n):
        dx[i] = g[i] * y[i] * (1.0 - y[i])
    return dx


@njit(**_JIT)
def softmax_fwd(x):
    b, d = x.shape
    y = np.empty((b, d))
    for i in range(b):
        mx = x[i, 0]
        for j in range(1, d):
            if x[i, j] > mx:
                mx = x[i, j]
        total = 0.0
        for j in range(d):
            e = np.exp(x[i, j] - mx)
            y[i, j] = e
            total += e
        for j in range(d):
            y[i, j] /= total
    return y


@njit(**_JIT)
def softmax_bwd(y, g):
    b, d = y.shape
    dx = np.empty((b, d))
    for i in range(b):
        inner = 0.0
        for j in range(d):
            inner += g[i, j] * y[i, j]
        for j in range(d):
            dx[i, j] = y[i, j] * (g[i, j] - inner)
    return dx


@njit(**_JIT)
def bn_train_fwd(x, gamma, beta, eps):
    b, d = x.shape
    mean = np.zeros(d)
    var = np.zeros(d)
    for i in range(b):
        for j in range(d):
            mean[j] += x[i, j]
    for j in range(d):
        mean[j] /= b
    for i in range(b):
        for j in range(d):
            diff = x[i, j] - mean[j]
            var[j] += diff * diff
    for j in range(d):
        var[j] /= b
    inv_std = np.empty(d)
    for j in range(d):
        inv_std[j] = 1.0 / np.sqrt(var[j] + eps)
    xhat = np.empty((b, d))
    y = np.empty((b, d))
    for i in range(b):
        for j in range(d):
            xhat[i, j] = (x[i, j] - mean[j]) * inv_std[j]
            y[i, j] = gamma[j] * xhat[i, j] + beta[j]
    return y, xhat, inv_std, mean, var


@njit(**_JIT)
def bn_train_bwd(g, xhat, inv_std, gamma):
    b, d = g.shape
    dbeta = np.zeros(d)
    dgamma = np.zeros(d)
    for i in range(b):
        for j in range(d):
            dbeta[j] += g[i, j]
            dgamma[j] += g[i, j] * xhat[i, j]
    dx = np.empty((b, d))
    for j in range(d):
        coef = gamma[j] * inv_std[j]
        mb = dbeta[j] / b
        mg = dgamma[j] / b
        for i in range(b):
            dx[i, j] = coef * (g[i, j] - mb - xhat[i, j] * mg)
    return dx, dgamma, dbeta


@njit(**_JIT)
def bn_infer_fwd(x, gamma, beta, rmean, rvar, eps):
    b, d = x.shape
    inv_std = np.empty(d)
    for j in range(d):
        inv_std[j] = 1.0 / np.sqrt(rvar[j] + eps)
    xhat = np.empty((b, d))
    y = np.empty((b, d))
    for i in range(b):
        for j in range(d):
            xhat[i, j] = (x[i, j] - rmean[j]) * inv_std[j]
            y[i, j] = gamma[j] * xhat[i, j] + beta[j]
    return y, xhat, inv_std


@njit(**_JIT)
def bn_infer_bwd(g, xhat, inv_std, gamma):
    b, d = g.shape
    dbeta = np.zeros(d)
    dgamma = np.zeros(d)
    dx = np.empty((b, d))
    for i in range(b):
        for j in range(d):
            dbeta[j] += g[i, j]
            dgamma[j] += g[i, j] * xhat[i, j]
            dx[i, j] = g[i, j] * gamma[j] * inv_std[j]
    return dx, dgamma, dbeta


@njit(**_JIT)
def conv_collapse_fwd(x, kern, bias):
    b, c, k = x.shape
    o = kern.shape[0]
    y = np.empty((b, o))
    for i in range(b):
        for oo in range(o):
            acc = bias[oo]
            for cc in range(c):
                for t in range(k):
                    acc += kern[oo, cc, t] * x[i, cc, t]
            y[i, oo] = acc
    return y


@njit(**_JIT)
def conv_collapse_bwd(x, kern, g):
    b, c, k = x.shape
    o = kern.shape[0]
    dx = np.zeros((b, c, k))
    dkern = np.zeros((o, c, k))
    dbias = np.zeros(o)
    for i in range(b):
        for oo in range(o):
            gv = g[i, oo]
            dbias[oo] += gv
            for cc in range(c):
                for t in range(k):
                    dx[i, cc, t] += gv * kern[oo, cc, t]
                    dkern[oo, cc, t] += gv * x[i, cc, t]
    return dx, dkern, dbias


@njit(**_JIT)
def sad_rows_fwd(x, y, eps_c):
    b, n = x.shape
    ang = np.empty(b)
    for i in range(b):
        dot = 0.0
        nx = 0.0
        ny = 0.0
        for j in range(n):
            dot += x[i, j] * y[i, j]
            nx += x[i, j] * x[i, j]
            ny += y[i, j] * y[i, j]
        cos = dot / (np.sqrt(nx) * np.sqrt(ny))
        if cos > 1.0 - eps_c:
            cos = 1.0 - eps_c
        elif cos < -1.0 + eps_c:
            cos = -1.0 + eps_c
        ang[i] = np.arccos(cos)
    return ang


@njit(**_JIT)
def sad_rows_bwd(x, y, g, eps_c):
    b, n = x.shape
    dx = np.zeros((b, n))
    dy = np.zeros((b, n))
    for i in range(b):
        dot = 0.0
        nx2 = 0.0
        ny2 = 0.0
        for j in range(n):
            dot += x[i, j] * y[i, j]
            nx2 += x[i, j] * x[i, j]
            ny2 += y[i, j] * y[i, j]
        nx = np.sqrt(nx2)
        ny = np.sqrt(ny2)
        cos = dot / (nx * ny)
        if cos >= 1.0 - eps_c or cos <= -1.0 + eps_c:
            continue
        dang = -1.0 / np.sqrt(1.0 - cos * cos)
        coef = g[i] * dang
        for j in range(n):
            dx[i, j] = coef * (y[i, j] / (nx * ny) - x[i, j] * (cos / nx2))
            dy[i, j] = coef * (x[i, j] / (nx * ny) - y[i, j] * (cos / ny2))
    return dx, dy


@njit(**_JIT)
def lhalf_rows_fwd(s, eps_s):
    b, n = s.shape
    r = np.zeros(b)
    for i in range(b):
        for j in range(n):
            r[i] += np.sqrt(s[i, j] + eps_s)
    return r


@njit(**_JIT)
def lhalf_rows_bwd(s, g, eps_s):
    b, n = s.shape
    ds = np.empty((b, n))
    for i in range(b):
        for j in range(n):
            ds[i, j] = g[i] * 0.5 / np.sqrt(s[i, j] + eps_s)
    return ds


@njit(**_JIT)
def adam_update(p, g, m, v, t, lr, beta1, beta2, eps, nonneg):
    n = p.shape[0]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i in range(n):
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        step = lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)
        p[i] -= step
        if nonneg and p[i] < 0.0:
            p[i] = 0.0
        g[i] = 0.0
