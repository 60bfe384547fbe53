"""Pure-numpy reference implementations of the hot numeric kernels.

Shape contract (shared with the numba backend):
  elementwise kernels take 1-D float64 views, softmax/batchnorm/loss
  kernels take 2-D row batches, the window-collapse convolution takes a
  3-D (batch, channels, positions) block. All inputs are C-contiguous
  float64; outputs are freshly allocated except where noted in-place.
"""

import numpy as np


def relu_fwd(x):
    return np.maximum(x, 0.0)


def relu_bwd(x, g):
    return np.where(x > 0.0, g, 0.0)


def sigmoid_fwd(x):
    return 1.0 / (1.0 + np.exp(-x))


def sigmoid_bwd(y, g):
    return g * y * (1.0 - y)


def softmax_fwd(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(y, g):
    inner = (g * y).sum(axis=1, keepdims=True)
    return y * (g - inner)


def bn_train_fwd(x, gamma, beta, eps):
    mean = x.mean(axis=0)
    var = x.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    y = gamma * xhat + beta
    return y, xhat, inv_std, mean, var


def bn_train_bwd(g, xhat, inv_std, gamma):
    b = g.shape[0]
    dbeta = g.sum(axis=0)
    dgamma = (g * xhat).sum(axis=0)
    dx = (gamma * inv_std) * (g - dbeta / b - xhat * (dgamma / b))
    return dx, dgamma, dbeta


def bn_infer_fwd(x, gamma, beta, rmean, rvar, eps):
    inv_std = 1.0 / np.sqrt(rvar + eps)
    xhat = (x - rmean) * inv_std
    y = gamma * xhat + beta
    return y, xhat, inv_std


def bn_infer_bwd(g, xhat, inv_std, gamma):
    dbeta = g.sum(axis=0)
    dgamma = (g * xhat).sum(axis=0)
    dx = g * (gamma * inv_std)
    return dx, dgamma, dbeta


def conv_collapse_fwd(x, kern, bias):
    # y[b, o] = sum_{c, t} kern[o, c, t] * x[b, c, t] + bias[o]
    b = x.shape[0]
    o = kern.shape[0]
    xf = x.reshape(b, -1)
    kf = kern.reshape(o, -1)
    return xf @ kf.T + bias


def conv_collapse_bwd(x, kern, g):
    b = x.shape[0]
    o = kern.shape[0]
    xf = x.reshape(b, -1)
    kf = kern.reshape(o, -1)
    dx = (g @ kf).reshape(x.shape)
    dkern = (g.T @ xf).reshape(kern.shape)
    dbias = g.sum(axis=0)
    return dx, dkern, dbias


def sad_rows_fwd(x, y, eps_c):
    dot = (x * y).sum(axis=1)
    nx = np.sqrt((x * x).sum(axis=1))
    ny = np.sqrt((y * y).sum(axis=1))
    cos = np.clip(dot / (nx * ny), -1.0 + eps_c, 1.0 - eps_c)
    return np.arccos(cos)


def sad_rows_bwd(x, y, g, eps_c):
    dot = (x * y).sum(axis=1, keepdims=True)
    nx2 = (x * x).sum(axis=1, keepdims=True)
    ny2 = (y * y).sum(axis=1, keepdims=True)
    nx = np.sqrt(nx2)
    ny = np.sqrt(ny2)
    cos = dot / (nx * ny)
    clipped = np.abs(cos) >= 1.0 - eps_c
    cosc = np.clip(cos, -1.0 + eps_c, 1.0 - eps_c)
    # d arccos(c)/dc, zero where the clamp is active
    dang = np.where(clipped, 0.0, -1.0 / np.sqrt(1.0 - cosc * cosc))
    coef = g[:, None] * dang
    dx = coef * (y / (nx * ny) - x * (cos / nx2))
    dy = coef * (x / (nx * ny) - y * (cos / ny2))
    return dx, dy


def lhalf_rows_fwd(s, eps_s):
    return np.sqrt(s + eps_s).sum(axis=1)


def lhalf_rows_bwd(s, g, eps_s):
    return g[:, None] * (0.5 / np.sqrt(s + eps_s))


def adam_update(p, g, m, v, t, lr, beta1, beta2, eps, nonneg):
    # In place on p, m, v; zeroes g afterwards.
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    p -= lr * mhat / (np.sqrt(vhat) + eps)
    if nonneg:
        np.maximum(p, 0.0, out=p)
    g[:] = 0.0
