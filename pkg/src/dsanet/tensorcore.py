"""Dense float64 tensors with taped reverse-mode differentiation.

Covers exactly what the unmixing networks need: matrix products and
affine layers, a full-window 1-D convolution that collapses a pixel
window into one abundance vector, batch normalization, inverted dropout,
the usual activations, the spectral-angle and square-root sparsity loss
terms, and Adam. Everything is float64; the models are small, so
precision (exact gradient checks, bit-stable reruns) beats speed.

Numeric heavy lifting is delegated to :mod:`dsanet.kernels`, which
dispatches between numba-compiled loops and pure numpy.
"""

from contextlib import contextmanager

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError, DegenerateError, DimensionError

BN_EPS = 1e-5        # batchnorm variance floor
BN_MOMENTUM = 0.1    # running-stat EMA weight for the current batch
COS_CLAMP = 1e-7     # cosine clamp keeping arccos gradients finite
LHALF_EPS = 1e-12    # smoothing that makes the sqrt penalty differentiable at 0


class Tensor:
    """A dense float64 value, optionally a differentiable leaf.

    ``grad`` exists exactly when ``requires_grad`` is set. Intermediate
    results of taped operations never carry ``grad``; backward() routes
    their gradients through transient buffers instead.
    """

    __slots__ = ("data", "grad", "requires_grad", "graph", "node")

    def __init__(self, data, requires_grad=False, graph=None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.graph = graph
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Node:
    """One taped operation: inputs, output, and a vector-Jacobian product.

    ``backward(g)`` returns one gradient per input (or None for inputs
    that need none). Returned arrays may alias ``g`` only if no other
    input receives the same array object.
    """

    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Graph:
    """Ordered tape of operations plus the rng that draws dropout masks.

    The node list is a topological order of the dataflow by construction.
    Replaying a forward pass from the same rng state reproduces outputs
    bit for bit. One graph is confined to one thread during forward and
    backward; reset() clears the tape between training steps while
    keeping the rng sequence going.
    """

    def __init__(self, seed=0):
        self.rng = np.random.default_rng(seed)
        self.nodes = []
        self.grad_enabled = True

    def tensor(self, data, requires_grad=False):
        return Tensor(data, requires_grad=requires_grad, graph=self)

    def parameter(self, data):
        return Tensor(data, requires_grad=True, graph=self)

    @property
    def rng_state(self):
        return self.rng.bit_generator.state

    @rng_state.setter
    def rng_state(self, state):
        self.rng.bit_generator.state = state

    def reset(self):
        self.nodes.clear()

    @contextmanager
    def no_grad(self):
        prev = self.grad_enabled
        self.grad_enabled = False
        try:
            yield
        finally:
            self.grad_enabled = prev


def _graph_of(*tensors):
    g = None
    for t in tensors:
        if t.graph is None:
            continue
        if g is None:
            g = t.graph
        elif g is not t.graph:
            raise ContractError("operation mixes tensors from different graphs")
    return g


def _wants_grad(t):
    return t.requires_grad or t.node is not None


def _record(op, inputs, out_data, backward):
    graph = _graph_of(*inputs)
    out = Tensor(out_data, graph=graph)
    if graph is not None and graph.grad_enabled and any(map(_wants_grad, inputs)):
        node = Node(op, inputs, out, backward)
        out.node = node
        graph.nodes.append(node)
    return out


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf.

    Repeated calls without zeroing keep accumulating. Gradients of
    intermediates live in transient buffers that are dropped afterwards,
    so only leaves ever hold a ``grad``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None or loss.graph is None:
        raise ContractError("loss was not produced by graph operations")
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(loss.graph.nodes):
        out_grad = pending.pop(id(node.output), None)
        if out_grad is None:
            continue
        for t, g in zip(node.inputs, node.backward(out_grad)):
            if g is None:
                continue
            if t.requires_grad:
                t.grad += g
            elif t.node is not None:
                buf = pending.get(id(t))
                if buf is None:
                    pending[id(t)] = g
                else:
                    buf += g


# ---------------------------------------------------------------------------
# operations


def _shape_err(op, a, b):
    return DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def matmul(a, b):
    """Matrix product for 2-D x 2-D, 2-D x 1-D and 1-D x 2-D operands."""
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise _shape_err("matmul", a, b)
        out = ad @ bd

        def bwd(g):
            return g @ bd.T, ad.T @ g

    elif ad.ndim == 2 and bd.ndim == 1:
        if ad.shape[1] != bd.shape[0]:
            raise _shape_err("matmul", a, b)
        out = ad @ bd

        def bwd(g):
            return np.outer(g, bd), ad.T @ g

    elif ad.ndim == 1 and bd.ndim == 2:
        if ad.shape[0] != bd.shape[0]:
            raise _shape_err("matmul", a, b)
        out = ad @ bd

        def bwd(g):
            return bd @ g, np.outer(ad, g)

    else:
        raise _shape_err("matmul", a, b)
    return _record("matmul", (a, b), out, bwd)


def linear(x, w, bias=None):
    """Affine map ``x @ w.T (+ bias)`` with ``w`` stored rows-out."""
    xd, wd = x.data, w.data
    if wd.ndim != 2 or xd.ndim not in (1, 2) or xd.shape[-1] != wd.shape[1]:
        raise _shape_err("linear", x, w)
    single = xd.ndim == 1
    out = xd @ wd.T
    if bias is not None:
        if bias.data.shape != (wd.shape[0],):
            raise _shape_err("linear bias", bias, w)
        out = out + bias.data

    def bwd(g):
        if single:
            dx, dw = g @ wd, np.outer(g, xd)
            db = g.copy()
        else:
            dx, dw = g @ wd, g.T @ xd
            db = g.sum(axis=0)
        return (dx, dw) if bias is None else (dx, dw, db)

    inputs = (x, w) if bias is None else (x, w, bias)
    return _record("linear", inputs, out, bwd)


def conv1d(x, kern, bias=None):
    """Full-window 1-D convolution collapsing all positions into one vector.

    ``x`` is (channels, positions) or (batch, channels, positions); the
    kernel is (out, channels, positions) and must span the whole input,
    so each output channel is one weighted sum over the window plus bias.
    """
    xd, kd = x.data, kern.data
    if kd.ndim != 3:
        raise _shape_err("conv1d", x, kern)
    single = xd.ndim == 2
    x3 = xd[None] if single else xd
    if x3.ndim != 3 or x3.shape[1:] != kd.shape[1:]:
        raise DimensionError(
            f"conv1d: input {xd.shape} does not match kernels {kd.shape}"
        )
    n_out = kd.shape[0]
    bd = bias.data if bias is not None else np.zeros(n_out)
    if bd.shape != (n_out,):
        raise _shape_err("conv1d bias", bias, kern)
    y = kernels.conv_collapse_fwd(np.ascontiguousarray(x3), kd, bd)
    out = y[0] if single else y

    def bwd(g):
        g2 = g[None] if single else g
        dx3, dk, db = kernels.conv_collapse_bwd(
            np.ascontiguousarray(x3), kd, np.ascontiguousarray(g2)
        )
        dx = dx3[0] if single else dx3
        if bias is None:
            return dx, dk
        return dx, dk, db

    inputs = (x, kern) if bias is None else (x, kern, bias)
    return _record("conv1d", inputs, out, bwd)


class RunningStats:
    """Exponential-moving-average mean/variance used by inference-mode
    batch normalization. Initialized to mean 0, variance 1."""

    __slots__ = ("mean", "var")

    def __init__(self, width):
        self.mean = np.zeros(width)
        self.var = np.ones(width)

    def update(self, mean, var, momentum):
        self.mean = (1.0 - momentum) * self.mean + momentum * mean
        self.var = (1.0 - momentum) * self.var + momentum * var


def batchnorm(x, gamma, beta, mode, running, momentum=BN_MOMENTUM, eps=BN_EPS):
    """Batch normalization over axis 0 with affine output.

    Train mode normalizes by the batch statistics (biased variance plus
    ``eps``) and folds them into ``running``; infer mode uses ``running``
    unchanged. ``x`` is (batch, features).
    """
    xd = x.data
    if xd.ndim != 2:
        raise DimensionError(f"batchnorm: expected 2-D input, got {xd.shape}")
    if xd.shape[0] == 0:
        raise DimensionError("batchnorm: empty batch")
    width = xd.shape[1]
    if gamma.data.shape != (width,) or beta.data.shape != (width,):
        raise DimensionError(
            f"batchnorm: gamma {gamma.data.shape} / beta {beta.data.shape} "
            f"do not match feature width {width}"
        )
    if mode == "train":
        y, xhat, inv_std, mean, var = kernels.bn_train_fwd(
            xd, gamma.data, beta.data, eps
        )
        running.update(mean, var, momentum)

        def bwd(g):
            dx, dgamma, dbeta = kernels.bn_train_bwd(
                np.ascontiguousarray(g), xhat, inv_std, gamma.data
            )
            return dx, dgamma, dbeta

    elif mode == "infer":
        y, xhat, inv_std = kernels.bn_infer_fwd(
            xd, gamma.data, beta.data, running.mean, running.var, eps
        )

        def bwd(g):
            dx, dgamma, dbeta = kernels.bn_infer_bwd(
                np.ascontiguousarray(g), xhat, inv_std, gamma.data
            )
            return dx, dgamma, dbeta

    else:
        raise ConfigError(f"batchnorm: unknown mode {mode!r}")
    return _record("batchnorm", (x, gamma, beta), y, bwd)


def dropout(x, rate, mode):
    """Inverted dropout: train mode zeroes entries with probability
    ``rate`` and scales survivors by 1/(1-rate); infer mode is identity.
    The mask comes from the graph rng, so seeded runs replay exactly."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        if mode not in ("train", "infer"):
            raise ConfigError(f"dropout: unknown mode {mode!r}")
        return x
    if mode != "train":
        raise ConfigError(f"dropout: unknown mode {mode!r}")
    if x.graph is None:
        raise ContractError("dropout needs a graph-attached tensor for its rng")
    keep = (x.graph.rng.random(x.data.shape) >= rate) / (1.0 - rate)
    out = x.data * keep
    return _record("dropout", (x,), out, lambda g: (g * keep,))


def relu(x):
    flat = x.data.reshape(-1)
    out = kernels.relu_fwd(flat).reshape(x.data.shape)

    def bwd(g):
        return (kernels.relu_bwd(flat, g.reshape(-1)).reshape(x.data.shape),)

    return _record("relu", (x,), out, bwd)


def sigmoid(x):
    flat = x.data.reshape(-1)
    y = kernels.sigmoid_fwd(flat)
    out = y.reshape(x.data.shape)

    def bwd(g):
        return (kernels.sigmoid_bwd(y, g.reshape(-1)).reshape(x.data.shape),)

    return _record("sigmoid", (x,), out, bwd)


def softmax(x):
    """Softmax over the last axis of a 1-D or 2-D tensor."""
    xd = x.data
    if xd.ndim not in (1, 2):
        raise DimensionError(f"softmax: expected 1-D or 2-D input, got {xd.shape}")
    rows = xd[None] if xd.ndim == 1 else xd
    y = kernels.softmax_fwd(np.ascontiguousarray(rows))
    out = y[0] if xd.ndim == 1 else y

    def bwd(g):
        g2 = g[None] if xd.ndim == 1 else g
        dx = kernels.softmax_bwd(y, np.ascontiguousarray(g2))
        return (dx[0] if xd.ndim == 1 else dx,)

    return _record("softmax", (x,), out, bwd)


def add(x, y):
    if x.data.shape != y.data.shape:
        raise _shape_err("add", x, y)
    return _record("add", (x, y), x.data + y.data, lambda g: (g, g.copy()))


def hadamard(x, y):
    if x.data.shape != y.data.shape:
        raise _shape_err("hadamard", x, y)
    xd, yd = x.data, y.data
    return _record("hadamard", (x, y), xd * yd, lambda g: (g * yd, g * xd))


def scale(x, c):
    c = float(c)
    return _record("scale", (x,), x.data * c, lambda g: (g * c,))


def tsum(x):
    """Sum of all entries, as a 0-D tensor."""
    out = np.asarray(x.data.sum())
    return _record("sum", (x,), out, lambda g: (np.full(x.data.shape, float(g)),))


def tmean(x):
    """Mean of all entries, as a 0-D tensor."""
    n = x.data.size
    out = np.asarray(x.data.mean())
    return _record("mean", (x,), out, lambda g: (np.full(x.data.shape, float(g) / n),))


def reshape(x, shape):
    out = x.data.reshape(shape)
    return _record("reshape", (x,), out, lambda g: (np.ascontiguousarray(g).reshape(x.data.shape),))


def swapaxes(x, a, b):
    out = np.ascontiguousarray(np.swapaxes(x.data, a, b))
    return _record("swapaxes", (x,), out, lambda g: (np.ascontiguousarray(np.swapaxes(g, a, b)),))


def gather_cols(x, idx):
    """Select columns ``idx`` of a (batch, n) or (n,) tensor."""
    idx = np.asarray(idx, dtype=np.intp)
    xd = x.data
    if xd.ndim == 1:
        out = xd[idx]

        def bwd(g):
            dx = np.zeros_like(xd)
            np.add.at(dx, idx, g)
            return (dx,)

    elif xd.ndim == 2:
        out = np.ascontiguousarray(xd[:, idx])

        def bwd(g):
            dx = np.zeros_like(xd)
            np.add.at(dx, (slice(None), idx), g)
            return (dx,)

    else:
        raise DimensionError(f"gather_cols: expected 1-D or 2-D input, got {xd.shape}")
    return _record("gather_cols", (x,), out, bwd)


def _rows(t, op):
    d = t.data
    if d.ndim == 1:
        return d[None], True
    if d.ndim == 2:
        return d, False
    raise DimensionError(f"{op}: expected 1-D or 2-D input, got {d.shape}")


def sad_loss(x, xhat, eps_c=COS_CLAMP):
    """Spectral angle between two vectors (or row-paired batches).

    arccos of the cosine similarity, with the cosine clamped to
    [-1+eps_c, 1-eps_c] so the gradient stays finite at collinearity.
    Scale-invariant in both arguments; symmetric.
    """
    xr, single_x = _rows(x, "sad_loss")
    yr, single_y = _rows(xhat, "sad_loss")
    if xr.shape != yr.shape or single_x != single_y:
        raise _shape_err("sad_loss", x, xhat)
    if np.any((xr * xr).sum(axis=1) == 0.0):
        raise DegenerateError("sad_loss: zero-norm reference vector")
    if np.any((yr * yr).sum(axis=1) == 0.0):
        raise DegenerateError("sad_loss: zero-norm reconstruction vector")
    xr = np.ascontiguousarray(xr)
    yr = np.ascontiguousarray(yr)
    ang = kernels.sad_rows_fwd(xr, yr, eps_c)
    out = np.asarray(ang[0]) if single_x else ang

    def bwd(g):
        gr = np.ascontiguousarray(np.atleast_1d(g))
        dx, dy = kernels.sad_rows_bwd(xr, yr, gr, eps_c)
        if single_x:
            return dx[0], dy[0]
        return dx, dy

    return _record("sad_loss", (x, xhat), out, bwd)


def lhalf_penalty(s, eps_s=LHALF_EPS):
    """Sparsity penalty: sum of sqrt(s + eps_s) over the last axis.

    Entries must be nonnegative (they come out of a softmax); a negative
    entry signals an upstream bug and raises.
    """
    sr, single = _rows(s, "lhalf_penalty")
    if np.any(sr < 0.0):
        raise DegenerateError("lhalf_penalty: negative entry")
    sr = np.ascontiguousarray(sr)
    r = kernels.lhalf_rows_fwd(sr, eps_s)
    out = np.asarray(r[0]) if single else r

    def bwd(g):
        gr = np.ascontiguousarray(np.atleast_1d(g))
        ds = kernels.lhalf_rows_bwd(sr, gr, eps_s)
        return (ds[0] if single else ds,)

    return _record("lhalf_penalty", (s,), out, bwd)


class Adam:
    """Adaptive-moment optimizer over registered parameters.

    Holds the per-parameter moment accumulators, the step counter and the
    hyperparameters. step() applies the standard bias-corrected update,
    zeroes the gradients, and clamps parameters registered with
    ``nonneg=True`` elementwise to >= 0 afterwards.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._slots = []

    def add_param(self, tensor, nonneg=False):
        if not tensor.requires_grad or tensor.grad is None:
            raise ContractError("Adam.add_param: tensor has no gradient accumulator")
        self._slots.append(
            (tensor, np.zeros_like(tensor.data), np.zeros_like(tensor.data), nonneg)
        )

    def step(self):
        self.step_count += 1
        for tensor, m, v, nonneg in self._slots:
            if tensor.grad is None:
                raise ContractError("Adam.step: parameter lost its gradient")
            kernels.adam_update(
                tensor.data.reshape(-1),
                tensor.grad.reshape(-1),
                m.reshape(-1),
                v.reshape(-1),
                self.step_count,
                self.lr,
                self.beta1,
                self.beta2,
                self.eps,
                nonneg,
            )
