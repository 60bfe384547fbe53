"""The dual-stream unmixing network and its training loop.

One pixel's abundance is estimated twice: the spatial branch encodes
every pixel of the surrounding window and collapses the window with a
full-span 1-D convolution, and the spectral branch encodes each
low-redundancy band view separately and sums the per-view estimates.
A cross-fusion attention stage gates the two estimates against each
other, a final softmax pins the fused vector to the probability simplex,
and a nonnegative linear decoder maps abundances back to a spectrum.
The decoder columns are the endmember estimates.
"""

import hashlib
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    InitError,
    NonFiniteLossError,
    ParseError,
)
from .hsidata import patch_index_grid
from .specview import ViewPartition
from .unmixeval import UnmixResult

DSAN_MAGIC = b"DSAN"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Everything needed to rebuild the network and its training run."""

    n_end: int                       # endmembers P
    partition: ViewPartition
    window: int = 3                  # odd window side k, K = k*k pixels
    hidden: int = 64                 # spatial encoder width D
    dropout: float = 0.1
    lambda_sad: float = 1.0          # weight of the spectral-angle data term
    lambda_sparse: float = 1e-3      # weight of the sqrt sparsity penalty
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.n_end < 2:
            raise ConfigError(f"need at least 2 endmembers, got {self.n_end}")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"window side must be odd, got {self.window}")
        if self.hidden < 1:
            raise ConfigError("hidden width must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.lambda_sad < 0.0 or self.lambda_sparse < 0.0:
            raise ConfigError("loss weights must be nonnegative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch size must be >= 1 and epochs >= 0")
        if not isinstance(self.partition, ViewPartition):
            raise ConfigError("config needs a ViewPartition")
        for i, v in enumerate(self.partition.views):
            if v.size == 0:
                raise ConfigError(
                    f"view {i} is empty; reduce the view count below {self.partition.n_views}"
                )

    @property
    def n_window_pixels(self):
        return self.window * self.window


class BatchNorm:
    """Affine batchnorm site: learnable gamma/beta plus running stats."""

    def __init__(self, graph, width):
        self.gamma = graph.parameter(np.ones(width))
        self.beta = graph.parameter(np.zeros(width))
        self.running = tc.RunningStats(width)

    def __call__(self, x, mode):
        return tc.batchnorm(x, self.gamma, self.beta, mode, self.running)


@dataclass
class ForwardTrace:
    """Intermediate tensors of one forward pass (single pixel or batch)."""

    hidden: tc.Tensor       # window encodings, (K, D) or (B, K, D)
    s_spa: tc.Tensor        # spatial abundance estimate, (P,) or (B, P)
    s_spe: tc.Tensor        # spectral abundance estimate
    cross_spa: tc.Tensor    # spatial estimate gated by the spectral one
    cross_spe: tc.Tensor    # spectral estimate gated by the spatial one
    s_c: tc.Tensor          # fused abundances, on the simplex
    xhat: tc.Tensor         # reconstructed spectrum, (L,) or (B, L)


class DSANetModel:
    """Learnable state of both branches, the fusion gates and the decoder."""

    def __init__(self, config, graph, decoder_init, init_rng):
        part = config.partition
        n_bands = part.n_bands
        p = config.n_end
        d = config.hidden
        k2 = config.n_window_pixels
        decoder_init = np.ascontiguousarray(decoder_init, dtype=np.float64)
        if decoder_init.shape != (n_bands, p):
            raise DimensionError(
                f"decoder init {decoder_init.shape} must be ({n_bands}, {p})"
            )
        self.config = config
        self.graph = graph
        self.mode = "infer"
        self.w_enc = graph.parameter(_glorot(init_rng, (d, n_bands)))
        self.bn_spa = BatchNorm(graph, d)
        self.conv_w = graph.parameter(
            _glorot(init_rng, (p, d, k2), fan_in=d * k2, fan_out=p)
        )
        self.conv_b = graph.parameter(np.zeros(p))
        self.view_w = []
        self.view_bn = []
        for v in part.views:
            self.view_w.append(graph.parameter(_glorot(init_rng, (p, v.size))))
            self.view_bn.append(BatchNorm(graph, p))
        self.att_spa_w = graph.parameter(_glorot(init_rng, (p, p)))
        self.att_spa_b = graph.parameter(np.zeros(p))
        self.att_spe_w = graph.parameter(_glorot(init_rng, (p, p)))
        self.att_spe_b = graph.parameter(np.zeros(p))
        self.w_dec = graph.parameter(np.maximum(decoder_init, 0.0))

    def set_mode(self, mode):
        if mode not in ("train", "infer"):
            raise ConfigError(f"unknown mode {mode!r}")
        self.mode = mode

    def parameters(self):
        """(name, tensor, clamp_nonnegative) in canonical checkpoint order."""
        entries = [
            ("w_enc", self.w_enc, False),
            ("bn_spa.gamma", self.bn_spa.gamma, False),
            ("bn_spa.beta", self.bn_spa.beta, False),
            ("conv_w", self.conv_w, False),
            ("conv_b", self.conv_b, False),
        ]
        for i, (w, bn) in enumerate(zip(self.view_w, self.view_bn)):
            entries.append((f"view{i}.w", w, False))
            entries.append((f"view{i}.gamma", bn.gamma, False))
            entries.append((f"view{i}.beta", bn.beta, False))
        entries += [
            ("att_spa_w", self.att_spa_w, False),
            ("att_spa_b", self.att_spa_b, False),
            ("att_spe_w", self.att_spe_w, False),
            ("att_spe_b", self.att_spe_b, False),
            ("w_dec", self.w_dec, True),
        ]
        return entries

    def running_stats(self):
        """(name, RunningStats) in canonical checkpoint order."""
        entries = [("bn_spa", self.bn_spa.running)]
        for i, bn in enumerate(self.view_bn):
            entries.append((f"view{i}", bn.running))
        return entries

    @property
    def endmembers(self):
        """(L, P) decoder weight; column p is endmember p."""
        return self.w_dec.data


def _glorot(rng, shape, fan_in=None, fan_out=None):
    if fan_in is None:
        fan_out, fan_in = shape[0], shape[1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def atgp_init(cube, n_end):
    """Pure-pixel decoder seed by iterative orthogonal projection.

    Picks the max-norm pixel first, then repeatedly the pixel with the
    largest residual norm after projecting out the span of the picks so
    far. The picked spectra are linearly independent by construction.
    Returns the (P, L) matrix of picked spectra.
    """
    pixels = cube.pixels()
    if n_end > min(cube.bands, pixels.shape[0]):
        raise ConfigError(
            f"cannot seed {n_end} endmembers from {pixels.shape[0]} pixels "
            f"of {cube.bands} bands"
        )
    residual = (pixels * pixels).sum(axis=1)
    floor = 1e-12 * max(float(residual.max()), 1.0)
    basis = []
    picks = []
    for step in range(n_end):
        best = int(np.argmax(residual))
        if residual[best] <= floor:
            raise InitError(
                f"pixel data has rank {step}; reduce the endmember count"
            )
        v = pixels[best].copy()
        for u in basis:
            v -= (u @ v) * u
        norm = np.linalg.norm(v)
        if norm * norm <= floor:
            raise InitError(
                f"pixel data has rank {step}; reduce the endmember count"
            )
        u = v / norm
        basis.append(u)
        picks.append(best)
        proj = pixels @ u
        residual = np.maximum(residual - proj * proj, 0.0)
    return pixels[picks].copy()


def build_model(config, cube):
    """Fresh model for a cube: seeded Glorot weights, ATGP-seeded decoder."""
    if config.partition.n_bands != cube.bands:
        raise ConfigError(
            f"partition covers {config.partition.n_bands} bands, cube has {cube.bands}"
        )
    if config.n_end > min(cube.bands, cube.n_pixels):
        raise ConfigError("endmember count exceeds cube rank bound")
    seed_init, seed_graph = np.random.SeedSequence(config.seed).spawn(2)
    graph = tc.Graph(seed_graph)
    init_rng = np.random.default_rng(seed_init)
    decoder = atgp_init(cube, config.n_end).T
    return DSANetModel(config, graph, decoder, init_rng)


# ---------------------------------------------------------------------------
# forward passes


def _spatial_batch(model, patches):
    """patches: (B, K, L) array. Returns (hidden (B,K,D), s_spa (B,P))."""
    b, k2, n_bands = patches.shape
    cfg = model.config
    if k2 != cfg.n_window_pixels or n_bands != cfg.partition.n_bands:
        raise DimensionError(
            f"patches {patches.shape} do not match window {cfg.window} over "
            f"{cfg.partition.n_bands} bands"
        )
    g = model.graph
    x = g.tensor(patches.reshape(b * k2, n_bands))
    h = tc.linear(x, model.w_enc)
    h = model.bn_spa(h, model.mode)
    h = tc.dropout(h, cfg.dropout, model.mode)
    h = tc.relu(h)
    hidden = tc.reshape(h, (b, k2, cfg.hidden))
    stacked = tc.swapaxes(hidden, 1, 2)          # (B, D, K)
    s_spa = tc.conv1d(stacked, model.conv_w, model.conv_b)
    return hidden, s_spa


def _spectral_batch(model, spectra):
    """spectra: (B, L) array. Returns s_spe (B, P)."""
    cfg = model.config
    if spectra.shape[1] != cfg.partition.n_bands:
        raise DimensionError(
            f"spectra width {spectra.shape[1]} does not match partition over "
            f"{cfg.partition.n_bands} bands"
        )
    g = model.graph
    x = g.tensor(spectra)
    total = None
    for w, bn, idx in zip(model.view_w, model.view_bn, cfg.partition.views):
        xi = tc.gather_cols(x, idx)
        si = tc.linear(xi, w)
        si = bn(si, model.mode)
        si = tc.dropout(si, cfg.dropout, model.mode)
        si = tc.relu(si)
        total = si if total is None else tc.add(total, si)
    return total


def _cfan_batch(model, s_spa, s_spe):
    """Cross-fusion attention; returns (s_c, cross_spa, cross_spe)."""
    cross_spa = tc.hadamard(s_spa, s_spe)
    cross_spe = tc.hadamard(s_spe, s_spa)
    gate_spa = tc.softmax(tc.linear(cross_spa, model.att_spa_w, model.att_spa_b))
    gate_spe = tc.softmax(tc.linear(cross_spe, model.att_spe_w, model.att_spe_b))
    fused = tc.add(tc.hadamard(s_spa, gate_spa), tc.hadamard(s_spe, gate_spe))
    return tc.softmax(fused), cross_spa, cross_spe


def spatial_forward(model, patch):
    """Window branch for one Patch; returns the (P,) abundance estimate."""
    _, s = _spatial_batch(model, np.asarray(patch.pixels, dtype=np.float64)[None])
    return tc.reshape(s, (model.config.n_end,))


def spectral_forward(model, spectrum):
    """Multiview branch for one spectrum; returns the (P,) estimate."""
    spectrum = np.asarray(spectrum, dtype=np.float64)
    s = _spectral_batch(model, spectrum[None])
    return tc.reshape(s, (model.config.n_end,))


def cfan_forward(model, s_spa, s_spe):
    """Fuse the two branch estimates into a simplex abundance vector."""
    p = model.config.n_end
    if s_spa.data.shape[-1] != p or s_spe.data.shape[-1] != p:
        raise DimensionError(
            f"branch outputs {s_spa.data.shape} / {s_spe.data.shape} "
            f"must have {p} entries"
        )
    s_c, _, _ = _cfan_batch(model, s_spa, s_spe)
    return s_c


def decode(model, s_c):
    """Reconstruct the spectrum from abundances: decoder weight x s_c."""
    return tc.linear(s_c, model.w_dec)


def forward_trace(model, patch):
    """Full single-pixel forward pass; the center spectrum feeds the
    spectral branch. Returns a ForwardTrace of single-sample tensors."""
    pixels = np.asarray(patch.pixels, dtype=np.float64)
    trace = _forward_batch(model, pixels[None], patch.center[None])
    cfg = model.config
    p = cfg.n_end
    return ForwardTrace(
        hidden=tc.reshape(trace.hidden, (cfg.n_window_pixels, cfg.hidden)),
        s_spa=tc.reshape(trace.s_spa, (p,)),
        s_spe=tc.reshape(trace.s_spe, (p,)),
        cross_spa=tc.reshape(trace.cross_spa, (p,)),
        cross_spe=tc.reshape(trace.cross_spe, (p,)),
        s_c=tc.reshape(trace.s_c, (p,)),
        xhat=tc.reshape(trace.xhat, (cfg.partition.n_bands,)),
    )


def _forward_batch(model, patches, spectra):
    hidden, s_spa = _spatial_batch(model, patches)
    s_spe = _spectral_batch(model, spectra)
    s_c, cross_spa, cross_spe = _cfan_batch(model, s_spa, s_spe)
    xhat = decode(model, s_c)
    return ForwardTrace(hidden, s_spa, s_spe, cross_spa, cross_spe, s_c, xhat)


def loss(x, trace, lambda_sad, lambda_sparse):
    """Weighted sum of the spectral angle between the pixel and its
    reconstruction and the sqrt sparsity of the fused abundances.
    ``x`` may be an (L,) spectrum or a (B, L) batch matching the trace."""
    graph = trace.xhat.graph
    xt = x if isinstance(x, tc.Tensor) else tc.Tensor(x, graph=graph)
    angle = tc.sad_loss(xt, trace.xhat)
    sparsity = tc.lhalf_penalty(trace.s_c)
    if angle.ndim == 1:
        angle = tc.tmean(angle)
        sparsity = tc.tmean(sparsity)
    return tc.add(tc.scale(angle, lambda_sad), tc.scale(sparsity, lambda_sparse))


# ---------------------------------------------------------------------------
# training and inference


def train(cube, config):
    """Train a fresh model on a normalized cube.

    Each epoch runs a seeded shuffle of all usable pixel centers in
    mini-batches: window patches feed the spatial branch, center spectra
    the spectral branch, and one Adam step (with the decoder clamp)
    follows each batch. Returns the model in infer mode and the
    per-epoch mean loss history.
    """
    model = build_model(config, cube)
    history = fit(model, cube)
    return model, history


def fit(model, cube):
    cfg = model.config
    graph = model.graph
    opt = tc.Adam(lr=cfg.learning_rate)
    for _, tensor, nonneg in model.parameters():
        opt.add_param(tensor, nonneg=nonneg)
    pixels = cube.pixels()
    grid = patch_index_grid(cube.height, cube.width, cfg.window)
    usable = np.flatnonzero((pixels * pixels).sum(axis=1) > 0.0)
    if usable.size == 0:
        raise ConfigError("cube has no nonzero pixels to train on")
    if usable.size < pixels.shape[0]:
        warnings.warn(
            f"skipping {pixels.shape[0] - usable.size} zero pixels during training"
        )
    model.set_mode("train")
    history = []
    for epoch in range(cfg.epochs):
        order = graph.rng.permutation(usable)
        total = 0.0
        for batch_index, start in enumerate(range(0, order.size, cfg.batch_size)):
            sel = order[start : start + cfg.batch_size]
            graph.reset()
            trace = _forward_batch(model, pixels[grid[sel]], pixels[sel])
            objective = loss(pixels[sel], trace, cfg.lambda_sad, cfg.lambda_sparse)
            value = float(objective.data)
            if not np.isfinite(value):
                raise NonFiniteLossError(epoch + 1, batch_index + 1, value)
            tc.backward(objective)
            opt.step()
            total += value * sel.size
        history.append(total / order.size)
    graph.reset()
    model.set_mode("infer")
    return history


INFER_CHUNK = 256   # fixed so results do not depend on the thread count


def infer(cube, model, threads=1):
    """Abundances for every pixel plus the decoder endmembers.

    Deterministic: dropout is off, batchnorm uses running statistics, and
    the cube is processed in fixed-size chunks, so any thread count
    produces identical results.
    """
    if model.mode != "infer":
        raise ContractError("inference requires a model in infer mode")
    cfg = model.config
    if cfg.partition.n_bands != cube.bands:
        raise DimensionError(
            f"model expects {cfg.partition.n_bands} bands, cube has {cube.bands}"
        )
    pixels = cube.pixels()
    grid = patch_index_grid(cube.height, cube.width, cfg.window)
    n = pixels.shape[0]
    abund = np.empty((n, cfg.n_end))
    graph = model.graph
    bounds = [(lo, min(lo + INFER_CHUNK, n)) for lo in range(0, n, INFER_CHUNK)]

    def run_chunk(span):
        lo, hi = span
        trace = _forward_batch(model, pixels[grid[lo:hi]], pixels[lo:hi])
        abund[lo:hi] = trace.s_c.data

    prev = graph.grad_enabled
    graph.grad_enabled = False
    try:
        if threads <= 1:
            for span in bounds:
                run_chunk(span)
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(run_chunk, bounds))
    finally:
        graph.grad_enabled = prev
    return UnmixResult(
        endmembers=model.w_dec.data.copy(),
        abundances=abund,
        height=cube.height,
        width=cube.width,
        provenance={"config_hash": config_hash(cfg), "seed": cfg.seed},
    )


# ---------------------------------------------------------------------------
# checkpoint file


def _pack_config(cfg):
    part = cfg.partition
    chunks = [
        struct.pack(
            "<3I4d2IQ",
            cfg.n_end,
            cfg.window,
            cfg.hidden,
            cfg.dropout,
            cfg.lambda_sad,
            cfg.lambda_sparse,
            cfg.learning_rate,
            cfg.batch_size,
            cfg.epochs,
            cfg.seed,
        ),
        struct.pack("<3I", part.n_clusters, part.n_views, part.n_bands),
    ]
    has_clusters = part.cluster_of is not None
    chunks.append(struct.pack("<I", 1 if has_clusters else 0))
    if has_clusters:
        chunks.append(np.asarray(part.cluster_of, dtype="<u4").tobytes())
    view_of = np.empty(part.n_bands, dtype="<u4")
    for i, v in enumerate(part.views):
        view_of[v] = i
    chunks.append(view_of.tobytes())
    return b"".join(chunks)


def _unpack_config(buf, offset, path):
    fixed = struct.calcsize("<3I4d2IQ")
    try:
        n_end, window, hidden, dropout, lam1, lam2, lr, batch, epochs, seed = (
            struct.unpack_from("<3I4d2IQ", buf, offset)
        )
        offset += fixed
        n_clusters, n_views, n_bands = struct.unpack_from("<3I", buf, offset)
        offset += 12
        (has_clusters,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        cluster_of = None
        if has_clusters:
            cluster_of = np.frombuffer(buf, dtype="<u4", count=n_bands, offset=offset)
            offset += 4 * n_bands
        view_of = np.frombuffer(buf, dtype="<u4", count=n_bands, offset=offset)
        offset += 4 * n_bands
    except (struct.error, ValueError):
        raise ParseError(f"{path}: truncated checkpoint config", offset)
    views = [np.flatnonzero(view_of == i) for i in range(n_views)]
    try:
        partition = ViewPartition(
            n_clusters=n_clusters,
            n_views=n_views,
            n_bands=n_bands,
            views=views,
            cluster_of=cluster_of,
        )
        cfg = ModelConfig(
            n_end=n_end,
            partition=partition,
            window=window,
            hidden=hidden,
            dropout=dropout,
            lambda_sad=lam1,
            lambda_sparse=lam2,
            learning_rate=lr,
            batch_size=batch,
            epochs=epochs,
            seed=seed,
        )
    except ConfigError as exc:
        raise ParseError(f"{path}: invalid checkpoint config: {exc}", offset)
    return cfg, offset


def config_hash(cfg):
    """Stable content hash of a model configuration."""
    return hashlib.sha256(_pack_config(cfg)).hexdigest()


def _read_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4 or buf[:4] != DSAN_MAGIC:
        raise ParseError(f"{path}: bad magic {buf[:4]!r}, expected {DSAN_MAGIC!r}", 0)
    if len(buf) < 8:
        raise ParseError(f"{path}: truncated header", len(buf))
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported version {version}", 4)
    cfg, offset = _unpack_config(buf, 8, path)
    return buf, cfg, offset


def read_checkpoint_config(path):
    """Parse only the header and configuration of a checkpoint file."""
    _, cfg, _ = _read_checkpoint(path)
    return cfg


def save_model(model, path):
    """Checkpoint: magic, version, packed config, then every parameter
    array and every running statistic, float64 little-endian, in the
    canonical order of parameters() and running_stats()."""
    with open(path, "wb") as fh:
        fh.write(DSAN_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(_pack_config(model.config))
        for _, tensor, _ in model.parameters():
            fh.write(np.asarray(tensor.data, dtype="<f8").tobytes())
        for _, running in model.running_stats():
            fh.write(np.asarray(running.mean, dtype="<f8").tobytes())
            fh.write(np.asarray(running.var, dtype="<f8").tobytes())


def load_model(path):
    """Rebuild a model from a checkpoint; arrives in infer mode."""
    buf, cfg, offset = _read_checkpoint(path)
    _, seed_graph = np.random.SeedSequence(cfg.seed).spawn(2)
    graph = tc.Graph(seed_graph)
    zeros = np.zeros((cfg.partition.n_bands, cfg.n_end))
    model = DSANetModel(cfg, graph, zeros, np.random.default_rng(0))
    arrays = [tensor.data for _, tensor, _ in model.parameters()]
    for _, running in model.running_stats():
        arrays.append(running.mean)
        arrays.append(running.var)
    expected = sum(a.size for a in arrays) * 8
    if len(buf) - offset != expected:
        raise ParseError(
            f"{path}: parameter payload size mismatch, expected {expected} bytes, "
            f"got {len(buf) - offset}",
            offset,
        )
    for a in arrays:
        vals = np.frombuffer(buf, dtype="<f8", count=a.size, offset=offset)
        a[...] = vals.reshape(a.shape)
        offset += a.size * 8
    return model
