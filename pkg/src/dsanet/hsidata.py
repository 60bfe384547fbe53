"""Hyperspectral cube container, file formats, synthetic scenes, patches.

Cube files ("HSIB") and ground-truth sidecars ("HSGT") are little-endian
binary: a 4-byte magic, u32 version, u32 dimensions, then float32
payload. In memory everything is float64; saving quantizes to float32,
so save(load(f)) reproduces f bit for bit. docs/formats.md holds the
exact byte layout and a hand-decodable fixture.
"""

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateError, ParseError

HSIB_MAGIC = b"HSIB"
HSGT_MAGIC = b"HSGT"
FORMAT_VERSION = 1

# absurd-dimension guard: one payload may not claim more than 1 TiB
_MAX_PAYLOAD_BYTES = 1 << 40


@dataclass
class HSICube:
    """H x W image of L-band spectra, band-interleaved by pixel.

    Values are finite and nonnegative; ascending band index follows
    ascending wavelength.
    """

    height: int
    width: int
    bands: int
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        expected = (self.height, self.width, self.bands)
        if self.data.shape != expected:
            raise ConfigError(
                f"cube data shape {self.data.shape} does not match dims {expected}"
            )
        if not np.all(np.isfinite(self.data)):
            raise ConfigError("cube contains non-finite values")
        if np.any(self.data < 0.0):
            raise ConfigError("cube contains negative reflectance values")

    @property
    def n_pixels(self):
        return self.height * self.width

    def pixels(self):
        """(H*W, L) view of the reflectance, one spectrum per row."""
        return self.data.reshape(self.n_pixels, self.bands)


@dataclass
class GroundTruth:
    """Reference endmembers (one material per row) and per-pixel abundances."""

    endmembers: np.ndarray   # (P, L)
    abundances: np.ndarray   # (H*W, P)

    def __post_init__(self):
        self.endmembers = np.ascontiguousarray(self.endmembers, dtype=np.float64)
        self.abundances = np.ascontiguousarray(self.abundances, dtype=np.float64)
        if self.endmembers.ndim != 2 or self.abundances.ndim != 2:
            raise ConfigError("ground truth arrays must be 2-D")
        if self.endmembers.shape[0] != self.abundances.shape[1]:
            raise ConfigError(
                f"endmember count {self.endmembers.shape[0]} does not match "
                f"abundance width {self.abundances.shape[1]}"
            )
        if np.any(np.all(self.endmembers == 0.0, axis=1)):
            raise ConfigError("ground truth contains an all-zero endmember")
        sums = self.abundances.sum(axis=1)
        if np.any(self.abundances < 0.0) or np.any(np.abs(sums - 1.0) > 1e-6):
            raise ConfigError("abundance rows must lie on the probability simplex")

    @property
    def n_endmembers(self):
        return self.endmembers.shape[0]


@dataclass
class Patch:
    """k x k pixel neighborhood flattened row-major; the center pixel sits
    at row (K-1)/2 of ``pixels``."""

    row: int
    col: int
    k: int
    pixels: np.ndarray   # (k*k, L)

    @property
    def center(self):
        return self.pixels[(self.k * self.k - 1) // 2]


# ---------------------------------------------------------------------------
# HSIB / HSGT files


def gt_path(cube_path):
    """Sidecar path: <name>.gt.hsib next to <name>.hsib."""
    p = str(cube_path)
    if p.endswith(".hsib"):
        return p[: -len(".hsib")] + ".gt.hsib"
    return p + ".gt.hsib"


def _read_header(buf, magic, n_dims, path):
    if len(buf) < 4 or buf[:4] != magic:
        raise ParseError(f"{path}: bad magic {buf[:4]!r}, expected {magic!r}", 0)
    need = 8 + 4 * n_dims
    if len(buf) < need:
        raise ParseError(f"{path}: truncated header", len(buf))
    version = struct.unpack_from("<I", buf, 4)[0]
    if version != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported version {version}", 4)
    dims = struct.unpack_from(f"<{n_dims}I", buf, 8)
    total = 1
    for i, d in enumerate(dims):
        if d == 0:
            raise ParseError(f"{path}: zero dimension", 8 + 4 * i)
        total *= d
    if total * 4 > _MAX_PAYLOAD_BYTES:
        raise ParseError(f"{path}: dimensions {dims} overflow the payload limit", 8)
    return dims, need


def _read_floats(buf, offset, count, path, what):
    end = offset + 4 * count
    if len(buf) != end:
        raise ParseError(
            f"{path}: {what} payload size mismatch, expected {end - offset} bytes, "
            f"got {len(buf) - offset}",
            offset,
        )
    values = np.frombuffer(buf, dtype="<f4", count=count, offset=offset)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise ParseError(f"{path}: non-finite value in {what}", offset + 4 * int(bad[0]))
    neg = np.flatnonzero(values < 0.0)
    if neg.size:
        raise ParseError(f"{path}: negative value in {what}", offset + 4 * int(neg[0]))
    return values.astype(np.float64)


def save_cube(cube, path):
    """Write an HSIB file (float32 payload, little-endian)."""
    with open(path, "wb") as fh:
        fh.write(HSIB_MAGIC)
        fh.write(struct.pack("<4I", FORMAT_VERSION, cube.height, cube.width, cube.bands))
        fh.write(np.asarray(cube.data, dtype="<f4").tobytes())


def load_cube(path):
    """Read an HSIB file; returns (cube, ground truth or None).

    The ground truth comes from the ``<name>.gt.hsib`` sidecar when one
    exists next to the cube.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    (h, w, l), offset = _read_header(buf, HSIB_MAGIC, 3, path)
    values = _read_floats(buf, offset, h * w * l, path, "cube")
    cube = HSICube(h, w, l, values.reshape(h, w, l))
    try:
        gt = load_gt(gt_path(path))
    except FileNotFoundError:
        gt = None
    return cube, gt


def save_gt(gt, height, width, path):
    """Write an HSGT sidecar (endmembers then abundances, float32)."""
    p, l = gt.endmembers.shape
    if gt.abundances.shape != (height * width, p):
        raise ConfigError(
            f"abundances shape {gt.abundances.shape} does not match "
            f"{height}x{width} pixels, {p} endmembers"
        )
    with open(path, "wb") as fh:
        fh.write(HSGT_MAGIC)
        fh.write(struct.pack("<5I", FORMAT_VERSION, p, l, height, width))
        fh.write(np.asarray(gt.endmembers, dtype="<f4").tobytes())
        fh.write(np.asarray(gt.abundances, dtype="<f4").tobytes())


def load_gt(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    (p, l, h, w), offset = _read_header(buf, HSGT_MAGIC, 4, path)
    n_em = p * l
    n_ab = h * w * p
    end = offset + 4 * (n_em + n_ab)
    if len(buf) != end:
        raise ParseError(
            f"{path}: payload size mismatch, expected {end - offset} bytes, "
            f"got {len(buf) - offset}",
            offset,
        )
    em = _read_floats(buf[: offset + 4 * n_em], offset, n_em, path, "endmembers")
    ab = _read_floats(buf, offset + 4 * n_em, n_ab, path, "abundances")
    return GroundTruth(em.reshape(p, l), ab.reshape(h * w, p))


# ---------------------------------------------------------------------------
# synthetic scenes


def generate_synthetic(height, width, bands, n_end, snr_db, alpha, seed):
    """Linear-mixing scene with spatially coherent abundances.

    Endmembers are max-normalized sums of 2-4 Gaussian bumps with
    distinct seeded centers. Abundance fields come from per-pixel gamma
    draws of concentration alpha/9 smoothed by a 3x3 reflect box filter
    and renormalized to the simplex; summing nine independent gamma cells
    keeps the per-pixel marginal exactly Dirichlet(alpha) while the
    shared cells make neighbors agree (the smoothing runs in log space,
    so near-zero draws at small alpha cannot underflow). White Gaussian
    noise is scaled to hit ``snr_db`` exactly before the final clip at 0;
    pass ``math.inf`` to disable noise. Pure function of its arguments.

    Returns (HSICube, GroundTruth).
    """
    if height < 1 or width < 1 or bands < 1:
        raise ConfigError("height, width and bands must be positive")
    if n_end < 1 or n_end > bands or n_end > height * width:
        raise ConfigError(
            f"endmember count {n_end} must satisfy 1 <= P <= min(bands, pixels)"
        )
    if not snr_db > 0.0:
        raise ConfigError(f"snr_db must be positive, got {snr_db}")
    if not alpha > 0.0:
        raise ConfigError(f"alpha must be positive, got {alpha}")
    rng = np.random.default_rng(seed)

    grid = np.arange(bands, dtype=np.float64)
    endmembers = np.empty((n_end, bands))
    w_lo = max(1.0, bands / 30.0)
    w_hi = max(2.0, bands / 8.0)
    for p in range(n_end):
        n_bumps = int(rng.integers(2, 5))
        centers = rng.choice(bands, size=n_bumps, replace=False)
        widths = rng.uniform(w_lo, w_hi, size=n_bumps)
        amps = rng.uniform(0.4, 1.0, size=n_bumps)
        curve = np.zeros(bands)
        for c, w, a in zip(centers, widths, amps):
            curve += a * np.exp(-0.5 * ((grid - c) / w) ** 2)
        endmembers[p] = curve / curve.max()

    # log of Gamma(alpha/9) draws via G = Gamma(a+1) * U^(1/a)
    a9 = alpha / 9.0
    log_gamma = np.log(rng.gamma(a9 + 1.0, size=(height, width, n_end)))
    log_gamma += np.log1p(-rng.random((height, width, n_end))) / a9
    padded = np.pad(log_gamma, ((1, 1), (1, 1), (0, 0)), mode="reflect")
    windows = np.stack(
        [padded[di : di + height, dj : dj + width, :] for di in range(3) for dj in range(3)],
        axis=-1,
    )
    peak = windows.max(axis=-1)
    log_sum = peak + np.log(np.exp(windows - peak[..., None]).sum(axis=-1))
    log_sum -= log_sum.max(axis=-1, keepdims=True)
    abund = np.exp(log_sum)
    abund /= abund.sum(axis=-1, keepdims=True)
    abund = abund.reshape(height * width, n_end)

    clean = abund @ endmembers
    if math.isinf(snr_db):
        mixed = clean
    else:
        raw = rng.standard_normal(clean.shape)
        scale = np.sqrt(
            (clean * clean).sum() / (raw * raw).sum() * 10.0 ** (-snr_db / 10.0)
        )
        mixed = np.clip(clean + scale * raw, 0.0, None)

    cube = HSICube(height, width, bands, mixed.reshape(height, width, bands))
    return cube, GroundTruth(endmembers, abund)


# ---------------------------------------------------------------------------
# patches


def _reflect(indices, n):
    """Mirror indices across the borders of [0, n) without edge repeat."""
    if n == 1:
        return np.zeros_like(indices)
    period = 2 * n - 2
    wrapped = np.mod(indices, period)
    return np.where(wrapped >= n, period - wrapped, wrapped)


def patch_index_grid(height, width, k):
    """(H*W, k*k) flattened pixel indices of every mirror-padded window."""
    offsets = np.arange(k) - k // 2
    row_idx = _reflect(np.arange(height)[:, None] + offsets[None, :], height)
    col_idx = _reflect(np.arange(width)[:, None] + offsets[None, :], width)
    grid = (
        row_idx[:, None, :, None] * width + col_idx[None, :, None, :]
    )  # (H, W, k, k)
    return np.ascontiguousarray(grid.reshape(height * width, k * k))


def extract_patch(cube, row, col, k):
    """k x k mirror-padded neighborhood around (row, col), row-major.

    Mirroring re-indexes existing pixels and never fabricates values;
    it is exact (no edge repeat) for k <= 2*min(H, W) - 1.
    """
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"window side must be odd and positive, got {k}")
    if not (0 <= row < cube.height and 0 <= col < cube.width):
        raise ConfigError(
            f"center ({row}, {col}) outside image {cube.height}x{cube.width}"
        )
    offsets = np.arange(k) - k // 2
    rows = _reflect(row + offsets, cube.height)
    cols = _reflect(col + offsets, cube.width)
    flat = (rows[:, None] * cube.width + cols[None, :]).reshape(-1)
    return Patch(row, col, k, cube.pixels()[flat])


def normalize_cube(cube):
    """Divide by the global maximum so the range fits in [0, 1]."""
    peak = cube.data.max()
    if peak <= 0.0:
        raise DegenerateError("cannot normalize an all-zero cube")
    return HSICube(cube.height, cube.width, cube.bands, cube.data / peak)
