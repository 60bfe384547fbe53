"""Band similarity analysis and low-redundancy spectral views.

The L bands are grouped into M similarity clusters (average-linkage
agglomerative clustering on 1 - Pearson correlation), then each cluster
is dealt round-robin across N views. Every view therefore receives a
balanced share of every similarity group, which keeps redundancy inside
a view low. All operations are pure and deterministic.
"""

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, ParseError


@dataclass
class BandCorrelation:
    """Symmetric L x L Pearson correlation between band images, computed
    over a seeded pixel sample. Constant bands correlate 0 with everything
    and 1 with themselves by convention."""

    matrix: np.ndarray = field(repr=False)
    n_samples: int = 0

    def __post_init__(self):
        m = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ConfigError(f"correlation matrix must be square, got {m.shape}")
        if not np.allclose(m, m.T, atol=1e-12):
            raise ConfigError("correlation matrix must be symmetric")
        if np.any(np.abs(m) > 1.0 + 1e-12) or not np.allclose(np.diag(m), 1.0):
            raise ConfigError("correlations must lie in [-1, 1] with unit diagonal")
        self.matrix = m

    @property
    def n_bands(self):
        return self.matrix.shape[0]


@dataclass
class ViewPartition:
    """Bijective assignment of the L band indices to N disjoint views.

    ``views[i]`` lists band indices in strictly ascending order;
    ``cluster_of`` is the similarity-cluster label per band when known
    (None for partitions loaded from a text file).
    """

    n_clusters: int
    n_views: int
    n_bands: int
    views: list = field(repr=False)
    cluster_of: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.views = [np.ascontiguousarray(v, dtype=np.int64) for v in self.views]
        if len(self.views) != self.n_views:
            raise ConfigError(
                f"expected {self.n_views} views, got {len(self.views)}"
            )
        for v in self.views:
            if v.size > 1 and np.any(np.diff(v) <= 0):
                raise ConfigError("view band indices must be strictly ascending")
        merged = np.concatenate([v for v in self.views]) if self.views else np.array([])
        if merged.size != self.n_bands or not np.array_equal(
            np.sort(merged), np.arange(self.n_bands)
        ):
            raise ConfigError(
                "views must partition the band indices 0..L-1 exactly"
            )
        if self.cluster_of is not None:
            self.cluster_of = np.ascontiguousarray(self.cluster_of, dtype=np.int64)
            if self.cluster_of.shape != (self.n_bands,):
                raise ConfigError("cluster_of must hold one label per band")

    def view_sizes(self):
        return [int(v.size) for v in self.views]


def band_correlation(cube, sample_size=10000, seed=0):
    """Pearson correlation between bands over <= sample_size seeded pixels."""
    if cube.bands < 2:
        raise ConfigError("band correlation needs at least 2 bands")
    pixels = cube.pixels()
    n = min(int(sample_size), pixels.shape[0])
    if n < 2:
        raise ConfigError("band correlation needs at least 2 sampled pixels")
    rng = np.random.default_rng(seed)
    idx = rng.choice(pixels.shape[0], size=n, replace=False)
    x = pixels[idx]
    centered = x - x.mean(axis=0)
    scale = np.sqrt((centered * centered).sum(axis=0))
    denom = np.outer(scale, scale)
    corr = centered.T @ centered
    live = scale > 0.0
    np.divide(corr, denom, out=corr, where=denom > 0.0)
    corr[~live, :] = 0.0
    corr[:, ~live] = 0.0
    corr = np.clip((corr + corr.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return BandCorrelation(corr, n_samples=n)


def cluster_bands(corr, n_clusters):
    """Average-linkage agglomerative clustering on distance 1 - corr.

    Merges until ``n_clusters`` remain. Distance ties pick the pair whose
    clusters contain the smallest minimum band index (then the smaller
    partner), so the result is deterministic. Labels are canonical:
    clusters are numbered by their minimum band index, ascending.
    """
    mat = corr.matrix
    n = mat.shape[0]
    if not 1 <= n_clusters <= n:
        raise ConfigError(f"cluster count {n_clusters} outside [1, {n}]")
    dist = 1.0 - mat
    np.fill_diagonal(dist, np.inf)
    alive = np.ones(n, dtype=bool)
    size = np.ones(n)
    min_band = np.arange(n)
    members = [[i] for i in range(n)]
    for _ in range(n - n_clusters):
        best = dist.min()
        cand = np.argwhere(dist == best)
        pair = None
        pair_key = None
        for i, j in cand:
            if i >= j:
                continue
            key = (min(min_band[i], min_band[j]), max(min_band[i], min_band[j]))
            if pair_key is None or key < pair_key:
                pair_key = key
                pair = (int(i), int(j))
        i, j = pair
        if min_band[j] < min_band[i]:
            i, j = j, i
        # Lance-Williams update for average linkage
        others = alive.copy()
        others[i] = others[j] = False
        merged = (size[i] * dist[i, others] + size[j] * dist[j, others]) / (
            size[i] + size[j]
        )
        dist[i, others] = merged
        dist[others, i] = merged
        dist[j, :] = np.inf
        dist[:, j] = np.inf
        size[i] += size[j]
        members[i].extend(members[j])
        alive[j] = False
    clusters = sorted((members[i] for i in np.flatnonzero(alive)), key=min)
    labels = np.empty(n, dtype=np.int64)
    for label, bands in enumerate(clusters):
        labels[bands] = label
    return labels


def partition_views(labels, n_views):
    """Deal each cluster's ascending bands round-robin across the views.

    The j-th band of a cluster lands in view j mod N, so every view gets
    floor(|c|/N) or ceil(|c|/N) bands from each cluster c.
    """
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    n = labels.size
    if not 1 <= n_views <= n:
        raise ConfigError(f"view count {n_views} outside [1, {n}]")
    views = [[] for _ in range(n_views)]
    for label in np.unique(labels):
        bands = np.flatnonzero(labels == label)
        for j, band in enumerate(bands):
            views[j % n_views].append(int(band))
    views = [np.sort(np.asarray(v, dtype=np.int64)) for v in views]
    return ViewPartition(
        n_clusters=int(labels.max()) + 1,
        n_views=n_views,
        n_bands=n,
        views=views,
        cluster_of=labels,
    )


def slice_views(spectrum, partition):
    """Split an L-vector into per-view sub-vectors (ascending band order)."""
    spectrum = np.asarray(spectrum)
    if spectrum.shape[-1] != partition.n_bands:
        raise DimensionError(
            f"spectrum length {spectrum.shape[-1]} does not match "
            f"partition over {partition.n_bands} bands"
        )
    return [spectrum[..., v] for v in partition.views]


# ---------------------------------------------------------------------------
# partition text file

_HEADER_RE = re.compile(r"^# M=(\d+) N=(\d+) L=(\d+)\s*$")


def save_partition(partition, path):
    """Plain text: a header line, then one comma-separated view per line."""
    lines = [
        f"# M={partition.n_clusters} N={partition.n_views} L={partition.n_bands}"
    ]
    for v in partition.views:
        lines.append(",".join(str(int(b)) for b in v))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_partition(path):
    with open(path, "r", encoding="ascii") as fh:
        text = fh.read()
    lines = text.splitlines()
    if not lines:
        raise ParseError(f"{path}: empty partition file", 0)
    m = _HEADER_RE.match(lines[0])
    if not m:
        raise ParseError(f"{path}: malformed header {lines[0]!r}", 0)
    n_clusters, n_views, n_bands = (int(g) for g in m.groups())
    views = []
    offset = len(lines[0]) + 1
    for line in lines[1:]:
        stripped = line.strip()
        if stripped:
            try:
                views.append([int(tok) for tok in stripped.split(",")])
            except ValueError:
                raise ParseError(f"{path}: malformed view line {line!r}", offset)
        else:
            views.append([])
        offset += len(line) + 1
    try:
        return ViewPartition(
            n_clusters=n_clusters, n_views=n_views, n_bands=n_bands, views=views
        )
    except ConfigError as exc:
        raise ParseError(f"{path}: {exc}", 0)
