"""Unmixing evaluation: metrics, endmember matching, exporters.

SAD is kept in radians everywhere; the common x100 presentation is a
display concern only. Endmember matching is exhaustive over column
permutations, which is exact for the small endmember counts this model
targets (P <= 8).
"""

import itertools
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateError, DimensionError


@dataclass
class UnmixResult:
    """Estimated endmembers (columns) and per-pixel abundances for a cube."""

    endmembers: np.ndarray   # (L, P)
    abundances: np.ndarray   # (H*W, P), rows on the simplex
    height: int
    width: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.endmembers = np.ascontiguousarray(self.endmembers, dtype=np.float64)
        self.abundances = np.ascontiguousarray(self.abundances, dtype=np.float64)
        if self.endmembers.ndim != 2 or self.abundances.ndim != 2:
            raise ConfigError("result arrays must be 2-D")
        if self.abundances.shape != (self.height * self.width, self.endmembers.shape[1]):
            raise ConfigError(
                f"abundances {self.abundances.shape} do not match "
                f"{self.height}x{self.width} pixels and {self.endmembers.shape[1]} endmembers"
            )
        if np.any(self.endmembers < 0.0):
            raise ConfigError("estimated endmembers must be nonnegative")
        sums = self.abundances.sum(axis=1)
        if np.any(self.abundances < 0.0) or np.any(np.abs(sums - 1.0) > 1e-6):
            raise ConfigError("abundance rows must lie on the probability simplex")

    @property
    def n_endmembers(self):
        return self.endmembers.shape[1]


@dataclass
class EvalReport:
    """Per-endmember and average metrics after permutation matching."""

    permutation: tuple       # ground-truth row p is matched to estimate column permutation[p]
    sad_per_em: list         # radians
    rmse_per_em: list
    sad_avg: float
    rmse_avg: float
    runtime_s: float

    def to_dict(self):
        return {
            "permutation": list(self.permutation),
            "sad_per_em": list(self.sad_per_em),
            "rmse_per_em": list(self.rmse_per_em),
            "sad_avg": self.sad_avg,
            "rmse_avg": self.rmse_avg,
            "runtime_s": self.runtime_s,
        }


def sad_metric(e, ehat):
    """Spectral angle (radians) between two nonzero vectors.

    The arccos-of-cosine-similarity angle, evaluated through the stable
    2*atan2(|u - v|, |u + v|) form on the normalized vectors so identical
    inputs score exactly 0 and tiny angles keep full precision.
    """
    # contiguous copies so strided views of equal values dot identically
    e = np.ascontiguousarray(e, dtype=np.float64).reshape(-1)
    ehat = np.ascontiguousarray(ehat, dtype=np.float64).reshape(-1)
    if e.shape != ehat.shape:
        raise DimensionError(f"sad_metric: lengths {e.shape} vs {ehat.shape}")
    ne = math.sqrt(float(e @ e))
    nh = math.sqrt(float(ehat @ ehat))
    if ne == 0.0 or nh == 0.0:
        raise DegenerateError("sad_metric: zero vector")
    u = e / ne
    v = ehat / nh
    diff = u - v
    summed = u + v
    return 2.0 * math.atan2(
        math.sqrt(float(diff @ diff)), math.sqrt(float(summed @ summed))
    )


def rmse_metric(s, shat):
    """Root mean square difference between two equal-length vectors."""
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    shat = np.asarray(shat, dtype=np.float64).reshape(-1)
    if s.shape != shat.shape or s.size == 0:
        raise DimensionError(f"rmse_metric: lengths {s.shape} vs {shat.shape}")
    diff = s - shat
    return math.sqrt(float(diff @ diff) / s.size)


def match_endmembers(est, gt):
    """Permutation assigning estimated columns to ground-truth rows.

    Returns the tuple ``perm`` minimizing the mean SAD of pairs
    (gt row p, est column perm[p]); exhaustive over all P! candidates,
    ties resolved lexicographically.
    """
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.ndim != 2 or gt.ndim != 2 or est.shape != (gt.shape[1], gt.shape[0]):
        raise DimensionError(
            f"match_endmembers: estimate {est.shape} vs ground truth {gt.shape}"
        )
    p = gt.shape[0]
    if p > 8:
        raise ConfigError(
            f"exhaustive matching supports at most 8 endmembers, got {p}"
        )
    pair_sad = np.empty((p, p))
    for i in range(p):
        for j in range(p):
            pair_sad[i, j] = sad_metric(gt[i], est[:, j])
    best = None
    best_cost = math.inf
    for perm in itertools.permutations(range(p)):
        cost = sum(pair_sad[i, perm[i]] for i in range(p))
        if cost < best_cost:
            best_cost = cost
            best = perm
    return best


def evaluate(result, gt, runtime_s=None):
    """Match endmembers, then score SAD per pair and abundance RMSE per
    endmember over all pixels. ``runtime_s`` defaults to the time spent
    in this call; the CLI passes the full pipeline duration instead."""
    t0 = time.perf_counter()
    if result.endmembers.shape[0] != gt.endmembers.shape[1]:
        raise DimensionError(
            f"band counts differ: result {result.endmembers.shape[0]}, "
            f"ground truth {gt.endmembers.shape[1]}"
        )
    if result.n_endmembers != gt.n_endmembers:
        raise DimensionError(
            f"endmember counts differ: result {result.n_endmembers}, "
            f"ground truth {gt.n_endmembers}"
        )
    if result.abundances.shape[0] != gt.abundances.shape[0]:
        raise DimensionError("pixel counts differ between result and ground truth")
    perm = match_endmembers(result.endmembers, gt.endmembers)
    sad_per = [
        sad_metric(gt.endmembers[i], result.endmembers[:, perm[i]])
        for i in range(gt.n_endmembers)
    ]
    rmse_per = [
        rmse_metric(gt.abundances[:, i], result.abundances[:, perm[i]])
        for i in range(gt.n_endmembers)
    ]
    if runtime_s is None:
        runtime_s = time.perf_counter() - t0
    return EvalReport(
        permutation=perm,
        sad_per_em=sad_per,
        rmse_per_em=rmse_per,
        sad_avg=float(np.mean(sad_per)),
        rmse_avg=float(np.mean(rmse_per)),
        runtime_s=float(runtime_s),
    )


# ---------------------------------------------------------------------------
# exporters


def export_abundance_maps(result, out_dir):
    """One binary PGM (P5, maxval 255) per endmember; pixel value is
    round-half-up of 255 x abundance. Returns the written paths."""
    import os

    paths = []
    for p in range(result.n_endmembers):
        plane = result.abundances[:, p].reshape(result.height, result.width)
        level = np.floor(plane * 255.0 + 0.5)
        bytes_ = np.clip(level, 0.0, 255.0).astype(np.uint8)
        path = os.path.join(out_dir, f"abundance_{p:02d}.pgm")
        with open(path, "wb") as fh:
            fh.write(f"P5\n{result.width} {result.height}\n255\n".encode("ascii"))
            fh.write(bytes_.tobytes())
        paths.append(path)
    return paths


def export_endmembers_csv(result, path):
    """One row per endmember, L comma-separated full-precision floats,
    no header (materials in column order of the estimate)."""
    with open(path, "w", encoding="ascii") as fh:
        for p in range(result.n_endmembers):
            fh.write(",".join(repr(float(v)) for v in result.endmembers[:, p]))
            fh.write("\n")


def export_report_json(report, path, extra=None):
    """Flat JSON object with the report fields; ``extra`` merges in
    provenance keys (config hash, seed) without touching the metric keys."""
    payload = report.to_dict()
    if extra:
        for key, value in extra.items():
            if key in payload:
                raise ConfigError(f"extra key {key!r} collides with a report field")
            payload[key] = value
    with open(path, "w", encoding="ascii") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
