"""Gaussian-kernel maximum mean discrepancy between sample sets.

The estimator is the biased V-statistic with diagonal terms included:

    MMD(A, B) = sum_uv k(a_u, a_v) / n^2
              + sum_uv k(b_u, b_v) / m^2
              - 2 sum_uv k(a_u, b_v) / (n m)

with k(x, y) = exp(-||x - y||^2 / (2 sigma^2)). This form is non-negative up
to rounding; tiny negative values are clamped to 0 before reporting. The
analytic gradient with respect to both inputs, pairwise aggregation across
several sample sets, and MMD-distance ranking of candidate sets live here
too.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ShapeError, ValidationError
from .nn_core import as_matrix

MEDIAN_HEURISTIC_MAX_PAIRS = 1000


@dataclass(frozen=True)
class KernelConfig:
    """Gaussian kernel bandwidth, either fixed or resolved per call.

    With mode "median_heuristic" the bandwidth is recomputed from the pooled
    rows of the two inputs (seeded subsampling, so it is deterministic).
    """

    bandwidth: float = 1.0
    bandwidth_mode: str = "fixed"  # "fixed" | "median_heuristic"

    def __post_init__(self):
        if self.bandwidth_mode not in ("fixed", "median_heuristic"):
            raise ValidationError(f"unknown bandwidth_mode {self.bandwidth_mode!r}")
        if self.bandwidth_mode == "fixed" and not self.bandwidth > 0.0:
            raise ValidationError(f"bandwidth must be > 0, got {self.bandwidth}")


@dataclass(frozen=True)
class MmdEstimate:
    value: float
    n: int
    m: int
    bandwidth_used: float


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, clipped at 0 against rounding."""
    aa = np.sum(a * a, axis=1)[:, None]
    bb = np.sum(b * b, axis=1)[None, :]
    d2 = aa + bb - 2.0 * (a @ b.T)
    return np.maximum(d2, 0.0)


def gaussian_kernel(a, b, cfg: KernelConfig) -> float:
    """k(a, b) = exp(-||a - b||^2 / (2 sigma^2)) for two vectors."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"vectors have different dimensions: {a.shape[0]} vs {b.shape[0]}")
    if cfg.bandwidth_mode != "fixed":
        raise ValidationError("gaussian_kernel needs a config resolved to a fixed bandwidth")
    d2 = float(np.sum((a - b) ** 2))
    return float(np.exp(-d2 / (2.0 * cfg.bandwidth**2)))


def median_heuristic(features_pooled, rng_seed=0) -> float:
    """Bandwidth = median pairwise Euclidean distance of the pooled rows.

    All pairs are used when there are at most MEDIAN_HEURISTIC_MAX_PAIRS of
    them; otherwise that many distinct-index pairs are drawn with a seeded
    generator. A zero median falls back to 1.0.
    """
    x = as_matrix(features_pooled, "features_pooled")
    n = x.shape[0]
    if n < 2:
        raise ValidationError(f"median heuristic needs >= 2 rows, got {n}")
    total_pairs = n * (n - 1) // 2
    if total_pairs <= MEDIAN_HEURISTIC_MAX_PAIRS:
        iu, ju = np.triu_indices(n, k=1)
        d2 = np.sum((x[iu] - x[ju]) ** 2, axis=1)
    else:
        rng = np.random.default_rng(rng_seed)
        k = MEDIAN_HEURISTIC_MAX_PAIRS
        i = rng.integers(0, n, size=k)
        j = rng.integers(0, n, size=k)
        clash = i == j
        while np.any(clash):
            j[clash] = rng.integers(0, n, size=int(clash.sum()))
            clash = i == j
        d2 = np.sum((x[i] - x[j]) ** 2, axis=1)
    sigma = float(np.median(np.sqrt(d2)))
    return sigma if sigma > 0.0 else 1.0


def _resolve_bandwidth(a: np.ndarray, b: np.ndarray, cfg: KernelConfig) -> float:
    if cfg.bandwidth_mode == "fixed":
        return float(cfg.bandwidth)
    return median_heuristic(np.vstack([a, b]))


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = as_matrix(a, "A")
    b = as_matrix(b, "B")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValidationError("MMD inputs must be non-empty")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"column mismatch: A has {a.shape[1]}, B has {b.shape[1]}")
    return a, b


def mmd_biased(A, B, cfg: KernelConfig) -> MmdEstimate:
    """Biased V-statistic MMD between two sample sets (diagonal terms kept)."""
    a, b = _check_pair(A, B)
    sigma = _resolve_bandwidth(a, b, cfg)
    s2 = 2.0 * sigma * sigma
    k_aa = np.exp(-_sq_dists(a, a) / s2)
    k_bb = np.exp(-_sq_dists(b, b) / s2)
    k_ab = np.exp(-_sq_dists(a, b) / s2)
    value = float(k_aa.mean() + k_bb.mean() - 2.0 * k_ab.mean())
    return MmdEstimate(value=max(value, 0.0), n=a.shape[0], m=b.shape[0], bandwidth_used=sigma)


def mmd_gradient(A, B, cfg: KernelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Analytic d(MMD)/dA and d(MMD)/dB for the biased Gaussian estimator.

    For the Gaussian kernel, dk(x, y)/dx = -k(x, y) (x - y) / sigma^2; each
    double sum contributes twice per row by symmetry.
    """
    a, b = _check_pair(A, B)
    sigma = _resolve_bandwidth(a, b, cfg)
    s2 = 2.0 * sigma * sigma
    n, m = a.shape[0], b.shape[0]
    k_aa = np.exp(-_sq_dists(a, a) / s2)
    k_bb = np.exp(-_sq_dists(b, b) / s2)
    k_ab = np.exp(-_sq_dists(a, b) / s2)

    inv = 1.0 / (sigma * sigma)
    # sum_v k(x_u, x_v) (x_u - x_v) = rowsum(K) * x_u - K @ X
    def weighted_diff(k: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return k.sum(axis=1)[:, None] * x - k @ y

    grad_a = (-2.0 * inv / (n * n)) * weighted_diff(k_aa, a, a)
    grad_a += (2.0 * inv / (n * m)) * weighted_diff(k_ab, a, b)
    grad_b = (-2.0 * inv / (m * m)) * weighted_diff(k_bb, b, b)
    grad_b += (2.0 * inv / (n * m)) * weighted_diff(k_ab.T, b, a)
    return grad_a, grad_b


def pairwise_source_mmd(feature_sets: Sequence, cfg: KernelConfig) -> float:
    """Mean biased MMD over all unordered pairs of feature sets."""
    if len(feature_sets) < 2:
        raise ValidationError(f"pairwise MMD needs >= 2 feature sets, got {len(feature_sets)}")
    sets = [as_matrix(f, f"feature_sets[{i}]") for i, f in enumerate(feature_sets)]
    cols = {s.shape[1] for s in sets}
    if len(cols) > 1:
        raise ShapeError(f"feature sets disagree on column count: {sorted(cols)}")
    if cfg.bandwidth_mode == "median_heuristic":
        cfg = KernelConfig(bandwidth=median_heuristic(np.vstack(sets)))
    total = 0.0
    pairs = 0
    for i in range(len(sets)):
        for j in range(i + 1, len(sets)):
            total += mmd_biased(sets[i], sets[j], cfg).value
            pairs += 1
    return total / pairs


def source_target_mmd(source_features: Sequence, target_features, cfg: KernelConfig) -> float:
    """Biased MMD between the concatenation of all source rows and the target rows."""
    if len(source_features) == 0:
        raise ValidationError("source feature list is empty")
    sources = [as_matrix(f, f"source_features[{i}]") for i, f in enumerate(source_features)]
    target = as_matrix(target_features, "target_features")
    if target.shape[0] == 0:
        raise ValidationError("target features are empty")
    return mmd_biased(np.vstack(sources), target, cfg).value


def rank_sources_by_mmd(
    target_features,
    source_feature_sets: Mapping[str, np.ndarray],
    k: int,
    cfg: KernelConfig | None = None,
) -> list[str]:
    """Subject ids of the k sources closest to the target in MMD distance.

    Sorted ascending by distance, ties broken by ascending subject id, so the
    result does not depend on the mapping's iteration order. When no config
    is given, one median-heuristic bandwidth is resolved on the pooled rows
    of every input and shared across all comparisons.
    """
    target = as_matrix(target_features, "target_features")
    ids = sorted(source_feature_sets.keys())
    if k < 1 or k > len(ids):
        raise ValidationError(f"k must be in [1, {len(ids)}], got {k}")
    if cfg is None or cfg.bandwidth_mode == "median_heuristic":
        pooled = np.vstack([target] + [as_matrix(source_feature_sets[i], i) for i in ids])
        cfg = KernelConfig(bandwidth=median_heuristic(pooled))
    scored = [(mmd_biased(source_feature_sets[sid], target, cfg).value, sid) for sid in ids]
    scored.sort(key=lambda t: (t[0], t[1]))
    return [sid for _, sid in scored[:k]]
