"""Uncertain-point localization and per-point feature assembly.

Two selection strategies feed one pool:

* boundary: points of the pixels with the lowest top-2 probability margins,
  up to a fixed budget. Pixels are consumed in ascending margin order; only
  inside the margin stratum that crosses the budget is the choice made by
  seeded uniform sampling.
* background: points hidden behind their pixel's foreground point and far
  from it (range gap >= c_u). Near background points are trusted to share
  the foreground label and stay out of the pool.

Each pool entry carries a feature vector of length 5 + C: the point's own
(x, y, z, range, remission) concatenated with the mean class-probability
vector of its k range-nearest window neighbors (own pixel included).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._rand import generator
from .coarse import CoarseSegmentation, top2_margin
from .errors import DataFormatError
from .kitti_io import PointCloud, atomic_write_bytes
from .projection import RangeImage, background_distances, window_neighbors

REASON_BOUNDARY = 1
REASON_BACKGROUND = 2
REASON_BOTH = 3
REASON_NAMES = {REASON_BOUNDARY: "boundary", REASON_BACKGROUND: "background", REASON_BOTH: "both"}

GEOMETRY_FEATURES = 5

_AGG_CHUNK = 16384


@dataclass
class SelectionConfig:
    boundary_budget: int = 8192
    c_u: float = 1.0
    n_u: int = 4096
    agg_k: int = 5
    agg_window: int = 5
    seed: int = 0
    background_mode: str = "far"  # "near" selects the opposite side of the cutoff

    def __post_init__(self):
        if self.boundary_budget < 0:
            raise DataFormatError("boundary_budget must be >= 0")
        if self.c_u <= 0:
            raise DataFormatError("c_u must be > 0")
        if self.n_u < 1:
            raise DataFormatError("n_u must be >= 1")
        if self.agg_k < 1:
            raise DataFormatError("agg_k must be >= 1")
        if self.agg_window < 1 or self.agg_window % 2 == 0:
            raise DataFormatError("agg_window must be odd and >= 1")
        if self.background_mode not in ("far", "near"):
            raise DataFormatError("background_mode must be 'far' or 'near'")


@dataclass
class UncertainPointSet:
    """Selected points with provenance, features and their current labels."""

    indices: np.ndarray       # (M,) int64, unique, ascending
    reason: np.ndarray        # (M,) uint8, REASON_* codes
    features: np.ndarray      # (M, 5 + C) float64
    coarse_label: np.ndarray  # (M,) int32

    def __len__(self) -> int:
        return len(self.indices)


def aggregate_features(
    cloud: PointCloud,
    img: RangeImage,
    seg: CoarseSegmentation,
    cfg: SelectionConfig,
    indices: np.ndarray | None = None,
) -> np.ndarray:
    """Assemble (M, 5 + C) feature vectors for ``indices`` (default: all points).

    The class slice is the renormalized mean of the probability vectors of
    the agg_k window candidates nearest in |delta range| (the point's own
    pixel always being one of them).
    """
    if seg.probs.shape[:2] != (img.height, img.width):
        raise DataFormatError("segmentation shape does not match range image")
    if indices is None:
        indices = np.arange(img.num_points)
    else:
        indices = np.asarray(indices, dtype=np.int64)

    num_classes = seg.num_classes
    out = np.empty((len(indices), GEOMETRY_FEATURES + num_classes), dtype=np.float64)
    xyz = cloud.points[:, :3].astype(np.float64)
    out[:, 0:3] = xyz[indices]
    out[:, 3] = img.point_range[indices]
    out[:, 4] = cloud.points[indices, 3].astype(np.float64)

    for start in range(0, len(indices), _AGG_CHUNK):
        chunk = indices[start : start + _AGG_CHUNK]
        nb = window_neighbors(img, cfg.agg_window, chunk)
        k = min(cfg.agg_k, nb.delta_range.shape[1])
        order = np.argsort(nb.delta_range, axis=1, kind="stable")[:, :k]
        sel_valid = np.take_along_axis(nb.valid, order, axis=1)
        sel_v = np.take_along_axis(nb.v, order, axis=1)
        sel_u = np.take_along_axis(nb.u, order, axis=1)
        vectors = seg.probs[sel_v, sel_u]            # (m, k, C)
        weights = sel_valid.astype(np.float64)
        summed = (vectors * weights[:, :, None]).sum(axis=1)
        counts = weights.sum(axis=1)                 # >= 1: own pixel is always valid
        mean = summed / counts[:, None]
        mean /= mean.sum(axis=1)[:, None]
        out[start : start + _AGG_CHUNK, GEOMETRY_FEATURES:] = mean
    return out


def select_boundary(
    img: RangeImage, seg: CoarseSegmentation, cfg: SelectionConfig
) -> np.ndarray:
    """Point indices of the lowest-margin pixels, capped at the budget.

    Returns min(budget, N) indices ordered by (margin, point index); the
    stratum of equal margins crossing the budget is sampled with the
    configured seed.
    """
    n = img.num_points
    budget = min(cfg.boundary_budget, n)
    if budget == 0:
        return np.empty(0, dtype=np.int64)

    margin = top2_margin(seg)[img.point_v, img.point_u]
    order = np.lexsort((np.arange(n), margin))
    if budget == n:
        return order

    cut_value = margin[order[budget - 1]]
    below = order[margin[order] < cut_value]
    stratum = np.sort(order[margin[order] == cut_value])
    need = budget - len(below)
    if need == len(stratum):
        chosen = stratum
    else:
        rng = generator("boundary-stratum", cfg.seed)
        chosen = np.sort(rng.choice(stratum, size=need, replace=False))
    return np.concatenate([below, chosen])


def select_background(img: RangeImage, cfg: SelectionConfig) -> np.ndarray:
    """Background points on the configured side of the c_u range-gap cutoff."""
    distances = background_distances(img)
    background = ~img.is_foreground
    if cfg.background_mode == "far":
        mask = background & (distances >= cfg.c_u)
    else:
        mask = background & (distances < cfg.c_u)
    return np.flatnonzero(mask).astype(np.int64)


def build_pool(
    cloud: PointCloud,
    img: RangeImage,
    seg: CoarseSegmentation,
    cfg: SelectionConfig,
    point_labels: np.ndarray,
) -> UncertainPointSet:
    """Union both strategies, tag provenance and fill features and labels.

    ``point_labels`` are the current per-point labels (KNN-refined when that
    stage ran, plain back-projected otherwise).
    """
    point_labels = np.asarray(point_labels)
    if point_labels.shape != (img.num_points,):
        raise DataFormatError("point_labels must cover every point")

    boundary = select_boundary(img, seg, cfg)
    background = select_background(img, cfg)
    indices = np.union1d(boundary, background).astype(np.int64)

    reason = np.zeros(len(indices), dtype=np.uint8)
    reason[np.isin(indices, boundary)] |= REASON_BOUNDARY
    reason[np.isin(indices, background)] |= REASON_BACKGROUND

    features = aggregate_features(cloud, img, seg, cfg, indices=indices)
    return UncertainPointSet(
        indices=indices,
        reason=reason,
        features=features,
        coarse_label=point_labels[indices].astype(np.int32),
    )


def sample_positions(pool_size: int, n_u: int, seed: int) -> np.ndarray:
    """Ascending positions of a uniform no-replacement sample of the pool."""
    if pool_size == 0:
        raise DataFormatError("cannot sample from an empty pool")
    if pool_size <= n_u:
        return np.arange(pool_size)
    rng = generator("pool-sample", seed)
    return np.sort(rng.choice(pool_size, size=n_u, replace=False))


def sample_training_batch(pool: UncertainPointSet, n_u: int, seed: int) -> UncertainPointSet:
    """Uniform no-replacement sample of the pool (whole pool if smaller)."""
    pos = sample_positions(len(pool), n_u, seed)
    return UncertainPointSet(
        indices=pool.indices[pos],
        reason=pool.reason[pos],
        features=pool.features[pos],
        coarse_label=pool.coarse_label[pos],
    )


def write_pool_debug(
    pool: UncertainPointSet,
    img: RangeImage,
    seg: CoarseSegmentation,
    path,
) -> None:
    """Text dump: one line ``point_index reason margin distance`` per entry."""
    margin = top2_margin(seg)[img.point_v[pool.indices], img.point_u[pool.indices]]
    distance = background_distances(img)[pool.indices]
    lines = [
        f"{int(idx)} {REASON_NAMES[int(code)]} {m:.6f} {d:.6f}"
        for idx, code, m, d in zip(pool.indices, pool.reason, margin, distance)
    ]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("ascii"))
