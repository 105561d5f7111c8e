"""Windowed KNN vote over range-image neighbors, RangeNet++ style.

For every point the candidates are the foreground points of valid pixels in
the window around its own pixel. The k candidates nearest in |delta range|
(ties by row-major window order) vote for their pixel's label, weighted by a
Gaussian of the range difference; candidates farther than the range cutoff
are dropped. A point with no surviving candidate keeps its back-projected
label. Vote ties resolve to the smaller class id.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError
from .projection import RangeImage, back_project_labels, window_neighbors


@dataclass
class KnnConfig:
    k: int = 5
    window: int = 5
    sigma: float = 1.0
    range_cutoff: float = 1.0
    weighted: bool = True  # unweighted voting kept for ablation

    def __post_init__(self):
        if self.k < 1:
            raise DataFormatError("k must be >= 1")
        if self.window < 1 or self.window % 2 == 0:
            raise DataFormatError("window must be odd and >= 1")
        if self.sigma <= 0:
            raise DataFormatError("sigma must be > 0")
        if self.range_cutoff <= 0:
            raise DataFormatError("range_cutoff must be > 0")


def knn_refine(
    img: RangeImage, pixel_labels: np.ndarray, cfg: KnnConfig
) -> np.ndarray:
    """Refine per-point labels from per-pixel labels; returns (N,) class ids."""
    base = back_project_labels(img, pixel_labels)
    num_classes = int(pixel_labels.max()) + 1 if pixel_labels.size else 1

    nb = window_neighbors(img, cfg.window)
    k = min(cfg.k, nb.delta_range.shape[1])
    order = np.argsort(nb.delta_range, axis=1, kind="stable")[:, :k]

    delta = np.take_along_axis(nb.delta_range, order, axis=1)
    cand_v = np.take_along_axis(nb.v, order, axis=1)
    cand_u = np.take_along_axis(nb.u, order, axis=1)
    cand_labels = np.asarray(pixel_labels)[cand_v, cand_u]

    keep = np.isfinite(delta) & (delta <= cfg.range_cutoff)
    if cfg.weighted:
        weights = np.exp(-(delta * delta) / (2.0 * cfg.sigma * cfg.sigma))
    else:
        weights = np.ones_like(delta)
    weights = np.where(keep, weights, 0.0)

    n = len(base)
    votes = np.zeros((n, num_classes), dtype=np.float64)
    rows = np.broadcast_to(np.arange(n)[:, None], cand_labels.shape)
    np.add.at(votes, (rows, np.where(keep, cand_labels, 0)), weights)

    refined = np.argmax(votes, axis=1).astype(base.dtype)
    has_vote = keep.any(axis=1)
    return np.where(has_vote, refined, base)
