"""Spherical projection of a point cloud onto a range image.

Each pixel keeps the five channels ``(x, y, z, range, remission)`` of its
foreground point, i.e. the projected point with the smallest range (ties
broken by lowest point index). Full point<->pixel bookkeeping is kept so
labels can be projected back and background structure inspected later.

Column/row mapping for a point with azimuth ``atan2(y, x)`` and elevation
``arcsin(z / range)``::

    u = floor(0.5 * (1 - azimuth / pi) * W)          clamped to [0, W-1]
    v = floor((1 - (elev - fov_down) / fov_span) * H) clamped to [0, H-1]

Azimuth is clamped, not wrapped, at the image edges; the same convention is
used by the pixel-window consumers downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DataFormatError
from .kitti_io import PointCloud, atomic_write_bytes

MIN_RANGE = 1e-6


@dataclass
class ProjectionConfig:
    width: int = 2048
    height: int = 64
    fov_up_deg: float = 3.0
    fov_down_deg: float = -25.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise DataFormatError("projection width and height must be >= 1")
        if not self.fov_up_deg > self.fov_down_deg:
            raise DataFormatError("fov_up must be greater than fov_down")


@dataclass
class RangeImage:
    """Projection result; immutable by convention once constructed."""

    channels: np.ndarray        # (H, W, 5) float64: x, y, z, range, remission
    valid_mask: np.ndarray      # (H, W) bool
    fg_point_index: np.ndarray  # (H, W) int64, -1 where no point projects
    point_u: np.ndarray         # (N,) int32 column per point
    point_v: np.ndarray         # (N,) int32 row per point
    point_range: np.ndarray     # (N,) float64
    is_foreground: np.ndarray   # (N,) bool

    @property
    def height(self) -> int:
        return self.channels.shape[0]

    @property
    def width(self) -> int:
        return self.channels.shape[1]

    @property
    def num_points(self) -> int:
        return len(self.point_u)

    @property
    def point_pixel(self) -> np.ndarray:
        """(N, 2) array of (u, v) per point."""
        return np.stack([self.point_u, self.point_v], axis=1)

    @property
    def range_channel(self) -> np.ndarray:
        return self.channels[:, :, 3]


def project(cloud: PointCloud, cfg: ProjectionConfig) -> RangeImage:
    """Project a cloud; deterministic, with min-range foreground per pixel."""
    n = len(cloud)
    if n == 0:
        raise DataFormatError("cannot project an empty cloud")

    xyz = cloud.points[:, :3].astype(np.float64)
    remission = cloud.points[:, 3].astype(np.float64)
    rng = np.sqrt((xyz * xyz).sum(axis=1))
    if (rng <= MIN_RANGE).any():
        bad = int(np.flatnonzero(rng <= MIN_RANGE)[0])
        raise DataFormatError(f"point {bad} is at the scanner origin (range <= {MIN_RANGE} m)")

    fov_up = math.radians(cfg.fov_up_deg)
    fov_down = math.radians(cfg.fov_down_deg)
    fov_span = fov_up - fov_down

    azimuth = np.arctan2(xyz[:, 1], xyz[:, 0])
    elevation = np.arcsin(np.clip(xyz[:, 2] / rng, -1.0, 1.0))

    u = np.floor(0.5 * (1.0 - azimuth / math.pi) * cfg.width).astype(np.int64)
    v = np.floor((1.0 - (elevation - fov_down) / fov_span) * cfg.height).astype(np.int64)
    np.clip(u, 0, cfg.width - 1, out=u)
    np.clip(v, 0, cfg.height - 1, out=v)

    # per-pixel foreground: sort by (pixel, range, index) and keep first of each pixel
    flat = v * cfg.width + u
    order = np.lexsort((np.arange(n), rng, flat))
    sorted_flat = flat[order]
    first = np.ones(n, dtype=bool)
    first[1:] = sorted_flat[1:] != sorted_flat[:-1]
    fg_points = order[first]

    channels = np.zeros((cfg.height, cfg.width, 5), dtype=np.float64)
    valid_mask = np.zeros((cfg.height, cfg.width), dtype=bool)
    fg_index = np.full((cfg.height, cfg.width), -1, dtype=np.int64)
    is_foreground = np.zeros(n, dtype=bool)

    fv, fu = v[fg_points], u[fg_points]
    channels[fv, fu, 0:3] = xyz[fg_points]
    channels[fv, fu, 3] = rng[fg_points]
    channels[fv, fu, 4] = remission[fg_points]
    valid_mask[fv, fu] = True
    fg_index[fv, fu] = fg_points
    is_foreground[fg_points] = True

    return RangeImage(
        channels=channels,
        valid_mask=valid_mask,
        fg_point_index=fg_index,
        point_u=u.astype(np.int32),
        point_v=v.astype(np.int32),
        point_range=rng,
        is_foreground=is_foreground,
    )


def background_distances(img: RangeImage) -> np.ndarray:
    """Per-point |range - pixel foreground range|; zero for foreground points."""
    fg_range = img.range_channel[img.point_v, img.point_u]
    return np.abs(img.point_range - fg_range)


def background_distance(img: RangeImage, point_index: int) -> float:
    """Distance of one background point behind its pixel's foreground point."""
    if img.is_foreground[point_index]:
        raise DataFormatError(f"point {point_index} is a foreground point")
    fg_range = img.range_channel[img.point_v[point_index], img.point_u[point_index]]
    return float(abs(img.point_range[point_index] - fg_range))


def back_project_labels(img: RangeImage, pixel_labels: np.ndarray) -> np.ndarray:
    """Every point inherits its pixel's label (the projection quantization)."""
    pixel_labels = np.asarray(pixel_labels)
    if pixel_labels.shape != (img.height, img.width):
        raise DataFormatError(
            f"pixel labels shape {pixel_labels.shape} does not match "
            f"image ({img.height}, {img.width})"
        )
    return pixel_labels[img.point_v, img.point_u]


class NeighborWindows(NamedTuple):
    """Foreground candidates in a pixel window, row-major window order."""

    valid: np.ndarray        # (M, K) bool
    delta_range: np.ndarray  # (M, K) float64, +inf where invalid
    fg_index: np.ndarray     # (M, K) int64, -1 where invalid
    v: np.ndarray            # (M, K) int32 clipped pixel row
    u: np.ndarray            # (M, K) int32 clipped pixel column


def window_neighbors(
    img: RangeImage, window: int, indices: np.ndarray | None = None
) -> NeighborWindows:
    """Gather per-point window candidates (no horizontal wrap-around).

    Candidates are the foreground points of valid pixels inside the
    ``window`` x ``window`` block centered on each query point's pixel.
    ``delta_range`` is |candidate range - query range|. Ranking ties on
    delta_range downstream resolve by this row-major window order.
    """
    if window < 1 or window % 2 == 0:
        raise DataFormatError(f"window must be odd and >= 1, got {window}")
    if indices is None:
        pu, pv, pr = img.point_u, img.point_v, img.point_range
    else:
        pu, pv, pr = img.point_u[indices], img.point_v[indices], img.point_range[indices]

    half = window // 2
    dv, du = np.meshgrid(
        np.arange(-half, half + 1), np.arange(-half, half + 1), indexing="ij"
    )
    dv = dv.ravel()[None, :]
    du = du.ravel()[None, :]

    vv = pv[:, None].astype(np.int64) + dv
    uu = pu[:, None].astype(np.int64) + du
    in_bounds = (vv >= 0) & (vv < img.height) & (uu >= 0) & (uu < img.width)
    vc = np.clip(vv, 0, img.height - 1).astype(np.int32)
    uc = np.clip(uu, 0, img.width - 1).astype(np.int32)

    valid = in_bounds & img.valid_mask[vc, uc]
    delta = np.abs(img.range_channel[vc, uc] - pr[:, None])
    delta[~valid] = np.inf
    fg = np.where(valid, img.fg_point_index[vc, uc], -1)
    return NeighborWindows(valid=valid, delta_range=delta, fg_index=fg, v=vc, u=uc)


def write_range_pgm(img: RangeImage, path) -> None:
    """Debug dump of the range channel as a 16-bit PGM (millimeter steps)."""
    mm = np.clip(np.round(img.range_channel * 1000.0), 0, 65535).astype(">u2")
    mm[~img.valid_mask] = 0
    header = f"P5\n{img.width} {img.height}\n65535\n".encode("ascii")
    atomic_write_bytes(path, header + mm.tobytes())
