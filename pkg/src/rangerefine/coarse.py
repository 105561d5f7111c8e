"""Per-pixel class probabilities: loaded from a backbone export or synthesized.

The oracle path one-hot encodes the foreground ground truth, box-blurs it
over valid pixels to smear class boundaries, swaps the top-2 classes of a
seeded fraction of pixels, and finally applies a temperature power
transform. It reproduces the two error modes the refiner targets (blurred
boundaries, confident mistakes) with controllable strength.

File format for loaded probabilities: raw little-endian float32, row-major
(row, col, class), no header.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._rand import uniform01
from .errors import DataFormatError
from .projection import RangeImage

SUM_TOLERANCE = 1e-3


@dataclass
class CoarseSegmentation:
    probs: np.ndarray       # (H, W, C) float64, rows of valid pixels sum to 1
    source: str             # "loaded" | "oracle"
    valid_mask: np.ndarray  # (H, W) bool

    @property
    def num_classes(self) -> int:
        return self.probs.shape[2]

    @property
    def height(self) -> int:
        return self.probs.shape[0]

    @property
    def width(self) -> int:
        return self.probs.shape[1]


@dataclass
class OracleNoiseSpec:
    blur_radius: int = 2
    flip_rate: float = 0.05
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.blur_radius < 0:
            raise DataFormatError("blur_radius must be >= 0")
        if not 0.0 <= self.flip_rate < 1.0:
            raise DataFormatError("flip_rate must be in [0, 1)")
        if self.temperature <= 0:
            raise DataFormatError("temperature must be > 0")


def load_coarse(path, height: int, width: int, num_classes: int) -> CoarseSegmentation:
    """Load an H*W*C float32 probability dump; renormalizes near-1 sums."""
    path = Path(path)
    data = path.read_bytes()
    expected = height * width * num_classes * 4
    if len(data) != expected:
        raise DataFormatError(
            f"{path}: expected {expected} bytes for {height}x{width}x{num_classes}, got {len(data)}"
        )
    probs = np.frombuffer(data, dtype="<f4").astype(np.float64)
    probs = probs.reshape(height, width, num_classes)
    if not np.isfinite(probs).all():
        raise DataFormatError(f"{path}: non-finite probability values")
    if (probs < 0).any():
        raise DataFormatError(f"{path}: negative probability values")
    sums = probs.sum(axis=2)
    off = np.abs(sums - 1.0) > SUM_TOLERANCE
    if off.any():
        v, u = np.argwhere(off)[0]
        raise DataFormatError(
            f"{path}: pixel ({v}, {u}) sums to {sums[v, u]:.6f}, outside 1 +- {SUM_TOLERANCE}"
        )
    probs /= sums[:, :, None]
    return CoarseSegmentation(
        probs=probs,
        source="loaded",
        valid_mask=np.ones((height, width), dtype=bool),
    )


def _box_sum(arr: np.ndarray, radius: int) -> np.ndarray:
    """Sum over the (2r+1)^2 window clipped at image edges, per channel."""
    pad = np.zeros((arr.shape[0] + 1, arr.shape[1] + 1) + arr.shape[2:], dtype=np.float64)
    pad[1:, 1:] = arr
    sat = pad.cumsum(axis=0).cumsum(axis=1)
    h, w = arr.shape[0], arr.shape[1]
    r0 = np.clip(np.arange(h) - radius, 0, h)
    r1 = np.clip(np.arange(h) + radius + 1, 0, h)
    c0 = np.clip(np.arange(w) - radius, 0, w)
    c1 = np.clip(np.arange(w) + radius + 1, 0, w)
    return (
        sat[r1[:, None], c1[None, :]]
        - sat[r0[:, None], c1[None, :]]
        - sat[r1[:, None], c0[None, :]]
        + sat[r0[:, None], c0[None, :]]
    )


def oracle_coarse(
    img: RangeImage,
    gt_labels: np.ndarray,
    spec: OracleNoiseSpec,
    num_classes: int,
) -> CoarseSegmentation:
    """Synthesize backbone-like probabilities from ground truth plus noise."""
    gt_labels = np.asarray(gt_labels)
    if gt_labels.shape != (img.num_points,):
        raise DataFormatError(
            f"ground truth length {gt_labels.shape} does not match {img.num_points} points"
        )
    if len(gt_labels) and (gt_labels.min() < 0 or gt_labels.max() >= num_classes):
        raise DataFormatError("ground-truth labels outside 0..C-1")

    h, w = img.height, img.width
    valid = img.valid_mask
    probs = np.zeros((h, w, num_classes), dtype=np.float64)
    fv, fu = np.nonzero(valid)
    probs[fv, fu, gt_labels[img.fg_point_index[fv, fu]]] = 1.0

    if spec.blur_radius > 0:
        sums = _box_sum(probs * valid[:, :, None], spec.blur_radius)
        counts = _box_sum(valid.astype(np.float64), spec.blur_radius)
        blurred = np.zeros_like(probs)
        blurred[valid] = sums[valid] / counts[valid][:, None]
        probs = blurred
        probs[valid] /= probs[valid].sum(axis=1)[:, None]

    if spec.flip_rate > 0:
        draw = uniform01(spec.seed, "flip", np.arange(h)[:, None], np.arange(w)[None, :])
        flip = (draw < spec.flip_rate) & valid
        if flip.any():
            rows = probs[flip]
            sel = np.arange(len(rows))
            top = np.argmax(rows, axis=1)
            masked = rows.copy()
            masked[sel, top] = -np.inf
            runner = np.argmax(masked, axis=1)  # ties to the smallest class id
            rows[sel, top], rows[sel, runner] = (
                rows[sel, runner].copy(),
                rows[sel, top].copy(),
            )
            probs[flip] = rows

    if spec.temperature != 1.0:
        sharp = probs[valid] ** (1.0 / spec.temperature)
        probs[valid] = sharp / sharp.sum(axis=1)[:, None]

    probs[~valid] = 1.0 / num_classes
    return CoarseSegmentation(probs=probs, source="oracle", valid_mask=valid.copy())


def top2_margin(seg: CoarseSegmentation) -> np.ndarray:
    """Largest minus second-largest probability per pixel; +inf where invalid."""
    if seg.num_classes < 2:
        raise DataFormatError("top-2 margin needs at least 2 classes")
    part = np.partition(seg.probs, seg.num_classes - 2, axis=2)
    margin = part[:, :, -1] - part[:, :, -2]
    margin[~seg.valid_mask] = np.inf
    return margin
