"""CAM-guided greedy patch selection with pairwise IoU suppression.

Locations of the class activation map are visited in descending activation
order; a location's patch is kept iff its IoU with every previously kept
patch is strictly below the threshold, until the patch budget is reached.
This is the non-maximum-suppression idea applied to proposal windows: the
kept patches are both important and spatially spread out.

Ties in activation break in row-major grid order (smaller row, then smaller
column first), making selection fully deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rf import PatchBox, RfState, map_location, num_locations
from .tensor import Tensor


@dataclass(frozen=True)
class Cam:
    """Single-class spatial activation map over the feature grid."""

    values: np.ndarray
    class_id: int

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValueError(f"cam values must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("cam values must be finite")


@dataclass(frozen=True)
class SelectionConfig:
    """IoU threshold and patch budget (the budget excludes the resized image)."""

    iou_threshold: float = 0.3
    max_patches: int = 4

    def __post_init__(self):
        if not 0.0 <= self.iou_threshold <= 1.0:
            raise ValueError("iou_threshold must lie in [0, 1]")
        if self.max_patches < 1:
            raise ValueError("max_patches must be >= 1")


def iou(a: PatchBox, b: PatchBox) -> float:
    """Pixel-count intersection over union of two integer rectangles."""
    ih = min(a.bottom, b.bottom) - max(a.top, b.top)
    iw = min(a.right, b.right) - max(a.left, b.left)
    inter = max(0, ih) * max(0, iw)
    union = a.area + b.area - inter
    return inter / union


def select_patches(
    cam: Cam,
    rf_state: RfState,
    input_size: tuple[int, int],
    cfg: SelectionConfig,
) -> list[tuple[PatchBox, float]]:
    """Greedy IoU-suppressed selection over CAM locations.

    Returns (box, activation) pairs in non-increasing activation order; the
    first box always maps the CAM argmax.  Every returned box has IoU
    strictly below the threshold with each earlier one, so a threshold of 0
    admits only the argmax patch.
    """
    values = np.asarray(cam.values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty CAM")
    rows, cols = num_locations(rf_state, input_size)
    if values.shape != (rows, cols):
        raise ValueError(
            f"cam shape {values.shape} does not match the {rows}x{cols} location grid"
        )

    flat = values.ravel()
    # Stable sort on negated values: equal activations keep row-major order.
    order = np.argsort(-flat, kind="stable")
    kept: list[tuple[PatchBox, float]] = []
    for idx in order:
        loc = (int(idx) // cols, int(idx) % cols)
        box = map_location(rf_state, loc, input_size)
        if all(iou(box, prev) < cfg.iou_threshold for prev, _ in kept):
            kept.append((box, float(flat[idx])))
            if len(kept) >= cfg.max_patches:
                break
    return kept


def extract_patch(image: Tensor, box: PatchBox) -> Tensor:
    """Exact pixel crop of `box` from a (B, C, H, W) or (C, H, W) image."""
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    squeeze = data.ndim == 3
    if squeeze:
        data = data[None]
    if data.ndim != 4:
        raise ValueError(f"extract_patch expects an image tensor, got shape {data.shape}")
    h, w = data.shape[2], data.shape[3]
    if box.bottom > h or box.right > w:
        raise ValueError(f"box {box} exceeds image bounds {h}x{w}")
    crop = data[:, :, box.top : box.bottom, box.left : box.right].copy()
    return Tensor(crop[0] if squeeze else crop)
