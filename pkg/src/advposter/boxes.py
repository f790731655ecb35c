"""Bounding boxes and crop-region geometry shared by tracker, renderer and
evaluation. Boxes are normalized corner pairs in [0,1]^4 and carry which
frame of reference they live in: the full camera frame, or the search area
cropped around the previous target location."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FRAME_RELATIVE = "frame_relative"
SEARCH_RELATIVE = "search_relative"

_EPS = 1e-9


@dataclass
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    frame: str = FRAME_RELATIVE

    def __post_init__(self):
        if self.frame not in (FRAME_RELATIVE, SEARCH_RELATIVE):
            raise ValueError(f"unknown bbox frame {self.frame!r}")
        for v in (self.x_min, self.y_min, self.x_max, self.y_max):
            if not (-_EPS <= v <= 1.0 + _EPS):
                raise ValueError(f"bbox coordinate {v} outside [0,1]")
        if self.x_min > self.x_max + _EPS or self.y_min > self.y_max + _EPS:
            raise ValueError("bbox corners out of order")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)

    @classmethod
    def from_array(cls, a, frame: str = FRAME_RELATIVE) -> "BBox":
        a = np.clip(np.asarray(a, dtype=np.float64), 0.0, 1.0)
        x0, x1 = sorted((float(a[0]), float(a[2])))
        y0, y1 = sorted((float(a[1]), float(a[3])))
        return cls(x0, y0, x1, y1, frame=frame)


@dataclass
class CropRegion:
    """Frame-relative crop window: double the previous box's extent,
    centered on it. May extend past the frame; extraction zero-pads."""

    center_x: float
    center_y: float
    width: float
    height: float


def area_xyxy(b: np.ndarray) -> float:
    return float(max(b[2] - b[0], 0.0) * max(b[3] - b[1], 0.0))


def iou_xyxy(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two corner-format boxes; 0 when disjoint
    and 0 when both boxes are degenerate."""
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = area_xyxy(a) + area_xyxy(b) - inter
    if union <= 0.0:
        return 0.0
    return float(inter / union)


def crop_region_from_bbox(prev: BBox) -> CropRegion:
    """Region of twice the previous box's width and height around its
    center (the template / search-area window)."""
    if prev.frame != FRAME_RELATIVE:
        raise ValueError("crop region requires a frame-relative bbox")
    w, h = prev.width, prev.height
    if w <= 0.0 or h <= 0.0:
        raise ValueError("crop region requires a positive-area bbox")
    cx, cy = prev.center
    return CropRegion(cx, cy, 2.0 * w, 2.0 * h)


def bbox_to_frame(pred: BBox, region: CropRegion) -> BBox:
    """Map a search-relative box back into frame coordinates via the
    region's offset and scale, clipping to [0,1]."""
    x0 = region.center_x - 0.5 * region.width
    y0 = region.center_y - 0.5 * region.height
    arr = np.array([
        x0 + pred.x_min * region.width,
        y0 + pred.y_min * region.height,
        x0 + pred.x_max * region.width,
        y0 + pred.y_max * region.height,
    ])
    return BBox.from_array(arr, frame=FRAME_RELATIVE)


def bbox_to_search(gt: BBox, region: CropRegion) -> BBox:
    """Map a frame-relative box into the region's search coordinates,
    clipping to [0,1] (targets may partially leave the search area)."""
    x0 = region.center_x - 0.5 * region.width
    y0 = region.center_y - 0.5 * region.height
    arr = np.array([
        (gt.x_min - x0) / region.width,
        (gt.y_min - y0) / region.height,
        (gt.x_max - x0) / region.width,
        (gt.y_max - y0) / region.height,
    ])
    return BBox.from_array(arr, frame=SEARCH_RELATIVE)
