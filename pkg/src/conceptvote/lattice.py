"""Geometry of the image pixel grid and the coarser feature-cell grid.

Feature vectors live on a subsampled grid whose cell (0, 0) sits at
``offset`` pixels and whose cells are ``stride`` pixels apart.  ``map_up``
sends a cell to its pixel, ``map_down`` sends a pixel to its nearest cell,
and ``disk_neighborhood`` collects the cells within a pixel radius.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import BoundsError

# (x, y) integer coordinates on either grid.
Point = tuple[int, int]

# Default radius (pixels) for deciding that a concept activation is "near" a
# part center, and the wider radius used when fitting offset statistics for
# the voting model.
CONCEPT_MATCH_RADIUS_PX = 56.0
VOTING_TRAIN_RADIUS_PX = 120.0


@dataclass(frozen=True)
class LatticeSpec:
    """Dimensions of the pixel grid plus the stride/offset of the cell grid.

    The cell grid has ``floor((extent - offset) / stride) + 1`` cells per
    axis; cell (i, j) is centered at pixel (offset + stride*i,
    offset + stride*j).
    """

    image_width: int
    image_height: int
    stride: int = 16
    offset: int = 8

    def __post_init__(self):
        if self.image_width < 1 or self.image_height < 1:
            raise ValueError("image dimensions must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.offset < 0:
            raise ValueError("offset must be >= 0")
        if self.grid_width < 1 or self.grid_height < 1:
            raise ValueError("derived grid is empty; offset exceeds image")

    @property
    def grid_width(self) -> int:
        return (self.image_width - self.offset) // self.stride + 1

    @property
    def grid_height(self) -> int:
        return (self.image_height - self.offset) // self.stride + 1

    def contains_pixel(self, q: Point) -> bool:
        return 0 <= q[0] < self.image_width and 0 <= q[1] < self.image_height

    def contains_cell(self, p: Point) -> bool:
        return 0 <= p[0] < self.grid_width and 0 <= p[1] < self.grid_height

    def scaled(self, scale: float) -> "LatticeSpec":
        """Spec of the same scene resized by ``scale`` (stride/offset kept)."""
        if scale <= 0:
            raise ValueError("scale must be positive")
        return LatticeSpec(
            image_width=max(1, round(self.image_width * scale)),
            image_height=max(1, round(self.image_height * scale)),
            stride=self.stride,
            offset=self.offset,
        )


def map_up(p: Point, spec: LatticeSpec) -> Point:
    """Pixel position of cell ``p``."""
    if not spec.contains_cell(p):
        raise BoundsError(f"cell {p} outside {spec.grid_width}x{spec.grid_height} grid")
    return (spec.offset + spec.stride * p[0], spec.offset + spec.stride * p[1])


def _nearest_index(coord: int, spec: LatticeSpec, n_cells: int) -> int:
    # Round (coord - offset) / stride to the nearest integer, ties toward the
    # smaller index, using exact integer arithmetic.
    d = coord - spec.offset
    k = (2 * d + spec.stride - 1) // (2 * spec.stride)
    return min(max(k, 0), n_cells - 1)


def map_down(q: Point, spec: LatticeSpec) -> Point:
    """Cell whose pixel position is nearest to ``q`` (clamped into bounds)."""
    if not spec.contains_pixel(q):
        raise BoundsError(f"pixel {q} outside {spec.image_width}x{spec.image_height} image")
    return (
        _nearest_index(q[0], spec, spec.grid_width),
        _nearest_index(q[1], spec, spec.grid_height),
    )


def disk_neighborhood(q: Point, radius: float, spec: LatticeSpec) -> list[Point]:
    """Cells whose pixel position lies within ``radius`` pixels of ``q``.

    Returned in row-major order; may be empty for tiny radii between grid
    points.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    if not spec.contains_pixel(q):
        raise BoundsError(f"pixel {q} outside {spec.image_width}x{spec.image_height} image")
    x_lo = max(0, math.ceil((q[0] - radius - spec.offset) / spec.stride))
    x_hi = min(spec.grid_width - 1, math.floor((q[0] + radius - spec.offset) / spec.stride))
    y_lo = max(0, math.ceil((q[1] - radius - spec.offset) / spec.stride))
    y_hi = min(spec.grid_height - 1, math.floor((q[1] + radius - spec.offset) / spec.stride))
    r2 = radius * radius
    out = []
    for py in range(y_lo, y_hi + 1):
        cy = spec.offset + spec.stride * py
        for px in range(x_lo, x_hi + 1):
            cx = spec.offset + spec.stride * px
            if (cx - q[0]) ** 2 + (cy - q[1]) ** 2 <= r2:
                out.append((px, py))
    return out
