"""Spatial primitives: convex hulls of trace points, rasterization, IOU.

All coordinates are normalized to [0, 1] with x rightward and y downward
(image convention). Pixel (row, col) of a width x height grid has its
center at ((col + 0.5) / width, (row + 0.5) / height).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Polygon",
    "BinaryMask",
    "convex_hull",
    "rasterize",
    "iou",
    "centroid",
    "point_in_polygon",
]


@dataclass(frozen=True)
class Polygon:
    """Simple polygon as an ordered vertex list, counter-clockwise.

    Degenerate cases are allowed: a single vertex (point) or two vertices
    (segment), as produced by convex_hull on collinear input.
    """

    vertices: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.vertices) < 1:
            raise ValueError("polygon needs at least one vertex")

    @property
    def area(self) -> float:
        """Shoelace area; 0 for degenerate polygons."""
        if len(self.vertices) < 3:
            return 0.0
        v = np.asarray(self.vertices, dtype=float)
        x, y = v[:, 0], v[:, 1]
        return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


@dataclass
class BinaryMask:
    """Boolean pixel grid, optionally typed with a class and a source example."""

    width: int
    height: int
    bits: np.ndarray = field(repr=False)
    class_id: int | None = None
    source_id: str | None = None

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("mask dimensions must be positive")
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.shape != (self.height, self.width):
            raise ValueError(
                f"bits shape {self.bits.shape} != (height={self.height}, width={self.width})"
            )

    @property
    def count(self) -> int:
        return int(self.bits.sum())


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points) -> Polygon:
    """Minimal convex polygon containing all points (monotone chain).

    Collinear interior points are dropped, so collinear input yields the
    2-vertex extreme segment and a single point yields a 1-vertex polygon.
    """
    pts = sorted({(float(x), float(y)) for x, y in points})
    if not pts:
        raise ValueError("convex hull of empty point set")
    if len(pts) == 1:
        return Polygon((pts[0],))
    if len(pts) == 2:
        return Polygon(tuple(pts))

    lower: list[tuple[float, float]] = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[tuple[float, float]] = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    if len(hull) == 2 and hull[0] == hull[1]:
        hull = hull[:1]
    return Polygon(tuple(hull))


def point_in_polygon(point, polygon: Polygon, tol: float = 1e-9) -> bool:
    """True when the point lies inside or on the polygon (convex input)."""
    v = polygon.vertices
    px, py = float(point[0]), float(point[1])
    if len(v) == 1:
        return abs(px - v[0][0]) <= tol and abs(py - v[0][1]) <= tol
    if len(v) == 2:
        return _point_near_segment(px, py, v[0], v[1], tol)
    n = len(v)
    sign = 0
    for i in range(n):
        a, b = v[i], v[(i + 1) % n]
        c = _cross(a, b, (px, py))
        if c > tol:
            if sign < 0:
                return False
            sign = 1
        elif c < -tol:
            if sign > 0:
                return False
            sign = -1
    return True


def _point_near_segment(px, py, a, b, tol) -> bool:
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    L2 = dx * dx + dy * dy
    if L2 == 0:
        return abs(px - ax) <= tol and abs(py - ay) <= tol
    t = ((px - ax) * dx + (py - ay) * dy) / L2
    t = min(1.0, max(0.0, t))
    cx, cy = ax + t * dx, ay + t * dy
    return (px - cx) ** 2 + (py - cy) ** 2 <= tol * tol


def _clamp_pixel(x: float, y: float, width: int, height: int) -> tuple[int, int]:
    col = min(width - 1, max(0, int(x * width)))
    row = min(height - 1, max(0, int(y * height)))
    return row, col


def rasterize(polygon: Polygon, width: int, height: int,
              class_id: int | None = None, source_id: str | None = None) -> BinaryMask:
    """Set every pixel whose center lies inside or on the polygon.

    Degenerate polygons cover the pixels they pass through (thickness 1):
    a 1-vertex polygon sets exactly one pixel, a 2-vertex polygon a line.
    """
    if width <= 0 or height <= 0:
        raise ValueError("raster dimensions must be positive")
    v = polygon.vertices
    bits = np.zeros((height, width), dtype=bool)

    if len(v) == 1:
        r, c = _clamp_pixel(v[0][0], v[0][1], width, height)
        bits[r, c] = True
        return BinaryMask(width, height, bits, class_id, source_id)

    if len(v) == 2:
        (x0, y0), (x1, y1) = v
        steps = max(1, int(2 * max(abs(x1 - x0) * width, abs(y1 - y0) * height)) + 1)
        for t in np.linspace(0.0, 1.0, steps + 1):
            r, c = _clamp_pixel(x0 + t * (x1 - x0), y0 + t * (y1 - y0), width, height)
            bits[r, c] = True
        return BinaryMask(width, height, bits, class_id, source_id)

    # Half-plane test against every edge, vectorized over pixel centers.
    # On-edge pixel centers count as inside (tolerance absorbs FP noise).
    xs = (np.arange(width, dtype=float) + 0.5) / width
    ys = (np.arange(height, dtype=float) + 0.5) / height
    X, Y = np.meshgrid(xs, ys)
    verts = np.asarray(v, dtype=float)
    # Winding of hull output is consistent; detect it from the signed area.
    area2 = 0.0
    for i in range(len(verts)):
        a, b = verts[i], verts[(i + 1) % len(verts)]
        area2 += a[0] * b[1] - b[0] * a[1]
    orient = 1.0 if area2 >= 0 else -1.0
    inside = np.ones((height, width), dtype=bool)
    eps = 1e-12
    for i in range(len(verts)):
        a, b = verts[i], verts[(i + 1) % len(verts)]
        cross = (b[0] - a[0]) * (Y - a[1]) - (b[1] - a[1]) * (X - a[0])
        inside &= orient * cross >= -eps
        if not inside.any():
            break
    bits = inside
    return BinaryMask(width, height, bits, class_id, source_id)


def iou(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over union of two equal-size masks; 0 when both empty."""
    if (a.width, a.height) != (b.width, b.height):
        raise ValueError(
            f"mask dimensions differ: {(a.width, a.height)} vs {(b.width, b.height)}"
        )
    inter = int(np.logical_and(a.bits, b.bits).sum())
    union = int(np.logical_or(a.bits, b.bits).sum())
    if union == 0:
        return 0.0
    return inter / union


def centroid(mask: BinaryMask) -> tuple[float, float]:
    """Mean of set-pixel centers in normalized coordinates."""
    rows, cols = np.nonzero(mask.bits)
    if rows.size == 0:
        raise ValueError("centroid of empty mask")
    x = float(np.mean((cols + 0.5) / mask.width))
    y = float(np.mean((rows + 0.5) / mask.height))
    return x, y
