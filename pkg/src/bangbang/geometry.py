"""Small planar geometry helpers: rectangles and half-plane polygon clipping."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Rectangle:
    """Axis-aligned open rectangle (x0, x1) x (y0, y1)."""

    x0: float
    x1: float
    y0: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError(f"degenerate rectangle {self}")

    @classmethod
    def unit(cls) -> "Rectangle":
        return cls(0.0, 1.0, 0.0, 1.0)

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def contains_closed(self, pts, tol: float = 1e-12) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        x, y = pts[..., 0], pts[..., 1]
        return ((x >= self.x0 - tol) & (x <= self.x1 + tol)
                & (y >= self.y0 - tol) & (y <= self.y1 + tol))

    def compactly_inside(self, other: "Rectangle") -> bool:
        """True if the closure of self lies in the open rectangle `other`."""
        return (self.x0 > other.x0 and self.x1 < other.x1
                and self.y0 > other.y0 and self.y1 < other.y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.x1, self.y0, self.y1)


def polygon_area(poly) -> float:
    """Signed shoelace area (positive for counterclockwise vertex order)."""
    p = np.asarray(poly, dtype=float)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_halfplane(poly, normal, offset):
    """Clip a convex polygon to {x : normal . x <= offset} (Sutherland-Hodgman, one edge)."""
    n = np.asarray(normal, dtype=float)
    out = []
    m = len(poly)
    for k in range(m):
        p = np.asarray(poly[k], dtype=float)
        q = np.asarray(poly[(k + 1) % m], dtype=float)
        dp = float(n @ p) - offset
        dq = float(n @ q) - offset
        if dp <= 0.0:
            out.append(p)
        if (dp < 0.0 < dq) or (dq < 0.0 < dp):
            s = dp / (dp - dq)
            out.append(p + s * (q - p))
    return out


def split_area(tri, normal, offset) -> tuple[float, float]:
    """Areas of a triangle on each side of the line normal . x = offset.

    Returns (area where normal . x <= offset, area where normal . x > offset).
    """
    tri = np.asarray(tri, dtype=float)
    total = abs(polygon_area(tri))
    below = abs(polygon_area(clip_halfplane(list(tri), normal, offset)))
    below = min(below, total)
    return below, total - below
