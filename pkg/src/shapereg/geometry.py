"""Landmark shapes, point clouds, feature sampling, rasterization and metrics.

Coordinates are image pixels with the origin at the top-left corner, x to the
right and y downward. Pixel (col, row) covers [col, col+1)×[row, row+1) and
its center sits at (col+0.5, row+0.5).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor

Slice = tuple[str, int, int]


@dataclass
class Shape:
    points: np.ndarray
    structure_slices: tuple[Slice, ...]
    spacing_mm: float = 1.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.structure_slices = tuple((str(n), int(a), int(b)) for n, a, b in self.structure_slices)
        validate_slices(self.structure_slices, len(self.points))
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ValueError(f"shape points must be L×2, got {self.points.shape}")
        if not self.spacing_mm > 0:
            raise ValueError("spacing_mm must be positive")

    @property
    def n_landmarks(self) -> int:
        return len(self.points)

    @property
    def names(self) -> list[str]:
        return [n for n, _, _ in self.structure_slices]

    def structure(self, name: str) -> np.ndarray:
        for n, a, b in self.structure_slices:
            if n == name:
                return self.points[a:b]
        raise KeyError(f"shape has no structure {name!r}")

    def with_points(self, points) -> "Shape":
        return Shape(np.asarray(points, dtype=np.float64).copy(), self.structure_slices, self.spacing_mm)

    def __eq__(self, other):
        return (
            isinstance(other, Shape)
            and self.structure_slices == other.structure_slices
            and self.spacing_mm == other.spacing_mm
            and np.array_equal(self.points, other.points)
        )


def validate_slices(slices: Sequence[Slice], n_points: int) -> None:
    pos = 0
    for name, a, b in slices:
        if a != pos:
            raise ValueError(f"structure {name!r} starts at {a}, expected {pos}")
        if b - a < 3:
            raise ValueError(f"structure {name!r} has {b - a} points; contours need at least 3")
        pos = b
    if pos != n_points:
        raise ValueError(f"structure slices cover {pos} of {n_points} points")


@dataclass
class PointCloud:
    coords: np.ndarray
    landmark_index: np.ndarray = field(default=None)

    @property
    def n_points(self) -> int:
        return len(self.coords)


GROUP = 5


def pick_initial_shape(train_shapes: Sequence[Shape], rng: np.random.Generator, exclude: int | None = None) -> Shape:
    """Uniformly draw a training shape other than ``exclude``."""
    n = len(train_shapes)
    if n < 2:
        raise ValueError("need at least two training shapes to pick an initial shape")
    if exclude is None:
        return train_shapes[int(rng.integers(n))]
    k = int(rng.integers(n - 1))
    return train_shapes[k + 1 if k >= exclude else k]


def expand_point_cloud(shape: Shape | np.ndarray, sigma: float, rng: np.random.Generator, image_size: int) -> PointCloud:
    """Each landmark followed by four jittered copies; row 5i is landmark i."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    pts = shape.points if isinstance(shape, Shape) else np.asarray(shape, dtype=np.float64)
    n = len(pts)
    offsets = rng.normal(0.0, sigma, size=(n, GROUP - 1, 2)) if sigma > 0 else np.zeros((n, GROUP - 1, 2))
    extras = pts[:, None, :] + offsets
    coords = np.concatenate([pts[:, None, :], extras], axis=1).reshape(n * GROUP, 2)
    hi = np.nextafter(float(image_size), 0.0)
    coords = np.clip(coords, 0.0, hi)
    return PointCloud(coords, np.arange(n) * GROUP)


def _feature_coords(coords: np.ndarray, fsize: int, image_size: int) -> tuple[np.ndarray, np.ndarray]:
    scale = fsize / image_size
    f = (coords + 0.5) * scale - 0.5
    inside = (f >= 0.0) & (f <= fsize - 1)
    return np.clip(f, 0.0, fsize - 1), inside


def bilinear_sample(fmap: Tensor, coords, image_size: int) -> Tensor:
    """Sample C×h×w features at P image-pixel coordinates -> P×C."""
    ctensor = coords if isinstance(coords, Tensor) else Tensor(coords)
    xy = ctensor.data
    if xy.ndim != 2 or xy.shape[1] != 2:
        raise ValueError(f"coords must be P×2, got {xy.shape}")
    if np.any(xy < 0) or np.any(xy >= image_size):
        raise ValueError(f"sampling coordinates outside [0, {image_size})")
    c, h, w = fmap.shape
    if h != w:
        raise ValueError("feature map must be square")
    f, inside = _feature_coords(xy, h, image_size)
    fx, fy = f[:, 0], f[:, 1]
    x0 = np.minimum(np.floor(fx).astype(int), w - 1)
    y0 = np.minimum(np.floor(fy).astype(int), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax, ay = fx - x0, fy - y0
    data = fmap.data
    v00, v01 = data[:, y0, x0].T, data[:, y0, x1].T
    v10, v11 = data[:, y1, x0].T, data[:, y1, x1].T
    w00 = (1 - ax) * (1 - ay)
    w01 = ax * (1 - ay)
    w10 = (1 - ax) * ay
    w11 = ax * ay
    out = w00[:, None] * v00 + w01[:, None] * v01 + w10[:, None] * v10 + w11[:, None] * v11
    scale = h / image_size

    def backward(g):
        gf = None
        if fmap.requires_grad:
            gf = np.zeros_like(data)
            for wt, yy, xx in ((w00, y0, x0), (w01, y0, x1), (w10, y1, x0), (w11, y1, x1)):
                np.add.at(gf, (slice(None), yy, xx), (g * wt[:, None]).T)
        gc = None
        if ctensor.requires_grad:
            dx = ((1 - ay)[:, None] * (v01 - v00) + ay[:, None] * (v11 - v10)) * g
            dy = ((1 - ax)[:, None] * (v10 - v00) + ax[:, None] * (v11 - v01)) * g
            gc = np.stack([dx.sum(axis=1), dy.sum(axis=1)], axis=1) * scale * inside
        return gf, gc

    return Tensor._make(out, (fmap, ctensor), backward)


# -- rasterization ----------------------------------------------------------
def _edge_crossings(poly: np.ndarray, yc: float) -> np.ndarray:
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    hit = (y0 > yc) != (y1 > yc)
    return x0[hit] + (yc - y0[hit]) * (x1[hit] - x0[hit]) / (y1[hit] - y0[hit])


def fill_polygon(poly: np.ndarray, size: int) -> np.ndarray:
    """Even-odd scanline fill, pixel set iff its center is inside the closed contour."""
    poly = np.asarray(poly, dtype=np.float64)
    if len(poly) < 3:
        raise ValueError(f"contour has {len(poly)} points; need at least 3")
    mask = np.zeros((size, size), dtype=bool)
    centers = np.arange(size) + 0.5
    lo = max(int(np.floor(poly[:, 1].min())) - 1, 0)
    hi = min(int(np.ceil(poly[:, 1].max())) + 1, size)
    for row in range(lo, hi):
        xs = np.sort(_edge_crossings(poly, row + 0.5))
        if xs.size == 0:
            continue
        above = xs.size - np.searchsorted(xs, centers, side="right")
        mask[row] = (above % 2) == 1
    return mask


def rasterize(shape: Shape, size: int) -> np.ndarray:
    """S×size×size boolean masks, one per structure."""
    return np.stack([fill_polygon(shape.points[a:b], size) for _, a, b in shape.structure_slices])


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


# -- distances --------------------------------------------------------------
def point_to_polyline(points: np.ndarray, contour: np.ndarray, closed: bool = True) -> np.ndarray:
    """Exact distance from each point to the nearest segment of ``contour``."""
    points = np.asarray(points, dtype=np.float64)
    a = np.asarray(contour, dtype=np.float64)
    b = np.roll(a, -1, axis=0) if closed else a[1:]
    a = a if closed else a[:-1]
    d = b - a
    len2 = (d**2).sum(axis=1)
    rel = points[:, None, :] - a[None, :, :]
    t = np.where(len2 > 0, (rel * d[None]).sum(axis=2) / np.where(len2 > 0, len2, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    proj = a[None] + t[..., None] * d[None]
    dist = np.sqrt(((points[:, None, :] - proj) ** 2).sum(axis=2))
    return dist.min(axis=1)


def asd(pred: Shape, gt: Shape, structure: str) -> float:
    """Symmetric landmark-to-contour average surface distance in mm."""
    p = pred.structure(structure)
    g = gt.structure(structure)
    forward = point_to_polyline(p, g).mean()
    backward = point_to_polyline(g, p).mean()
    return 0.5 * (forward + backward) * gt.spacing_mm


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Centers (x, y) of mask pixels with at least one 4-neighbor outside the mask."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    rows, cols = np.nonzero(m & ~interior)
    return np.stack([cols + 0.5, rows + 0.5], axis=1).astype(np.float64)


def asd_mask(mask: np.ndarray, gt: Shape, structure: str) -> float:
    """ASD between a predicted mask's boundary pixels and a landmark contour, in mm.

    An empty mask scores the image diagonal.
    """
    g = gt.structure(structure)
    pts = boundary_pixels(mask)
    if len(pts) == 0:
        return float(np.hypot(*mask.shape) * gt.spacing_mm)
    forward = point_to_polyline(pts, g).mean()
    backward = np.sqrt(((g[:, None, :] - pts[None]) ** 2).sum(axis=2)).min(axis=1).mean()
    return 0.5 * (forward + backward) * gt.spacing_mm


def mean_shape(train_shapes: Sequence[Shape]) -> Shape:
    if not train_shapes:
        raise ValueError("mean_shape needs at least one shape")
    ref = train_shapes[0]
    for s in train_shapes[1:]:
        if s.points.shape != ref.points.shape or s.structure_slices != ref.structure_slices:
            raise ValueError("training shapes disagree in landmark count or structure layout")
    pts = np.mean(np.stack([s.points for s in train_shapes]), axis=0)
    return ref.with_points(pts)
