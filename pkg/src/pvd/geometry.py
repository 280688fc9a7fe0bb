"""Polygon and mask geometry on the unit scene.

Points are ``(i, j)`` pairs with ``i`` the row (vertical) coordinate and ``j``
the column coordinate, both normalized to ``[0, 1]``. Orientation is measured
with ``(i, j)`` taken as ``(x, y)``: a polygon is counter-clockwise when its
shoelace area is positive, which is also counter-clockwise on screen.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateGeometry, InvalidArgument, UnsupportedTopology

EPS_DEG = 1e-9
MIN_RAY = 1e-6
DEFAULT_N_VERTICES = 36
DEFAULT_ANGLE_GRID = (64, 64)
HARD_DIFFICULTY = 0.2


def signed_area(vertices: np.ndarray) -> float:
    v = np.asarray(vertices, dtype=np.float64)
    i, j = v[:, 0], v[:, 1]
    return 0.5 * float(np.sum(i * np.roll(j, -1) - np.roll(i, -1) * j))


def perimeter_of(vertices: np.ndarray) -> float:
    v = np.asarray(vertices, dtype=np.float64)
    return float(np.linalg.norm(np.roll(v, -1, axis=0) - v, axis=1).sum())


class Polygon:
    """A simple polygon stored counter-clockwise.

    Construction validates the vertex list and flips clockwise input.
    """

    __slots__ = ("vertices",)

    def __init__(self, vertices):
        v = np.array(vertices, dtype=np.float64).reshape(-1, 2)
        if len(v) < 3:
            raise InvalidArgument(f"polygon needs at least 3 vertices, got {len(v)}")
        if not np.all(np.isfinite(v)):
            raise InvalidArgument("polygon vertices must be finite")
        seg = np.linalg.norm(np.roll(v, -1, axis=0) - v, axis=1)
        if seg.min() <= 1e-9:
            raise DegenerateGeometry("consecutive duplicate vertices")
        if signed_area(v) < 0:
            v = v[::-1].copy()
        self.vertices = v

    def __len__(self) -> int:
        return len(self.vertices)

    def __repr__(self) -> str:
        return f"Polygon(n={len(self)}, area={self.area:.4g})"

    @property
    def area(self) -> float:
        return abs(signed_area(self.vertices))

    @property
    def perimeter(self) -> float:
        return perimeter_of(self.vertices)

    def start_index(self) -> int:
        """Index of the topmost vertex (smallest i), ties broken by smallest j."""
        v = self.vertices
        return int(np.lexsort((v[:, 1], v[:, 0]))[0])

    def canonical(self) -> "Polygon":
        """Same polygon, vertex list rotated to begin at the start vertex."""
        return Polygon(np.roll(self.vertices, -self.start_index(), axis=0))


def as_vertices(polygon) -> np.ndarray:
    """Vertex array of a Polygon, or an unvalidated ``(n, 2)`` array-like."""
    if isinstance(polygon, Polygon):
        return polygon.vertices
    return np.asarray(polygon, dtype=np.float64).reshape(-1, 2)


@dataclass(frozen=True)
class Box:
    lt: tuple[float, float]
    rb: tuple[float, float]

    def __post_init__(self):
        if not (self.lt[0] < self.rb[0] and self.lt[1] < self.rb[1]):
            raise InvalidArgument(f"box corners must satisfy lt < rb, got {self.lt} {self.rb}")

    @classmethod
    def from_array(cls, a) -> "Box":
        a = [float(x) for x in np.asarray(a).ravel()]
        return cls((a[0], a[1]), (a[2], a[3]))

    @classmethod
    def bounding(cls, polygon) -> "Box":
        v = as_vertices(polygon)
        lo, hi = v.min(axis=0), v.max(axis=0)
        return cls((float(lo[0]), float(lo[1])), (float(hi[0]), float(hi[1])))

    @property
    def area(self) -> float:
        return (self.rb[0] - self.lt[0]) * (self.rb[1] - self.lt[1])

    @property
    def center(self) -> tuple[float, float]:
        return ((self.lt[0] + self.rb[0]) / 2, (self.lt[1] + self.rb[1]) / 2)

    @property
    def size(self) -> tuple[float, float]:
        return (self.rb[0] - self.lt[0], self.rb[1] - self.lt[1])

    def to_array(self) -> np.ndarray:
        return np.array([*self.lt, *self.rb], dtype=np.float64)


def sample_contour_vertices(polygon: Polygon, n: int = DEFAULT_N_VERTICES) -> Polygon:
    """Resample the contour with ``n`` points at equal arc-length spacing.

    Sampling starts at the topmost-leftmost vertex and walks counter-clockwise.
    """
    if n < 3:
        raise InvalidArgument(f"need n >= 3 samples, got {n}")
    v = polygon.canonical().vertices
    closed = np.vstack([v, v[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    total = seg.sum()
    if not total > 0:
        raise DegenerateGeometry("zero-perimeter polygon")
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    s = np.arange(n) * (total / n)
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    frac = (s - cum[k]) / seg[k]
    pts = closed[k] + frac[:, None] * (closed[k + 1] - closed[k])
    return Polygon(pts)


def _clamp_rays(u: np.ndarray) -> np.ndarray:
    norm = np.sqrt((u * u).sum(-1, keepdims=True))
    small = norm < MIN_RAY
    if not small.any():
        return u
    safe = np.where(norm > 0, norm, 1.0)
    direction = np.where(norm > 0, u / safe, np.array([1.0, 0.0]))
    return np.where(small, direction * MIN_RAY, u)


def _edge_angles(points: np.ndarray, vertices: np.ndarray, signed: bool) -> np.ndarray:
    u = _clamp_rays(vertices[None, :, :] - points[:, None, :])
    w = np.roll(u, -1, axis=1)
    cross = u[..., 0] * w[..., 1] - u[..., 1] * w[..., 0]
    dot = (u * w).sum(-1)
    if signed:
        return np.arctan2(cross, dot)
    return np.arctan2(np.abs(cross), dot)


def angle_sums(points, polygon, chunk: int = 8192) -> np.ndarray:
    """Unsigned angle sums in degrees for many points, clamped to (0, 360]."""
    v = as_vertices(polygon)
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    out = np.empty(len(p))
    for s in range(0, len(p), chunk):
        out[s:s + chunk] = np.degrees(_edge_angles(p[s:s + chunk], v, signed=False).sum(-1))
    return np.clip(out, EPS_DEG, 360.0)


def angle_sum(point, polygon) -> float:
    return float(angle_sums(np.asarray(point, dtype=np.float64)[None], polygon)[0])


def winding_angles(points, polygon, chunk: int = 8192) -> np.ndarray:
    """Signed angle sums in degrees; +-360 inside a simple polygon, 0 outside."""
    v = as_vertices(polygon)
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    out = np.empty(len(p))
    for s in range(0, len(p), chunk):
        out[s:s + chunk] = np.degrees(_edge_angles(p[s:s + chunk], v, signed=True).sum(-1))
    return out


def inside_by_angle_sum(points, polygon) -> np.ndarray:
    """Angle-summation point-in-polygon test, valid for any simple polygon."""
    return np.abs(winding_angles(points, polygon)) > 180.0


def cell_centers(resolution: tuple[int, int]) -> np.ndarray:
    """``(H*W, 2)`` array of cell-center points in row-major order."""
    h, w = resolution
    ii, jj = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    return np.stack([ii.ravel(), jj.ravel()], axis=1)


def angle_map(polygon, resolution: tuple[int, int] = DEFAULT_ANGLE_GRID) -> np.ndarray:
    h, w = resolution
    if h < 2 or w < 2:
        raise InvalidArgument(f"angle map resolution must be at least 2x2, got {resolution}")
    return angle_sums(cell_centers(resolution), polygon).reshape(h, w)


def rasterize(polygon, resolution: tuple[int, int]) -> np.ndarray:
    """Even-odd scanline fill; a cell is set iff its center lies inside."""
    v = as_vertices(polygon)
    h, w = resolution
    a, b = v, np.roll(v, -1, axis=0)
    xs = (np.arange(w) + 0.5) / w
    mask = np.zeros((h, w), dtype=np.uint8)
    lo = np.minimum(a[:, 0], b[:, 0]).min()
    hi = np.maximum(a[:, 0], b[:, 0]).max()
    r0 = max(int(np.floor(lo * h - 0.5)), 0)
    r1 = min(int(np.ceil(hi * h - 0.5)) + 1, h)
    for r in range(r0, r1):
        y = (r + 0.5) / h
        crosses = (a[:, 0] <= y) != (b[:, 0] <= y)
        if not crosses.any():
            continue
        ea, eb = a[crosses], b[crosses]
        t = (y - ea[:, 0]) / (eb[:, 0] - ea[:, 0])
        xj = np.sort(ea[:, 1] + t * (eb[:, 1] - ea[:, 1]))
        left = np.searchsorted(xj, xs, side="left")
        mask[r] = left % 2
    return mask


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise InvalidArgument(f"mask resolutions differ: {a.shape} vs {b.shape}")
    a, b = a.astype(bool), b.astype(bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def box_iou(a: Box, b: Box) -> float:
    di = min(a.rb[0], b.rb[0]) - max(a.lt[0], b.lt[0])
    dj = min(a.rb[1], b.rb[1]) - max(a.lt[1], b.lt[1])
    inter = max(di, 0.0) * max(dj, 0.0)
    return inter / (a.area + b.area - inter)


def difficulty_degree(polygon: Polygon) -> float:
    """Isoperimetric deficit ``1 - 4*pi*A/P**2``: 0 for a circle, larger when complex."""
    area = polygon.area
    if not area > 0:
        raise DegenerateGeometry("difficulty of a zero-area polygon")
    return 1.0 - 4.0 * np.pi * area / polygon.perimeter ** 2


# boundary edges of a foreground cell (r, c), counter-clockwise, with the
# neighbour offset that must be background for the edge to lie on the boundary
_CELL_EDGES = (
    ((0, 0), (1, 0), (0, -1)),
    ((1, 0), (1, 1), (1, 0)),
    ((1, 1), (0, 1), (0, 1)),
    ((0, 1), (0, 0), (-1, 0)),
)


def _merge_collinear(loop: np.ndarray) -> np.ndarray:
    prev = np.roll(loop, 1, axis=0)
    nxt = np.roll(loop, -1, axis=0)
    d1, d2 = loop - prev, nxt - loop
    cross = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    return loop[cross != 0]


def extract_contour(mask: np.ndarray) -> Polygon:
    """Trace the outer boundary of a single 4-connected foreground component.

    Boundary edges run along cell sides, so rasterizing the result at the same
    resolution gives back the mask (holes excepted).
    """
    m = np.asarray(mask).astype(bool)
    h, w = m.shape
    _, count = ndimage.label(m)
    if count == 0:
        raise UnsupportedTopology("empty mask")
    if count > 1:
        raise UnsupportedTopology(f"mask has {count} components, expected 1")
    padded = np.pad(m, 1)
    out: dict[tuple[int, int], list[tuple[int, int]]] = {}
    rows, cols = np.nonzero(m)
    for r, c in zip(rows.tolist(), cols.tolist()):
        for (s0, s1), (e0, e1), (dr, dc) in _CELL_EDGES:
            if not padded[r + dr + 1, c + dc + 1]:
                out.setdefault((r + s0, c + s1), []).append((r + e0, c + e1))
    if sum(len(e) for e in out.values()) < 4:
        raise UnsupportedTopology("too few boundary edges")

    loops = []
    while out:
        start = min(out)
        loop = [start]
        prev_dir = None
        cur = start
        while True:
            choices = out[cur]
            if len(choices) == 1 or prev_dir is None:
                nxt = choices[0]
            else:
                # at pinch points take the left-most turn to keep loops tight
                def turn(p):
                    d = (p[0] - cur[0], p[1] - cur[1])
                    return -(prev_dir[0] * d[1] - prev_dir[1] * d[0])
                nxt = min(choices, key=turn)
            choices.remove(nxt)
            if not choices:
                del out[cur]
            prev_dir = (nxt[0] - cur[0], nxt[1] - cur[1])
            cur = nxt
            if cur == start:
                break
            loop.append(cur)
        loops.append(np.array(loop, dtype=np.float64))
    outer = max(loops, key=lambda lp: signed_area(lp))
    outer = _merge_collinear(outer)
    outer = outer / np.array([h, w], dtype=np.float64)
    return Polygon(outer).canonical()


def regular_polygon(n: int, radius: float = 1.0, center=(0.0, 0.0), phase: float = 0.0) -> Polygon:
    ang = phase + 2 * np.pi * np.arange(n) / n
    pts = np.stack([center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang)], axis=1)
    return Polygon(pts)
