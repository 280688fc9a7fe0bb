"""Synthetic referring-grounding scenes.

A scene holds 2-5 non-overlapping colored shapes and a query that singles
out exactly one of them. Shapes are described by a few numbers (kind, color,
center, circumradius, rotation and a kind-specific descriptor) from which the
target contour can be reproduced exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import anchor as anc
from . import geometry as geo
from .errors import DegenerateGeometry, InvalidArgument

FORMAT_VERSION = 1

KINDS = ("circle", "ellipse", "triangle", "rectangle", "star", "blob")
N_COLORS = 8
QUERY_TYPES = ("color", "kind", "size", "position")
SIZE_ARGS = ("largest", "smallest")
POSITION_ARGS = ("topmost", "bottommost", "leftmost", "rightmost")
SCENE_CELLS = (64, 64)
BLOB_HARMONICS = (2, 3, 4)
ROUND_SEGMENTS = 64

SHAPE_FEATURES = len(KINDS) + N_COLORS + 2 + 1 + 2 + 9
# where shape_features stores the center, mapped to [-1, 1]
SHAPE_CENTER = slice(len(KINDS) + N_COLORS, len(KINDS) + N_COLORS + 2)
QUERY_FEATURES = len(QUERY_TYPES) + N_COLORS + len(KINDS) + len(SIZE_ARGS) + len(POSITION_ARGS)


@dataclass(frozen=True)
class SynthConfig:
    min_shapes: int = 2
    max_shapes: int = 5
    min_scale: float = 0.08
    max_scale: float = 0.2
    gap: float = 0.02
    kinds: tuple = KINDS
    kind_weights: tuple = (1, 1, 1, 1, 1, 1)
    query_weights: tuple = (0.3, 0.3, 0.2, 0.2)
    size_margin: float = 1.3
    position_margin: float = 0.06
    start_margin: float = 0.12

    def __post_init__(self):
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise InvalidArgument("need 1 <= min_shapes <= max_shapes")
        if not 0 < self.min_scale <= self.max_scale < 0.5:
            raise InvalidArgument("scales must satisfy 0 < min <= max < 0.5")


@dataclass(frozen=True)
class Shape:
    kind: str
    center: tuple[float, float]
    scale: float
    rotation: float
    color_id: int
    params: tuple[float, ...] = ()

    def polygon(self) -> geo.Polygon:
        return shape_polygon(self)


@dataclass(frozen=True)
class Query:
    type: str
    arg: str | int

    def __post_init__(self):
        if self.type not in QUERY_TYPES:
            raise InvalidArgument(f"unknown query type {self.type!r}")


@dataclass
class SceneSample:
    scene_id: int
    shapes: tuple[Shape, ...]
    query: Query
    target_index: int
    gt_polygon: geo.Polygon
    gt_box: geo.Box = field(init=False)
    gt_center: tuple[float, float] = field(init=False)

    def __post_init__(self):
        self.gt_box = geo.Box.bounding(self.gt_polygon)
        self.gt_center = self.gt_box.center

    @property
    def target(self) -> Shape:
        return self.shapes[self.target_index]

    @property
    def difficulty(self) -> float:
        return geo.difficulty_degree(self.gt_polygon)


# -- shape geometry -------------------------------------------------------------

def _place(shape: Shape, theta: np.ndarray, radius: np.ndarray) -> np.ndarray:
    """Polar outline around the shape center; theta = 0 points up (smallest i)."""
    a = theta + shape.rotation
    return np.stack([shape.center[0] - radius * np.cos(a), shape.center[1] + radius * np.sin(a)], axis=1)


def _blob_radius(theta: np.ndarray, coefs: Sequence[float]) -> np.ndarray:
    r = np.ones_like(theta)
    for k, m in enumerate(BLOB_HARMONICS):
        r = r + coefs[2 * k] * np.cos(m * theta) + coefs[2 * k + 1] * np.sin(m * theta)
    return r


def shape_polygon(shape: Shape) -> geo.Polygon:
    """Contour of ``shape``; the circumradius equals ``shape.scale``."""
    s = shape.scale
    if shape.kind == "circle":
        theta = 2 * np.pi * np.arange(ROUND_SEGMENTS) / ROUND_SEGMENTS
        pts = _place(shape, theta, np.full(ROUND_SEGMENTS, s))
    elif shape.kind == "ellipse":
        (aspect,) = shape.params
        t = 2 * np.pi * np.arange(ROUND_SEGMENTS) / ROUND_SEGMENTS
        # major axis vertical before rotation
        di, dj = np.cos(t), aspect * np.sin(t)
        pts = _place(shape, np.arctan2(dj, di), s * np.hypot(di, dj))
    elif shape.kind == "triangle":
        theta = 2 * np.pi * np.arange(3) / 3
        pts = _place(shape, theta, np.full(3, s))
    elif shape.kind == "rectangle":
        (aspect,) = shape.params
        half = np.arctan(aspect)
        theta = np.array([-half, half, np.pi - half, np.pi + half])
        pts = _place(shape, theta, np.full(4, s))
    elif shape.kind == "star":
        k, inner = shape.params
        k = int(k)
        theta = np.pi * np.arange(2 * k) / k
        radius = np.where(np.arange(2 * k) % 2 == 0, s, s * inner)
        pts = _place(shape, theta, radius)
    elif shape.kind == "blob":
        theta = 2 * np.pi * np.arange(ROUND_SEGMENTS) / ROUND_SEGMENTS
        r = _blob_radius(theta, shape.params)
        pts = _place(shape, theta, s * r / r.max())
    else:
        raise InvalidArgument(f"unknown shape kind {shape.kind!r}")
    return geo.Polygon(pts)


def _start_is_stable(poly: geo.Polygon, margin: float) -> bool:
    """True when no vertex far along the contour from the start vertex nearly ties it for topmost.

    Near-ties would let tiny parameter changes move the first sampled vertex to a
    different part of the outline.
    """
    v = poly.canonical().vertices
    seg = np.linalg.norm(np.diff(np.vstack([v, v[:1]]), axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)[:-1]])
    total = seg.sum()
    far = np.minimum(arc, total - arc) > total / 8
    return not np.any(v[far, 0] < v[0, 0] + margin)


def _rotation(kind: str, params: tuple, rng: np.random.Generator) -> float:
    """Rotation inside a window where the topmost vertex stays the same corner."""
    if kind == "circle":
        return 0.0
    if kind == "triangle":
        period = 2 * np.pi / 3
        return float(rng.uniform(-0.4, 0.4) * period)
    if kind == "star":
        period = 2 * np.pi / int(params[0])
        return float(rng.uniform(-0.4, 0.4) * period)
    if kind == "rectangle":
        # edges are level at multiples of a quarter turn; stay strictly between
        half = np.arctan(params[0])
        return float(rng.uniform(0.1, 0.9) * (np.pi / 2) - half)
    return float(rng.uniform(-np.pi, np.pi))


def _kind_params(kind: str, rng: np.random.Generator) -> tuple:
    if kind in ("ellipse",):
        return (float(rng.uniform(0.45, 0.75)),)
    if kind == "rectangle":
        return (float(rng.uniform(0.5, 1.0)),)
    if kind == "star":
        return (int(rng.integers(4, 7)), float(rng.uniform(0.4, 0.6)))
    if kind == "blob":
        coefs = rng.normal(0.0, 1.0, 2 * len(BLOB_HARMONICS))
        amp = rng.uniform(0.15, 0.3)
        coefs = coefs / np.abs(coefs).sum() * amp
        return tuple(float(c) for c in coefs)
    return ()


def _random_shape(rng: np.random.Generator, cfg: SynthConfig, center, scale, color) -> Shape | None:
    p = np.asarray(cfg.kind_weights, dtype=float)
    kind = cfg.kinds[int(rng.choice(len(cfg.kinds), p=p / p.sum()))]
    for _ in range(20):
        params = _kind_params(kind, rng)
        shape = Shape(kind, center, scale, _rotation(kind, params, rng), color, params)
        if _start_is_stable(shape.polygon(), cfg.start_margin * scale):
            return shape
    return None


# -- queries ----------------------------------------------------------------------

def _area(shape: Shape) -> float:
    return shape.polygon().area


def query_matches(query: Query, shapes: Sequence[Shape], cfg: SynthConfig = SynthConfig()) -> list[int]:
    """Indices of the shapes a query refers to (superlatives honour the margins)."""
    if query.type == "color":
        return [k for k, s in enumerate(shapes) if s.color_id == query.arg]
    if query.type == "kind":
        return [k for k, s in enumerate(shapes) if s.kind == query.arg]
    if query.type == "size":
        areas = np.array([_area(s) for s in shapes])
        k = int(np.argmax(areas) if query.arg == "largest" else np.argmin(areas))
        others = np.delete(areas, k)
        if others.size == 0:
            return [k]
        ok = (areas[k] >= cfg.size_margin * others.max() if query.arg == "largest"
              else areas[k] * cfg.size_margin <= others.min())
        return [k] if ok else []
    axis, sign = {"topmost": (0, 1), "bottommost": (0, -1), "leftmost": (1, 1), "rightmost": (1, -1)}[query.arg]
    key = np.array([sign * s.center[axis] for s in shapes])
    k = int(np.argmin(key))
    others = np.delete(key, k)
    if others.size and others.min() - key[k] < cfg.position_margin:
        return []
    return [k]


def _candidate_queries(shapes: Sequence[Shape], target: int, cfg: SynthConfig) -> list[Query]:
    t = shapes[target]
    cands = [Query("color", t.color_id), Query("kind", t.kind)]
    cands += [Query("size", a) for a in SIZE_ARGS]
    cands += [Query("position", a) for a in POSITION_ARGS]
    return [q for q in cands if query_matches(q, shapes, cfg) == [target]]


# -- scenes -------------------------------------------------------------------------

def _random_layout(rng: np.random.Generator, cfg: SynthConfig) -> list[Shape]:
    n = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    shapes: list[Shape] = []
    for _ in range(200):
        if len(shapes) == n:
            break
        scale = float(rng.uniform(cfg.min_scale, cfg.max_scale))
        lo, hi = scale + cfg.gap / 2, 1.0 - scale - cfg.gap / 2
        center = (float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)))
        if any(np.hypot(center[0] - s.center[0], center[1] - s.center[1]) < scale + s.scale + cfg.gap
               for s in shapes):
            continue
        shape = _random_shape(rng, cfg, center, scale, int(rng.integers(N_COLORS)))
        if shape is not None:
            shapes.append(shape)
    return shapes


def generate_scene(scene_id: int, rng: np.random.Generator, cfg: SynthConfig = SynthConfig()) -> SceneSample:
    while True:
        shapes = _random_layout(rng, cfg)
        if len(shapes) < cfg.min_shapes:
            continue
        target = int(rng.integers(len(shapes)))
        cands = _candidate_queries(shapes, target, cfg)
        if not cands:
            continue
        w = np.array([cfg.query_weights[QUERY_TYPES.index(q.type)] for q in cands], dtype=float)
        query = cands[int(rng.choice(len(cands), p=w / w.sum()))]
        return SceneSample(scene_id, tuple(shapes), query, target, shapes[target].polygon())


def generate(seed: int, count: int, cfg: SynthConfig = SynthConfig(), start_id: int = 0) -> list[SceneSample]:
    """``count`` scenes; scene ``k`` depends only on ``(seed, start_id + k)``."""
    if count < 1:
        raise InvalidArgument(f"count must be >= 1, got {count}")
    out = []
    for k in range(start_id, start_id + count):
        out.append(generate_scene(k, np.random.default_rng([seed, k]), cfg))
    return out


# -- serialization ---------------------------------------------------------------

def sample_to_record(s: SceneSample) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "scene_id": s.scene_id,
        "shapes": [{"kind": sh.kind, "center": list(sh.center), "scale": sh.scale, "rotation": sh.rotation,
                    "color_id": sh.color_id, "params": list(sh.params)} for sh in s.shapes],
        "query": {"type": s.query.type, "arg": s.query.arg},
        "target_index": s.target_index,
        "gt_polygon": s.gt_polygon.vertices.ravel().tolist(),
        "gt_box": s.gt_box.to_array().tolist(),
        "gt_center": list(s.gt_center),
    }


def sample_from_record(rec: dict) -> SceneSample:
    version = rec.get("format_version")
    if version != FORMAT_VERSION:
        raise InvalidArgument(f"unsupported dataset format version {version!r}")
    shapes = []
    for d in rec["shapes"]:
        params = tuple(d["params"])
        if d["kind"] == "star":
            params = (int(params[0]), float(params[1]))
        shapes.append(Shape(d["kind"], tuple(d["center"]), d["scale"], d["rotation"], d["color_id"], params))
    q = rec["query"]
    return SceneSample(rec["scene_id"], tuple(shapes), Query(q["type"], q["arg"]), rec["target_index"],
                       geo.Polygon(np.asarray(rec["gt_polygon"]).reshape(-1, 2)))


def save_dataset(path, samples: Iterable[SceneSample]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_record(s), sort_keys=True, separators=(",", ":")) + "\n")
    return path


def load_dataset(path) -> list[SceneSample]:
    with open(path, encoding="utf-8") as fh:
        return [sample_from_record(json.loads(line)) for line in fh if line.strip()]


# -- condition features ---------------------------------------------------------

def _one_hot(k: int, n: int) -> np.ndarray:
    v = np.zeros(n)
    v[k] = 1.0
    return v


def shape_features(shape: Shape) -> np.ndarray:
    """Fixed-length numeric description of a shape (kind, color, pose, outline descriptor)."""
    desc = np.zeros(9)
    if shape.kind in ("ellipse", "rectangle"):
        desc[0] = shape.params[0]
    elif shape.kind == "star":
        desc[1] = shape.params[0] / 6.0
        desc[2] = shape.params[1]
    elif shape.kind == "blob":
        desc[3:9] = np.asarray(shape.params) * 4.0
    return np.concatenate([
        _one_hot(KINDS.index(shape.kind), len(KINDS)),
        _one_hot(shape.color_id, N_COLORS),
        2.0 * np.asarray(shape.center) - 1.0,
        [shape.scale * 10.0 - 1.4],
        [np.sin(shape.rotation), np.cos(shape.rotation)],
        desc,
    ])


def query_features(query: Query) -> np.ndarray:
    v = np.zeros(QUERY_FEATURES)
    v[QUERY_TYPES.index(query.type)] = 1.0
    off = len(QUERY_TYPES)
    if query.type == "color":
        v[off + int(query.arg)] = 1.0
    off += N_COLORS
    if query.type == "kind":
        v[off + KINDS.index(query.arg)] = 1.0
    off += len(KINDS)
    if query.type == "size":
        v[off + SIZE_ARGS.index(query.arg)] = 1.0
    off += len(SIZE_ARGS)
    if query.type == "position":
        v[off + POSITION_ARGS.index(query.arg)] = 1.0
    return v


def condition_features(sample: SceneSample) -> tuple[np.ndarray, np.ndarray]:
    """``(shape_feats (S, SHAPE_FEATURES), query_feat (QUERY_FEATURES,))`` in scene order."""
    return np.stack([shape_features(s) for s in sample.shapes]), query_features(sample.query)


def scene_raster(sample: SceneSample, resolution: tuple[int, int] = SCENE_CELLS) -> np.ndarray:
    """Per-cell color id (1 + color, 0 for background)."""
    out = np.zeros(resolution, dtype=np.int64)
    for s in sample.shapes:
        out[geo.rasterize(s.polygon(), resolution).astype(bool)] = 1 + s.color_id
    return out


# -- ground truth ----------------------------------------------------------------

SCENE_ANCHOR = anc.CenterAnchor((SCENE_CELLS[0] / 2, SCENE_CELLS[1] / 2), SCENE_CELLS)


@dataclass
class GroundTruthPack:
    vertex_vector: np.ndarray
    heatmap_target: np.ndarray
    angle_map_target: np.ndarray
    anchor: anc.CenterAnchor
    contour: np.ndarray


def gt_anchor(sample: SceneSample) -> anc.CenterAnchor:
    h, w = SCENE_CELLS
    return anc.CenterAnchor((sample.gt_center[0] * h, sample.gt_center[1] * w), SCENE_CELLS)


def gt_cell_anchor(sample: SceneSample) -> anc.CenterAnchor:
    """Center of the heatmap cell holding the ground-truth center (what a perfect peak decodes to)."""
    ci, cj = center_cell(sample, SCENE_CELLS)
    return anc.CenterAnchor((ci + 0.5, cj + 0.5), SCENE_CELLS)


def center_cell(sample: SceneSample, resolution: tuple[int, int] = anc.HEATMAP_RES) -> tuple[int, int]:
    h, w = resolution
    ci = min(int(sample.gt_center[0] * h), h - 1)
    cj = min(int(sample.gt_center[1] * w), w - 1)
    return ci, cj


def heatmap_target(sample: SceneSample, resolution: tuple[int, int] = anc.HEATMAP_RES) -> np.ndarray:
    h, w = resolution
    size = sample.gt_box.size
    return anc.gaussian_target(center_cell(sample, resolution), (size[0] * h, size[1] * w), resolution)


def to_vertex_vector(box: np.ndarray, contour: np.ndarray, anchor: anc.CenterAnchor) -> np.ndarray:
    """Normalize box corners and contour points (scene units) into the flat vertex layout."""
    cells = np.asarray(SCENE_CELLS, dtype=np.float64)
    pts = np.vstack([np.asarray(box, dtype=np.float64).reshape(2, 2), np.asarray(contour).reshape(-1, 2)])
    return anc.normalize(pts * cells, anchor).ravel()


def from_vertex_vector(v: np.ndarray, anchor: anc.CenterAnchor) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`to_vertex_vector`: ``(box (4,), contour (N, 2))`` in scene units."""
    cells = np.asarray(SCENE_CELLS, dtype=np.float64)
    pts = anc.denormalize(np.asarray(v, dtype=np.float64).reshape(-1, 2), anchor) / cells
    return pts[:2].ravel(), pts[2:]


def build_ground_truth(sample: SceneSample, n: int = geo.DEFAULT_N_VERTICES, anchor_source: str = "gt",
                       anchor: anc.CenterAnchor | None = None,
                       asl_grid: tuple[int, int] = geo.DEFAULT_ANGLE_GRID) -> GroundTruthPack:
    """Training targets for one sample.

    ``anchor_source`` is ``"gt"`` (box center), ``"gt_cell"`` (center of the
    heatmap cell holding the box center), ``"scene"`` (scene center, used when
    center anchoring is disabled) or ``"predicted"`` (``anchor`` must be given).
    """
    if n < 3:
        raise InvalidArgument(f"need N >= 3 contour points, got {n}")
    if anchor_source == "gt":
        anchor = gt_anchor(sample)
    elif anchor_source == "gt_cell":
        anchor = gt_cell_anchor(sample)
    elif anchor_source == "scene":
        anchor = SCENE_ANCHOR
    elif anchor_source == "predicted":
        if anchor is None:
            raise InvalidArgument("anchor_source='predicted' requires an anchor")
    else:
        raise InvalidArgument(f"unknown anchor source {anchor_source!r}")
    if sample.gt_polygon.area <= 0:
        raise DegenerateGeometry("target polygon has zero area")
    contour = geo.sample_contour_vertices(sample.gt_polygon, n).vertices
    vec = to_vertex_vector(sample.gt_box.to_array(), contour, anchor)
    return GroundTruthPack(vec, heatmap_target(sample), geo.angle_map(contour, asl_grid), anchor, contour)
