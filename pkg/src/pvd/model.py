"""Condition encoder, center heatmap head and the vertex denoiser.

Condition tokens are built from symbolic scene descriptions: one token per
shape plus a query token, mixed by a small self-attention encoder. The
heatmap head scores every cell of the color raster against the fused query
token. The denoiser refines all vertex coordinates in parallel with
self-attention over point tokens and cross-attention to the condition tokens,
which also include an embedding of the anchor point.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import data as D
from . import diffusion as dif
from . import layers as nn
from .anchor import HEATMAP_RES, CenterAnchor
from .autograd import Tensor
from .errors import InvalidArgument
from .params import ParamStore

N_RASTER_IDS = 1 + D.N_COLORS
HEAT_POS_FREQS = (1, 2, 4, 8, 16)
HEAT_BIAS_INIT = -4.6
POINTER_GAIN_INIT = 6.0
POINTER_WIDTH = 1.0   # cells


@dataclass(frozen=True)
class ModelConfig:
    n_vertices: int = 36
    d: int = 128
    n_blocks: int = 4
    n_heads: int = 4
    fusion_layers: int = 2
    mlp_ratio: int = 4
    heat_hidden: int = 64
    max_T: int = dif.T_TRAIN
    b: float = 1.0
    coord_scale: float = 64.0

    def __post_init__(self):
        if self.n_vertices < 3:
            raise InvalidArgument("n_vertices must be >= 3")
        if self.d % self.n_heads or self.d % 4:
            raise InvalidArgument(f"d={self.d} must be divisible by n_heads and by 4")
        if self.n_blocks < 1:
            raise InvalidArgument("n_blocks must be >= 1")

    @property
    def n_points(self) -> int:
        return 2 + self.n_vertices

    @property
    def dim(self) -> int:
        return 4 + 2 * self.n_vertices

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ConditionBatch:
    shape_feats: np.ndarray   # (B, S, SHAPE_FEATURES), zero padded
    shape_mask: np.ndarray    # (B, S) bool
    query_feats: np.ndarray   # (B, QUERY_FEATURES)
    raster: np.ndarray        # (B, H*W) color ids

    def __len__(self) -> int:
        return len(self.query_feats)

    def take(self, idx) -> "ConditionBatch":
        return ConditionBatch(self.shape_feats[idx], self.shape_mask[idx], self.query_feats[idx], self.raster[idx])


def collate_condition(samples: Sequence[D.SceneSample], rasters: Sequence[np.ndarray] | None = None,
                      dtype=np.float32) -> ConditionBatch:
    b = len(samples)
    s_max = max(len(s.shapes) for s in samples)
    feats = np.zeros((b, s_max, D.SHAPE_FEATURES), dtype=dtype)
    mask = np.zeros((b, s_max), dtype=bool)
    query = np.zeros((b, D.QUERY_FEATURES), dtype=dtype)
    for k, s in enumerate(samples):
        sf, qf = D.condition_features(s)
        feats[k, :len(sf)] = sf
        mask[k, :len(sf)] = True
        query[k] = qf
    if rasters is None:
        rasters = [D.scene_raster(s, HEATMAP_RES) for s in samples]
    raster = np.stack([np.asarray(r).reshape(-1) for r in rasters])
    return ConditionBatch(feats, mask, query, raster)


def coord_features(points: np.ndarray, d: int) -> np.ndarray:
    """Sinusoidal encoding of 2-D points (cell units): d/2 channels per axis."""
    k = d // 4
    enc = nn.sinusoid(points, k, base=1e4, scale=2 * math.pi)  # (..., 2, d/2)
    return enc.reshape(*enc.shape[:-2], d)


def time_features(t: np.ndarray, d: int) -> np.ndarray:
    return nn.sinusoid(np.asarray(t, dtype=np.float64), d // 2)


def _cell_centers(resolution: tuple[int, int]) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(resolution[0]) + 0.5, np.arange(resolution[1]) + 0.5, indexing="ij")
    return np.stack([ii.ravel(), jj.ravel()], axis=1)


def _heat_position_features(resolution: tuple[int, int]) -> np.ndarray:
    h, w = resolution
    ii, jj = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    pos = np.stack([ii.ravel(), jj.ravel()], axis=1)
    feats = [2 * pos - 1]
    for f in HEAT_POS_FREQS:
        feats += [np.sin(2 * np.pi * f * pos), np.cos(2 * np.pi * f * pos)]
    return np.concatenate(feats, axis=1)


def init_condition_encoder(p: ParamStore, c) -> None:
    """Shape/query token embeddings and the fusion encoder; ``c`` needs d, n_heads, fusion_layers, mlp_ratio."""
    nn.init_linear(p, "cond.shape", D.SHAPE_FEATURES, c.d)
    nn.init_linear(p, "cond.shape_pos", c.d, c.d, bias=False)
    nn.init_linear(p, "cond.query", D.QUERY_FEATURES, c.d)
    for l in range(c.fusion_layers):
        nn.init_attention(p, f"fuse.{l}.attn", c.d, c.n_heads)
        nn.init_mlp(p, f"fuse.{l}.mlp", c.d, c.d * c.mlp_ratio)


def encode_condition(p: ParamStore, c, cond: ConditionBatch, dtype) -> tuple[Tensor, np.ndarray]:
    """Order-free self-attention over one token per shape plus the query token (placed first)."""
    shapes = nn.linear(p, "cond.shape", Tensor(cond.shape_feats.astype(dtype)))
    # centers again as sinusoids in cell units, the same encoding the anchor token and heatmap use
    centers = (cond.shape_feats[..., D.SHAPE_CENTER].astype(np.float64) + 1.0) / 2.0 * np.array(D.SCENE_CELLS)
    shapes = shapes + Tensor(coord_features(centers, c.d).astype(dtype)) @ p["cond.shape_pos.w"]
    query = nn.linear(p, "cond.query", Tensor(cond.query_feats.astype(dtype)))
    b = len(cond)
    h = ag.concat([query.reshape(b, 1, c.d), shapes], axis=1)
    mask = np.concatenate([np.ones((b, 1), dtype=bool), cond.shape_mask], axis=1)
    for l in range(c.fusion_layers):
        z = ag.layer_norm(h)
        h = h + nn.attention(p, f"fuse.{l}.attn", z, z, c.n_heads, key_mask=mask)
        h = h + nn.mlp(p, f"fuse.{l}.mlp", ag.layer_norm(h))
    return ag.layer_norm(h), mask


class PVDModel:
    """All trainable parts of the parallel vertex generator."""

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float32,
                 params: ParamStore | None = None):
        self.config = config
        self.dtype = np.dtype(dtype)
        self._heat_pos = _heat_position_features(HEATMAP_RES).astype(self.dtype)
        self._cells = _cell_centers(HEATMAP_RES).astype(self.dtype)
        if params is not None:
            self.params = params
            return
        c = config
        p = self.params = ParamStore(seed=seed, dtype=dtype)
        d, hid = c.d, c.d * c.mlp_ratio
        init_condition_encoder(p, c)
        nn.init_linear(p, "cond.anchor", d, d)
        hh = c.heat_hidden
        p.uniform("heat.color", (N_RASTER_IDS, hh), 1.0)
        nn.init_linear(p, "heat.pos", self._heat_pos.shape[1], hh, bias=False)
        nn.init_linear(p, "heat.query", d, hh)
        nn.init_linear(p, "heat.fc2", hh, hh)
        nn.init_linear(p, "heat.out", hh, 1, bias_value=HEAT_BIAS_INIT)
        nn.init_linear(p, "heat.pick.q", d, d)
        nn.init_linear(p, "heat.pick.k", d, d)
        nn.init_linear(p, "heat.shift", d, 2, zero=True)
        p.add("heat.gain", np.array(POINTER_GAIN_INIT), decay=False)
        nn.init_linear(p, "den.embed", d, d)
        p.uniform("den.slot", (c.n_points, d), 0.5)
        nn.init_linear(p, "den.time.fc1", d, d)
        nn.init_linear(p, "den.time.fc2", d, d)
        for l in range(c.n_blocks):
            nn.init_attention(p, f"den.{l}.self", d, c.n_heads)
            nn.init_attention(p, f"den.{l}.cross", d, c.n_heads)
            nn.init_mlp(p, f"den.{l}.mlp", d, hid)
            nn.init_linear(p, f"den.{l}.film", d, 2 * d, zero=True)
        # zero head plus a per-coordinate offset: the first prediction is the anchor itself
        nn.init_linear(p, "den.head", d, 2, zero=True, bias_value=0.5)
        p.zeros("den.offset", (c.n_points, 2), decay=False)

    # -- condition ------------------------------------------------------------

    def encode(self, cond: ConditionBatch) -> tuple[Tensor, np.ndarray]:
        """Fused condition tokens ``(B, 1+S, d)`` with the query token first, and their key mask."""
        return encode_condition(self.params, self.config, cond, self.dtype)

    def anchor_token(self, anchors: np.ndarray) -> Tensor:
        """Embedding ``(B, 1, d)`` of anchor points given in cell units."""
        feats = coord_features(np.asarray(anchors, dtype=np.float64), self.config.d).astype(self.dtype)
        tok = nn.linear(self.params, "cond.anchor", Tensor(feats))
        return tok.reshape(len(anchors), 1, self.config.d)

    def condition_tokens(self, fused: Tensor, mask: np.ndarray, anchors: np.ndarray) -> tuple[Tensor, np.ndarray]:
        tokens = ag.concat([fused, self.anchor_token(anchors)], axis=1)
        return tokens, np.concatenate([mask, np.ones((len(anchors), 1), dtype=bool)], axis=1)

    # -- heatmap ---------------------------------------------------------------

    def heatmap_logits(self, fused: Tensor, cond: ConditionBatch) -> Tensor:
        """Per-cell center logits ``(B, H, W)``.

        Two terms: a per-cell MLP over the cell's color, its position and the
        fused query, plus a pointer term that softly selects one shape token
        and places a unit-width bump at that shape's center (shifted by a
        learned, shape-dependent offset).
        """
        p, c = self.params, self.config
        b = fused.shape[0]
        raster = cond.raster
        onehot = np.zeros((b, raster.shape[1], N_RASTER_IDS), dtype=self.dtype)
        np.put_along_axis(onehot, raster[..., None], 1.0, axis=-1)
        q = nn.linear(p, "heat.query", fused[:, 0, :])
        pos = Tensor(self._heat_pos) @ p["heat.pos.w"]
        h = Tensor(onehot) @ p["heat.color"] + pos + q.reshape(b, 1, -1)
        # cheap activation: this runs on every cell of every scene
        h = ag.relu(nn.linear(p, "heat.fc2", ag.relu(h)))
        logits = nn.linear(p, "heat.out", h).reshape(b, -1)

        shapes = fused[:, 1:, :]
        pq = nn.linear(p, "heat.pick.q", fused[:, 0:1, :])
        pk = nn.linear(p, "heat.pick.k", shapes)
        scores = (pq @ pk.transpose(0, 2, 1)).reshape(b, -1) * (1.0 / math.sqrt(c.d))
        scores = scores + Tensor(np.where(cond.shape_mask, 0.0, nn.MASK_FILL).astype(self.dtype))
        pick = ag.softmax(scores)                                            # (B, S)
        centers = (cond.shape_feats[..., D.SHAPE_CENTER] + 1.0) / 2.0 * np.array(HEATMAP_RES, dtype=self.dtype)
        centers = Tensor(centers.astype(self.dtype)) + nn.linear(p, "heat.shift", shapes)   # (B, S, 2)
        cells = Tensor(self._cells)
        di = centers[..., 0:1] - cells[:, 0].reshape(1, 1, -1)
        dj = centers[..., 1:2] - cells[:, 1].reshape(1, 1, -1)
        bump = ag.exp((di * di + dj * dj) * (-0.5 / POINTER_WIDTH ** 2))       # (B, S, HW)
        pointer = (pick.reshape(b, 1, -1) @ bump).reshape(b, -1)
        logits = logits + pointer * p["heat.gain"]
        return logits.reshape(b, *HEATMAP_RES)

    def heatmap(self, fused: Tensor, cond: ConditionBatch) -> np.ndarray:
        return ag.sigmoid(self.heatmap_logits(fused, cond)).data

    # -- denoiser ----------------------------------------------------------------

    def embed_points(self, x_t: np.ndarray) -> Tensor:
        c = self.config
        v = dif.descale(np.asarray(x_t, dtype=np.float64), c.b).reshape(len(x_t), c.n_points, 2)
        feats = coord_features(v * c.coord_scale, c.d).astype(self.dtype)
        return nn.linear(self.params, "den.embed", Tensor(feats)) + self.params["den.slot"]

    def time_embedding(self, t) -> Tensor:
        c, p = self.config, self.params
        t = np.atleast_1d(np.asarray(t))
        if np.any(t < 0) or np.any(t > c.max_T):
            raise InvalidArgument(f"time step outside [0, {c.max_T}]")
        e = Tensor(time_features(t, c.d).astype(self.dtype))
        return nn.linear(p, "den.time.fc2", ag.gelu(nn.linear(p, "den.time.fc1", e)))

    def _film(self, te: Tensor, block: int) -> tuple[Tensor, Tensor]:
        d = self.config.d
        m = nn.linear(self.params, f"den.{block}.film", te)
        return 1.0 + m[:, :d], m[:, d:]

    def film(self, t, block: int) -> tuple[Tensor, Tensor]:
        """Per-block ``(scale, shift)``, each ``(B, d)``; scale is ``1 + delta``."""
        return self._film(ag.gelu(self.time_embedding(t)), block)

    def denoise(self, x_t: np.ndarray, t, cond: Tensor, cond_mask: np.ndarray | None = None,
                counter: dict | None = None) -> Tensor:
        """Predicted clean analog vector ``(B, 4+2N)`` from the noisy state ``x_t``."""
        c, p = self.config, self.params
        x_t = np.atleast_2d(x_t)
        if x_t.shape[1] != c.dim:
            raise InvalidArgument(f"state length {x_t.shape[1]} does not match 4+2N={c.dim}")
        b = len(x_t)
        if cond.shape[0] != b or cond.shape[2] != c.d:
            raise InvalidArgument(f"condition tokens {cond.shape} do not fit batch {b} and width {c.d}")
        t = np.broadcast_to(np.asarray(t), (b,))
        te = ag.gelu(self.time_embedding(t))
        h = self.embed_points(x_t)
        for l in range(c.n_blocks):
            z = ag.layer_norm(h)
            h = h + nn.attention(p, f"den.{l}.self", z, z, c.n_heads, counter=counter)
            h = h + nn.attention(p, f"den.{l}.cross", ag.layer_norm(h), cond, c.n_heads,
                                 key_mask=cond_mask, counter=counter)
            h = h + nn.mlp(p, f"den.{l}.mlp", ag.layer_norm(h))
            scale, shift = self._film(te, l)
            h = ag.layer_norm(h) * scale.reshape(b, 1, c.d) + shift.reshape(b, 1, c.d)
        out = (nn.linear(p, "den.head", h) + p["den.offset"]).reshape(b, c.dim)
        return (out * 2.0 - 1.0) * c.b

    def denoiser_fn(self, cond: Tensor, cond_mask: np.ndarray, counter: dict | None = None):
        """Adapter with the ``f(x, condition, t)`` signature used by the sampler."""
        def f(x, _condition, t):
            with ag.no_grad():
                return self.denoise(x, t, cond, cond_mask, counter=counter).data
        return f


# -- inference -------------------------------------------------------------------

@dataclass
class Prediction:
    vertex_vectors: np.ndarray   # (B, 4+2N) in [0, 1]
    anchors: np.ndarray          # (B, 2) cell units
    boxes: np.ndarray            # (B, 4) scene units
    contours: np.ndarray         # (B, N, 2) scene units
    heatmaps: np.ndarray | None = None


def predict(model: PVDModel, samples: Sequence[D.SceneSample], seeds: Sequence[int], steps: int = dif.INFERENCE_STEPS,
            sched: dif.DiffusionSchedule | None = None, use_cam: bool = True, cond: ConditionBatch | None = None,
            counter: dict | None = None, trajectory: list | None = None) -> Prediction:
    """Center prediction followed by diffusion sampling, batched over ``samples``."""
    sched = sched or dif.make_schedule(model.config.max_T, model.config.b)
    cond = cond if cond is not None else collate_condition(samples)
    with ag.no_grad():
        fused, mask = model.encode(cond)
        heat = None
        if use_cam:
            heat = model.heatmap(fused, cond)
            flat = heat.reshape(len(heat), -1).argmax(axis=1)
            anchors = np.stack([flat // HEATMAP_RES[1] + 0.5, flat % HEATMAP_RES[1] + 0.5], axis=1).astype(float)
        else:
            anchors = np.tile(np.asarray(D.SCENE_ANCHOR.center, dtype=float), (len(cond), 1))
        tokens, tmask = model.condition_tokens(fused, mask, anchors)
        x_T = dif.initial_noise(seeds, model.config.dim).astype(model.dtype)
        x0 = dif.run_chain(model.denoiser_fn(tokens, tmask, counter), None, x_T, steps, sched, trajectory)
    vv = dif.descale(x0, sched.b).astype(np.float64)
    boxes, contours = [], []
    for k in range(len(vv)):
        a = CenterAnchor(tuple(anchors[k]), D.SCENE_CELLS)
        box, contour = D.from_vertex_vector(vv[k], a)
        boxes.append(box)
        contours.append(contour)
    return Prediction(vv, anchors, np.array(boxes), np.array(contours), heat)
