"""Losses, the joint training step and the epoch loop with checkpoints.

The objective is ``w_c * focal + w_p * point + w_g * angle-sum``. Every source
of randomness in a step (diffusion time, noise) is derived from
``(seed, step)`` and batch order from ``(seed, epoch)``, so a run resumed from
a checkpoint continues exactly as the uninterrupted run would.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import anchor as anc
from . import autograd as ag
from . import data as D
from . import diffusion as dif
from . import geometry as geo
from .autograd import Tensor
from .errors import InvalidArgument, TrainingDiverged
from .model import ConditionBatch, ModelConfig, PVDModel, collate_condition
from .params import AdamW, load_checkpoint, save_checkpoint

ASL_NORM = 360.0 ** 2


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 5e-4
    weight_decay: float = 5e-2
    T_train: int = dif.T_TRAIN
    n_vertices: int = geo.DEFAULT_N_VERTICES
    w_c: float = 1.0
    w_p: float = 1.0
    w_g: float = 1.0
    seed: int = 0
    asl_grid: tuple = geo.DEFAULT_ANGLE_GRID
    checkpoint_every: int = 0
    max_steps: int = 0
    use_cam: bool = True
    decay_at: float = 0.6
    decay_factor: float = 0.1
    d: int = 128
    n_blocks: int = 4
    n_heads: int = 4
    fusion_layers: int = 2
    heat_hidden: int = 64

    def __post_init__(self):
        for name in ("epochs", "batch_size", "T_train", "d", "n_blocks", "n_heads"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be positive")
        if min(self.w_c, self.w_p, self.w_g) < 0:
            raise InvalidArgument("loss weights must be >= 0")
        if self.n_vertices < 3:
            raise InvalidArgument("n_vertices must be >= 3")
        object.__setattr__(self, "asl_grid", tuple(int(x) for x in self.asl_grid))

    def model_config(self) -> ModelConfig:
        return ModelConfig(n_vertices=self.n_vertices, d=self.d, n_blocks=self.n_blocks, n_heads=self.n_heads,
                           fusion_layers=self.fusion_layers, heat_hidden=self.heat_hidden, max_T=self.T_train)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["asl_grid"] = list(self.asl_grid)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgument(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


# -- losses -------------------------------------------------------------------------

def point_loss(x0_hat: Tensor, x0) -> Tensor:
    """Mean squared error over coordinates and batch."""
    x0 = np.asarray(x0)
    if x0_hat.shape != x0.shape:
        raise InvalidArgument(f"point loss shapes differ: {x0_hat.shape} vs {x0.shape}")
    return ag.mse(x0_hat, x0.astype(x0_hat.dtype))


def _rays(P: np.ndarray, G: np.ndarray, grid: tuple[int, int]) -> tuple[np.ndarray, ...]:
    """Rays from every cell center to every vertex and to its successor, each (B, K, N)."""
    Q = np.roll(P, -1, axis=1)
    ux = P[:, None, :, 0] - G[None, :, None, 0]
    uy = P[:, None, :, 1] - G[None, :, None, 1]
    # only a vertex within MIN_RAY of some cell center needs the clamp
    size = np.asarray(grid, dtype=P.dtype)
    cell = np.clip(np.floor(P * size), 0, size - 1)
    off = (P * size - cell - 0.5) / size
    if np.any(np.hypot(off[..., 0], off[..., 1]) < 2 * geo.MIN_RAY):
        u = geo._clamp_rays(np.stack([ux, uy], axis=-1))
        ux, uy = np.ascontiguousarray(u[..., 0]), np.ascontiguousarray(u[..., 1])
        return ux, uy, np.roll(ux, -1, axis=2), np.roll(uy, -1, axis=2)
    wx = Q[:, None, :, 0] - G[None, :, None, 0]
    wy = Q[:, None, :, 1] - G[None, :, None, 1]
    return ux, uy, wx, wy


def angle_map_loss(points: Tensor, target_maps, grid: tuple[int, int], chunk: int = 8) -> Tensor:
    """Mean squared angle-sum difference / 360**2 between polygons ``points`` (B, N, 2) and ``target_maps`` (B, H*W).

    A fused op: the unsigned angle sums of every grid cell and their gradients
    with respect to the vertices are computed in one pass.
    """
    P = points.data
    bsz = P.shape[0]
    target = np.asarray(target_maps, dtype=P.dtype).reshape(bsz, -1)
    G = geo.cell_centers(grid).astype(P.dtype)
    k = len(G)
    if target.shape[1] != k:
        raise InvalidArgument(f"target maps have {target.shape[1]} cells, grid {grid} has {k}")
    denom = bsz * k * ASL_NORM
    total = 0.0
    saved = []
    for s in range(0, bsz, chunk):
        ux, uy, wx, wy = _rays(P[s:s + chunk], G, grid)
        c = ux * wy
        c -= uy * wx
        dot = ux * wx
        dot += uy * wy
        theta = np.arctan2(np.abs(c), dot)
        raw = np.degrees(theta.sum(-1, dtype=np.float64))
        sums = np.clip(raw, geo.EPS_DEG, 360.0)
        diff = sums - target[s:s + chunk]
        total += float(np.sum(diff * diff))
        active = (raw > geo.EPS_DEG) & (raw <= 360.0)
        saved.append((ux, uy, wx, wy, c, dot, (diff * active).astype(P.dtype)))
    out = np.array(total / denom, dtype=P.dtype)

    def backward(g):
        grads = []
        for ux, uy, wx, wy, c, dot, diff in saved:
            # d theta = (sign(c) dot * dc - |c| * ddot) / (c^2 + dot^2)
            r2 = c * c
            r2 += dot * dot
            r2[r2 == 0] = 1.0
            g_theta = (float(g) * 2.0 / denom * (180.0 / math.pi)) * diff[..., None]
            g_theta = g_theta / r2
            a = np.sign(c)
            a *= dot
            a *= g_theta
            bb = np.abs(c)
            bb *= g_theta
            bb = -bb
            ein = lambda p, q: np.einsum("bkn,bkn->bn", p, q)
            gx = ein(a, wy) + ein(bb, wx) + np.roll(ein(bb, ux) - ein(a, uy), 1, axis=1)
            gy = ein(bb, wy) - ein(a, wx) + np.roll(ein(a, ux) + ein(bb, uy), 1, axis=1)
            grads.append(np.stack([gx, gy], axis=-1))
        return (np.concatenate(grads).astype(P.dtype),)
    return Tensor.from_op(out, (points,), backward)


def predicted_contour(x0_hat: Tensor, anchors: np.ndarray, b: float = 1.0) -> Tensor:
    """Scene-unit contour points ``(B, N, 2)`` of analog predictions, via descale and the anchors."""
    bsz, dim = x0_hat.shape
    v = (ag.clip(x0_hat[:, 4:], -b, b) * (1.0 / b) + 1.0) * 0.5
    size = np.asarray(D.SCENE_CELLS, dtype=x0_hat.dtype)
    v = v.reshape(bsz, (dim - 4) // 2, 2)
    offset = (np.asarray(anchors, dtype=x0_hat.dtype) / size)[:, None, :]
    return (v * 2.0 - 1.0) + Tensor(offset)


def asl_loss(x0_hat: Tensor, gt_maps, anchors: np.ndarray, grid: tuple[int, int] = geo.DEFAULT_ANGLE_GRID,
             b: float = 1.0) -> Tensor:
    """Angle summation loss of the mask vertices (box corners excluded)."""
    return angle_map_loss(predicted_contour(x0_hat, anchors, b), gt_maps, grid)


# -- data preparation ---------------------------------------------------------

@dataclass
class TrainData:
    samples: list
    cond: ConditionBatch
    x0: np.ndarray
    anchors: np.ndarray
    heat: np.ndarray
    maps: np.ndarray | None

    def __len__(self) -> int:
        return len(self.x0)


def prepare(samples: Sequence[D.SceneSample], cfg: TrainConfig) -> TrainData:
    """Precompute conditions and targets for every sample."""
    source = "gt_cell" if cfg.use_cam else "scene"
    x0, anchors, heat, maps = [], [], [], []
    for s in samples:
        pack = D.build_ground_truth(s, cfg.n_vertices, source, asl_grid=cfg.asl_grid) if cfg.w_g > 0 else None
        if pack is None:
            a = D.gt_cell_anchor(s) if cfg.use_cam else D.SCENE_ANCHOR
            contour = geo.sample_contour_vertices(s.gt_polygon, cfg.n_vertices).vertices
            vec = D.to_vertex_vector(s.gt_box.to_array(), contour, a)
            hm = D.heatmap_target(s)
        else:
            a, vec, hm = pack.anchor, pack.vertex_vector, pack.heatmap_target
            maps.append(pack.angle_map_target.ravel().astype(np.float32))
        x0.append(dif.scale(vec))
        anchors.append(a.center)
        heat.append(hm.astype(np.float32))
    return TrainData(list(samples), collate_condition(samples), np.array(x0, dtype=np.float32),
                     np.array(anchors, dtype=np.float64), np.array(heat),
                     np.array(maps) if maps else None)


# -- training step -------------------------------------------------------------

@dataclass
class StepResult:
    loss_c: float
    loss_p: float
    loss_g: float
    loss: float

    def as_dict(self) -> dict:
        return asdict(self)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, step])


def compute_losses(model: PVDModel, td: TrainData, idx: np.ndarray, sched: dif.DiffusionSchedule,
                   cfg: TrainConfig, rng: np.random.Generator) -> tuple[Tensor, StepResult]:
    """Forward pass of one batch; returns the weighted total and its parts."""
    cond = td.cond.take(idx)
    x0 = td.x0[idx]
    bsz = len(idx)
    t = rng.integers(1, sched.T + 1, size=bsz)
    eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    x_t = dif.forward_diffuse_batch(x0, t, eps, sched).astype(x0.dtype)

    fused, mask = model.encode(cond)
    zero = Tensor(np.array(0.0, dtype=model.dtype))
    loss_c = anc.focal_loss_from_logits(model.heatmap_logits(fused, cond), td.heat[idx]) if cfg.w_c > 0 else zero
    loss_p = loss_g = zero
    if cfg.w_p > 0 or cfg.w_g > 0:
        tokens, tmask = model.condition_tokens(fused, mask, td.anchors[idx])
        x0_hat = model.denoise(x_t, t, tokens, tmask)
        loss_p = point_loss(x0_hat, x0)
        if cfg.w_g > 0:
            loss_g = asl_loss(x0_hat, td.maps[idx], td.anchors[idx], cfg.asl_grid, model.config.b)
    total = loss_c * cfg.w_c + loss_p * cfg.w_p + loss_g * cfg.w_g
    parts = StepResult(loss_c.item(), loss_p.item(), loss_g.item(), total.item())
    return total, parts


def train_step(model: PVDModel, opt: AdamW, td: TrainData, idx: np.ndarray, sched: dif.DiffusionSchedule,
               cfg: TrainConfig, step: int, lr: float) -> StepResult:
    """One optimizer update on batch ``idx``; raises TrainingDiverged on a non-finite loss."""
    model.params.zero_grad()
    total, parts = compute_losses(model, td, idx, sched, cfg, step_rng(cfg.seed, step))
    total.backward()
    for name, p in model.params.items():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    gmax = model.params.max_abs_grad()
    if not (math.isfinite(parts.loss) and math.isfinite(gmax)):
        raise TrainingDiverged(f"training diverged at step {step}: loss={parts.loss}, max |grad|={gmax}")
    opt.step(lr)
    return parts


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Step decay: ``lr`` before ``decay_at * total_steps``, ``lr * decay_factor`` after."""
    boundary = int(cfg.decay_at * total_steps)
    return cfg.lr * (cfg.decay_factor if step >= boundary else 1.0)


def steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, n // batch_size)


def batch_indices(n: int, cfg: TrainConfig, step: int) -> np.ndarray:
    per = steps_per_epoch(n, cfg.batch_size)
    epoch, k = divmod(step, per)
    order = np.random.default_rng([cfg.seed, 2, epoch]).permutation(n)
    bs = min(cfg.batch_size, n)
    return np.sort(order[k * bs:(k + 1) * bs])


# -- fit -----------------------------------------------------------------------------

@dataclass
class FitResult:
    checkpoint: Path
    log: Path
    steps: int
    history: list = field(default_factory=list)


def total_steps(n: int, cfg: TrainConfig) -> int:
    full = cfg.epochs * steps_per_epoch(n, cfg.batch_size)
    return min(full, cfg.max_steps) if cfg.max_steps else full


def save_training_state(path, model: PVDModel, opt: AdamW, cfg: TrainConfig, step: int) -> Path:
    arrays = {**model.params.arrays(), **opt.state_arrays()}
    meta = {"kind": "pvd", "step": step, "train_config": cfg.to_dict(), "model_config": model.config.to_dict()}
    return save_checkpoint(path, arrays, meta)


def load_model(path) -> tuple[PVDModel, dict]:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "pvd":
        raise InvalidArgument(f"{path}: not a parallel-model checkpoint")
    mc = dict(meta["model_config"])
    model = PVDModel(ModelConfig(**mc))
    model.params.load_arrays(arrays)
    return model, meta


def fit(samples: Sequence[D.SceneSample], cfg: TrainConfig, out_dir, resume=None,
        prepared: TrainData | None = None, progress=None) -> FitResult:
    """Train from scratch (or from ``resume``) and write ``model.ckpt`` plus ``metrics.jsonl`` to ``out_dir``."""
    if not samples:
        raise InvalidArgument("empty training set")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    td = prepared or prepare(samples, cfg)
    model = PVDModel(cfg.model_config(), seed=cfg.seed)
    opt = AdamW(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    start = 0
    log_path = out_dir / "metrics.jsonl"
    if resume is not None:
        arrays, meta = load_checkpoint(resume)
        model.params.load_arrays(arrays)
        start = int(meta["step"])
        opt.load_state(arrays, start)
        _truncate_log(log_path, start)
    elif log_path.exists():
        log_path.unlink()
    sched = dif.make_schedule(cfg.T_train)
    n_total = total_steps(len(td), cfg)
    history = []
    with open(log_path, "a", encoding="utf-8") as log:
        for step in range(start, n_total):
            lr = lr_at(step, n_total, cfg)
            parts = train_step(model, opt, td, batch_indices(len(td), cfg, step), sched, cfg, step, lr)
            rec = {"step": step, **parts.as_dict(), "lr": lr}
            history.append(rec)
            log.write(json.dumps(rec, sort_keys=True) + "\n")
            if progress is not None:
                progress(rec)
            done = step + 1
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < n_total:
                save_training_state(out_dir / f"step{done:06d}.ckpt", model, opt, cfg, done)
    ckpt = save_training_state(out_dir / "model.ckpt", model, opt, cfg, n_total)
    return FitResult(ckpt, log_path, n_total, history)


def _truncate_log(path: Path, steps: int) -> None:
    if not path.exists():
        return
    lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
    path.write_text("".join(lines[:steps]), encoding="utf-8")
