"""Metrics, latency benchmarks, point-count sweeps, difficulty analysis and ablations.

Every model is wrapped as a *predictor*: a callable taking a list of scenes and
one integer seed per scene and returning predicted boxes and contours in scene
units. Reports keep one record per scene so every aggregate can be recomputed.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import data as D
from . import diffusion as dif
from . import geometry as geo
from .errors import InvalidArgument
from .model import PVDModel, collate_condition, predict
from .seqbaseline import SeqModel, ar_generate

EVAL_RESOLUTION = (256, 256)
HARD_THRESHOLD = 0.2

Predictor = Callable[[Sequence[D.SceneSample], Sequence[int]], tuple[np.ndarray, np.ndarray]]


# -- metrics ----------------------------------------------------------------------

def box_iou_xyxy(pred, gt) -> float:
    """IoU of two ``(i0, j0, i1, j1)`` boxes; a predicted box with swapped corners spans the same extent."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    p = np.concatenate([np.minimum(p[:2], p[2:]), np.maximum(p[:2], p[2:])])
    di = min(p[2], g[2]) - max(p[0], g[0])
    dj = min(p[3], g[3]) - max(p[1], g[1])
    inter = max(di, 0.0) * max(dj, 0.0)
    union = (p[2] - p[0]) * (p[3] - p[1]) + (g[2] - g[0]) * (g[3] - g[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def contour_iou(contour, gt_polygon, resolution=EVAL_RESOLUTION) -> float:
    """Mask IoU of a predicted contour (any vertex list, even-odd fill) against the ground truth."""
    pred = geo.rasterize(np.asarray(contour, dtype=np.float64), resolution)
    return geo.mask_iou(pred, geo.rasterize(gt_polygon, resolution))


def per_sample_seed(seed: int, scene_id: int) -> int:
    return int(np.random.default_rng([seed, 3, scene_id]).integers(2 ** 31))


# -- predictors -----------------------------------------------------------------------

def pvd_predictor(model: PVDModel, steps: int = dif.INFERENCE_STEPS, use_cam: bool = True,
                  counter: dict | None = None) -> Predictor:
    sched = dif.make_schedule(model.config.max_T, model.config.b)

    def run(samples, seeds):
        p = predict(model, samples, seeds, steps=steps, sched=sched, use_cam=use_cam, counter=counter)
        return p.boxes, p.contours
    return run


def seq_predictor(model: SeqModel, counter: dict | None = None) -> Predictor:
    def run(samples, seeds):
        p = ar_generate(model, samples, counter=counter)
        return p.boxes, p.contours
    return run


def oracle_predictor(n_vertices: int = geo.DEFAULT_N_VERTICES, steps: int = dif.INFERENCE_STEPS) -> Predictor:
    """Stands in for a perfect network: a perfect heatmap peak and a denoiser that returns the ground truth.

    Everything else (anchoring, sampling chain, descaling, denormalizing,
    rasterizing) is the real pipeline, so the IoU it reaches bounds the
    pipeline's own loss.
    """
    sched = dif.make_schedule()

    def run(samples, seeds):
        packs = [D.build_ground_truth(s, n_vertices, "gt_cell") for s in samples]
        x0 = np.stack([dif.scale(p.vertex_vector) for p in packs])

        def oracle(x, _cond, t):
            return x0

        x_T = dif.initial_noise(list(seeds), x0.shape[1])
        out = dif.descale(dif.run_chain(oracle, None, x_T, steps, sched, None))
        boxes, contours = zip(*(D.from_vertex_vector(out[k], p.anchor) for k, p in enumerate(packs)))
        return np.array(boxes), np.array(contours)
    return run


# -- reports ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    mask_iou_mean: float
    det_acc: float
    mask_acc: float
    records: list
    config: dict = field(default_factory=dict)
    timing: dict | None = None

    @classmethod
    def from_records(cls, records: list, config: dict | None = None, timing: dict | None = None) -> "EvalReport":
        if not records:
            raise InvalidArgument("empty evaluation")
        iou = np.array([r["iou"] for r in records])
        box = np.array([r["box_iou"] for r in records])
        return cls(float(iou.mean()), float(np.mean(box > 0.5)), float(np.mean(iou > 0.5)),
                   records, dict(config or {}), timing)

    def hard_iou(self, threshold: float = HARD_THRESHOLD) -> float:
        vals = [r["iou"] for r in self.records if r["difficulty"] > threshold]
        return float(np.mean(vals)) if vals else float("nan")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save_csv(self, path) -> Path:
        path = Path(path)
        cols = ["scene_id", "iou", "box_iou", "difficulty"]
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.records:
                w.writerow([r["scene_id"]] + [f"{r[c]:.6f}" for c in cols[1:]])
        return path


def evaluate(predictor: Predictor, samples: Sequence[D.SceneSample], seed: int = 0, batch_size: int = 64,
             config: dict | None = None) -> EvalReport:
    """Predict every scene (batched), rasterize at 256x256 and score against the ground truth."""
    records = []
    for s0 in range(0, len(samples), batch_size):
        chunk = list(samples[s0:s0 + batch_size])
        seeds = [per_sample_seed(seed, s.scene_id) for s in chunk]
        boxes, contours = predictor(chunk, seeds)
        for k, s in enumerate(chunk):
            records.append({
                "scene_id": int(s.scene_id),
                "iou": float(contour_iou(contours[k], s.gt_polygon)),
                "box_iou": box_iou_xyxy(boxes[k], s.gt_box.to_array()),
                "difficulty": float(s.difficulty),
            })
    return EvalReport.from_records(records, {"seed": seed, **(config or {})})


# -- latency -----------------------------------------------------------------------------

def measure_latency(predictor: Predictor, samples: Sequence[D.SceneSample], warmup: int = 2,
                    clock=time.perf_counter) -> dict:
    """Per-sample wall-clock latency at batch size 1; the first ``warmup`` calls are discarded."""
    if len(samples) <= warmup:
        raise InvalidArgument(f"need more than {warmup} samples to time")
    times = []
    for k, s in enumerate(samples):
        t0 = clock()
        predictor([s], [per_sample_seed(0, s.scene_id)])
        dt = clock() - t0
        if k >= warmup:
            times.append(dt * 1000.0)
    t = np.array(times)
    return {"mean_ms": float(t.mean()), "p50_ms": float(np.percentile(t, 50)),
            "p95_ms": float(np.percentile(t, 95)), "n": len(t), "warmup": warmup}


def attention_ops(make_predictor: Callable[[dict], Predictor], sample: D.SceneSample) -> int:
    """Query-key score evaluations needed to predict one scene."""
    counter = {"attn": 0}
    make_predictor(counter)([sample], [0])
    return int(counter["attn"])


# -- difficulty analysis ---------------------------------------------------------------------

@dataclass
class DifficultyDensity:
    hist: np.ndarray           # (n_difficulty_bins, n_iou_bins), sums to 1
    difficulty_edges: np.ndarray
    iou_edges: np.ndarray
    hard_mean_iou: float
    hard_count: int


def difficulty_density(records: Sequence[dict], bins: tuple[int, int] = (20, 20),
                       threshold: float = HARD_THRESHOLD) -> DifficultyDensity:
    """Unit-mass 2-D histogram over (difficulty, IoU) on linear axes in [0, 1]."""
    if not records:
        raise InvalidArgument("empty report")
    d = np.array([r["difficulty"] for r in records], dtype=np.float64)
    iou = np.array([r["iou"] for r in records], dtype=np.float64)
    hist, de, ie = np.histogram2d(np.clip(d, 0, 1), np.clip(iou, 0, 1), bins=bins, range=[[0, 1], [0, 1]])
    hard = iou[d > threshold]
    return DifficultyDensity(hist / hist.sum(), de, ie, float(hard.mean()) if hard.size else float("nan"),
                             int(hard.size))


# -- ablation -------------------------------------------------------------------------------

ABLATION_ROWS = (("neither", False, False), ("CAM only", True, False), ("ASL only", False, True),
                 ("both", True, True))


def ablation_row(name: str, report: EvalReport) -> dict:
    """One row in the diagnostic-table layout: detection accuracy, mask accuracy, mask IoU (percent)."""
    return {"variant": name, "det_acc": 100 * report.det_acc, "mask_acc": 100 * report.mask_acc,
            "mask_iou": 100 * report.mask_iou_mean}


def write_table(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = list(rows[0])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([f"{r[c]:.6g}" if isinstance(r[c], float) else r[c] for c in cols])
    return path
