"""Multi-run experiments: the point-count sweep and the CAM/ASL ablation.

Trained models are cached on disk under a key derived from the training set
and the resolved training config, so repeated sweeps only pay for evaluation.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from . import data as D
from . import evaluation as E
from . import training as T
from .errors import InvalidArgument
from .seqbaseline import SeqTrainConfig, fit_seq, load_seq_model

POINT_COUNTS = (9, 18, 27, 36)
PARADIGMS = ("parallel", "sequential")


def dataset_fingerprint(samples: Sequence[D.SceneSample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(json.dumps(D.sample_to_record(s), sort_keys=True, separators=(",", ":")).encode())
    return h.hexdigest()


def cache_key(kind: str, cfg, samples: Sequence[D.SceneSample]) -> str:
    blob = json.dumps({"kind": kind, "config": _config_dict(cfg), "data": dataset_fingerprint(samples)},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _config_dict(cfg) -> dict:
    d = cfg.to_dict() if hasattr(cfg, "to_dict") else dict(vars(cfg))
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def train_pvd_cached(samples, cfg: T.TrainConfig, cache_dir, progress=None):
    """Load the cached model for ``(samples, cfg)`` or train and cache it."""
    out = Path(cache_dir) / f"pvd-{cache_key('pvd', cfg, samples)}"
    ckpt = out / "model.ckpt"
    if not ckpt.exists():
        T.fit(samples, cfg, out, progress=progress)
    return T.load_model(ckpt)[0], ckpt


def train_seq_cached(samples, cfg: SeqTrainConfig, cache_dir, progress=None):
    out = Path(cache_dir) / f"seq-{cache_key('seq', cfg, samples)}"
    ckpt = out / "model.ckpt"
    if not ckpt.exists():
        fit_seq(samples, cfg, out, progress=progress)
    return load_seq_model(ckpt)[0], ckpt


# -- point-count sweep ---------------------------------------------------------------------

@dataclass
class SweepResult:
    rows: list
    reports: dict = field(default_factory=dict)   # "<paradigm>-<n>" -> EvalReport

    def to_dict(self) -> dict:
        return {"kind": "scaling", "rows": self.rows}


def scaling_sweep(train: Sequence[D.SceneSample], test: Sequence[D.SceneSample], cache_dir,
                  paradigms: Sequence[str] = PARADIGMS, points: Sequence[int] = POINT_COUNTS,
                  pvd_cfg: T.TrainConfig = T.TrainConfig(), seq_cfg: SeqTrainConfig = SeqTrainConfig(),
                  seed: int = 0, latency_samples: int = 12, progress=None) -> SweepResult:
    """Train (or reuse) one model per (paradigm, N), then score IoU, latency and attention work.

    Every configuration is evaluated on the same scenes with the same per-scene seeds.
    """
    for p in paradigms:
        if p not in PARADIGMS:
            raise InvalidArgument(f"unknown paradigm {p!r}; expected one of {PARADIGMS}")
    rows, reports = [], {}
    timing_set = list(test[:latency_samples])
    for p in paradigms:
        for n in points:
            if p == "parallel":
                model, ckpt = train_pvd_cached(train, replace(pvd_cfg, n_vertices=n), cache_dir, progress)
                make = lambda counter, m=model: E.pvd_predictor(m, counter=counter)  # noqa: E731
            else:
                model, ckpt = train_seq_cached(train, replace(seq_cfg, n_vertices=n), cache_dir, progress)
                make = lambda counter, m=model: E.seq_predictor(m, counter=counter)  # noqa: E731
            rep = E.evaluate(make(None), test, seed=seed, config={"paradigm": p, "n_points": n,
                                                                   "checkpoint": ckpt.parent.name})
            lat = E.measure_latency(make(None), timing_set)
            rep.timing = lat
            reports[f"{p}-{n}"] = rep
            rows.append({"paradigm": p, "n_points": n, "mask_iou": rep.mask_iou_mean, "det_acc": rep.det_acc,
                         "hard_iou": rep.hard_iou(), "latency_ms": lat["mean_ms"],
                         "attn_ops": E.attention_ops(make, test[0])})
    return SweepResult(rows, reports)


def growth(rows: Sequence[dict], paradigm: str, key: str, lo: int = 9, hi: int = 36) -> float:
    """Ratio of ``key`` between the largest and smallest point counts for one paradigm."""
    val = {r["n_points"]: r[key] for r in rows if r["paradigm"] == paradigm}
    return val[hi] / val[lo]


# -- ablation ---------------------------------------------------------------------------------

@dataclass
class AblationResult:
    rows: list
    reports: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": "ablation", "rows": self.rows}


def ablation_variants(flags: Sequence[str] = ("cam", "asl")) -> list[tuple[str, bool, bool]]:
    """Table rows restricted to the toggled components; an untoggled component stays on."""
    bad = set(flags) - {"cam", "asl"}
    if bad:
        raise InvalidArgument(f"unknown ablation flags {sorted(bad)}; expected cam and/or asl")
    rows = []
    for name, cam, asl in E.ABLATION_ROWS:
        if ("cam" not in flags and not cam) or ("asl" not in flags and not asl):
            continue
        rows.append((name, cam, asl))
    return rows


def run_ablation(train: Sequence[D.SceneSample], test: Sequence[D.SceneSample], cache_dir,
                 base: T.TrainConfig = T.TrainConfig(), flags: Sequence[str] = ("cam", "asl"), seed: int = 0,
                 progress=None) -> AblationResult:
    """Train the CAM/ASL variants from the same seed and evaluate them on the same scenes."""
    rows, reports = [], {}
    for name, cam, asl in ablation_variants(flags):
        cfg = replace(base, use_cam=cam, w_g=base.w_g if asl else 0.0)
        model, ckpt = train_pvd_cached(train, cfg, cache_dir, progress)
        rep = E.evaluate(E.pvd_predictor(model, use_cam=cam), test, seed=seed,
                         config={"variant": name, "use_cam": cam, "asl": asl, "checkpoint": ckpt.parent.name})
        reports[name] = rep
        rows.append(E.ablation_row(name, rep))
    return AblationResult(rows, reports)
