"""Command-line entry point: ``pvd <command> [options] [key=value ...]``.

Every command writes its outputs plus a ``config.json`` snapshot of the fully
resolved configuration into the output directory. Config values come from the
built-in defaults, then an optional ``--config`` JSON file, then ``key=value``
overrides and flags. All randomness flows from ``--seed``.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

from . import data as D
from . import diffusion as dif
from . import evaluation as E
from . import experiments as X
from . import plotting as P
from . import training as T
from .errors import InvalidArgument
from .model import predict
from .params import load_checkpoint
from .seqbaseline import SeqTrainConfig, load_seq_model

OUTPUT_ENV = "PVD_OUTPUT_DIR"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class MissingFile(Exception):
    def __init__(self, path):
        super().__init__(str(path))
        self.path = Path(path)


# -- config handling -------------------------------------------------------------------

def parse_overrides(pairs) -> dict:
    """``["lr=1e-3", "asl_grid=[32,32]"]`` -> dict; values are JSON where possible, else strings."""
    out = {}
    for item in pairs or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise InvalidArgument(f"override {item!r} is not key=value")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    return json.loads(path.read_text(encoding="utf-8"))


def resolve_config(cls, config_file=None, overrides=None, **flags):
    """defaults < config file < overrides < explicit flags; unknown keys are rejected."""
    merged = {}
    if config_file is not None:
        merged.update(_read_json(config_file))
    merged.update(overrides or {})
    merged.update({k: v for k, v in flags.items() if v is not None})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(merged) - known)
    if unknown:
        raise InvalidArgument(f"unknown config keys {unknown} for {cls.__name__}")
    return cls(**merged)


def _output_dir(args, command: str) -> Path:
    if args.out is not None:
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_ENV, "runs")) / command


def _write_snapshot(out: Path, payload: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.json"
    path.write_text(json.dumps(payload, indent=1, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def _load_samples(path) -> list:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    return D.load_dataset(path)


def _split(args):
    """Training and test scenes: from files when given, otherwise generated from ``--seed``."""
    train = _load_samples(args.train_data) if args.train_data else D.generate(args.seed, args.train_count)
    test = (_load_samples(args.test_data) if args.test_data
            else D.generate(args.seed + 1, args.test_count, start_id=10 ** 6))
    return train, test


def _load_any(path):
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    _, meta = load_checkpoint(path)
    if meta.get("kind") == "seq":
        return "sequential", load_seq_model(path)[0], meta
    return "parallel", T.load_model(path)[0], meta


def _progress(every: int = 50):
    def report(rec):
        if rec["step"] % every == 0:
            print(json.dumps(rec, sort_keys=True), file=sys.stderr, flush=True)
    return report


# -- commands ----------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = _output_dir(args, "gen-data")
    samples = D.generate(args.seed, args.count, start_id=args.start_id)
    path = D.save_dataset(out / args.name, samples)
    _write_snapshot(out, {"command": "gen-data", "seed": args.seed, "count": args.count,
                          "start_id": args.start_id, "dataset": path.name})
    print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    out = _output_dir(args, "train")
    samples = _load_samples(args.data)
    if args.paradigm == "parallel":
        cfg = resolve_config(T.TrainConfig, args.config, parse_overrides(args.overrides), seed=args.seed)
        _write_snapshot(out, {"command": "train", "paradigm": "parallel", "data": str(args.data),
                              "train_config": cfg.to_dict()})
        res = T.fit(samples, cfg, out, resume=args.resume, progress=_progress())
    else:
        cfg = resolve_config(SeqTrainConfig, args.config, parse_overrides(args.overrides), seed=args.seed)
        _write_snapshot(out, {"command": "train", "paradigm": "sequential", "data": str(args.data),
                              "train_config": X._config_dict(cfg)})
        from .seqbaseline import fit_seq
        res = fit_seq(samples, cfg, out, resume=args.resume, progress=_progress())
    print(res.checkpoint)
    return EXIT_OK


def cmd_sample(args) -> int:
    out = _output_dir(args, "sample")
    kind, model, _ = _load_any(args.checkpoint)
    if kind != "parallel":
        raise InvalidArgument("sample draws diffusion trajectories; give a parallel-model checkpoint")
    if args.data:
        pool = _load_samples(args.data)
        match = [s for s in pool if s.scene_id == args.scene_id]
        if not match:
            raise InvalidArgument(f"scene id {args.scene_id} not in {args.data}")
        scene = match[0]
    else:
        scene = D.generate(args.seed, 1, start_id=args.scene_id)[0]
    seed = E.per_sample_seed(args.seed, scene.scene_id)
    sched = dif.make_schedule(model.config.max_T, model.config.b)
    traj = []
    pred = predict(model, [scene], [seed], steps=args.steps, sched=sched, trajectory=traj)
    anchor = D.anc.CenterAnchor(tuple(pred.anchors[0]), D.SCENE_CELLS)
    contours, labels = [], []
    for t, x0_hat, _ in traj:
        _, c = D.from_vertex_vector(dif.descale(x0_hat[0], sched.b), anchor)
        contours.append(c)
        labels.append(f"x0 estimate, t={t}")
    svg = P.plot_trajectory(contours, out / "trajectory.svg", scene.gt_polygon, labels)
    result = {"scene_id": scene.scene_id, "seed": seed, "steps": args.steps,
              "anchor": pred.anchors[0].tolist(), "box": pred.boxes[0].tolist(),
              "contour": pred.contours[0].tolist(),
              "iou": E.contour_iou(pred.contours[0], scene.gt_polygon)}
    (out / "sample.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    _write_snapshot(out, {"command": "sample", "checkpoint": str(args.checkpoint), "seed": args.seed,
                          "scene_id": args.scene_id, "data": args.data, "steps": args.steps})
    print(svg)
    return EXIT_OK


def cmd_eval(args) -> int:
    out = _output_dir(args, "eval")
    kind, model, meta = _load_any(args.checkpoint)
    samples = _load_samples(args.data)
    if kind == "parallel":
        use_cam = bool(meta.get("train_config", {}).get("use_cam", True))
        predictor = E.pvd_predictor(model, steps=args.steps, use_cam=use_cam)
    else:
        predictor = E.seq_predictor(model)
    cfg = {"checkpoint": str(args.checkpoint), "data": str(args.data), "paradigm": kind, "steps": args.steps}
    rep = E.evaluate(predictor, samples, seed=args.seed, config=cfg)
    if args.latency:
        rep.timing = E.measure_latency(predictor, samples[:args.latency])
    rep.save(out / "report.json")
    rep.save_csv(out / "report.csv")
    P.plot_report(rep, out / "report.svg")
    _write_snapshot(out, {"command": "eval", "seed": args.seed, "min_iou": args.min_iou, "latency": args.latency,
                          **cfg})
    print(f"mask_iou={rep.mask_iou_mean:.4f} det_acc={rep.det_acc:.4f} mask_acc={rep.mask_acc:.4f}")
    if args.min_iou is not None and rep.mask_iou_mean < args.min_iou:
        print(f"mask IoU {rep.mask_iou_mean:.4f} is below --min-iou {args.min_iou}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def _points(text: str) -> list[int]:
    try:
        pts = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad point list {text!r}")
    if not pts or min(pts) < 3:
        raise argparse.ArgumentTypeError("point counts must be integers >= 3")
    return pts


def cmd_bench(args) -> int:
    out = _output_dir(args, "bench")
    overrides = parse_overrides(args.overrides)
    pvd_cfg = resolve_config(T.TrainConfig, args.config, overrides, seed=args.seed)
    seq_keys = {f.name for f in fields(SeqTrainConfig)}
    seq_cfg = resolve_config(SeqTrainConfig, None, {k: v for k, v in X._config_dict(pvd_cfg).items()
                                                    if k in seq_keys})
    paradigms = X.PARADIGMS if args.paradigm == "both" else (args.paradigm,)
    train, test = _split(args)
    _write_snapshot(out, {"command": "bench", "paradigms": list(paradigms), "points": args.points,
                          "seed": args.seed, "train_config": pvd_cfg.to_dict(),
                          "seq_train_config": X._config_dict(seq_cfg), "train": _data_desc(args, "train"),
                          "test": _data_desc(args, "test")})
    res = X.scaling_sweep(train, test, args.cache or out / "cache", paradigms, args.points, pvd_cfg, seq_cfg,
                          seed=args.seed, latency_samples=args.latency_samples, progress=_progress(200))
    _save_table(out, "scaling", res.rows)
    for name, rep in res.reports.items():
        rep.save(out / "reports" / f"{name}.json")
    P.plot_scaling(res.rows, out / "scaling.svg")
    for p in paradigms:
        if f"{p}-{max(args.points)}" in res.reports:
            P.plot_density(E.difficulty_density(res.reports[f"{p}-{max(args.points)}"].records),
                           out / f"density-{p}.svg", title=p)
    for r in res.rows:
        print(f"{r['paradigm']:>10} N={r['n_points']:>2} iou={r['mask_iou']:.4f} latency={r['latency_ms']:.2f}ms "
              f"attn_ops={r['attn_ops']}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    out = _output_dir(args, "ablate")
    base = resolve_config(T.TrainConfig, args.config, parse_overrides(args.overrides), seed=args.seed)
    flags = [f for f in args.flags.split(",") if f]
    train, test = _split(args)
    _write_snapshot(out, {"command": "ablate", "flags": flags, "seed": args.seed, "train_config": base.to_dict(),
                          "train": _data_desc(args, "train"), "test": _data_desc(args, "test")})
    res = X.run_ablation(train, test, args.cache or out / "cache", base, flags, seed=args.seed,
                         progress=_progress(200))
    _save_table(out, "ablation", res.rows)
    for name, rep in res.reports.items():
        rep.save(out / "reports" / f"{name.replace(' ', '_')}.json")
    P.plot_ablation(res.rows, out / "ablation.svg")
    for r in res.rows:
        print(f"{r['variant']:>9} det_acc={r['det_acc']:.2f} mask_acc={r['mask_acc']:.2f} mask_iou={r['mask_iou']:.2f}")
    return EXIT_OK


def cmd_plot(args) -> int:
    payload = _read_json(args.input)
    out = Path(args.output) if args.output else _output_dir(args, "plot") / (Path(args.input).stem + ".svg")
    kind = payload.get("kind", "report")
    if kind == "scaling":
        P.plot_scaling(payload["rows"], out)
    elif kind == "ablation":
        P.plot_ablation(payload["rows"], out)
    else:
        P.plot_report(E.EvalReport.from_dict(payload), out)
    print(out)
    return EXIT_OK


def _data_desc(args, which: str):
    path = getattr(args, f"{which}_data")
    if path:
        return str(path)
    if which == "train":
        return {"seed": args.seed, "count": args.train_count}
    return {"seed": args.seed + 1, "count": args.test_count, "start_id": 10 ** 6}


def _save_table(out: Path, name: str, rows) -> None:
    E.write_table(rows, out / f"{name}.csv")
    (out / f"{name}.json").write_text(json.dumps({"kind": name, "rows": rows}, indent=1, sort_keys=True) + "\n",
                                      encoding="utf-8")


# -- parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pvd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def common(p, seed_default=0):
        p.add_argument("--seed", type=int, default=seed_default, help="the single source of randomness")
        p.add_argument("--out", type=Path, default=None, help=f"output directory (default: ${OUTPUT_ENV}/<command>)")

    def config_opts(p):
        p.add_argument("--config", type=Path, default=None, help="JSON file of config values")
        p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")

    def split_opts(p):
        p.add_argument("--train-data", type=Path, default=None)
        p.add_argument("--test-data", type=Path, default=None)
        p.add_argument("--train-count", type=int, default=4096)
        p.add_argument("--test-count", type=int, default=256)
        p.add_argument("--cache", type=Path, default=None, help="directory for cached trained models")

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset (JSON lines)")
    common(p)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--start-id", type=int, default=0)
    p.add_argument("--name", default="scenes.jsonl")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a parallel (default) or sequential model")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--paradigm", choices=X.PARADIGMS, default="parallel")
    p.add_argument("--resume", type=Path, default=None)
    config_opts(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample one scene and plot the denoising trajectory")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--scene-id", type=int, default=0)
    p.add_argument("--data", type=Path, default=None, help="take the scene from this dataset")
    p.add_argument("--steps", type=int, default=dif.INFERENCE_STEPS)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--steps", type=int, default=dif.INFERENCE_STEPS)
    p.add_argument("--min-iou", type=float, default=None, help="exit 1 when mask IoU falls below this")
    p.add_argument("--latency", type=int, default=0, metavar="N", help="also time the first N scenes")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="point-count sweep: IoU, latency and attention work per paradigm")
    common(p)
    p.add_argument("--paradigm", choices=X.PARADIGMS + ("both",), default="both")
    p.add_argument("--points", type=_points, default=list(X.POINT_COUNTS))
    p.add_argument("--latency-samples", type=int, default=12)
    split_opts(p)
    config_opts(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="train and compare the CAM/ASL variants")
    common(p)
    p.add_argument("--flags", default="cam,asl", help="components to toggle (cam, asl)")
    split_opts(p)
    config_opts(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="render a saved report or table as SVG")
    common(p)
    p.add_argument("--input", type=Path, required=True, help="report.json, scaling.json or ablation.json")
    p.add_argument("--output", type=Path, default=None)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MissingFile as e:
        print(f"error: file not found: {e.path}", file=sys.stderr)
        return EXIT_FAIL
    except InvalidArgument as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
