import json

import pytest

from pvd.cli import main

TINY = ["d=16", "n_blocks=1", "n_heads=2", "fusion_layers=1", "heat_hidden=8", "n_vertices=6",
        "asl_grid=[8,8]", "batch_size=8", "epochs=1"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--seed", "7", "--count", "16", "--out", str(root / "data")]) == 0
    assert main(["gen-data", "--seed", "8", "--count", "6", "--start-id", "100", "--out", str(root / "test")]) == 0
    assert main(["train", "--data", str(root / "data" / "scenes.jsonl"), "--out", str(root / "run"), *TINY]) == 0
    return root


def test_gen_data_is_byte_identical(tmp_path, workspace):
    assert main(["gen-data", "--seed", "7", "--count", "16", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "scenes.jsonl").read_bytes() == (workspace / "data" / "scenes.jsonl").read_bytes()
    snap = json.loads((tmp_path / "config.json").read_text())
    assert snap["seed"] == 7 and snap["count"] == 16


def test_usage_errors_exit_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["fly"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["gen-data", "--count", "3", "--colour", "red"])
    assert e.value.code == 2
    data = tmp_path / "d"
    main(["gen-data", "--count", "4", "--out", str(data)])
    assert main(["train", "--data", str(data / "scenes.jsonl"), "--out", str(tmp_path / "r"), "wings=2"]) == 2
    assert "wings" in capsys.readouterr().err
    assert main(["train", "--data", str(data / "scenes.jsonl"), "--out", str(tmp_path / "r"), "novalue"]) == 2


def test_missing_file_exits_1_with_path(tmp_path, capsys):
    missing = tmp_path / "nope.jsonl"
    assert main(["train", "--data", str(missing), "--out", str(tmp_path)]) == 1
    assert str(missing) in capsys.readouterr().err
    assert main(["eval", "--checkpoint", str(tmp_path / "x.ckpt"), "--data", str(missing)]) == 1
    assert main(["plot", "--input", str(tmp_path / "r.json")]) == 1


def test_config_precedence(tmp_path, workspace):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"lr": 0.01, "epochs": 1, "seed": 5, "weight_decay": 0.0, "d": 16, "n_blocks": 1,
                               "n_heads": 2, "fusion_layers": 1, "heat_hidden": 8, "n_vertices": 6,
                               "asl_grid": [8, 8], "batch_size": 16}))
    out = tmp_path / "run"
    assert main(["train", "--data", str(workspace / "data" / "scenes.jsonl"), "--config", str(cfg),
                 "--out", str(out), "--seed", "3", "lr=0.002"]) == 0
    snap = json.loads((out / "config.json").read_text())["train_config"]
    assert snap["lr"] == 0.002          # override beats file
    assert snap["seed"] == 3            # flag beats file
    assert snap["weight_decay"] == 0.0  # file beats default
    assert snap["decay_at"] == 0.6      # default


def test_training_and_eval_are_reproducible(tmp_path, workspace):
    data = workspace / "data" / "scenes.jsonl"
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "again"), *TINY]) == 0
    a = (workspace / "run" / "model.ckpt").read_bytes()
    assert (tmp_path / "again" / "model.ckpt").read_bytes() == a
    test = str(workspace / "test" / "scenes.jsonl")
    ckpt = str(workspace / "run" / "model.ckpt")
    for name in ("e1", "e2"):
        assert main(["eval", "--checkpoint", ckpt, "--data", test, "--out", str(tmp_path / name)]) == 0
    for f in ("report.json", "report.csv", "report.svg"):
        assert (tmp_path / "e1" / f).read_bytes() == (tmp_path / "e2" / f).read_bytes()
    rep = json.loads((tmp_path / "e1" / "report.json").read_text())
    assert len(rep["records"]) == 6


def test_eval_min_iou_threshold(tmp_path, workspace):
    args = ["eval", "--checkpoint", str(workspace / "run" / "model.ckpt"),
            "--data", str(workspace / "test" / "scenes.jsonl"), "--out", str(tmp_path)]
    assert main(args + ["--min-iou", "0.999"]) == 1
    assert main(args + ["--min-iou", "0.0"]) == 0


def test_sample_trajectory_defaults_to_four_steps(tmp_path, workspace):
    ckpt = str(workspace / "run" / "model.ckpt")
    assert main(["sample", "--checkpoint", ckpt, "--seed", "2", "--scene-id", "5", "--out", str(tmp_path / "a")]) == 0
    res = json.loads((tmp_path / "a" / "sample.json").read_text())
    assert res["steps"] == 4 and len(res["contour"]) == 6
    svg = (tmp_path / "a" / "trajectory.svg").read_text()
    assert svg.count("x0 estimate") == 4
    assert main(["sample", "--checkpoint", ckpt, "--seed", "2", "--scene-id", "5", "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "b" / "trajectory.svg").read_text() == svg
    assert main(["sample", "--checkpoint", ckpt, "--scene-id", "3", "--data", str(workspace / "data" / "scenes.jsonl"),
                 "--steps", "2", "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "trajectory.svg").read_text().count("x0 estimate") == 2


def test_output_directory_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("PVD_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["gen-data", "--count", "2"]) == 0
    assert (tmp_path / "env" / "gen-data" / "scenes.jsonl").is_file()


def test_plot_renders_saved_report(tmp_path, workspace):
    ev = tmp_path / "ev"
    main(["eval", "--checkpoint", str(workspace / "run" / "model.ckpt"),
          "--data", str(workspace / "test" / "scenes.jsonl"), "--out", str(ev)])
    assert main(["plot", "--input", str(ev / "report.json"), "--output", str(tmp_path / "p.svg")]) == 0
    assert (tmp_path / "p.svg").read_bytes() == (ev / "report.svg").read_bytes()


def test_bench_and_ablate_small(tmp_path):
    common = ["--train-count", "8", "--test-count", "4", "--seed", "1", *TINY, "n_vertices=3"]
    assert main(["bench", "--points", "3,4", "--latency-samples", "3", "--out", str(tmp_path / "b"), *common]) == 0
    table = json.loads((tmp_path / "b" / "scaling.json").read_text())
    assert [(r["paradigm"], r["n_points"]) for r in table["rows"]] == [
        ("parallel", 3), ("parallel", 4), ("sequential", 3), ("sequential", 4)]
    assert (tmp_path / "b" / "scaling.svg").is_file() and (tmp_path / "b" / "scaling.csv").is_file()
    assert main(["plot", "--input", str(tmp_path / "b" / "scaling.json"), "--output", str(tmp_path / "s.svg")]) == 0
    assert (tmp_path / "s.svg").read_bytes() == (tmp_path / "b" / "scaling.svg").read_bytes()
    assert main(["ablate", "--out", str(tmp_path / "a"), *common]) == 0
    rows = json.loads((tmp_path / "a" / "ablation.json").read_text())["rows"]
    assert [r["variant"] for r in rows] == ["neither", "CAM only", "ASL only", "both"]
    assert main(["ablate", "--flags", "asl", "--out", str(tmp_path / "a2"), "--cache", str(tmp_path / "a" / "cache"),
                 *common]) == 0
    rows2 = json.loads((tmp_path / "a2" / "ablation.json").read_text())["rows"]
    assert [r["variant"] for r in rows2] == ["CAM only", "both"]
    assert rows2[1] == rows[3]
