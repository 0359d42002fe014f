import json

import pytest

from stepdet.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from stepdet.config import OUTPUT_DIR_ENV, ConfigError, load_config

SMALL = ["--set", "scenes.n_scenes=3", "--set", "scenes.n_frames=18"]


def run(tmp_path, *args, out=None):
    return main([*args, "-o", str(out or tmp_path), *SMALL])


def pipeline(tmp_path, *extra):
    for cmd in ("simulate", "detect", "link", "eval"):
        assert run(tmp_path, cmd, *extra) == EXIT_OK, cmd


def test_full_pipeline_writes_every_artifact(tmp_path):
    pipeline(tmp_path)
    for name in ("scenes.json", "detections.jsonl", "tubes.jsonl", "eval_frame.csv", "eval_video.csv",
                 "iou_histogram.csv", "miut.csv", "eval_summary.json", "manifest_eval.json"):
        assert (tmp_path / name).is_file(), name
    summary = json.loads((tmp_path / "eval_summary.json").read_text())
    assert set(summary["frame_map"]) == {"1", "2", "3"}
    manifest = json.loads((tmp_path / "manifest_detect.json").read_text())
    assert manifest["seed"] == 0 and "detections.jsonl" in manifest["outputs"]
    assert main(["report", "-o", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "iou_histogram.svg").read_text().startswith("<?xml")


def test_noise_free_detections_score_perfectly(tmp_path):
    pipeline(tmp_path, "--set", "model.noise=0", "--set", "steps.k=6")
    summary = json.loads((tmp_path / "eval_summary.json").read_text())
    assert summary["frame_map"]["3"] == pytest.approx(1.0)


def test_runs_are_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        for cmd in ("simulate", "detect", "eval"):
            assert run(tmp_path, cmd, out=out) == EXIT_OK
    for name in ("scenes.json", "detections.jsonl", "eval_frame.csv", "eval_summary.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_seed_changes_the_scenes(tmp_path):
    run(tmp_path, "simulate", out=tmp_path / "a")
    run(tmp_path, "simulate", "--seed", "5", out=tmp_path / "b")
    assert (tmp_path / "a/scenes.json").read_bytes() != (tmp_path / "b/scenes.json").read_bytes()


def test_exit_codes(tmp_path, capsys):
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["simulate", "-o", str(tmp_path), "--set", "scenes.bogus=1"]) == EXIT_USAGE
    assert main(["simulate", "-o", str(tmp_path), "--set", "nokey"]) == EXIT_USAGE
    assert main(["simulate", "-c", str(tmp_path / "missing.yaml")]) == EXIT_USAGE
    assert main(["detect", "-o", str(tmp_path / "empty")]) == EXIT_RUNTIME
    assert "scene file not found" in capsys.readouterr().err


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "env"))
    assert main(["simulate", *SMALL]) == EXIT_OK
    assert (tmp_path / "env/scenes.json").is_file()


def test_train_then_detect_with_checkpoint(tmp_path):
    run(tmp_path, "simulate")
    assert run(tmp_path, "train", "--set", "training.iterations=2", "--set", "training.batch_size=2") == EXIT_OK
    assert len((tmp_path / "train_log.csv").read_text().splitlines()) == 3
    ckpt = str(tmp_path / "heads.json")
    assert run(tmp_path, "detect", "--set", "model.kind=linear", "--checkpoint", ckpt) == EXIT_OK
    assert run(tmp_path, "detect", "--set", "model.kind=linear", "--set", "steps.s_max=2",
               "--set", "steps.extension=[false,true]", "--set", "steps.tau=[0.3,0.5]",
               "--checkpoint", ckpt) == EXIT_RUNTIME


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("seed: 3\nsteps:\n  k: 4\n")
    cfg = load_config(path, {"steps.k": 5})
    assert cfg.seed == 3 and cfg.steps.k == 5
    path.write_text("steps:\n  k: 4\n  nope: 1\n")
    with pytest.raises(ConfigError, match="nope"):
        load_config(path)
    with pytest.raises(ConfigError):
        load_config(None, {"schema_version": 2})
    assert load_config("configs/reference.yaml").hashable() == load_config(None).hashable()
