"""End-to-end tests of the command-line interface.

One tiny dataset is synthesized through the CLI itself, then threaded through
train, render, eval, and masktrack.  Everything runs in-process via
deformnvs.cli.main so exit codes and file outputs can be checked directly.
"""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from deformnvs import cli, tenio
from deformnvs.training import NumericError


SCENE_CONFIG = {"seed": 5, "n_frames": 24, "height": 32, "width": 32}

TRAIN_CONFIG = {
    "max_steps": 30,
    "rays_per_step": 16,
    "n_samples": 8,
    "n_src_min": 3,
    "n_src_max": 4,
    "eval_max_frames": 1,
    "eval_chunk": 256,
    "log_every": 1000,
    "enc": {"d_z": 16, "widths": [8, 12, 16]},
    "net": {"d_model": 32, "n_rounds": 1, "d_ff": 64},
}


def _tree_digest(root: Path) -> dict:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def eval_config(workdir):
    """Cheap rendering settings so full-image evals stay fast."""
    path = workdir / "eval.json"
    path.write_text(json.dumps(
        {"n_samples": 8, "eval_max_frames": 1, "eval_chunk": 256, "n_src_min": 3}
    ))
    return path


@pytest.fixture(scope="module")
def cli_dataset(workdir):
    cfg = workdir / "scene.json"
    cfg.write_text(json.dumps(SCENE_CONFIG))
    out = workdir / "scene"
    rc = cli.main(["synth", "--config", str(cfg), "--out", str(out), "--candidates", "3"])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def cli_checkpoint(workdir, cli_dataset):
    cfg = workdir / "train.json"
    cfg.write_text(json.dumps(TRAIN_CONFIG))
    out = workdir / "run"
    before = _tree_digest(cli_dataset)
    rc = cli.main([
        "train", "--data", str(cli_dataset), "--out", str(out),
        "--config", str(cfg), "--seed", "0",
    ])
    assert rc == 0
    # training must never write into its input dataset
    assert _tree_digest(cli_dataset) == before
    return out


def test_help_lists_subcommands(capsys):
    assert cli.main(["--help"]) == 0
    text = capsys.readouterr().out
    for name in ("synth", "train", "render", "eval", "masktrack"):
        assert name in text


def test_usage_error_exit_code():
    assert cli.main(["frobnicate"]) == 2
    assert cli.main([]) == 2


def test_synth_outputs(cli_dataset):
    manifest = json.loads((cli_dataset / "manifest.json").read_text())
    assert len(manifest["frames"]) == 24
    assert manifest["spec"]["seed"] == 5
    assert (cli_dataset / "frames" / "0000.image.ten").exists()
    assert (cli_dataset / "candidates" / "0000.masks.ten").exists()
    assert (cli_dataset / "frames" / "0000.ppm").read_bytes()[:2] == b"P6"


def test_train_outputs(cli_checkpoint):
    report = json.loads((cli_checkpoint / "report.json").read_text())
    assert report["task"] == "msssr"
    assert report["steps"] == TRAIN_CONFIG["max_steps"]
    assert set(report["mean"]) == {"psnr", "l1", "iou"}
    assert len(report["per_frame"]) == 1
    losses = json.loads((cli_checkpoint / "losses.json").read_text())
    assert len(losses) == TRAIN_CONFIG["max_steps"]
    assert all(np.isfinite(losses))
    assert (cli_checkpoint / "checkpoint" / "index.json").exists()


def test_train_deterministic(workdir, cli_dataset, cli_checkpoint):
    cfg = workdir / "train.json"
    out = workdir / "run_again"
    rc = cli.main([
        "train", "--data", str(cli_dataset), "--out", str(out),
        "--config", str(cfg), "--seed", "0",
    ])
    assert rc == 0
    a = json.loads((cli_checkpoint / "report.json").read_text())
    b = json.loads((out / "report.json").read_text())
    a.pop("wall_seconds"), b.pop("wall_seconds")
    assert a == b
    assert (out / "losses.json").read_bytes() == (cli_checkpoint / "losses.json").read_bytes()


def test_render_outputs(workdir, cli_dataset, cli_checkpoint, eval_config):
    out = workdir / "render"
    rc = cli.main([
        "render", "--ckpt", str(cli_checkpoint / "checkpoint"),
        "--data", str(cli_dataset), "--frame", "3", "--n-src", "3",
        "--config", str(eval_config), "--out", str(out),
    ])
    assert rc == 0
    color = tenio.load_ten(out / "color.ten")
    assert color.shape == (32, 32, 3)
    assert np.isfinite(color).all()
    assert tenio.load_ten(out / "mask.ten").shape == (32, 32)
    assert (out / "color.ppm").read_bytes()[:2] == b"P6"


def test_render_bad_frame_is_data_error(workdir, cli_dataset, cli_checkpoint):
    rc = cli.main([
        "render", "--ckpt", str(cli_checkpoint / "checkpoint"),
        "--data", str(cli_dataset), "--frame", "999",
        "--out", str(workdir / "render_bad"),
    ])
    assert rc == 3


def test_eval_report_and_determinism(workdir, cli_dataset, cli_checkpoint, eval_config):
    paths = [workdir / "eval_a.json", workdir / "eval_b.json"]
    for p in paths:
        rc = cli.main([
            "eval", "--ckpt", str(cli_checkpoint / "checkpoint"),
            "--data", str(cli_dataset), "--n-src", "3",
            "--config", str(eval_config), "--out", str(p),
        ])
        assert rc == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()
    report = json.loads(paths[0].read_text())
    assert report["n_src"] == 3
    assert report["mean"]["psnr"] > 0


def test_eval_source_sweep(workdir, cli_dataset, cli_checkpoint, eval_config):
    out = workdir / "sweep.json"
    rc = cli.main([
        "eval", "--ckpt", str(cli_checkpoint / "checkpoint"),
        "--data", str(cli_dataset), "--n-src-sweep",
        "--config", str(eval_config), "--out", str(out),
    ])
    assert rc == 0
    report = json.loads(out.read_text())
    assert [row["n_src"] for row in report["rows"]] == [5, 10, 15, 20, 25]
    for row in report["rows"]:
        assert set(row["mean"]) == {"psnr", "l1", "iou"}


def test_masktrack_outputs(workdir, cli_dataset):
    out = workdir / "track"
    rc = cli.main([
        "masktrack", "--candidates", str(cli_dataset / "candidates"),
        "--out", str(out),
    ])
    assert rc == 0
    indices = json.loads((out / "indices.json").read_text())["indices"]
    assert len(indices) == 24
    assert (out / "0000.mask.ten").exists()
    # rerunning must reproduce the same choices
    out2 = workdir / "track2"
    assert cli.main([
        "masktrack", "--candidates", str(cli_dataset / "candidates"),
        "--out", str(out2),
    ]) == 0
    assert json.loads((out2 / "indices.json").read_text())["indices"] == indices


def test_missing_dataset_is_data_error(workdir):
    rc = cli.main([
        "train", "--data", str(workdir / "nope"), "--out", str(workdir / "x"),
    ])
    assert rc == 3


def test_bad_config_key_is_data_error(workdir, cli_dataset):
    cfg = workdir / "bad.json"
    cfg.write_text(json.dumps({"no_such_option": 1}))
    rc = cli.main([
        "train", "--data", str(cli_dataset), "--out", str(workdir / "y"),
        "--config", str(cfg),
    ])
    assert rc == 3


def test_numeric_abort_exit_code(workdir, cli_dataset, monkeypatch):
    def boom(*args, **kwargs):
        raise NumericError("non-finite gradient for 'w'")

    monkeypatch.setattr(cli, "run_msssr", boom)
    rc = cli.main([
        "train", "--data", str(cli_dataset), "--out", str(workdir / "z"),
    ])
    assert rc == 4
