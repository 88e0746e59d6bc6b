import csv

import numpy as np
import pytest
import torch
import yaml
from PIL import Image

from rainreview import cli
from rainreview.checkpoint import load_checkpoint
from rainreview.data import TaskData, clip_windows, load_clip
from rainreview.metrics import evaluate_task, forgetting_curve, read_eval_csv
from rainreview.nets import DerainNet, derain_forward, windows_to_tensor
from rainreview.train import TrainingError

from conftest import spec_a, spec_b


@pytest.fixture
def config(tmp_path):
    raw = {
        "preset": "tiny",
        "seed": 1,
        "data": {"frames": 5, "height": 32, "width": 32, "train_clips": 1, "eval_clips": 1},
        "tasks": [spec_a().to_dict(), spec_b().to_dict()],
        "train": {"epochs": 2, "crop_size": 16},
    }
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump(raw))
    return p


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def trained(config, tmp_path):
    out = tmp_path / "out"
    assert run("synth", "--config", config, "--out", out) == 0
    assert run("train", "--config", config, "--out", out, "--ablation", "base") == 0
    return out


def test_synth_writes_manifests_and_is_reproducible(config, tmp_path, capsys):
    assert run("synth", "--config", config, "--out", tmp_path / "x") == 0
    printed = capsys.readouterr().out.split()
    assert printed == [str(tmp_path / "x" / "data" / t / "manifest.json") for t in ("A", "B")]
    run("synth", "--config", config, "--out", tmp_path / "y")
    for p in sorted((tmp_path / "x").rglob("*.png")):
        assert p.read_bytes() == (tmp_path / "y" / p.relative_to(tmp_path / "x")).read_bytes()


def test_dry_run_plans_without_writing(config, tmp_path, capsys):
    assert run("train", "--config", config, "--out", tmp_path / "o", "--dry-run") == 0
    out = capsys.readouterr().out
    assert "stage 1: task A (initial)" in out and "stage 2: task B (continual)" in out
    assert not (tmp_path / "o").exists()


def test_train_outputs(trained):
    run_dir = trained / "base"
    for name in ("stage_1.ckpt", "stage_2.ckpt", "train.csv", "eval.csv"):
        assert (run_dir / name).exists()
    assert load_checkpoint(run_dir / "stage_2.ckpt").extra["ablation"]["use_rrm"] is False


def test_eval_matches_in_process(trained, capsys):
    ck = trained / "base" / "stage_2.ckpt"
    assert run("eval", "--checkpoint", ck, "--dataset", trained / "data" / "A") == 0
    first = capsys.readouterr().out
    assert run("eval", "--checkpoint", ck, "--dataset", trained / "data" / "A") == 0
    assert capsys.readouterr().out == first

    state = load_checkpoint(ck)
    net = DerainNet(state.derain_arch)
    state.load_into(derain=net)
    rec = evaluate_task(net.eval(), TaskData.from_manifest(trained / "data" / "A", ("eval",)).held_out)
    assert first.split()[2] == f"{rec.psnr_db:.4f}"
    rows = read_eval_csv(trained / "base" / "eval" / "eval.csv")
    assert len(rows) == 2 and rows[0].psnr_db == rec.psnr_db


def test_eval_preset_mismatch_is_validation_error(trained, config, capsys):
    code = run("eval", "--checkpoint", trained / "base" / "stage_2.ckpt", "--dataset", trained / "data" / "A",
               "--config", config, "--preset", "paper")
    assert code == 1 and "does not match" in capsys.readouterr().err


def test_derain_matches_in_process(trained, tmp_path):
    clip_dir = trained / "data" / "B" / "clip_000"
    assert run("derain", "--checkpoint", trained / "base" / "stage_2.ckpt", "--clip", clip_dir,
               "--out", tmp_path / "der") == 0
    outs = sorted((tmp_path / "der").glob("*.png"))
    clip = load_clip(clip_dir)
    assert len(outs) == len(clip)
    state = load_checkpoint(trained / "base" / "stage_2.ckpt")
    net = DerainNet(state.derain_arch)
    state.load_into(derain=net)
    for w, p in zip(clip_windows(clip), outs):
        with torch.no_grad():
            b = derain_forward(net.eval(), windows_to_tensor(w)[0])[0][0].numpy().transpose(1, 2, 0)
        assert np.array_equal(np.asarray(Image.open(p)), np.rint(np.clip(b, 0, 1) * 255).astype(np.uint8))


def test_report_matches_forgetting_curves(trained, tmp_path, capsys):
    assert run("report", "--log-dir", trained, "--out", tmp_path / "rep") == 0
    with (tmp_path / "rep" / "summary.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    recs = read_eval_csv(trained / "base" / "eval.csv")
    for r in rows:
        assert r["arm"] == "base"
        assert float(r["drop"]) == forgetting_curve(recs, r["task_id"]).drop
    assert (tmp_path / "rep" / "forgetting_A.png").stat().st_size > 0


def test_report_empty_log_is_error(tmp_path):
    (tmp_path / "arm").mkdir()
    (tmp_path / "arm" / "eval.csv").write_text("stage,epoch,task_id,psnr,ssim,n_windows\n")
    assert run("report", "--log-dir", f"x={tmp_path / 'arm'}") == 1


def test_validation_exit_codes(tmp_path, config):
    assert run("synth") == 1
    assert run("train", "--config", tmp_path / "missing.yaml") == 1
    bad = tmp_path / "bad.yaml"
    bad.write_text("tasks: []\n")
    assert run("synth", "--config", bad) == 1
    assert run("train", "--config", config, "--out", tmp_path / "nodata") == 1
    assert run("eval", "--checkpoint", tmp_path / "none.ckpt", "--dataset", tmp_path) == 1


def test_runtime_failure_exit_code(config, tmp_path, monkeypatch):
    run("synth", "--config", config, "--out", tmp_path / "o")

    def boom(*a, **k):
        raise TrainingError("non-finite derain loss")

    monkeypatch.setattr(cli, "run_schedule", boom)
    assert run("train", "--config", config, "--out", tmp_path / "o") == 2


def test_env_var_sets_output_root(config, tmp_path, monkeypatch):
    monkeypatch.setenv("RAINREVIEW_OUT", str(tmp_path / "env"))
    assert run("synth", "--config", config) == 0
    assert (tmp_path / "env" / "data" / "A" / "manifest.json").exists()


def test_clean_dirs_source(tmp_path):
    from rainreview.data import _write_png, procedural_clean_clip, to_uint8

    dirs = []
    for k in range(2):
        d = tmp_path / f"clean{k}"
        d.mkdir()
        for t, frame in enumerate(procedural_clean_clip(5, 32, 32, seed=k)):
            _write_png(d / f"{t:05d}.png", to_uint8(frame))
        dirs.append(str(d))
    raw = {"data": {"train_clips": 1, "eval_clips": 1, "clean_dirs": dirs}, "tasks": [spec_a().to_dict()]}
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(raw))
    assert run("synth", "--config", p, "--out", tmp_path / "o") == 0
    clip = load_clip(tmp_path / "o" / "data" / "A" / "clip_000")
    first = np.asarray(Image.open(dirs[0] + "/00000.png"))
    assert np.array_equal(np.rint(clip.clean[0] * 255).astype(np.uint8), first)
