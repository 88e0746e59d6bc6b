"""Command line entry point: ``rainreview {synth,train,eval,derain,report}``."""

from __future__ import annotations

import argparse
import csv
import fcntl
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint
from .config import OUT_ENV, RunConfig, load_config
from .data import (
    ClipPair,
    TaskData,
    _numbered_frames,
    _read_png,
    _write_png,
    clip_windows,
    generate_task_dataset,
    load_clip,
    procedural_clean_clip,
    read_manifest,
    to_uint8,
)
from .metrics import EVAL_FIELDS, evaluate_task
from .nets import DerainNet, build_nets, derain_forward, windows_to_tensor
from .report import write_report
from .train import TaskSchedule, TrainingError, run_schedule
from .validation import ValidationError

log = logging.getLogger("rainreview")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


def _config(args) -> RunConfig:
    if not args.config:
        raise ValidationError("--config is required for this command")
    cfg = load_config(args.config)
    return cfg.with_overrides(preset=args.preset, seed=args.seed, ablation=args.ablation, out_dir=args.out)


def _clean_clips(cfg: RunConfig, task_index: int) -> tuple[list, list]:
    d = cfg.data
    n = d.train_clips + d.eval_clips
    splits = ["train"] * d.train_clips + ["eval"] * d.eval_clips
    if d.clean_dirs:
        if len(d.clean_dirs) < n:
            raise ValidationError(f"data.clean_dirs lists {len(d.clean_dirs)} clips, need {n}")
        clips = []
        for p in d.clean_dirs[:n]:
            files = _numbered_frames(Path(p))
            if not files:
                raise ValidationError(f"no frames in clean clip directory {p}")
            clips.append(np.stack([_read_png(f)[..., :3] for f in files]).astype(np.float32) / 255.0)
        return clips, splits
    clips = [procedural_clean_clip(d.frames, d.height, d.width, seed=d.clean_seed * 1000 + task_index * 100 + k)
             for k in range(n)]
    return clips, splits


def cmd_synth(args) -> int:
    cfg = _config(args)
    for i, task in enumerate(cfg.tasks):
        if task.spec is None:
            print(f"{task.task_id}: using existing dataset {cfg.manifest_path(task)}")
            continue
        clips, splits = _clean_clips(cfg, i)
        path = generate_task_dataset(task.spec, clips, cfg.data_root / task.task_id, splits)
        print(path)
    return EXIT_OK


def _schedule(cfg: RunConfig) -> TaskSchedule:
    entries = []
    for task in cfg.tasks:
        m = cfg.manifest_path(task)
        if not m.is_file():
            raise ValidationError(f"dataset for task {task.task_id!r} not found at {m}; run `rainreview synth` first")
        entries.append((task.task_id, m))
    return TaskSchedule(entries)


def cmd_train(args) -> int:
    cfg = _config(args)
    run_dir = Path(cfg.out_dir) / cfg.ablation
    stages = cfg.stage_configs()
    if args.dry_run:
        print(f"config {cfg.source} fingerprint {cfg.fingerprint()}")
        print(f"preset {cfg.preset}, ablation {cfg.ablation}, seed {cfg.seed}, run dir {run_dir}")
        for sc, task in zip(stages, cfg.tasks):
            kind = "initial" if sc.stage_index == 1 else "continual"
            print(f"stage {sc.stage_index}: task {task.task_id} ({kind}), {sc.epochs} epochs, "
                  f"lr {sc.learning_rate}, crop {sc.crop_size}, data {cfg.manifest_path(task)}")
        return EXIT_OK
    schedule = _schedule(cfg)
    nets = build_nets(cfg.preset, seed=cfg.seed)
    ckpts, _ = run_schedule(schedule, stages[0], nets, cfg.ablation_flags, out_dir=run_dir,
                            resume=args.resume, stage_configs=stages)
    for j in range(1, len(ckpts) + 1):
        print(run_dir / f"stage_{j}.ckpt")
    return EXIT_OK


def _dataset_windows(path: Path, split: str):
    """Windows from a task manifest/dir or a single clip dir."""
    if (path / "clean").is_dir() or path.name == "clean":
        clip = load_clip(path)
        return clip.task_id, clip_windows(clip)
    m = read_manifest(path)
    splits = {"eval": ("eval",), "train": ("train",), "all": ("train", "eval")}[split]
    data = TaskData.from_manifest(path, splits)
    windows = data.train + data.held_out
    if not windows and split == "eval":
        data = TaskData.from_manifest(path, ("train",))
        windows = data.train
    if not windows:
        raise ValidationError(f"no {split} windows in {path}")
    return m["task_id"], windows


def _append_eval(path: Path, rec) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a+", newline="") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        fh.seek(0)
        empty = not fh.read(1)
        w = csv.DictWriter(fh, EVAL_FIELDS)
        if empty:
            w.writeheader()
        w.writerow(rec.row())
        fh.flush()
        fcntl.flock(fh, fcntl.LOCK_UN)


def _load_derain(path) -> tuple[DerainNet, int]:
    ckpt = load_checkpoint(path)
    net = DerainNet(ckpt.derain_arch)
    ckpt.load_into(derain=net)
    return net.eval(), ckpt.stage_index


def cmd_eval(args) -> int:
    net, stage = _load_derain(args.checkpoint)
    if args.config:
        cfg = _config(args)
        expected = build_nets(cfg.preset)[0].arch
        if expected != net.arch:
            raise CheckpointError(f"checkpoint arch {net.arch} does not match preset {cfg.preset!r} ({expected})")
    task_id, windows = _dataset_windows(Path(args.dataset), args.split)
    rec = evaluate_task(net, windows, stage=stage, epoch=0, task_id=task_id)
    print(f"{task_id} psnr {rec.psnr_db:.4f} ssim {rec.ssim:.4f} windows {rec.n_windows}")
    # kept apart from the training run's own eval.csv
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval"
    _append_eval(out / "eval.csv", rec)
    return EXIT_OK


def cmd_derain(args) -> int:
    net, _ = _load_derain(args.checkpoint)
    clip_dir = Path(args.clip)
    if (clip_dir / "rainy").is_dir():
        rainy = load_clip(clip_dir).rainy
    else:
        files = _numbered_frames(clip_dir)
        if not files:
            raise ValidationError(f"no frames found in {clip_dir}")
        rainy = np.stack([_read_png(f)[..., :3] for f in files]).astype(np.float32) / 255.0
    clip = ClipPair(rainy=rainy, clean=rainy, task_id=clip_dir.name)
    out = Path(args.out) if args.out else clip_dir / "derained"
    out.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        for win in clip_windows(clip):
            frames, _ = windows_to_tensor(win)
            b, _ = derain_forward(net, frames)
            _write_png(out / f"{win.center_index:05d}.png", to_uint8(b[0].numpy().transpose(1, 2, 0)))
    print(f"wrote {len(clip)} frames to {out}")
    return EXIT_OK


def _log_dirs(specs) -> dict:
    dirs = {}
    for s in specs:
        if "=" in s:
            arm, d = s.split("=", 1)
            dirs[arm] = Path(d)
            continue
        p = Path(s)
        if (p / "eval.csv").is_file():
            dirs[p.name] = p
        else:
            subs = sorted(q for q in p.iterdir() if (q / "eval.csv").is_file()) if p.is_dir() else []
            if not subs:
                raise ValidationError(f"no eval.csv under {p}")
            for q in subs:
                dirs[q.name] = q
    return dirs


def cmd_report(args) -> int:
    dirs = _log_dirs(args.log_dir)
    out = Path(args.out) if args.out else Path(args.log_dir[0]) / "report"
    res = write_report(dirs, out)
    print(res["summary_txt"].read_text(), end="")
    for p in res["plots"]:
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config file (YAML or JSON)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--preset", choices=["tiny", "paper"], help="network/training preset")
    common.add_argument("--ablation", choices=["base", "frd", "full"], help="which stage-2+ terms to train with")
    common.add_argument("--out", help=f"output directory (default: config out_dir, then ${OUT_ENV}, then ./runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="rainreview", description=__doc__, parents=[common])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write synthetic rain datasets")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="run the staged training schedule")
    s.add_argument("--dry-run", action="store_true", help="validate and print the plan only")
    s.add_argument("--resume", action="store_true", help="continue an interrupted run")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True, help="task directory, manifest.json, or clip directory")
    s.add_argument("--split", choices=["eval", "train", "all"], default="eval")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("derain", parents=[common], help="derain every frame of a clip")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--clip", required=True, help="clip directory (with rainy/) or a folder of frames")
    s.set_defaults(func=cmd_derain)

    s = sub.add_parser("report", parents=[common], help="forgetting curves and drop summary")
    s.add_argument("--log-dir", nargs="+", required=True,
                   help="run directories (or ARM=DIR pairs, or a parent of several runs)")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValidationError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingError, OSError, RuntimeError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
