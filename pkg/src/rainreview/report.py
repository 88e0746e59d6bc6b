"""Forgetting-curve plots and per-arm drop summaries from ``eval.csv`` logs."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import forgetting_curve, read_eval_csv  # noqa: E402
from .validation import ValidationError  # noqa: E402

SUMMARY_FIELDS = ("arm", "task_id", "own_stage", "best_own_psnr", "final_psnr", "drop")


def summarize(log_dirs: dict) -> list[dict]:
    """One row per (arm, task) with the task's forgetting drop."""
    rows = []
    for arm, d in log_dirs.items():
        records = read_eval_csv(Path(d) / "eval.csv")
        if not records:
            raise ValidationError(f"{d}/eval.csv holds no evaluations")
        for task_id in dict.fromkeys(r.task_id for r in records):
            c = forgetting_curve(records, task_id)
            rows.append({"arm": arm, "task_id": task_id, "own_stage": c.own_stage,
                         "best_own_psnr": c.best_own_psnr, "final_psnr": c.final_psnr, "drop": c.drop})
    return rows


def _x_positions(points):
    # consecutive epochs across stages on one axis
    keys = sorted({(p.stage, p.epoch) for p in points})
    return {k: i + 1 for i, k in enumerate(keys)}


def write_report(log_dirs: dict, out_dir) -> dict:
    """Write ``summary.csv``, ``summary.txt`` and one PNG per task.

    ``log_dirs`` maps an arm name to a run directory containing ``eval.csv``.
    Returns a dict of the written paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = summarize(log_dirs)

    with (out_dir / "summary.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, SUMMARY_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    lines = [f"{'arm':<10}{'task':<10}{'best':>9}{'final':>9}{'drop':>9}"]
    for r in rows:
        lines.append(f"{r['arm']:<10}{r['task_id']:<10}{r['best_own_psnr']:9.2f}{r['final_psnr']:9.2f}{r['drop']:9.2f}")
    (out_dir / "summary.txt").write_text("\n".join(lines) + "\n")

    plots = []
    tasks = list(dict.fromkeys(r["task_id"] for r in rows))
    curves = {arm: read_eval_csv(Path(d) / "eval.csv") for arm, d in log_dirs.items()}
    for task_id in tasks:
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
        for arm, records in curves.items():
            if not any(r.task_id == task_id for r in records):
                continue
            c = forgetting_curve(records, task_id)
            allpts = [p for t in dict.fromkeys(r.task_id for r in records) for p in forgetting_curve(records, t).points]
            xs = _x_positions(allpts)
            x = [xs[(p.stage, p.epoch)] for p in c.points]
            axes[0].plot(x, [p.psnr for p in c.points], label=arm)
            axes[1].plot(x, [p.ssim for p in c.points], label=arm)
        axes[0].set_ylabel("PSNR (dB)")
        axes[1].set_ylabel("SSIM")
        for ax in axes:
            ax.set_xlabel("epoch (all stages)")
            ax.set_title(f"task {task_id}")
            ax.legend()
        fig.tight_layout()
        p = out_dir / f"forgetting_{task_id}.png"
        fig.savefig(p, dpi=100)
        plt.close(fig)
        plots.append(p)
    return {"summary_csv": out_dir / "summary.csv", "summary_txt": out_dir / "summary.txt", "plots": plots,
            "rows": rows}
