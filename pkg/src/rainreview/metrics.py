"""Luminance PSNR/SSIM evaluation and forgetting curves."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np
import torch

from .losses import GRAY_WEIGHTS, ssim as _ssim
from .validation import ValidationError, check_same_shape

PSNR_CAP = 99.0
EVAL_FIELDS = ("stage", "epoch", "task_id", "psnr", "ssim", "n_windows")


@dataclass
class EvalRecord:
    stage: int
    epoch: int
    task_id: str
    psnr_db: float
    ssim: float
    n_windows: int

    def __post_init__(self):
        if self.n_windows < 1:
            raise ValidationError("an EvalRecord needs at least one window")

    def row(self) -> dict:
        return {"stage": self.stage, "epoch": self.epoch, "task_id": self.task_id,
                "psnr": repr(float(self.psnr_db)), "ssim": repr(float(self.ssim)), "n_windows": self.n_windows}


def rgb_to_luminance(img) -> np.ndarray:
    """BT.601 luma of an ``H x W x 3`` image in [0, 1], shape ``H x W x 1``."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValidationError(f"luminance needs an H x W x 3 image, got shape {img.shape}")
    return (img @ np.asarray(GRAY_WEIGHTS))[..., None]


def psnr(pred, ref, data_range: float = 1.0) -> float:
    """``10 log10(range^2 / MSE)``, capped at 99 dB."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    check_same_shape(pred, ref, ("pred", "ref"))
    mse = np.mean((pred - ref) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(data_range ** 2 / mse), PSNR_CAP))


def ssim_image(pred, ref) -> float:
    """SSIM of two ``H x W x C`` arrays, using the same kernel as the loss."""
    a = torch.from_numpy(np.ascontiguousarray(np.asarray(pred, dtype=np.float64).transpose(2, 0, 1)))
    b = torch.from_numpy(np.ascontiguousarray(np.asarray(ref, dtype=np.float64).transpose(2, 0, 1)))
    return float(_ssim(a, b))


def window_metrics(pred, ref) -> tuple[float, float]:
    """(PSNR, SSIM) of one prediction on the luminance channel."""
    yp, yr = rgb_to_luminance(pred), rgb_to_luminance(ref)
    return psnr(yp, yr), ssim_image(yp, yr)


def _predict(net, frames: torch.Tensor) -> torch.Tensor:
    from .nets import DerainNet, derain_forward

    if isinstance(net, DerainNet):
        return derain_forward(net, frames)[0]
    return net(frames)


def evaluate_windows(net, windows) -> list[tuple[float, float]]:
    from .nets import windows_to_tensor

    if not windows:
        raise ValidationError("cannot evaluate an empty window set")
    params = list(net.parameters()) if isinstance(net, torch.nn.Module) else []
    dtype = params[0].dtype if params else torch.float32
    out = []
    with torch.no_grad():
        for win in windows:
            frames, _ = windows_to_tensor(win, dtype)
            b = _predict(net, frames)[0].double().numpy().transpose(1, 2, 0)
            out.append(window_metrics(b, win.target))
    return out


def evaluate_task(net, windows, stage: int = 0, epoch: int = 0, task_id: str = "") -> EvalRecord:
    """Mean luminance PSNR and SSIM of the derained centers over ``windows``.

    ``net`` is a :class:`DerainNet` or any callable mapping an
    ``(N, 5, 3, H, W)`` frame tensor to an ``(N, 3, H, W)`` background.
    """
    per = evaluate_windows(net, windows)
    p = float(np.mean([m[0] for m in per]))
    s = float(np.mean([m[1] for m in per]))
    return EvalRecord(stage=stage, epoch=epoch, task_id=task_id, psnr_db=p, ssim=s, n_windows=len(per))


def read_eval_csv(path) -> list[EvalRecord]:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"eval log not found: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [EvalRecord(int(r["stage"]), int(r["epoch"]), r["task_id"], float(r["psnr"]), float(r["ssim"]),
                       int(r["n_windows"])) for r in rows]


class CurvePoint(NamedTuple):
    stage: int
    epoch: int
    psnr: float
    ssim: float


@dataclass
class ForgettingCurve:
    task_id: str
    points: list[CurvePoint]
    own_stage: int
    best_own_psnr: float
    final_psnr: float

    @property
    def drop(self) -> float:
        """Best PSNR during the task's own stage minus the final PSNR."""
        return self.best_own_psnr - self.final_psnr


def forgetting_curve(records: Iterable[EvalRecord], task_id: str) -> ForgettingCurve:
    pts = sorted((r.stage, r.epoch, r.psnr_db, r.ssim) for r in records if r.task_id == task_id)
    if not pts:
        raise ValidationError(f"no evaluations recorded for task {task_id!r}")
    keys = [(p[0], p[1]) for p in pts]
    if len(set(keys)) != len(keys):
        raise ValidationError(f"duplicate (stage, epoch) evaluations for task {task_id!r}")
    own = pts[0][0]
    best = max(p[2] for p in pts if p[0] == own)
    return ForgettingCurve(task_id=task_id, points=[CurvePoint(*p) for p in pts], own_stage=own,
                           best_own_psnr=best, final_psnr=pts[-1][2])
