"""Staged continual training: conventional first stage, then distillation and
rain-review replay against a frozen copy of the previous stage."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .checkpoint import StageCheckpoint, load_checkpoint, params_checksum, save_checkpoint
from .data import CENTER, FileAccessAudit, TaskData, random_crop
from .losses import (
    AffineParams,
    LossWeights,
    TERM_NAMES,
    combined_loss,
    feature_kd_loss,
    grayscale,
    response_kd_loss,
    review_net_loss,
    review_replay_loss,
    total_derain_loss,
)
from .metrics import EVAL_FIELDS, EvalRecord, evaluate_task
from .nets import DerainNet, ReviewNet, derain_forward, extract_residual, review_forward, windows_to_tensor
from .validation import ValidationError, check_positive_int

log = logging.getLogger(__name__)

STEP_FIELDS = ("stage", "epoch", "step") + TERM_NAMES + ("total", "L_review")


class TrainingError(RuntimeError):
    pass


class DataIsolationError(TrainingError):
    """An earlier task's files were opened while a later stage was training."""


@dataclass(frozen=True)
class Ablation:
    use_rkd: bool = True
    use_fkd: bool = True
    use_rrm: bool = True

    @classmethod
    def named(cls, name: str) -> "Ablation":
        try:
            return ABLATIONS[name]
        except KeyError:
            raise ValidationError(f"unknown ablation arm {name!r}; choose from {sorted(ABLATIONS)}") from None


ABLATIONS = {
    "base": Ablation(False, False, False),
    "frd": Ablation(True, True, False),
    "full": Ablation(True, True, True),
}


@dataclass(frozen=True)
class StageConfig:
    stage_index: int = 1
    task_id: str = ""
    epochs: int = 160
    learning_rate: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 1
    crop_size: int = 240
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    grad_clip: float | None = 1.0
    # None: one pass over the training windows per epoch
    steps_per_epoch: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        check_positive_int("stage_index", self.stage_index)
        check_positive_int("epochs", self.epochs)
        check_positive_int("batch_size", self.batch_size)
        check_positive_int("crop_size", self.crop_size)
        if self.steps_per_epoch is not None:
            check_positive_int("steps_per_epoch", self.steps_per_epoch)
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate!r}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValidationError("grad_clip must be > 0 or None")

    def fingerprint(self, derain_arch, review_arch, ablation: Ablation | None = None) -> str:
        d = asdict(self)
        d["arch"] = [derain_arch.to_dict(), review_arch.to_dict()]
        d["ablation"] = asdict(ablation) if ablation else None
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=list).encode()).hexdigest()[:16]


class TrainLog:
    """Append-only step and evaluation records, optionally mirrored to CSV.

    ``train.csv`` and ``eval.csv`` are appended on every :meth:`flush`, which
    the trainer calls at the end of each epoch.
    """

    def __init__(self, out_dir=None):
        self.steps: list[dict] = []
        self.evals: list[EvalRecord] = []
        self.audit: dict[int, list[str]] = {}
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self._flushed_steps = 0
        self._flushed_evals = 0
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            for name, fields in (("train.csv", STEP_FIELDS), ("eval.csv", EVAL_FIELDS)):
                p = self.out_dir / name
                if not p.exists():
                    with p.open("w", newline="") as fh:
                        csv.writer(fh).writerow(fields)

    def add_step(self, rec: dict) -> None:
        self.steps.append(rec)

    def add_eval(self, rec: EvalRecord) -> None:
        self.evals.append(rec)

    def flush(self) -> None:
        if self.out_dir is None:
            return
        with (self.out_dir / "train.csv").open("a", newline="") as fh:
            w = csv.DictWriter(fh, STEP_FIELDS)
            for rec in self.steps[self._flushed_steps:]:
                w.writerow({k: _fmt(rec.get(k)) for k in STEP_FIELDS})
        with (self.out_dir / "eval.csv").open("a", newline="") as fh:
            w = csv.DictWriter(fh, EVAL_FIELDS)
            for rec in self.evals[self._flushed_evals:]:
                w.writerow(rec.row())
        self._flushed_steps, self._flushed_evals = len(self.steps), len(self.evals)

    def column(self, name: str, stage: int | None = None) -> list:
        return [r[name] for r in self.steps if stage is None or r["stage"] == stage]

    def epoch_means(self, name: str, stage: int) -> list[float]:
        by_epoch: dict[int, list] = {}
        for r in self.steps:
            if r["stage"] == stage and r.get(name) is not None:
                by_epoch.setdefault(r["epoch"], []).append(r[name])
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]

    def truncate_files(self, n_steps: int, n_evals: int) -> None:
        """Cut the CSVs back to a known-good prefix (used when resuming)."""
        if self.out_dir is None:
            return
        for name, n in (("train.csv", n_steps), ("eval.csv", n_evals)):
            p = self.out_dir / name
            if p.exists():
                lines = p.read_text().splitlines(keepends=True)
                p.write_text("".join(lines[: n + 1]))

    @classmethod
    def from_dir(cls, out_dir) -> "TrainLog":
        lg = cls(out_dir)
        with (lg.out_dir / "train.csv").open(newline="") as fh:
            for r in csv.DictReader(fh):
                lg.steps.append({k: _parse(k, v) for k, v in r.items()})
        from .metrics import read_eval_csv

        lg.evals = read_eval_csv(lg.out_dir / "eval.csv")
        lg._flushed_steps, lg._flushed_evals = len(lg.steps), len(lg.evals)
        return lg


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _parse(k, v):
    if v == "":
        return None
    if k in ("stage", "epoch", "step"):
        return int(v)
    return float(v)


# ---------------------------------------------------------------------------
# per-step computation


def _adam(params, cfg: StageConfig):
    return torch.optim.Adam(params, lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps)


def freeze(*nets):
    """Deep copies with gradients disabled, for use as the teacher."""
    out = []
    for n in nets:
        t = copy.deepcopy(n)
        t.requires_grad_(False)
        t.eval()
        out.append(t)
    return out


def derain_terms(student: DerainNet, frames, target, w: LossWeights, teacher: DerainNet | None = None,
                 teacher_review: ReviewNet | None = None, ablation: Ablation = ABLATIONS["full"],
                 affine: AffineParams | None = None) -> tuple[dict, dict]:
    """Loss terms of one derain step.

    Returns ``(terms, aux)``. ``terms`` holds every term that was computed;
    the distillation terms are computed whenever a teacher is given so they
    can be logged even in ablated runs. Which terms enter the objective is
    decided by :func:`objective`. ``aux`` carries the student output.
    """
    b_s, f_s = derain_forward(student, frames)
    terms = {"L_C": combined_loss(b_s, target, w)}
    if teacher is not None:
        with torch.no_grad():
            b_t, f_t = derain_forward(teacher, frames)
        terms["L_RKD"] = response_kd_loss(b_s, b_t, w)
        terms["L_FKD"] = feature_kd_loss(f_s, f_t)
        if ablation.use_rrm:
            if teacher_review is None:
                raise TrainingError("rain review replay needs the previous stage's review net")
            with torch.no_grad():
                s, _ = review_forward(teacher_review, extract_residual(frames[:, CENTER], b_t))
            terms["L_R"], _ = review_replay_loss(student, frames, s, b_t, target, w, affine or AffineParams())
    return terms, {"background": b_s}


def objective(terms: dict, w: LossWeights, ablation: Ablation, stage_index: int):
    """Weighted sum of the enabled terms; ablated terms contribute nothing."""
    if stage_index == 1:
        return total_derain_loss({"L_C": terms["L_C"]}, w)
    enabled = {"L_C": terms["L_C"]}
    if ablation.use_rkd:
        enabled["L_RKD"] = terms["L_RKD"]
    if ablation.use_fkd:
        enabled["L_FKD"] = terms["L_FKD"]
    if ablation.use_rrm:
        enabled["L_R"] = terms["L_R"]
    return total_derain_loss(enabled, w)


def review_step_loss(stage_index: int, student_review: ReviewNet, frames, target, background,
                     w: LossWeights, teacher_review: ReviewNet | None = None):
    """Review-net objective on the residual of the current derain output."""
    center = frames[:, CENTER]
    residual = extract_residual(center, background.detach())
    s_j, f_j = review_forward(student_review, residual)
    supervised = grayscale(center - target)
    s_prev = f_prev = None
    if stage_index > 1:
        with torch.no_grad():
            s_prev, f_prev = review_forward(teacher_review, residual)
    return review_net_loss(stage_index, f_j, f_prev, s_j, s_prev, supervised, w)


# ---------------------------------------------------------------------------
# stage loop


@dataclass
class _Streams:
    order: np.random.Generator
    crop: np.random.Generator
    affine: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "_Streams":
        a, b, c = np.random.SeedSequence(seed).spawn(3)
        return cls(np.random.default_rng(a), np.random.default_rng(b), np.random.default_rng(c))

    def state(self) -> dict:
        return {k: getattr(self, k).bit_generator.state for k in ("order", "crop", "affine")}

    def restore(self, state: dict) -> None:
        for k, v in state.items():
            getattr(self, k).bit_generator.state = v


@dataclass
class ResumePoint:
    epoch_done: int
    streams: dict
    optimizer_state: dict
    n_steps: int
    n_evals: int


def _optim_state(opt_d, opt_r) -> dict:
    return {"derain": opt_d.state_dict(), "review": opt_r.state_dict()}


def _grad_clip(net, cfg):
    if cfg.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)


def _check_finite(value, what, stage, epoch, step):
    if not torch.isfinite(value):
        raise TrainingError(f"non-finite {what} ({float(value.detach())}) at stage {stage}, epoch {epoch}, step {step}")


def _run_stage(derain: DerainNet, review: ReviewNet, cfg: StageConfig, data: TaskData, ablation: Ablation,
               teacher: tuple | None, log_: TrainLog, eval_sets: dict | None,
               resume: ResumePoint | None = None,
               on_epoch_end: Callable | None = None) -> StageCheckpoint:
    if not data.train:
        raise ValidationError(f"task {data.task_id!r} has no training windows")
    if cfg.task_id and data.task_id != cfg.task_id:
        raise ValidationError(f"stage {cfg.stage_index} expects task {cfg.task_id!r}, got data for {data.task_id!r}")
    factor = derain.arch.downsample_factor
    h, w = data.train[0].shape[:2]
    crop = min(cfg.crop_size, h, w)
    t_derain, t_review = teacher if teacher is not None else (None, None)
    dtype = next(derain.parameters()).dtype

    opt_d = _adam(derain.parameters(), cfg)
    opt_r = _adam(review.parameters(), cfg)
    streams = _Streams.from_seed(cfg.seed)
    start_epoch = 1
    if resume is not None:
        opt_d.load_state_dict(resume.optimizer_state["derain"])
        opt_r.load_state_dict(resume.optimizer_state["review"])
        streams.restore(resume.streams)
        start_epoch = resume.epoch_done + 1

    n = len(data.train)
    steps_per_epoch = cfg.steps_per_epoch or math.ceil(n / cfg.batch_size)
    fp = cfg.fingerprint(derain.arch, review.arch, ablation)
    step = (start_epoch - 1) * steps_per_epoch

    for epoch in range(start_epoch, cfg.epochs + 1):
        derain.train()
        review.train()
        order = np.concatenate([streams.order.permutation(n)
                                for _ in range(math.ceil(steps_per_epoch * cfg.batch_size / n))])
        for k in range(steps_per_epoch):
            idx = order[k * cfg.batch_size:(k + 1) * cfg.batch_size]
            batch = [random_crop(data.train[i], crop, streams.crop, factor) for i in idx]
            frames, target = windows_to_tensor(batch, dtype)
            affine = AffineParams.sample(streams.affine) if (t_derain is not None and ablation.use_rrm) else None

            terms, aux = derain_terms(derain, frames, target, cfg.weights, t_derain, t_review, ablation, affine)
            total = objective(terms, cfg.weights, ablation, cfg.stage_index)
            _check_finite(total, "derain loss", cfg.stage_index, epoch, step)
            opt_d.zero_grad(set_to_none=True)
            total.backward()
            _grad_clip(derain, cfg)
            opt_d.step()

            rev = review_step_loss(cfg.stage_index, review, frames, target, aux["background"], cfg.weights, t_review)
            _check_finite(rev, "review loss", cfg.stage_index, epoch, step)
            opt_r.zero_grad(set_to_none=True)
            rev.backward()
            _grad_clip(review, cfg)
            opt_r.step()

            rec = {"stage": cfg.stage_index, "epoch": epoch, "step": step, "total": float(total.detach()),
                   "L_review": float(rev.detach())}
            rec.update({name: float(v.detach()) for name, v in terms.items()})
            log_.add_step(rec)
            step += 1

        if eval_sets:
            derain.eval()
            for task_id, windows in eval_sets.items():
                log_.add_eval(evaluate_task(derain, windows, cfg.stage_index, epoch, task_id))
        log_.flush()
        if on_epoch_end is not None:
            point = ResumePoint(epoch, streams.state(), _optim_state(opt_d, opt_r), len(log_.steps), len(log_.evals))
            on_epoch_end(cfg.stage_index, epoch, derain, review, point)

    return StageCheckpoint.from_nets(derain, review, cfg.stage_index, _optim_state(opt_d, opt_r), fp,
                                     {"task_id": data.task_id, "ablation": asdict(ablation)})


def mean_reconstruction_loss(derain: DerainNet, windows, w: LossWeights = LossWeights()) -> float:
    """Mean ``L_C`` over full (uncropped) windows."""
    dtype = next(derain.parameters()).dtype
    with torch.no_grad():
        vals = []
        for win in windows:
            frames, target = windows_to_tensor(win, dtype)
            vals.append(float(combined_loss(derain_forward(derain, frames)[0], target, w)))
    return float(np.mean(vals))


def train_stage_initial(nets: tuple, cfg: StageConfig, data: TaskData, log_: TrainLog | None = None,
                        eval_sets: dict | None = None, on_epoch_end=None, resume: ResumePoint | None = None) -> StageCheckpoint:
    """First stage: plain reconstruction training of the derain net, with the
    review net trained alongside on its supervised target. Trains ``nets`` in
    place and returns their stage-1 checkpoint."""
    if cfg.stage_index != 1:
        raise ValidationError(f"the initial stage must have stage_index 1, got {cfg.stage_index}")
    derain, review = nets
    log_ = log_ if log_ is not None else TrainLog()
    return _run_stage(derain, review, cfg, data, ABLATIONS["base"], None, log_, eval_sets, resume, on_epoch_end)


def train_stage_continual(student_init: StageCheckpoint, cfg: StageConfig, data: TaskData,
                          ablation: Ablation = ABLATIONS["full"], log_: TrainLog | None = None,
                          eval_sets: dict | None = None, on_epoch_end=None, resume: ResumePoint | None = None,
                          student_state: StageCheckpoint | None = None, dtype=None):
    """Stage ``j > 1``.

    The teacher is a frozen copy of ``student_init``; the student starts from
    the same parameters (or from ``student_state`` when resuming). Returns
    ``(checkpoint, student_nets, teacher_nets)``.
    """
    if cfg.stage_index != student_init.stage_index + 1:
        raise ValidationError(
            f"stage {cfg.stage_index} must follow the checkpoint's stage {student_init.stage_index}"
        )
    derain, review = student_init.build_nets(dtype)
    t_derain, t_review = freeze(derain, review)
    if student_state is not None:
        student_state.load_into(derain, review)
    if derain.arch != t_derain.arch or review.arch != t_review.arch:
        raise ValidationError("student and teacher architectures differ")
    log_ = log_ if log_ is not None else TrainLog()
    ckpt = _run_stage(derain, review, cfg, data, ablation, (t_derain, t_review), log_, eval_sets, resume, on_epoch_end)
    return ckpt, (derain, review), (t_derain, t_review)


# ---------------------------------------------------------------------------
# schedules


@dataclass
class TaskSchedule:
    """Ordered tasks ``D^1 .. D^K``; each entry is ``(task_id, manifest or TaskData)``."""

    tasks: list

    def __post_init__(self):
        if not self.tasks:
            raise ValidationError("a schedule needs at least one task")
        ids = [t for t, _ in self.tasks]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"task ids must be unique, got {ids}")

    @property
    def task_ids(self) -> list[str]:
        return [t for t, _ in self.tasks]


RESUME_NAME = "resume.ckpt"


def stage_path(out_dir: Path, j: int) -> Path:
    return out_dir / f"stage_{j}.ckpt"


def _load_task(source, task_id: str) -> TaskData:
    data = source if isinstance(source, TaskData) else TaskData.from_manifest(source)
    if data.task_id != task_id:
        raise ValidationError(f"schedule entry {task_id!r} points at data for task {data.task_id!r}")
    return data


def run_schedule(schedule: TaskSchedule, template: StageConfig, nets: tuple,
                 ablation: Ablation = ABLATIONS["full"], out_dir=None, resume: bool = False,
                 on_epoch_end: Callable | None = None, stage_configs: Sequence[StageConfig] | None = None):
    """Train stage 1 on the first task, then stages 2..K.

    After every epoch the student is evaluated on the held-out windows of
    every task seen so far. With ``out_dir`` each stage's checkpoint and an
    epoch-level ``resume.ckpt`` are written; ``resume=True`` picks up from
    them. Old-task files are never opened once their stage has ended; this is
    audited and a violation raises :class:`DataIsolationError`.

    Returns ``(checkpoints, log)``.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    derain, review = nets
    log_ = TrainLog(out_dir)
    eval_sets: dict[str, list] = {}
    checkpoints: list[StageCheckpoint] = []
    cfgs = list(stage_configs) if stage_configs is not None else [
        replace(template, stage_index=j + 1, task_id=tid) for j, tid in enumerate(schedule.task_ids)]
    if len(cfgs) != len(schedule.tasks):
        raise ValidationError("need one stage config per scheduled task")

    resume_point = resume_state = None
    if resume and out_dir is not None:
        log_ = TrainLog.from_dir(out_dir)
        rp = out_dir / RESUME_NAME
        if rp.exists():
            resume_state = load_checkpoint(rp, derain.arch, review.arch)
            x = resume_state.extra
            resume_point = ResumePoint(x["epoch_done"], x["streams"], resume_state.optimizer_state,
                                       x["n_steps"], x["n_evals"])
            log_.truncate_files(resume_point.n_steps, resume_point.n_evals)
            log_ = TrainLog.from_dir(out_dir)

    def epoch_hook(stage, epoch, d, r, point: ResumePoint):
        if out_dir is not None:
            ck = StageCheckpoint.from_nets(d, r, stage, point.optimizer_state,
                                           extra={"epoch_done": point.epoch_done, "streams": point.streams,
                                                  "n_steps": point.n_steps, "n_evals": point.n_evals})
            save_checkpoint(ck, out_dir / RESUME_NAME)
        if on_epoch_end is not None:
            on_epoch_end(stage, epoch, d, r, point)

    prev: StageCheckpoint | None = None
    done_roots: list[str] = []
    for j, ((task_id, source), cfg) in enumerate(zip(schedule.tasks, cfgs), start=1):
        done = out_dir is not None and resume and stage_path(out_dir, j).exists()
        if done:
            prev = load_checkpoint(stage_path(out_dir, j), derain.arch, review.arch)
            checkpoints.append(prev)
            with FileAccessAudit():
                data = _load_task(source, task_id)
            eval_sets[task_id] = data.held_out or data.train
            if data.root:
                done_roots.append(data.root)
            continue

        with FileAccessAudit() as audit:
            data = _load_task(source, task_id)
            eval_sets[task_id] = data.held_out or data.train
            this_resume = resume_point if (resume_state is not None and resume_state.stage_index == j) else None
            if j == 1:
                if this_resume is not None:
                    resume_state.load_into(derain, review)
                ckpt = train_stage_initial((derain, review), cfg, data, log_, eval_sets, epoch_hook, this_resume)
            else:
                ckpt, (derain, review), _ = train_stage_continual(
                    prev, cfg, data, ablation, log_, eval_sets, epoch_hook, this_resume,
                    student_state=resume_state if this_resume is not None else None,
                    dtype=next(derain.parameters()).dtype)
        log_.audit[j] = list(audit.paths)
        for root in done_roots:
            leaked = audit.touched(root)
            if leaked:
                raise DataIsolationError(f"stage {j} opened files of an earlier task: {leaked[:3]}")
        if data.root:
            done_roots.append(data.root)
        if out_dir is not None:
            save_checkpoint(ckpt, stage_path(out_dir, j))
        checkpoints.append(ckpt)
        prev = ckpt

    if out_dir is not None and (out_dir / RESUME_NAME).exists():
        (out_dir / RESUME_NAME).unlink()
    return checkpoints, log_
