"""scikit-learn style front end.

``ContinualDerainer`` wraps the staged protocol: :meth:`fit` runs a whole task
schedule, :meth:`partial_fit` adds one more task (one more stage), and
:meth:`transform` / :meth:`predict` derain windows. Hyperparameters live in
``__init__`` so ``get_params`` / ``set_params`` / ``clone`` work as usual.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import FrameWindow, TaskData
from .losses import LossWeights
from .metrics import evaluate_task
from .nets import build_nets, derain_forward
from .train import ABLATIONS, StageConfig, TrainLog, train_stage_continual, train_stage_initial
from .validation import ValidationError


def check_windows(X) -> np.ndarray:
    """Coerce windows to a float32 array ``(N, 5, H, W, 3)`` in [0, 1].

    Accepts such an array, a single ``(5, H, W, 3)`` window, a list of
    :class:`FrameWindow`, or a :class:`TaskData` (its training windows).
    """
    if isinstance(X, TaskData):
        X = X.train
    if isinstance(X, FrameWindow):
        X = [X]
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], FrameWindow):
        X = np.stack([w.frames for w in X])
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 4:
        X = X[None]
    if X.ndim != 5 or X.shape[1] != 5 or X.shape[-1] != 3:
        raise ValidationError(f"expected windows shaped (N, 5, H, W, 3), got {X.shape}")
    if not np.all(np.isfinite(X)) or X.min() < 0 or X.max() > 1:
        raise ValidationError("window values must be finite and lie in [0, 1]")
    return X


def _as_tasks(X) -> list[TaskData]:
    if isinstance(X, TaskData):
        return [X]
    if isinstance(X, (list, tuple)) and X and all(isinstance(t, TaskData) for t in X):
        return list(X)
    raise ValidationError("fit expects a TaskData or a list of TaskData (one per task, in order)")


class ContinualDerainer(TransformerMixin, BaseEstimator):
    """Video derainer trained task by task without revisiting old data.

    Parameters
    ----------
    preset : {"tiny", "paper"}
        Network size.
    epochs, learning_rate, batch_size, crop_size, grad_clip, steps_per_epoch
        Per-stage optimization settings (Adam with betas (0.9, 0.999)).
    ablation : {"base", "frd", "full"}
        Which stage-2+ terms are active: none, distillation, or distillation
        plus rain-review replay.
    sigma1, sigma2, lambda1, lambda2, lambda3, lambda4 : float
        Loss weights.
    random_state : int
        Seeds network init, window order, crops and replay augmentation.
    """

    def __init__(self, preset="tiny", epochs=20, learning_rate=1e-3, batch_size=1, crop_size=32,
                 grad_clip=1.0, steps_per_epoch=None, ablation="full", sigma1=1.1, sigma2=0.75,
                 lambda1=0.5, lambda2=0.5, lambda3=1.0, lambda4=1.0, random_state=0):
        self.preset = preset
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.crop_size = crop_size
        self.grad_clip = grad_clip
        self.steps_per_epoch = steps_per_epoch
        self.ablation = ablation
        self.sigma1 = sigma1
        self.sigma2 = sigma2
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lambda3 = lambda3
        self.lambda4 = lambda4
        self.random_state = random_state

    def _stage_config(self, j: int, task_id: str) -> StageConfig:
        return StageConfig(
            stage_index=j, task_id=task_id, epochs=self.epochs, learning_rate=self.learning_rate,
            batch_size=self.batch_size, crop_size=self.crop_size, grad_clip=self.grad_clip,
            steps_per_epoch=self.steps_per_epoch, seed=self.random_state,
            weights=LossWeights(self.sigma1, self.sigma2, self.lambda1, self.lambda2, self.lambda3, self.lambda4),
        )

    def fit(self, X, y=None):
        """Train stage by stage on ``X``, a list of :class:`TaskData` in task order."""
        tasks = _as_tasks(X)
        for attr in ("checkpoints_", "log_", "net_", "review_net_", "tasks_seen_", "eval_sets_"):
            if hasattr(self, attr):
                delattr(self, attr)
        for task in tasks:
            self.partial_fit(task)
        return self

    def partial_fit(self, X, y=None):
        """Train one more stage on a single task."""
        (task,) = _as_tasks(X)
        if self.ablation not in ABLATIONS:
            raise ValidationError(f"unknown ablation {self.ablation!r}")
        if not hasattr(self, "checkpoints_"):
            self.checkpoints_, self.log_ = [], TrainLog()
            self.tasks_seen_, self.eval_sets_ = [], {}
        if task.task_id in self.tasks_seen_:
            raise ValidationError(f"task {task.task_id!r} was already learned")
        self.eval_sets_[task.task_id] = task.held_out or task.train
        j = len(self.checkpoints_) + 1
        cfg = self._stage_config(j, task.task_id)
        if j == 1:
            derain, review = build_nets(self.preset, seed=self.random_state)
            ckpt = train_stage_initial((derain, review), cfg, task, self.log_, self.eval_sets_)
        else:
            ckpt, (derain, review), _ = train_stage_continual(
                self.checkpoints_[-1], cfg, task, ABLATIONS[self.ablation], self.log_, self.eval_sets_)
        self.checkpoints_.append(ckpt)
        self.tasks_seen_.append(task.task_id)
        self.net_, self.review_net_ = derain.eval(), review.eval()
        self.n_stages_ = j
        return self

    def transform(self, X):
        """Derained center frames, ``(N, H, W, 3)``."""
        check_is_fitted(self, "net_")
        X = check_windows(X)
        frames = torch.from_numpy(np.ascontiguousarray(X.transpose(0, 1, 4, 2, 3)))
        with torch.no_grad():
            b, _ = derain_forward(self.net_, frames)
        return b.numpy().transpose(0, 2, 3, 1)

    predict = transform

    def score(self, X, y=None):
        """Mean luminance PSNR (dB) on held-out windows of a :class:`TaskData` or window list."""
        check_is_fitted(self, "net_")
        windows = (X.held_out or X.train) if isinstance(X, TaskData) else X
        return evaluate_task(self.net_, windows).psnr_db
