"""The desk forgetting experiment: two synthetic tasks, three ablation arms.

Stage 1 is trained once per seed and shared by every arm, so differences in
the task-A drop come only from how stage 2 is trained.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import desk_task_specs
from .data import RainTaskSpec, TaskData, procedural_clean_clip, synthetic_clip
from .metrics import evaluate_task, forgetting_curve
from .nets import build_nets
from .train import ABLATIONS, StageConfig, TrainLog, train_stage_continual, train_stage_initial


def desk_task(spec: RainTaskSpec, clip_seed: int, train_clips: int = 2, eval_clips: int = 1,
              frames: int = 10, size: int = 48) -> TaskData:
    """In-memory task: rain from ``spec`` over procedural clean clips."""
    clips = [synthetic_clip(spec, procedural_clean_clip(frames, size, size, seed=clip_seed * 100 + k))
             for k in range(train_clips + eval_clips)]
    return TaskData.from_clips(spec.task_id, clips[:train_clips], clips[train_clips:])


@dataclass
class SeedResult:
    seed: int
    rainy_psnr: dict
    drops: dict
    final_psnr: dict = field(default_factory=dict)
    logs: dict = field(default_factory=dict)


@dataclass
class ForgettingResult:
    per_seed: list

    def mean_drop(self, arm: str) -> float:
        return float(np.mean([r.drops[arm] for r in self.per_seed]))

    @property
    def arms(self) -> list[str]:
        return list(self.per_seed[0].drops) if self.per_seed else []

    def table(self) -> str:
        lines = [f"{'seed':<6}" + "".join(f"{a:>10}" for a in self.arms)]
        for r in self.per_seed:
            lines.append(f"{r.seed:<6}" + "".join(f"{r.drops[a]:10.3f}" for a in self.arms))
        lines.append(f"{'mean':<6}" + "".join(f"{self.mean_drop(a):10.3f}" for a in self.arms))
        return "\n".join(lines)


def forgetting_experiment(seeds=(0, 1, 2), arms=("base", "frd", "full"), epochs=(20, 20), crop_size=32,
                          preset="tiny", specs: list[RainTaskSpec] | None = None, progress=None) -> ForgettingResult:
    """Task-A PSNR drop (best during stage 1 minus final) for each arm and seed."""
    spec_a, spec_b = specs or desk_task_specs()
    out = []
    for seed in seeds:
        task_a = desk_task(spec_a, clip_seed=seed)
        task_b = desk_task(spec_b, clip_seed=seed + 7)
        identity = lambda f: f[:, 2]  # noqa: E731
        rainy = {t.task_id: evaluate_task(identity, t.held_out).psnr_db for t in (task_a, task_b)}

        nets = build_nets(preset, seed=seed)
        log1 = TrainLog()
        cfg1 = StageConfig(1, spec_a.task_id, epochs=epochs[0], crop_size=crop_size, seed=seed)
        ck1 = train_stage_initial(nets, cfg1, task_a, log1, {spec_a.task_id: task_a.held_out})

        res = SeedResult(seed, rainy, {})
        for arm in arms:
            log2 = TrainLog()
            log2.evals = list(log1.evals)
            cfg2 = StageConfig(2, spec_b.task_id, epochs=epochs[1], crop_size=crop_size, seed=seed)
            evals = {spec_a.task_id: task_a.held_out, spec_b.task_id: task_b.held_out}
            train_stage_continual(ck1, cfg2, task_b, ABLATIONS[arm], log2, evals)
            res.drops[arm] = forgetting_curve(log2.evals, spec_a.task_id).drop
            res.final_psnr[arm] = {t: forgetting_curve(log2.evals, t).final_psnr for t in evals}
            res.logs[arm] = log2
        if progress is not None:
            progress(res)
        out.append(res)
    return ForgettingResult(out)
