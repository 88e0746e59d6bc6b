import sys

import numpy as np
import pytest
import torch

from rainreview.data import RainTaskSpec, TaskData, procedural_clean_clip, synthetic_clip


def spec_a(**kw):
    d = dict(angle_deg_range=(-5, 5), length_px_range=(6, 12), width_px_range=(1, 1), density=25,
             intensity_range=(0.3, 0.6), drift_px_per_frame=3, seed=1)
    d.update(kw)
    return RainTaskSpec("A", **d)


def spec_b(**kw):
    d = dict(angle_deg_range=(40, 50), length_px_range=(8, 16), width_px_range=(3, 3), density=12,
             intensity_range=(0.3, 0.6), drift_px_per_frame=3, seed=2)
    d.update(kw)
    return RainTaskSpec("B", **d)


def small_task(spec, seed=0, n_train=1, n_eval=1, frames=6, size=32):
    clips = [synthetic_clip(spec, procedural_clean_clip(frames, size, size, seed=seed * 10 + k))
             for k in range(n_train + n_eval)]
    return TaskData.from_clips(spec.task_id, clips[:n_train], clips[n_train:])


@pytest.fixture
def task_a():
    return small_task(spec_a())


@pytest.fixture
def task_b():
    return small_task(spec_b(), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    acc = sys.modules.get("test_acceptance")
    if acc is None or not acc.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acc.RESULTS):
        terminalreporter.write_line(acc.format_line(n))
