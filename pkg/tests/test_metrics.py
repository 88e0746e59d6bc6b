import numpy as np
import pytest

from rainreview.metrics import (
    PSNR_CAP,
    EvalRecord,
    evaluate_task,
    evaluate_windows,
    forgetting_curve,
    psnr,
    read_eval_csv,
    rgb_to_luminance,
    ssim_image,
    window_metrics,
)
from rainreview.validation import ValidationError

from oracles import loop_psnr, naive_ssim


def test_psnr_loop_oracle(rng):
    a, b = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    assert psnr(a, b) == pytest.approx(loop_psnr(a, b), abs=1e-9)


def test_psnr_cap_and_shape():
    x = np.zeros((4, 4, 1))
    assert psnr(x, x) == PSNR_CAP
    with pytest.raises(ValidationError):
        psnr(x, np.zeros((4, 5, 1)))


def test_luminance_weights(rng):
    img = rng.random((3, 4, 3))
    y = rgb_to_luminance(img)
    assert y.shape == (3, 4, 1)
    assert y[1, 2, 0] == pytest.approx(0.299 * img[1, 2, 0] + 0.587 * img[1, 2, 1] + 0.114 * img[1, 2, 2])
    with pytest.raises(ValidationError):
        rgb_to_luminance(np.zeros((4, 4)))


def test_ssim_image_oracle(rng):
    a, b = rng.random((16, 16, 1)), rng.random((16, 16, 1))
    assert ssim_image(a, b) == pytest.approx(naive_ssim(a[..., 0], b[..., 0]), abs=1e-9)
    assert ssim_image(a, a) == pytest.approx(1.0, abs=1e-12)


def test_perfect_stub_scores_cap(task_a):
    import torch

    clean = {w.center_index: w.target for w in task_a.held_out}

    def perfect(frames):
        # look the target up by content of the center frame
        out = []
        for f in frames:
            c = f[2].numpy().transpose(1, 2, 0)
            t = next(clean[w.center_index] for w in task_a.held_out if np.array_equal(w.center, c))
            out.append(torch.from_numpy(t.transpose(2, 0, 1)))
        return torch.stack(out)

    rec = evaluate_task(perfect, task_a.held_out)
    assert rec.psnr_db == PSNR_CAP and rec.ssim == pytest.approx(1.0)


def test_record_is_mean_of_windows(task_a):
    ident = lambda f: f[:, 2]  # noqa: E731
    per = evaluate_windows(ident, task_a.held_out)
    rec = evaluate_task(ident, task_a.held_out, stage=1, epoch=3, task_id="A")
    assert rec.psnr_db == pytest.approx(np.mean([p for p, _ in per]), abs=1e-12)
    assert rec.ssim == pytest.approx(np.mean([s for _, s in per]), abs=1e-12)
    w = task_a.held_out[0]
    assert per[0] == pytest.approx(window_metrics(w.center, w.target))
    with pytest.raises(ValidationError):
        evaluate_task(ident, [])


def _records():
    rows = [(1, 1, "A", 20.0), (1, 2, "A", 25.0), (1, 3, "A", 24.0),
            (2, 1, "A", 22.0), (2, 1, "B", 18.0), (2, 2, "A", 21.5), (2, 2, "B", 23.0)]
    return [EvalRecord(s, e, t, p, 0.5, 3) for s, e, t, p in rows]


def test_forgetting_curve_drop():
    c = forgetting_curve(_records(), "A")
    assert c.own_stage == 1 and c.best_own_psnr == 25.0 and c.final_psnr == 21.5
    assert c.drop == pytest.approx(3.5)
    b = forgetting_curve(_records(), "B")
    assert b.own_stage == 2 and b.drop == 0.0
    with pytest.raises(ValidationError):
        forgetting_curve(_records(), "C")
    with pytest.raises(ValidationError, match="duplicate"):
        forgetting_curve(_records() + [EvalRecord(2, 2, "A", 1.0, 0.1, 1)], "A")


def test_single_stage_curve_is_flat_segment():
    recs = [EvalRecord(1, e, "A", 30.0, 0.9, 2) for e in (1, 2, 3)]
    c = forgetting_curve(recs, "A")
    assert [p.psnr for p in c.points] == [30.0] * 3 and c.drop == 0


def test_eval_csv_roundtrip(tmp_path):
    import csv

    from rainreview.metrics import EVAL_FIELDS

    p = tmp_path / "eval.csv"
    with p.open("w", newline="") as fh:
        w = csv.DictWriter(fh, EVAL_FIELDS)
        w.writeheader()
        for r in _records():
            w.writerow(r.row())
    assert read_eval_csv(p) == _records()
    with pytest.raises(ValidationError):
        read_eval_csv(tmp_path / "none.csv")
