import numpy as np
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rainreview.data import RainTaskSpec, synthesize_streak_layer
from rainreview.losses import AffineParams, affine_apply, build_replay_input, combined_loss, ssim
from rainreview.metrics import PSNR_CAP, psnr

unit = st.floats(0.0, 1.0, allow_nan=False, width=64)
img16 = arrays(np.float64, (1, 16, 16), elements=unit)


@settings(max_examples=30, deadline=None)
@given(img16, img16)
def test_ssim_symmetric_and_bounded(a, b):
    ta, tb = torch.from_numpy(a), torch.from_numpy(b)
    s = float(ssim(ta, tb))
    assert abs(s - float(ssim(tb, ta))) < 1e-12
    assert -1 - 1e-9 <= s <= 1 + 1e-9


@settings(max_examples=30, deadline=None)
@given(img16)
def test_combined_loss_minimum_at_identity(a):
    t = torch.from_numpy(a)
    assert float(combined_loss(t, t)) == -1.1


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 4), elements=unit), arrays(np.float64, (4, 4), elements=unit))
def test_psnr_bounded_and_symmetric(a, b):
    p = psnr(a, b)
    assert p == psnr(b, a) and 0 <= p <= PSNR_CAP


@settings(max_examples=25, deadline=None)
@given(
    st.floats(-10, 10), st.floats(0.9, 1.1), st.floats(-0.1, 0.1), st.floats(-0.1, 0.1), st.booleans(),
    arrays(np.float64, (1, 1, 8, 8), elements=unit), arrays(np.float64, (1, 3, 8, 8), elements=unit),
)
def test_replay_input_in_unit_range(rot, scale, tx, ty, flip, s, b):
    p = AffineParams(rot, scale, (tx, ty), flip)
    warped = affine_apply(torch.from_numpy(s), p)
    x = build_replay_input(torch.from_numpy(s), torch.from_numpy(b), p)
    assert 0 <= float(warped.min()) and float(warped.max()) <= 1
    assert 0 <= float(x.min()) and float(x.max()) <= 1
    assert bool((x >= torch.from_numpy(b) - 1e-12).all())


@settings(max_examples=20, deadline=None)
@given(st.floats(-60, 60), st.integers(1, 20), st.integers(1, 4), st.floats(0, 40), st.integers(0, 1000),
       st.integers(0, 9))
def test_streak_layer_range_and_determinism(angle, length, width, density, seed, frame):
    spec = RainTaskSpec("p", (angle, angle), (length, length), (width, width), density, (0.2, 0.9), 2.0, seed)
    layer = synthesize_streak_layer(spec, 24, 20, frame)
    assert layer.shape == (24, 20, 1) and layer.dtype == np.float32
    assert layer.min() >= 0 and layer.max() <= 0.9 + 1e-6
    assert np.array_equal(layer, synthesize_streak_layer(spec, 24, 20, frame))
