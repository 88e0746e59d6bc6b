"""Frame-grouping derain network and the rain review network.

Tensors follow the torch layout: a batch of windows is ``(N, 5, 3, H, W)``,
images are ``(N, C, H, W)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data import CENTER, FrameWindow
from .validation import ValidationError, check_positive_int

# keeps logit() finite for saturated inputs
_LOGIT_EPS = 1e-3


@dataclass(frozen=True)
class ArchConfig:
    base_channels: int = 8
    depth: int = 2

    def __post_init__(self):
        check_positive_int("base_channels", self.base_channels, 4)
        check_positive_int("depth", self.depth, 1)

    @property
    def downsample_factor(self) -> int:
        return 2 ** self.depth

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "tiny": {"derain": ArchConfig(8, 2), "review": ArchConfig(4, 1)},
    "paper": {"derain": ArchConfig(32, 3), "review": ArchConfig(16, 2)},
}


class Encoder(nn.Module):
    """``depth`` blocks of [conv3x3, SiLU, conv3x3 stride 2, SiLU].

    Returns the bottleneck feature and the full-resolution activation of each
    level for the decoder's skip connections.
    """

    def __init__(self, in_channels: int, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        convs, downs = [], []
        c_in = in_channels
        for level in range(arch.depth):
            c = arch.channels(level)
            convs.append(nn.Conv2d(c_in, c, 3, padding=1))
            downs.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
            c_in = c
        self.convs = nn.ModuleList(convs)
        self.downs = nn.ModuleList(downs)

    @property
    def out_channels(self) -> int:
        return self.arch.channels(self.arch.depth - 1)

    def forward(self, x):
        skips = []
        for conv, down in zip(self.convs, self.downs):
            x = F.silu(conv(x))
            skips.append(x)
            x = F.silu(down(x))
        return x, skips


class Decoder(nn.Module):
    """Nearest-neighbor upsampling, conv, summed skip, conv; then a 3x3 head."""

    def __init__(self, arch: ArchConfig, out_channels: int):
        super().__init__()
        ups, fuses = [], []
        c_in = arch.channels(arch.depth - 1)
        for level in reversed(range(arch.depth)):
            c = arch.channels(level)
            ups.append(nn.Conv2d(c_in, c, 3, padding=1))
            fuses.append(nn.Conv2d(c, c, 3, padding=1))
            c_in = c
        self.ups = nn.ModuleList(ups)
        self.fuses = nn.ModuleList(fuses)
        self.head = nn.Conv2d(c_in, out_channels, 3, padding=1)

    def forward(self, x, skips):
        for up, fuse, skip in zip(self.ups, self.fuses, reversed(skips)):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = F.silu(up(x)) + skip
            x = F.silu(fuse(x))
        return self.head(x)


class DerainNet(nn.Module):
    """Two encoders over the frame groups {t-1, t, t+1} and {t-2, t, t+2}.

    The decoder predicts a correction in logit space on top of the center
    frame, so the bounded output starts near the identity when the head is
    zero-initialized.
    """

    def __init__(self, arch: ArchConfig | None = None, zero_head: bool = True):
        super().__init__()
        self.arch = arch or ArchConfig()
        self.encoder1 = Encoder(9, self.arch)
        self.encoder2 = Encoder(9, self.arch)
        self.decoder = Decoder(self.arch, 3)
        if zero_head:
            nn.init.zeros_(self.decoder.head.weight)
            nn.init.zeros_(self.decoder.head.bias)

    def forward(self, frames):
        b, _ = derain_forward(self, frames)
        return b


class ReviewNet(nn.Module):
    """Single encoder-decoder mapping a 3-channel residual to a 1-channel rain map."""

    def __init__(self, arch: ArchConfig | None = None, head_bias: float = -2.0):
        super().__init__()
        self.arch = arch or PRESETS["tiny"]["review"]
        self.encoder = Encoder(3, self.arch)
        self.decoder = Decoder(self.arch, 1)
        nn.init.constant_(self.decoder.head.bias, head_bias)

    def forward(self, residual):
        s, _ = review_forward(self, residual)
        return s


def _check_frames(net, frames) -> torch.Tensor:
    if frames.dim() != 5 or frames.shape[1] != 5 or frames.shape[2] != 3:
        raise ValidationError(f"frames must be N x 5 x 3 x H x W, got {tuple(frames.shape)}")
    h, w = frames.shape[-2:]
    f = net.arch.downsample_factor
    if h % f or w % f:
        raise ValidationError(f"frame size {h}x{w} is not divisible by the downsampling factor {f}")
    return frames


def encode_grouped(net: DerainNet, frames: torch.Tensor):
    """Run both encoders on their frame groups.

    Returns ``(F1, F2, F, skips)`` with ``F = F1 + F2`` and the per-level skip
    activations of the two encoders summed pairwise.
    """
    frames = _check_frames(net, frames)
    n, _, _, h, w = frames.shape
    near = frames[:, [1, 2, 3]].reshape(n, 9, h, w)
    far = frames[:, [0, 2, 4]].reshape(n, 9, h, w)
    f1, skips1 = net.encoder1(near)
    f2, skips2 = net.encoder2(far)
    skips = [a + b for a, b in zip(skips1, skips2)]
    return f1, f2, f1 + f2, skips


def derain_forward(net: DerainNet, frames: torch.Tensor):
    """Background estimate ``B`` in (0, 1) and the summed feature ``F``."""
    _, _, feat, skips = encode_grouped(net, frames)
    center = frames[:, CENTER].clamp(_LOGIT_EPS, 1 - _LOGIT_EPS)
    b = torch.sigmoid(torch.logit(center) + net.decoder(feat, skips))
    return b, feat


def extract_residual(center: torch.Tensor, background: torch.Tensor) -> torch.Tensor:
    """``R = X_t - B``."""
    if center.shape != background.shape:
        raise ValidationError(f"shape mismatch: center {tuple(center.shape)} vs background {tuple(background.shape)}")
    return center - background


def review_forward(net: ReviewNet, residual: torch.Tensor):
    """Rain map ``S`` in (0, 1) and the review encoder's bottleneck feature."""
    if residual.dim() != 4 or residual.shape[1] != 3:
        raise ValidationError(f"residual must be N x 3 x H x W, got {tuple(residual.shape)}")
    if not torch.isfinite(residual).all():
        raise ValidationError("residual contains non-finite values")
    f = net.arch.downsample_factor
    if residual.shape[-2] % f or residual.shape[-1] % f:
        raise ValidationError(f"residual size is not divisible by the downsampling factor {f}")
    feat, skips = net.encoder(residual)
    return torch.sigmoid(net.decoder(feat, skips)), feat


def windows_to_tensor(windows, dtype=torch.float32):
    """Stack :class:`FrameWindow` objects into ``(frames, targets)`` tensors."""
    if isinstance(windows, FrameWindow):
        windows = [windows]
    frames = np.stack([w.frames for w in windows])  # N,5,H,W,3
    targets = np.stack([w.target for w in windows])  # N,H,W,3
    frames = torch.from_numpy(np.ascontiguousarray(frames.transpose(0, 1, 4, 2, 3))).to(dtype)
    targets = torch.from_numpy(np.ascontiguousarray(targets.transpose(0, 3, 1, 2))).to(dtype)
    return frames, targets


def to_hwc(t: torch.Tensor) -> np.ndarray:
    """``(C, H, W)`` or ``(1, C, H, W)`` tensor to an ``H x W x C`` ndarray."""
    if t.dim() == 4:
        t = t[0]
    return t.detach().cpu().numpy().transpose(1, 2, 0)


def build_nets(preset: str = "tiny", seed: int = 0, dtype=torch.float32):
    """Freshly initialized (DerainNet, ReviewNet) for a named preset."""
    if preset not in PRESETS:
        raise ValidationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        derain = DerainNet(PRESETS[preset]["derain"])
        review = ReviewNet(PRESETS[preset]["review"])
    finally:
        torch.random.set_rng_state(gen_state)
    return derain.to(dtype), review.to(dtype)
