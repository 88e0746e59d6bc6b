"""Reconstruction, distillation and replay losses.

All functions take torch tensors laid out ``(..., C, H, W)`` and are
differentiable. Teacher-side inputs are detached inside the distillation and
replay losses, so gradients only ever reach the student.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch.nn import functional as F

from .data import CENTER
from .validation import ValidationError, check_same_shape

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
GRAY_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class LossWeights:
    sigma1: float = 1.1  # negative-SSIM weight
    sigma2: float = 0.75  # L1 weight
    lambda1: float = 0.5
    lambda2: float = 0.5
    lambda3: float = 1.0
    lambda4: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not math.isfinite(v) or v < 0:
                raise ValidationError(f"loss weight {k} must be finite and >= 0, got {v!r}")

    @property
    def lambdas(self) -> tuple:
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4)


def l1_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    check_same_shape(a, b)
    return (a - b).abs().mean()


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float64) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)


def ssim(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> torch.Tensor:
    """Mean SSIM over all valid 11x11 Gaussian windows and all channels.

    Leading dimensions are flattened; each 2-D plane is scored independently
    and the local SSIM maps are averaged together.
    """
    check_same_shape(a, b)
    if a.dim() < 2:
        raise ValidationError("ssim needs at least 2-D inputs")
    h, w = a.shape[-2:]
    if min(h, w) < SSIM_WINDOW:
        raise ValidationError(f"image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    x = a.reshape(-1, 1, h, w)
    y = b.reshape(-1, 1, h, w)
    win = gaussian_window(dtype=a.dtype).to(a.device)[None, None]
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    mu_x = F.conv2d(x, win)
    mu_y = F.conv2d(y, win)
    var_x = F.conv2d(x * x, win) - mu_x * mu_x
    var_y = F.conv2d(y * y, win) - mu_y * mu_y
    cov = F.conv2d(x * y, win) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return (num / den).mean()


def combined_loss(pred: torch.Tensor, target: torch.Tensor, w: LossWeights = LossWeights()) -> torch.Tensor:
    """``sigma1 * (-ssim) + sigma2 * l1``; equals ``-sigma1`` when pred == target."""
    return w.sigma1 * (-ssim(pred, target)) + w.sigma2 * l1_loss(pred, target)


def response_kd_loss(student_b: torch.Tensor, teacher_b: torch.Tensor, w: LossWeights = LossWeights()) -> torch.Tensor:
    return combined_loss(student_b, teacher_b.detach(), w)


def feature_kd_loss(student_f: torch.Tensor, teacher_f: torch.Tensor) -> torch.Tensor:
    """Mean absolute feature difference. SSIM is left out: features are unbounded."""
    if student_f.shape != teacher_f.shape:
        raise ValidationError(
            f"feature shapes differ ({tuple(student_f.shape)} vs {tuple(teacher_f.shape)}); "
            "student and teacher architectures must match"
        )
    return (student_f - teacher_f.detach()).abs().mean()


def grayscale(img: torch.Tensor) -> torch.Tensor:
    """BT.601 gray of ``|img|`` on the channel axis (-3), clamped to [0, 1]."""
    if img.dim() < 3 or img.shape[-3] != 3:
        raise ValidationError(f"grayscale needs 3 channels on axis -3, got shape {tuple(img.shape)}")
    wts = torch.tensor(GRAY_WEIGHTS, dtype=img.dtype, device=img.device).view(3, 1, 1)
    return (img.abs() * wts).sum(dim=-3, keepdim=True).clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# affine augmentation of rain maps


@dataclass(frozen=True)
class AffineParams:
    """Rotation (degrees), isotropic scale, translation as a fraction of
    (width, height), and an optional horizontal flip, all about the center."""

    rotation_deg: float = 0.0
    scale: float = 1.0
    translate_frac: tuple = (0.0, 0.0)
    hflip: bool = False

    def __post_init__(self):
        object.__setattr__(self, "translate_frac", tuple(self.translate_frac))
        if not 0.5 <= self.scale <= 2.0:
            raise ValidationError(f"affine scale must lie in [0.5, 2], got {self.scale}")
        if len(self.translate_frac) != 2 or any(abs(t) > 0.25 for t in self.translate_frac):
            raise ValidationError(f"affine translate_frac must be a pair within +-0.25, got {self.translate_frac}")
        if not math.isfinite(self.rotation_deg):
            raise ValidationError("affine rotation must be finite")

    @classmethod
    def sample(cls, rng: np.random.Generator, max_rotation: float = 10.0, scale_range=(0.9, 1.1),
               max_translate: float = 0.1, p_flip: float = 0.5) -> "AffineParams":
        return cls(
            rotation_deg=float(rng.uniform(-max_rotation, max_rotation)),
            scale=float(rng.uniform(*scale_range)),
            translate_frac=(float(rng.uniform(-max_translate, max_translate)),
                            float(rng.uniform(-max_translate, max_translate))),
            hflip=bool(rng.random() < p_flip),
        )

    @property
    def is_identity(self) -> bool:
        return self.rotation_deg == 0 and self.scale == 1 and self.translate_frac == (0.0, 0.0) and not self.hflip


def affine_apply(s: torch.Tensor, p: AffineParams) -> torch.Tensor:
    """Warp a rain map ``(N, C, H, W)``: rotate, scale, translate, then flip.

    Sampling is bilinear at exact pixel coordinates; pixels that map from
    outside the frame get 0 (no rain).
    """
    if s.dim() != 4:
        raise ValidationError(f"rain map must be N x C x H x W, got {tuple(s.shape)}")
    if p.is_identity:
        return s.clamp(0.0, 1.0)
    n, _, h, w = s.shape
    dt = s.dtype
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64), indexing="ij")
    # invert the forward map for every output pixel
    qx, qy = xs - cx, ys - cy
    if p.hflip:
        qx = -qx
    qx = (qx - p.translate_frac[0] * w) / p.scale
    qy = (qy - p.translate_frac[1] * h) / p.scale
    th = math.radians(p.rotation_deg)
    c, sn = math.cos(th), math.sin(th)
    src_x = c * qx + sn * qy + cx
    src_y = -sn * qx + c * qy + cy
    gx = src_x / max(w - 1, 1) * 2 - 1
    gy = src_y / max(h - 1, 1) * 2 - 1
    grid = torch.stack([gx, gy], dim=-1).to(dt).to(s.device).expand(n, h, w, 2)
    out = F.grid_sample(s, grid, mode="bilinear", padding_mode="zeros", align_corners=True)
    return out.clamp(0.0, 1.0)


def build_replay_input(s: torch.Tensor, teacher_b: torch.Tensor, p: AffineParams) -> torch.Tensor:
    """``clamp(A(S) + B_teacher, 0, 1)`` with the 1-channel map broadcast to RGB."""
    warped = affine_apply(s.detach(), p)
    return (warped.expand_as(teacher_b) + teacher_b.detach()).clamp(0.0, 1.0)


def review_replay_loss(student, frames: torch.Tensor, s: torch.Tensor, teacher_b: torch.Tensor,
                       target: torch.Tensor, w: LossWeights = LossWeights(),
                       params: AffineParams = AffineParams()):
    """Derain a window whose center is replaced by a replayed rainy frame.

    Only the center frame is substituted; the neighbors remain the original
    new-task frames. Returns ``(loss, replay_center)``.
    """
    from .nets import derain_forward

    x_tilde = build_replay_input(s, teacher_b, params)
    replay = frames.clone()
    replay[:, CENTER] = x_tilde
    b_r, _ = derain_forward(student, replay)
    return combined_loss(b_r, target, w), x_tilde


def review_net_loss(stage_j: int, student_f, teacher_f, s_j, s_jm1, supervised_target,
                    w: LossWeights = LossWeights()) -> torch.Tensor:
    """Review-network objective.

    Stage 1 uses only the supervised term ``lambda3 * L(S_j, G(X - Y))``;
    later stages add feature and output distillation against the previous
    review net.
    """
    if stage_j < 1:
        raise ValidationError(f"stage index must be >= 1, got {stage_j}")
    supervised = w.lambda3 * combined_loss(s_j, supervised_target.detach(), w)
    if stage_j == 1:
        return supervised
    if teacher_f is None or s_jm1 is None:
        raise ValidationError(f"stage {stage_j} review loss needs the previous review net's feature and rain map")
    return (w.lambda1 * feature_kd_loss(student_f, teacher_f)
            + w.lambda2 * combined_loss(s_j, s_jm1.detach(), w)
            + supervised)


TERM_NAMES = ("L_C", "L_RKD", "L_FKD", "L_R")


def total_derain_loss(terms: dict, w: LossWeights = LossWeights()):
    """``lambda1*L_C + lambda2*L_RKD + lambda3*L_FKD + lambda4*L_R``; absent terms count as 0."""
    unknown = set(terms) - set(TERM_NAMES)
    if unknown:
        raise ValidationError(f"unknown loss terms: {sorted(unknown)}")
    total = 0.0
    for lam, name in zip(w.lambdas, TERM_NAMES):
        value = terms.get(name)
        if value is not None:
            total = total + lam * value
    return total
