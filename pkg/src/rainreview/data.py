"""Synthetic rain tasks, clip folders on disk, and 5-frame training windows.

Clip layout on disk::

    <clip>/clean/00000.png ...    8-bit RGB ground truth
    <clip>/rainy/00000.png ...    8-bit RGB rainy frames
    <clip>/streaks/00000.png ...  optional 8-bit grayscale streak layers

A task directory holds one or more clips plus ``manifest.json``.
"""

from __future__ import annotations

import json
import os
import re
import sys
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .validation import (
    ValidationError,
    check_divisible,
    check_image,
    check_positive_int,
    check_range,
)

WINDOW_OFFSETS = (-2, -1, 0, 1, 2)
CENTER = 2
MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
_FRAME_RE = re.compile(r"^(\d+)\.png$")


@dataclass(frozen=True)
class RainTaskSpec:
    """Parameters of one synthetic rain-streak type.

    Angles are measured from vertical in degrees; ``density`` is the number of
    streaks per 10 000 pixels.
    """

    task_id: str
    angle_deg_range: tuple = (-5.0, 5.0)
    length_px_range: tuple = (6, 12)
    width_px_range: tuple = (1, 1)
    density: float = 20.0
    intensity_range: tuple = (0.3, 0.6)
    drift_px_per_frame: float = 3.0
    seed: int = 0

    def __post_init__(self):
        # tuples from JSON/YAML arrive as lists
        for name in ("angle_deg_range", "length_px_range", "width_px_range", "intensity_range"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if not isinstance(self.task_id, str) or not self.task_id:
            raise ValidationError("task_id must be a non-empty string")
        check_range("angle_deg_range", self.angle_deg_range, -90.0, 90.0)
        check_range("length_px_range", self.length_px_range, 1.0)
        check_range("width_px_range", self.width_px_range, 1.0)
        check_range("intensity_range", self.intensity_range, 0.0, 1.0)
        if not np.isfinite(self.density) or self.density < 0:
            raise ValidationError(f"density must be >= 0, got {self.density!r}")
        if not np.isfinite(self.drift_px_per_frame):
            raise ValidationError("drift_px_per_frame must be finite")
        if isinstance(self.seed, bool) or not isinstance(self.seed, (int, np.integer)) or self.seed < 0:
            raise ValidationError(f"seed must be an unsigned integer, got {self.seed!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RainTaskSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown rain task keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ClipPair:
    rainy: np.ndarray  # (T, H, W, 3) float32
    clean: np.ndarray  # (T, H, W, 3) float32
    streaks: np.ndarray | None = None  # (T, H, W, 1) float32
    task_id: str = ""

    def __post_init__(self):
        self.rainy = np.asarray(self.rainy)
        self.clean = np.asarray(self.clean)
        if self.rainy.shape != self.clean.shape:
            raise ValidationError(f"rainy {self.rainy.shape} and clean {self.clean.shape} clips differ in shape")
        if self.rainy.ndim != 4 or self.rainy.shape[-1] != 3:
            raise ValidationError(f"clips must be T x H x W x 3, got {self.rainy.shape}")
        if self.streaks is not None:
            self.streaks = np.asarray(self.streaks)
            if self.streaks.shape != self.rainy.shape[:-1] + (1,):
                raise ValidationError(f"streaks shape {self.streaks.shape} does not match clip {self.rainy.shape}")

    def __len__(self) -> int:
        return self.rainy.shape[0]


@dataclass
class FrameWindow:
    frames: np.ndarray  # (5, H, W, 3): X_{t-2} .. X_{t+2}
    center_index: int
    target: np.ndarray  # (H, W, 3): Y_t

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[0] != 5 or self.frames.shape[-1] != 3:
            raise ValidationError(f"a window holds exactly 5 H x W x 3 frames, got {self.frames.shape}")
        if self.target.shape != self.frames.shape[1:]:
            raise ValidationError("window target must match the frame shape")

    @property
    def center(self) -> np.ndarray:
        return self.frames[CENTER]

    @property
    def shape(self) -> tuple:
        return self.target.shape


# ---------------------------------------------------------------------------
# rain synthesis


def _num_streaks(spec: RainTaskSpec, height: int, width: int) -> int:
    return int(round(spec.density * height * width / 1e4))


def synthesize_streak_layer(spec: RainTaskSpec, height: int, width: int, frame_index: int) -> np.ndarray:
    """Render the streak layer of ``spec`` for one frame.

    Streak geometry is drawn once from ``spec.seed`` and the frame size, so
    every frame of a clip shows the same streaks translated by
    ``frame_index * drift_px_per_frame`` along their own direction. Streaks
    wrap around the frame edges so density is constant over time.

    Returns
    -------
    ndarray
        ``(height, width, 1)`` float32 layer in ``[0, 1]``.
    """
    spec.validate()
    if height < 16 or width < 16:
        raise ValidationError(f"streak layers need height, width >= 16, got {height}x{width}")
    layer = np.zeros((height, width), dtype=np.float32)
    n = _num_streaks(spec, height, width)
    if n == 0:
        return layer[..., None]

    rng = np.random.default_rng([int(spec.seed), int(height), int(width)])
    y0 = rng.uniform(0, height, n)
    x0 = rng.uniform(0, width, n)
    theta = np.deg2rad(rng.uniform(*spec.angle_deg_range, n))
    lengths = np.rint(rng.uniform(*spec.length_px_range, n)).astype(int)
    widths = np.rint(rng.uniform(*spec.width_px_range, n)).astype(int)
    intensity = rng.uniform(*spec.intensity_range, n).astype(np.float32)

    shift = frame_index * spec.drift_px_per_frame
    for i in range(n):
        dy, dx = np.cos(theta[i]), np.sin(theta[i])
        length, w = max(lengths[i], 1), max(widths[i], 1)
        # two samples per pixel along and across so slanted streaks have no holes
        s = np.linspace(0.0, length - 1, 2 * length)
        half = (w - 1) / 2.0
        o = np.linspace(-half, half, 2 * w) if w > 1 else np.zeros(1)
        ss, oo = np.meshgrid(s, o, indexing="ij")
        ys = y0[i] + shift * dy + ss * dy - oo * dx
        xs = x0[i] + shift * dx + ss * dx + oo * dy
        yi = np.mod(np.rint(ys).astype(np.int64), height).ravel()
        xi = np.mod(np.rint(xs).astype(np.int64), width).ravel()
        np.maximum.at(layer, (yi, xi), intensity[i])
    return np.clip(layer, 0.0, 1.0)[..., None]


def apply_rain(clean, streaks) -> np.ndarray:
    """Additive rain with clamping: ``clip(clean + streaks, 0, 1)``."""
    clean = check_image(clean, "clean")
    streaks = check_image(streaks, "streaks", channels=1)
    if clean.shape[:2] != streaks.shape[:2]:
        raise ValidationError(f"shape mismatch: clean {clean.shape} vs streaks {streaks.shape}")
    return np.clip(clean + streaks, 0.0, 1.0)


def procedural_clean_clip(n_frames: int = 10, height: int = 48, width: int = 48, seed: int = 0) -> np.ndarray:
    """A rain-free synthetic clip: drifting color gradient plus moving shapes.

    Values stay within ``[0.05, 0.8]`` so moderate rain is rarely clipped.
    """
    check_positive_int("n_frames", n_frames)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    base = rng.uniform(0.2, 0.5, 3)
    grad = rng.uniform(-0.25, 0.25, (3, 2))
    freq = rng.uniform(0.05, 0.2, (3, 2))
    vel = rng.uniform(-1.5, 1.5, 2)
    n_shapes = 3
    centers = rng.uniform(0, 1, (n_shapes, 2)) * (height, width)
    shape_vel = rng.uniform(-1.5, 1.5, (n_shapes, 2))
    radii = rng.uniform(4, 10, n_shapes)
    colors = rng.uniform(0.05, 0.8, (n_shapes, 3))

    frames = np.empty((n_frames, height, width, 3), dtype=np.float32)
    for t in range(n_frames):
        y = yy + vel[0] * t
        x = xx + vel[1] * t
        img = np.empty((height, width, 3))
        for c in range(3):
            img[..., c] = (
                base[c]
                + grad[c, 0] * y / height
                + grad[c, 1] * x / width
                + 0.08 * np.sin(freq[c, 0] * y) * np.cos(freq[c, 1] * x)
            )
        for k in range(n_shapes):
            cy, cx = centers[k] + shape_vel[k] * t
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radii[k] ** 2
            img[mask] = colors[k]
        frames[t] = np.clip(img, 0.05, 0.8)
    return frames


# ---------------------------------------------------------------------------
# disk I/O


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im).copy()


def _write_png(path: Path, arr: np.ndarray) -> None:
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(path, format="PNG", compress_level=6)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _numbered_frames(d: Path) -> list[Path]:
    entries = []
    for p in d.iterdir():
        m = _FRAME_RE.match(p.name)
        if m:
            entries.append((int(m.group(1)), p))
    entries.sort()
    idx = [i for i, _ in entries]
    if len(set(idx)) != len(idx):
        raise ValidationError(f"duplicate frame numbers in {d}")
    if idx and idx != list(range(idx[0], idx[0] + len(idx))):
        raise ValidationError(f"non-monotone or gapped frame numbering in {d}")
    return [p for _, p in entries]


def generate_task_dataset(
    spec: RainTaskSpec,
    clean_clips: Sequence[np.ndarray],
    out_dir,
    splits: Sequence[str] | None = None,
) -> Path:
    """Write rainy/clean/streak frames for ``spec`` and a manifest.

    Composition happens on the 8-bit values (``min(clean + streak, 255)``) so
    the additive identity holds exactly in the emitted files.

    Returns the manifest path.
    """
    spec.validate()
    out_dir = Path(out_dir)
    if splits is None:
        splits = ["train"] * len(clean_clips)
    if len(splits) != len(clean_clips):
        raise ValidationError("splits must have one entry per clean clip")
    for i, clip in enumerate(clean_clips):
        if np.asarray(clip).ndim != 4 or len(clip) < 5:
            raise ValidationError(f"clean clip {i} must be a T x H x W x 3 array with T >= 5")
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ValidationError(f"cannot create output directory {out_dir}: {e}") from e
    if not os.access(out_dir, os.W_OK):
        raise ValidationError(f"output directory {out_dir} is not writable")

    entries = []
    for i, (clip, split) in enumerate(zip(clean_clips, splits)):
        clip = np.asarray(clip, dtype=np.float32)
        name = f"clip_{i:03d}"
        cdir = out_dir / name
        for sub in ("clean", "rainy", "streaks"):
            (cdir / sub).mkdir(parents=True, exist_ok=True)
        height, width = clip.shape[1:3]
        for t in range(len(clip)):
            c8 = to_uint8(check_image(clip[t], f"clean frame {t}"))
            s8 = to_uint8(synthesize_streak_layer(spec, height, width, t)[..., 0])
            r8 = np.minimum(c8.astype(np.int16) + s8[..., None], 255).astype(np.uint8)
            _write_png(cdir / "clean" / f"{t:05d}.png", c8)
            _write_png(cdir / "rainy" / f"{t:05d}.png", r8)
            _write_png(cdir / "streaks" / f"{t:05d}.png", s8)
        entries.append({"name": name, "path": name, "n_frames": int(len(clip)), "split": split,
                        "height": int(height), "width": int(width)})

    manifest = {"version": MANIFEST_VERSION, "task_id": spec.task_id, "spec": spec.to_dict(), "clips": entries}
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise ValidationError(f"manifest not found: {path}")
    m = json.loads(path.read_text())
    for key in ("task_id", "clips"):
        if key not in m:
            raise ValidationError(f"manifest {path} lacks '{key}'")
    m["_root"] = str(path.parent)
    return m


def load_clip(clip_dir, task_id: str | None = None) -> ClipPair:
    """Load a clip folder into a :class:`ClipPair` with values in ``[0, 1]``."""
    clip_dir = Path(clip_dir)
    for sub in ("clean", "rainy"):
        if not (clip_dir / sub).is_dir():
            raise ValidationError(f"clip directory {clip_dir} lacks '{sub}/'")
    clean_files = _numbered_frames(clip_dir / "clean")
    rainy_files = _numbered_frames(clip_dir / "rainy")
    if not clean_files:
        raise ValidationError(f"clip directory {clip_dir} holds no frames")
    if len(clean_files) != len(rainy_files):
        raise ValidationError(f"frame-count mismatch in {clip_dir}: {len(clean_files)} clean vs {len(rainy_files)} rainy")
    if [p.name for p in clean_files] != [p.name for p in rainy_files]:
        raise ValidationError(f"clean and rainy frame numbering differ in {clip_dir}")

    def stack(files, gray=False):
        imgs = [_read_png(p) for p in files]
        arr = np.stack(imgs).astype(np.float32) / 255.0
        if gray:
            return arr[..., None] if arr.ndim == 3 else arr[..., :1]
        if arr.ndim == 3:
            arr = np.repeat(arr[..., None], 3, axis=-1)
        return arr[..., :3]

    streaks = None
    if (clip_dir / "streaks").is_dir():
        streak_files = _numbered_frames(clip_dir / "streaks")
        if len(streak_files) != len(clean_files):
            raise ValidationError(f"streak frame count mismatch in {clip_dir}")
        streaks = stack(streak_files, gray=True)
    return ClipPair(rainy=stack(rainy_files), clean=stack(clean_files), streaks=streaks,
                    task_id=task_id if task_id is not None else clip_dir.name)


# ---------------------------------------------------------------------------
# windows


def extract_window(clip: ClipPair, t: int) -> FrameWindow:
    """Frames ``t-2 .. t+2`` with indices clamped to the clip (replicate padding)."""
    n = len(clip)
    if not 0 <= t < n:
        raise ValidationError(f"window center {t} out of range for a {n}-frame clip")
    idx = [min(max(t + d, 0), n - 1) for d in WINDOW_OFFSETS]
    return FrameWindow(frames=clip.rainy[idx], center_index=t, target=clip.clean[t])


def clip_windows(clip: ClipPair) -> list[FrameWindow]:
    return [extract_window(clip, t) for t in range(len(clip))]


def random_crop(window: FrameWindow, size: int, rng: np.random.Generator, factor: int = 1) -> FrameWindow:
    """Crop all five frames and the target at one offset drawn from ``rng``."""
    h, w = window.shape[:2]
    if size > min(h, w):
        raise ValidationError(f"crop size {size} exceeds frame size {h}x{w}")
    check_divisible(size, size, factor, "crop size")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return FrameWindow(
        frames=window.frames[:, top:top + size, left:left + size],
        center_index=window.center_index,
        target=window.target[top:top + size, left:left + size],
    )


# ---------------------------------------------------------------------------
# task-scoped access


class FileAccessAudit:
    """Record every file path opened by this process while active.

    Backed by :func:`sys.addaudithook`, so opens through any library are seen.
    Audit hooks cannot be removed; one permanent hook forwards to whichever
    audits are currently active.
    """

    _active: list["FileAccessAudit"] = []
    _lock = threading.Lock()
    _installed = False

    def __init__(self):
        self.paths: list[str] = []

    @classmethod
    def _hook(cls, event, args):
        if event == "open" and cls._active and args and isinstance(args[0], (str, bytes, os.PathLike)):
            p = os.fsdecode(args[0])
            for audit in list(cls._active):
                audit.paths.append(os.path.abspath(p))

    def __enter__(self):
        with self._lock:
            if not FileAccessAudit._installed:
                sys.addaudithook(FileAccessAudit._hook)
                FileAccessAudit._installed = True
            FileAccessAudit._active.append(self)
        return self

    def __exit__(self, *exc):
        with self._lock:
            FileAccessAudit._active.remove(self)
        return False

    def touched(self, root) -> list[str]:
        root = os.path.abspath(root)
        return [p for p in self.paths if p == root or p.startswith(root + os.sep)]


@dataclass
class TaskData:
    """Windows of one task, loaded from a manifest (or built in memory).

    The trainer only ever receives the ``TaskData`` of the stage it is
    training, which is how old-task files stay untouched in later stages.
    """

    task_id: str
    train: list[FrameWindow]
    held_out: list[FrameWindow] = field(default_factory=list)
    root: str | None = None

    @classmethod
    def from_manifest(cls, manifest_path, splits: Iterable[str] = ("train", "eval")) -> "TaskData":
        m = read_manifest(manifest_path)
        root = Path(m["_root"])
        splits = set(splits)
        train, held = [], []
        for entry in m["clips"]:
            split = entry.get("split", "train")
            if split not in splits:
                continue
            clip = load_clip(root / entry["path"], task_id=m["task_id"])
            (held if split == "eval" else train).extend(clip_windows(clip))
        return cls(task_id=m["task_id"], train=train, held_out=held, root=str(root))

    @classmethod
    def from_clips(cls, task_id: str, train_clips: Sequence[ClipPair], eval_clips: Sequence[ClipPair] = ()) -> "TaskData":
        train = [w for c in train_clips for w in clip_windows(c)]
        held = [w for c in eval_clips for w in clip_windows(c)]
        return cls(task_id=task_id, train=train, held_out=held)


def synthetic_clip(spec: RainTaskSpec, clean: np.ndarray) -> ClipPair:
    """In-memory counterpart of :func:`generate_task_dataset` for one clip."""
    clean = np.asarray(clean, dtype=np.float32)
    h, w = clean.shape[1:3]
    streaks = np.stack([synthesize_streak_layer(spec, h, w, t) for t in range(len(clean))])
    rainy = np.clip(clean + streaks, 0.0, 1.0)
    return ClipPair(rainy=rainy, clean=clean, streaks=streaks, task_id=spec.task_id)
