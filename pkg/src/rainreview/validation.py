"""Input validation helpers shared by the data, loss and metric modules."""

from __future__ import annotations

import numpy as np


class ValidationError(ValueError):
    """Raised when user-supplied data or configuration violates a contract."""


def check_image(img, name: str = "image", channels: int | None = 3, unit_range: bool = True) -> np.ndarray:
    """Validate an ``H x W x C`` float image and return it as an ndarray.

    Parameters
    ----------
    img : array_like
        Image to validate.
    name : str
        Used in error messages.
    channels : int or None
        Required channel count; ``None`` accepts any.
    unit_range : bool
        Require all values to lie in ``[0, 1]``.
    """
    arr = np.asarray(img)
    if arr.ndim != 3:
        raise ValidationError(f"{name} must be H x W x C, got shape {arr.shape}")
    if channels is not None and arr.shape[2] != channels:
        raise ValidationError(f"{name} must have {channels} channels, got {arr.shape[2]}")
    if not np.issubdtype(arr.dtype, np.floating):
        raise ValidationError(f"{name} must be a float array, got {arr.dtype}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    if unit_range and arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValidationError(f"{name} values must lie in [0, 1]")
    return arr


def check_same_shape(a, b, names=("a", "b")) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValidationError(f"shape mismatch: {names[0]} {tuple(a.shape)} vs {names[1]} {tuple(b.shape)}")


def check_range(name: str, pair, low: float | None = None, high: float | None = None) -> tuple:
    """Validate an ordered ``(low, high)`` pair, optionally within bounds."""
    try:
        lo, hi = pair
    except (TypeError, ValueError):
        raise ValidationError(f"{name} must be a (low, high) pair, got {pair!r}") from None
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise ValidationError(f"{name} must be finite, got {pair!r}")
    if lo > hi:
        raise ValidationError(f"{name} must satisfy low <= high, got {pair!r}")
    if low is not None and lo < low:
        raise ValidationError(f"{name} must be >= {low}, got {pair!r}")
    if high is not None and hi > high:
        raise ValidationError(f"{name} must be <= {high}, got {pair!r}")
    return (lo, hi)


def check_divisible(height: int, width: int, factor: int, what: str = "frame size") -> None:
    if height % factor or width % factor:
        raise ValidationError(
            f"{what} {height}x{width} is not divisible by the network downsampling factor {factor}"
        )


def check_positive_int(name: str, value, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < minimum:
        raise ValidationError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)
