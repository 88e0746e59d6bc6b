"""Continual video deraining with frame grouping, distillation and rain review."""

__version__ = "0.1.0"
