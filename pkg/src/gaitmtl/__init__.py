"""Multitask gait phase recognition and terrain classification from one thigh IMU."""

from __future__ import annotations

from .errors import GaitMTLError

__all__ = ["GaitMTLError"]
__version__ = "0.1.0"
