"""Input pipelining: raw 6-axis IMU stream -> normalized (6, 200, 1) CNN input.

The four stages run in a fixed order: feature selection, window stacking,
resampling to a constant record count, then smoothing and min-max scaling.
All functions operate on the last axis and accept arbitrary leading
dimensions, so a whole stack of windows can be processed in one call.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import EmptyStream, InsufficientData, InvalidConfig, InvalidData

N_CHANNELS = 6
TARGET_LEN = 200
AUGMENT_DURATIONS = (1.5, 1.6, 1.7)
CHANNEL_NAMES = ("lax", "lay", "laz", "avx", "avy", "avz")


class ImuSample(NamedTuple):
    t: float
    lin_acc: tuple[float, float, float]
    ang_vel: tuple[float, float, float]


@dataclass(frozen=True)
class WindowConfig:
    duration_T: float = 1.5
    sample_rate: float = 50.0
    stride: int = 1
    target_len: int = TARGET_LEN
    smooth_len: int = 5

    def __post_init__(self):
        if not self.duration_T > 0:
            raise InvalidConfig(f"duration_T must be > 0, got {self.duration_T}")
        if not self.sample_rate > 0:
            raise InvalidConfig(f"sample_rate must be > 0, got {self.sample_rate}")
        if int(self.stride) != self.stride or self.stride < 1:
            raise InvalidConfig(f"stride must be an integer >= 1, got {self.stride}")
        if self.target_len < 2:
            raise InvalidConfig(f"target_len must be >= 2, got {self.target_len}")
        if self.smooth_len < 1 or self.smooth_len % 2 == 0 or self.smooth_len > self.target_len:
            raise InvalidConfig(f"smooth_len must be odd and in [1, target_len], got {self.smooth_len}")

    @property
    def window_len(self) -> int:
        return int(round(self.duration_T * self.sample_rate))


def select_features(samples: Sequence[ImuSample]) -> np.ndarray:
    """Stack samples into a 6xN matrix ordered [lin_acc x,y,z, ang_vel x,y,z]."""
    if len(samples) == 0:
        raise EmptyStream("no IMU samples")
    out = np.empty((N_CHANNELS, len(samples)), dtype=np.float64)
    for i, s in enumerate(samples):
        out[0:3, i] = s.lin_acc
        out[3:6, i] = s.ang_vel
    return out


def window_starts(n_samples: int, window_len: int, stride: int) -> np.ndarray:
    if n_samples < window_len:
        raise InsufficientData(f"{n_samples} samples < window length {window_len}")
    count = (n_samples - window_len) // stride + 1
    return np.arange(count, dtype=np.int64) * stride


def stack_windows(channels: np.ndarray, cfg: WindowConfig) -> np.ndarray:
    """Cut (C, N) channels into contiguous windows; returns (n_windows, C, L)."""
    channels = np.asarray(channels, dtype=np.float64)
    L = cfg.window_len
    starts = window_starts(channels.shape[-1], L, cfg.stride)
    idx = starts[:, None] + np.arange(L)[None, :]
    return np.ascontiguousarray(np.moveaxis(channels[:, idx], 1, 0))


def _resample_plan(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Output point i sits at i*(n_in-1)/(n_out-1). Splitting the integer numerator
    # gives the segment index exactly and the in-segment fraction with one rounding.
    num = np.arange(n_out, dtype=np.int64) * (n_in - 1)
    lo = num // (n_out - 1)
    frac = (num % (n_out - 1)) / (n_out - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, frac


def resample(x: np.ndarray, target_len: int = TARGET_LEN) -> np.ndarray:
    """Piecewise-linear resampling of the last axis onto `target_len` uniform points."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n < 2:
        raise InsufficientData(f"need at least 2 records to resample, got {n}")
    lo, hi, frac = _resample_plan(n, target_len)
    a = x[..., lo]
    # a + f*(b - a) is exact for constant segments and at frac == 0
    return a + frac * (x[..., hi] - a)


def moving_average(x: np.ndarray, smooth_len: int = 5) -> np.ndarray:
    """Centered moving average; the window shrinks symmetrically at the edges."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if smooth_len < 1 or smooth_len % 2 == 0 or smooth_len > n:
        raise InvalidConfig(f"smooth_len must be odd and in [1, {n}], got {smooth_len}")
    if smooth_len == 1:
        return x.copy()
    half = smooth_len // 2
    i = np.arange(n)
    reach = np.minimum(np.minimum(i, n - 1 - i), half)
    # Averaging deviations from the centre sample keeps constant signals exactly constant.
    acc = np.zeros_like(x)
    for k in range(1, half + 1):
        ok = reach >= k
        left = np.where(ok, i - k, i)
        right = np.where(ok, i + k, i)
        acc += (x[..., left] - x) + (x[..., right] - x)
    return x + acc / (2 * reach + 1)


def minmax_scale(x: np.ndarray) -> np.ndarray:
    """Scale each vector on the last axis to [0, 1]; constant vectors map to 0.5."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidData("non-finite value in channel")
    lo = x.min(axis=-1, keepdims=True)
    hi = x.max(axis=-1, keepdims=True)
    span = hi - lo
    flat = span == 0
    out = (x - lo) / np.where(flat, 1.0, span)
    out = np.where(flat, 0.5, out)
    # Guard the upper end against a last-ulp overshoot of the division.
    return np.minimum(out, 1.0)


def make_input(window: np.ndarray, cfg: WindowConfig | None = None) -> np.ndarray:
    """(6, L) -> (6, 200, 1), or a stack (n, 6, L) -> (n, 6, 200, 1)."""
    cfg = cfg or WindowConfig()
    window = np.asarray(window, dtype=np.float64)
    if window.ndim not in (2, 3) or window.shape[-2] != N_CHANNELS:
        raise InvalidData(f"expected (6, L) or (n, 6, L) window, got {window.shape}")
    if not np.all(np.isfinite(window)):
        raise InvalidData("non-finite value in window")
    out = resample(window, cfg.target_len)
    out = moving_average(out, cfg.smooth_len)
    out = minmax_scale(out)
    return out[..., None]


def count_windows(n_samples: int, cfg: WindowConfig) -> int:
    L = cfg.window_len
    return 0 if n_samples < L else (n_samples - L) // cfg.stride + 1
