"""CSV readers and writers for IMU trials, FSR streams and per-window outputs."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyStream, InvalidData
from .pipeline import CHANNEL_NAMES

TRIAL_HEADER = ("t", *CHANNEL_NAMES)
FSR_HEADER = ("t", "front", "back")


def fmt(v) -> str:
    """Shortest round-tripping text for a number; NaN becomes an empty cell."""
    if isinstance(v, (str, bytes)):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "" if math.isnan(v) else repr(v)


def write_rows(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def read_table(path: str | Path, header: Sequence[str]) -> np.ndarray:
    """Numeric table with an exact header check; rows as float64."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            got = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyStream(f"{path}: empty file") from None
        if tuple(got) != tuple(header):
            raise InvalidData(f"{path}: expected header {','.join(header)}, got {','.join(got)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise InvalidData(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(x) for x in row])
            except ValueError:
                raise InvalidData(f"{path}:{lineno}: non-numeric field") from None
    if not rows:
        raise EmptyStream(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidData(f"{path}: non-finite values")
    if np.any(np.diff(arr[:, 0]) <= 0):
        raise InvalidData(f"{path}: timestamps must be strictly increasing")
    return arr


def write_trial(path, t: np.ndarray, imu: np.ndarray) -> Path:
    return write_rows(path, TRIAL_HEADER, (np.concatenate([[ti], row]) for ti, row in zip(t, imu)))


def read_trial(path) -> tuple[np.ndarray, np.ndarray]:
    """-> (t, imu (N, 6))."""
    arr = read_table(path, TRIAL_HEADER)
    return arr[:, 0], arr[:, 1:]


def write_fsr(path, t: np.ndarray, fsr: np.ndarray) -> Path:
    return write_rows(path, FSR_HEADER, ((ti, f, b) for ti, (f, b) in zip(t, fsr)))


def read_fsr(path) -> tuple[np.ndarray, np.ndarray]:
    """-> (t, fsr (N, 2) front/back)."""
    arr = read_table(path, FSR_HEADER)
    return arr[:, 0], arr[:, 1:]
