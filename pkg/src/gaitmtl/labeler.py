"""Foot-switch labeling: FSR contact -> phase sections -> FLP/FSP events -> gait percent.

FLP (foot lifting point) is anchored at 0 % (== 100 %), FSP (foot stepping point)
at 40 %; percent is linear in time between consecutive anchors. The percent is
then mapped onto the unit circle so that the 100 -> 0 wrap is continuous.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import EmptyStream, InvalidData, InvalidLabel, LabelingError, UndefinedPhase

FSP_PERCENT = 40.0
DEFAULT_THRESHOLD = 0.5
DEBOUNCE_S = 0.04

SWING = "swing"
HEEL_STRIKE = "heel_strike"
MID_STANCE = "mid_stance"
HEEL_OFF = "heel_off"

# (front in contact, back in contact) -> section kind
_KIND_TABLE = {
    (False, False): SWING,
    (False, True): HEEL_STRIKE,
    (True, True): MID_STANCE,
    (True, False): HEEL_OFF,
}


class FsrSample(NamedTuple):
    t: float
    front: float
    back: float


@dataclass(frozen=True)
class PhaseSection:
    kind: str
    start_t: float
    end_t: float


class GaitEvent(NamedTuple):
    kind: str  # "FLP" | "FSP"
    t: float


class GaitLabel(NamedTuple):
    percent: float
    x: float
    y: float

    @classmethod
    def from_percent(cls, percent: float) -> "GaitLabel":
        x, y = to_phase_xy(percent)
        return cls(percent % 100.0, x, y)


def _as_fsr_arrays(fsr) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(fsr, np.ndarray):
        arr = np.asarray(fsr, dtype=np.float64)
        return arr[:, 0], arr[:, 1], arr[:, 2]
    if len(fsr) == 0:
        return np.empty(0), np.empty(0), np.empty(0)
    arr = np.asarray([(s.t, s.front, s.back) for s in fsr], dtype=np.float64)
    return arr[:, 0], arr[:, 1], arr[:, 2]


def classify_samples(front: np.ndarray, back: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> list[str]:
    return [_KIND_TABLE[(bool(f > threshold), bool(b > threshold))] for f, b in zip(front, back)]


def contact_sections(
    fsr: Sequence[FsrSample] | np.ndarray,
    threshold: float = DEFAULT_THRESHOLD,
    min_duration: float = DEBOUNCE_S,
) -> list[PhaseSection]:
    """Run-length segment the foot-switch truth table into phase sections.

    A section spans from its first sample to the first sample of the next
    section (the last one ends at the final timestamp). Sections shorter than
    `min_duration` are absorbed by the preceding section (the following one
    at the head of the trial) to suppress FSR chatter.
    """
    t, front, back = _as_fsr_arrays(fsr)
    if t.size == 0:
        raise EmptyStream("no FSR samples")
    if t.size < 2:
        raise InvalidData("need at least 2 FSR samples")
    if np.any(np.diff(t) <= 0):
        raise InvalidData("FSR timestamps must be strictly increasing")
    kinds = classify_samples(front, back, threshold)

    runs: list[list] = []  # [kind, start_t]
    for ti, k in zip(t, kinds):
        if not runs or runs[-1][0] != k:
            runs.append([k, float(ti)])
    ends = [r[1] for r in runs[1:]] + [float(t[-1])]
    sections = [[k, s, e] for (k, s), e in zip(runs, ends)]

    if min_duration > 0 and len(sections) > 1:
        kept: list[list] = []
        head_start = None
        for k, s, e in sections:
            if e - s < min_duration - 1e-9:
                if kept:
                    kept[-1][2] = e
                elif head_start is None:
                    head_start = s
                continue
            if head_start is not None:
                s, head_start = head_start, None
            if kept and kept[-1][0] == k:
                kept[-1][2] = e
            else:
                kept.append([k, s, e])
        if kept:
            sections = kept

    return [PhaseSection(k, s, e) for k, s, e in sections]


def detect_events(sections: Sequence[PhaseSection]) -> list[GaitEvent]:
    """FLP at the start of every swing section, FSP where a swing section ends.

    A trial that opens in swing gets an FLP at its first timestamp. Two swing
    sections in a row (unmerged input, or a glitch) break the FLP/FSP
    alternation and raise LabelingError.
    """
    if len(sections) == 0:
        raise InvalidData("no sections")
    events: list[GaitEvent] = []
    prev = None
    for sec in sections:
        if sec.kind == SWING:
            events.append(GaitEvent("FLP", sec.start_t))
        elif prev is not None and prev.kind == SWING:
            events.append(GaitEvent("FSP", sec.start_t))
        prev = sec
    for a, b in zip(events, events[1:]):
        if a.kind == b.kind:
            raise LabelingError(f"non-alternating gait events: {a.kind} followed by {b.kind}", b.t)
        if b.t <= a.t:
            raise LabelingError("gait events not strictly increasing in time", b.t)
    return events


def assign_percent(timestamps: np.ndarray, events: Sequence[GaitEvent]) -> np.ndarray:
    """Gait percent per timestamp; NaN outside complete FLP -> FLP cycles."""
    t = np.asarray(timestamps, dtype=np.float64)
    out = np.full(t.shape, np.nan)
    events = list(events)
    for a, b in zip(events, events[1:]):
        if a.kind == b.kind:
            raise LabelingError("non-alternating gait events", b.t)
    # drop anything before the first FLP
    while events and events[0].kind != "FLP":
        events.pop(0)
    flps = [e.t for e in events if e.kind == "FLP"]
    fsps = [e.t for e in events if e.kind == "FSP"]
    if len(flps) < 2:
        raise LabelingError("need at least one full FLP -> FLP cycle")
    for i in range(len(flps) - 1):
        t0, t2 = flps[i], flps[i + 1]
        if i >= len(fsps):
            raise LabelingError("missing FSP inside cycle", t0)
        t1 = fsps[i]
        if not (t0 < t1 < t2):
            raise LabelingError("zero-duration or misordered gait segment", t1)
        swing = (t >= t0) & (t <= t1)
        out[swing] = FSP_PERCENT * (t[swing] - t0) / (t1 - t0)
        stance = (t > t1) & (t < t2)
        out[stance] = FSP_PERCENT + (100.0 - FSP_PERCENT) * (t[stance] - t1) / (t2 - t1)
    out[t == flps[-1]] = 0.0
    out[out >= 100.0] = 0.0
    return out


def cycle_index(timestamps: np.ndarray, events: Sequence[GaitEvent]) -> np.ndarray:
    """Index of the FLP -> FLP cycle each timestamp falls in, -1 outside labeled cycles."""
    t = np.asarray(timestamps, dtype=np.float64)
    flps = np.array([e.t for e in events if e.kind == "FLP"])
    idx = np.searchsorted(flps, t, side="right") - 1
    idx[(idx < 0) | (idx >= len(flps) - 1)] = -1
    if len(flps):
        idx[t == flps[-1]] = len(flps) - 2 if len(flps) >= 2 else -1
    return idx


def to_phase_xy(percent):
    """Gait percent -> (cos theta, sin theta), theta = percent * 2pi / 100."""
    p = np.asarray(percent, dtype=np.float64)
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 100):
        raise InvalidLabel(f"gait percent outside [0, 100]: {percent}")
    theta = p * (2.0 * math.pi / 100.0)
    x, y = np.cos(theta), np.sin(theta)
    if p.ndim == 0:
        return float(x), float(y)
    return x, y


def from_phase_xy(x, y):
    """Recover gait percent in [0, 100) from a (not necessarily unit) phase vector."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any((x == 0) & (y == 0)):
        raise UndefinedPhase("phase vector (0, 0) has no angle")
    theta = np.mod(np.arctan2(y, x) + 2.0 * math.pi, 2.0 * math.pi)
    p = theta * (100.0 / (2.0 * math.pi))
    p = np.where(p >= 100.0, 0.0, p)
    if p.ndim == 0:
        return float(p)
    return p


def circular_distance(a, b) -> np.ndarray:
    d = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) % 100.0
    return np.minimum(d, 100.0 - d)


def circular_rmse(pred_percents, true_percents) -> float:
    pred = np.asarray(pred_percents, dtype=np.float64).ravel()
    true = np.asarray(true_percents, dtype=np.float64).ravel()
    if pred.shape != true.shape or pred.size == 0:
        raise InvalidData(f"length mismatch or empty: {pred.size} vs {true.size}")
    d = circular_distance(pred, true)
    return float(np.sqrt(np.mean(d * d)))


def label_stream(
    t: np.ndarray,
    front: np.ndarray,
    back: np.ndarray,
    threshold: float = DEFAULT_THRESHOLD,
) -> tuple[np.ndarray, list[GaitEvent]]:
    """Full labeling chain for one trial; returns (percent per sample, events)."""
    fsr = np.column_stack([t, front, back])
    events = detect_events(contact_sections(fsr, threshold))
    return assign_percent(t, events), events
