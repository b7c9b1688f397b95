"""Synthetic thigh-IMU + foot-switch trials and the windowed datasets built from them.

This generator stands in for recorded human walking. It exists so the
training and comparison protocol can run end to end and reproducibly; it
makes no claim to biomechanical fidelity, and the absolute accuracy numbers
it yields say nothing about real subjects.

Each gait cycle starts at foot lift (phase 0). Swing occupies the first
(1 - stance_fraction) of the cycle, stance the rest, split into heel strike,
mid-stance and heel off. IMU channels are smooth functions of the position
within the cycle: thigh pitch is a short harmonic series, angular velocity
is its time derivative plus small off-axis harmonics, and linear
acceleration is a gravity projection of the pitch plus harmonic motion and a
heel-strike transient.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import labeler
from .errors import InvalidConfig
from .pipeline import AUGMENT_DURATIONS, ImuSample, WindowConfig, make_input, window_starts
from .labeler import FsrSample

TERRAINS = ("LW", "SA", "SD")
CADENCES = (70, 90, 110, 130)
SAMPLE_RATE = 50.0
GRAVITY = 9.81


@dataclass(frozen=True)
class TrialCondition:
    terrain: str
    cadence_bpm: float
    duration: float = 60.0
    seed: int = 0

    def __post_init__(self):
        if self.terrain not in TERRAINS:
            raise InvalidConfig(f"unknown terrain {self.terrain!r}")
        if not self.cadence_bpm > 0:
            raise InvalidConfig("cadence must be positive")
        if not self.duration > 120.0 / self.cadence_bpm:
            raise InvalidConfig("trial shorter than one stride")

    @property
    def stride_period(self) -> float:
        # two steps per stride
        return 120.0 / self.cadence_bpm


# Non-gravitational acceleration grows with the square of walking speed.
ACC_SPEED_POWER = 2.0


@dataclass(frozen=True)
class TerrainProfile:
    """Waveform coefficients for one terrain. Harmonic lists are (amplitude, phase) per order 1..n.

    `swing_gyro_gain` scales angular velocity inside the swing phase only and
    `stance_acc_bias` (m/s^2) shifts vertical acceleration inside stance only,
    so both survive per-window min-max scaling as changes of waveform shape.
    """

    pitch: tuple[tuple[float, float], ...]
    roll: tuple[tuple[float, float], ...]
    yaw: tuple[tuple[float, float], ...]
    acc_motion: tuple[tuple[float, float], ...]
    acc_lateral: tuple[tuple[float, float], ...]
    swing_gyro_gain: float
    stance_acc_bias: float
    impact: float
    stance_fraction: float
    heel_strike_frac: float  # share of stance
    heel_off_frac: float


# One thigh waveform family shared by all terrains; terrains differ in swing-phase
# angular-velocity amplitude, stance-phase vertical work (SA > LW > SD), impact
# sharpness and stance timing.
_BASE_WAVEFORMS = dict(
    pitch=((0.38, 0.0), (0.07, 1.1), (0.02, 0.4)),
    roll=((0.05, 0.3), (0.03, 2.0)),
    yaw=((0.04, 1.5), (0.02, -0.5)),
    acc_motion=((1.6, 0.2), (0.9, 2.4), (0.3, 1.0)),
    acc_lateral=((0.5, 0.9), (0.3, -1.2)),
)

DEFAULT_PROFILES: dict[str, TerrainProfile] = {
    "LW": TerrainProfile(**_BASE_WAVEFORMS, swing_gyro_gain=1.0, stance_acc_bias=0.0, impact=3.0,
                         stance_fraction=0.60, heel_strike_frac=0.18, heel_off_frac=0.25),
    "SA": TerrainProfile(**_BASE_WAVEFORMS, swing_gyro_gain=2.2, stance_acc_bias=6.0, impact=1.5,
                         stance_fraction=0.65, heel_strike_frac=0.12, heel_off_frac=0.30),
    "SD": TerrainProfile(**_BASE_WAVEFORMS, swing_gyro_gain=0.4, stance_acc_bias=-6.0, impact=8.0,
                         stance_fraction=0.55, heel_strike_frac=0.10, heel_off_frac=0.20),
}


@dataclass(frozen=True)
class GaitModelParams:
    profiles: dict[str, TerrainProfile] = field(default_factory=lambda: dict(DEFAULT_PROFILES))
    gyro_noise_std: float = 0.05  # rad/s
    acc_noise_std: float = 0.15  # m/s^2
    fsr_noise_std: float = 0.03
    stride_jitter: float = 0.03  # relative std of cycle duration
    gain_range: tuple[float, float] = (0.8, 1.25)
    sample_rate: float = SAMPLE_RATE
    amp_variability: float = 0.0  # log-std of stride-to-stride harmonic amplitude drift
    phase_variability: float = 0.0  # std (rad) of stride-to-stride harmonic phase drift

    def __post_init__(self):
        for name, p in self.profiles.items():
            if not 0 < p.stance_fraction < 1:
                raise InvalidConfig(f"{name}: stance fraction must be in (0, 1)")
        if min(self.gyro_noise_std, self.acc_noise_std, self.fsr_noise_std, self.stride_jitter,
               self.amp_variability, self.phase_variability) < 0:
            raise InvalidConfig("noise levels must be >= 0")

    def noiseless(self) -> "GaitModelParams":
        """Same waveforms with every stochastic term off except the per-trial gain."""
        return replace(self, gyro_noise_std=0.0, acc_noise_std=0.0, fsr_noise_std=0.0, stride_jitter=0.0,
                       amp_variability=0.0, phase_variability=0.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["profiles"] = {k: asdict(v) for k, v in sorted(self.profiles.items())}
        return d


@dataclass
class SensorTrial:
    condition: TrialCondition
    t: np.ndarray  # (N,)
    imu: np.ndarray  # (N, 6): lax, lay, laz, avx, avy, avz
    fsr: np.ndarray  # (N, 2): front, back
    flp_times: np.ndarray  # ground-truth foot lifts inside the trial
    fsp_times: np.ndarray  # ground-truth foot contacts inside the trial
    cycle_starts: np.ndarray  # every cycle boundary, including the one before t=0

    @property
    def n_samples(self) -> int:
        return self.t.size

    def imu_samples(self) -> list[ImuSample]:
        return [ImuSample(float(ti), tuple(row[:3]), tuple(row[3:])) for ti, row in zip(self.t, self.imu)]

    def fsr_samples(self) -> list[FsrSample]:
        return [FsrSample(float(ti), float(f), float(b)) for ti, (f, b) in zip(self.t, self.fsr)]

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.t, self.imu, self.fsr):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


def _harmonics(phi: np.ndarray, coeffs: Sequence[tuple[float, float]],
               drift: tuple[np.ndarray, np.ndarray] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Value and d/dphi of sum_h a_h cos(2 pi h phi + p_h).

    `drift` = (amplitude factor, phase offset) per sample, applied to every harmonic.
    """
    val = np.zeros_like(phi)
    der = np.zeros_like(phi)
    for h, (a, p) in enumerate(coeffs, start=1):
        if drift is not None:
            a, p = a * drift[0], p + drift[1]
        arg = 2 * np.pi * h * phi + p
        val += a * np.cos(arg)
        der -= a * 2 * np.pi * h * np.sin(arg)
    return val, der


def _trial_rng(cond: TrialCondition) -> np.random.Generator:
    key = [int(cond.seed), TERRAINS.index(cond.terrain), int(round(cond.cadence_bpm * 1000))]
    return np.random.default_rng(np.random.SeedSequence(key))


def generate_trial(cond: TrialCondition, params: GaitModelParams | None = None) -> SensorTrial:
    params = params or GaitModelParams()
    prof = params.profiles[cond.terrain]
    rng = _trial_rng(cond)
    fs = params.sample_rate
    n = int(round(cond.duration * fs))
    t = np.arange(n) / fs
    swing = 1.0 - prof.stance_fraction

    # cycle boundaries (foot lifts); start somewhere inside mid-stance
    base = cond.stride_period
    start_lo = swing + prof.stance_fraction * (prof.heel_strike_frac + 0.05)
    start_hi = 1.0 - prof.stance_fraction * (prof.heel_off_frac + 0.05)
    phi0 = rng.uniform(start_lo, start_hi)
    n_cycles = int(np.ceil(cond.duration / (base * (1 - 4 * params.stride_jitter)))) + 3
    durations = base * np.clip(1.0 + params.stride_jitter * rng.standard_normal(n_cycles), 0.8, 1.2)
    starts = np.concatenate([[-phi0 * durations[0]], -phi0 * durations[0] + np.cumsum(durations)])
    k = np.searchsorted(starts, t, side="right") - 1
    phi = (t - starts[k]) / durations[k]
    rate = 1.0 / durations[k]  # d(phi)/dt

    gains = np.exp(rng.uniform(np.log(params.gain_range[0]), np.log(params.gain_range[1]), size=6))
    speed = cond.cadence_bpm / 100.0
    dyn = speed**ACC_SPEED_POWER  # scale of the non-gravitational acceleration

    # stride-to-stride drift: one random draw per cycle boundary per waveform, linear in phi
    # between boundaries so the signal stays continuous
    knots_a = np.exp(params.amp_variability * rng.standard_normal((5, len(starts))))
    knots_p = params.phase_variability * rng.standard_normal((5, len(starts)))
    nxt = np.minimum(k + 1, len(starts) - 1)

    def drift(i):
        return ((1 - phi) * knots_a[i, k] + phi * knots_a[i, nxt], (1 - phi) * knots_p[i, k] + phi * knots_p[i, nxt])

    pitch, dpitch = _harmonics(phi, prof.pitch, drift(0))
    _, droll = _harmonics(phi, prof.roll, drift(1))
    _, dyaw = _harmonics(phi, prof.yaw, drift(2))
    motion, _ = _harmonics(phi, prof.acc_motion, drift(3))
    lateral, _ = _harmonics(phi, prof.acc_lateral, drift(4))
    # heel-strike transient, centred just after foot contact
    d_contact = (phi - swing + 0.5) % 1.0 - 0.5
    impact = prof.impact * dyn * np.exp(-0.5 * (d_contact / 0.025) ** 2) * (d_contact > -0.01)

    imu = np.empty((n, 6))
    imu[:, 0] = GRAVITY * np.sin(pitch) + dyn * motion
    # smooth phase envelopes: a raised-cosine bump over swing, its complement over stance
    swing_env = np.where(phi < swing, 0.5 * (1 - np.cos(2 * np.pi * np.minimum(phi / swing, 1.0))), 0.0)
    stance_env = np.where(phi >= swing, 0.5 * (1 - np.cos(2 * np.pi * (phi - swing) / prof.stance_fraction)), 0.0)
    imu[:, 1] = GRAVITY * np.cos(pitch) + dyn * (prof.stance_acc_bias * stance_env + 0.5 * motion) + impact
    imu[:, 2] = speed * lateral
    gyro_env = 1.0 + (prof.swing_gyro_gain - 1.0) * swing_env
    imu[:, 3] = droll * rate * gyro_env
    imu[:, 4] = dyaw * rate * gyro_env
    imu[:, 5] = dpitch * rate * gyro_env
    imu *= gains
    imu[:, :3] += params.acc_noise_std * rng.standard_normal((n, 3))
    imu[:, 3:] += params.gyro_noise_std * rng.standard_normal((n, 3))

    stance_pos = (phi - swing) / prof.stance_fraction  # in [0, 1) during stance
    in_stance = phi >= swing
    back = in_stance & (stance_pos < 1.0 - prof.heel_off_frac)
    front = in_stance & (stance_pos >= prof.heel_strike_frac)
    fsr = np.column_stack([front, back]).astype(np.float64)
    fsr += params.fsr_noise_std * rng.standard_normal(fsr.shape)
    fsr = np.clip(fsr, 0.0, None)

    t_end = t[-1]
    flp = starts[(starts >= 0) & (starts <= t_end)]
    fsp_all = starts[:-1] + swing * durations[: len(starts) - 1]
    fsp = fsp_all[(fsp_all >= 0) & (fsp_all <= t_end)]
    return SensorTrial(cond, t, imu, fsr, flp, fsp, starts[starts <= t_end + base])


def default_grid(duration: float = 60.0, seed: int = 0,
                 terrains: Iterable[str] = TERRAINS, cadences: Iterable[float] = CADENCES) -> list[TrialCondition]:
    return [TrialCondition(ter, cad, duration, seed) for ter in terrains for cad in cadences]


# ------------------------------------------------------------------ datasets

@dataclass
class WindowSet:
    """Normalized windows plus bookkeeping; `percent`/`phase` are NaN for unlabeled windows."""

    X: np.ndarray  # (n, 6, 200, 1)
    terrain: np.ndarray  # (n,) int class index into TERRAINS
    cycle: np.ndarray  # (n,) global cycle id of the window's last sample, -1 if outside labeled cycles
    trial: np.ndarray  # (n,) trial index
    t_end: np.ndarray  # (n,) timestamp of the last sample
    duration_T: np.ndarray  # (n,)
    percent: np.ndarray  # (n,)
    phase: np.ndarray  # (n, 2)

    def __len__(self) -> int:
        return self.X.shape[0]

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx)
        return WindowSet(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))

    @classmethod
    def concat(cls, parts: Sequence["WindowSet"]) -> "WindowSet":
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in cls.__dataclass_fields__))

    @property
    def labeled(self) -> np.ndarray:
        return ~np.isnan(self.percent)


@dataclass
class Dataset:
    gpr: WindowSet
    tc: WindowSet
    manifest: dict
    trials: list[SensorTrial] = field(default_factory=list, repr=False)


@dataclass(frozen=True)
class DatasetConfig:
    durations: tuple[float, ...] = AUGMENT_DURATIONS
    gpr_stride: int = 1
    tc_stride: int = 1
    sample_rate: float = SAMPLE_RATE
    smooth_len: int = 5
    fsr_threshold: float = labeler.DEFAULT_THRESHOLD

    def window_config(self, T: float, stride: int) -> WindowConfig:
        return WindowConfig(duration_T=T, sample_rate=self.sample_rate, stride=stride, smooth_len=self.smooth_len)


CYCLE_ID_STRIDE = 100_000


def _trial_windows(trial: SensorTrial, trial_idx: int, cfg: DatasetConfig, stride: int,
                   percent: np.ndarray, cycles: np.ndarray) -> WindowSet:
    parts = []
    terr = TERRAINS.index(trial.condition.terrain)
    channels = trial.imu.T
    for T in cfg.durations:
        wcfg = cfg.window_config(T, stride)
        L = wcfg.window_len
        if trial.n_samples < L:
            continue
        starts = window_starts(trial.n_samples, L, stride)
        idx = starts[:, None] + np.arange(L)[None, :]
        raw = np.moveaxis(channels[:, idx], 1, 0)  # (n, 6, L)
        X = make_input(raw, wcfg)
        end = starts + L - 1
        win_pct = percent[idx]
        full = ~np.isnan(win_pct).any(axis=1)
        pct = np.where(full, percent[end], np.nan)
        phase = np.full((len(starts), 2), np.nan)
        if full.any():
            x, y = labeler.to_phase_xy(pct[full])
            phase[full, 0], phase[full, 1] = x, y
        cyc = cycles[end]
        gcyc = np.where(cyc >= 0, trial_idx * CYCLE_ID_STRIDE + cyc, -1)
        n = len(starts)
        parts.append(WindowSet(X, np.full(n, terr), gcyc, np.full(n, trial_idx), trial.t[end],
                               np.full(n, T), pct, phase))
    return WindowSet.concat(parts)


def label_trial(trial: SensorTrial, threshold: float = labeler.DEFAULT_THRESHOLD):
    """Run the FSR labeler on a trial. Returns (percent per sample, cycle index per sample, events)."""
    percent, events = labeler.label_stream(trial.t, trial.fsr[:, 0], trial.fsr[:, 1], threshold)
    return percent, labeler.cycle_index(trial.t, events), events


def generate_dataset(conditions: Sequence[TrialCondition], cfg: DatasetConfig | None = None,
                     params: GaitModelParams | None = None, keep_trials: bool = False) -> Dataset:
    """Generate every trial, label it from its foot switches, and cut both window sets.

    The GPR set keeps only windows whose every sample lies inside a labeled
    FLP -> FLP cycle; the TC set keeps every window. The per-trial seed is
    part of each condition.
    """
    cfg = cfg or DatasetConfig()
    params = params or GaitModelParams()
    gpr_parts, tc_parts, entries, kept = [], [], [], []
    for i, cond in enumerate(conditions):
        trial = generate_trial(cond, params)
        percent, cycles, events = label_trial(trial, cfg.fsr_threshold)
        g = _trial_windows(trial, i, cfg, cfg.gpr_stride, percent, cycles)
        gpr_parts.append(g.subset(np.flatnonzero(g.labeled)))
        tc_parts.append(_trial_windows(trial, i, cfg, cfg.tc_stride, percent, cycles))
        n_cycles = int(cycles.max()) + 1 if (cycles >= 0).any() else 0
        entries.append({
            "index": i,
            "terrain": cond.terrain,
            "cadence_bpm": cond.cadence_bpm,
            "duration": cond.duration,
            "seed": cond.seed,
            "n_samples": trial.n_samples,
            "n_cycles": n_cycles,
            "cycle_ids": [i * CYCLE_ID_STRIDE, i * CYCLE_ID_STRIDE + n_cycles - 1] if n_cycles else [],
            "sha256": trial.digest(),
        })
        if keep_trials:
            kept.append(trial)
    manifest = {
        "dataset_config": asdict(cfg),
        "generator_params": params.to_dict(),
        "trials": entries,
        "n_gpr_windows": int(sum(len(p) for p in gpr_parts)),
        "n_tc_windows": int(sum(len(p) for p in tc_parts)),
    }
    return Dataset(WindowSet.concat(gpr_parts), WindowSet.concat(tc_parts), manifest, kept)


def manifest_digest(manifest: dict) -> str:
    return hashlib.sha256(json.dumps(manifest, sort_keys=True).encode()).hexdigest()
