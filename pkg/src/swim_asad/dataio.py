"""EEG trial container, normalization, windowing, augmentation, splits and synthetic data."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

FS = 128

BIOSEMI64 = (
    "Fp1", "AF7", "AF3", "F1", "F3", "F5", "F7", "FT7", "FC5", "FC3", "FC1", "C1", "C3", "C5", "T7", "TP7",
    "CP5", "CP3", "CP1", "P1", "P3", "P5", "P7", "P9", "PO7", "PO3", "O1", "Iz", "Oz", "POz", "Pz", "CPz",
    "Fpz", "Fp2", "AF8", "AF4", "AFz", "Fz", "F2", "F4", "F6", "F8", "FT8", "FC6", "FC4", "FC2", "FCz", "Cz",
    "C2", "C4", "C6", "T8", "TP8", "CP6", "CP4", "CP2", "P2", "P4", "P6", "P8", "P10", "PO8", "PO4", "O2",
)

NINE_CHANNELS = ("Fpz", "Fp1", "AF3", "F5", "Fp2", "AF4", "F6", "AF7", "AF8")

LOCI = ("left", "right")


class DataError(ValueError):
    """Malformed dataset, manifest or window request."""


@dataclass(frozen=True)
class EEGTrial:
    subject_id: int
    trial_id: int
    fs: float
    channel_names: Tuple[str, ...]
    data: np.ndarray  # [channels, samples]
    attended_locus: str
    attended_speaker: int
    story: int

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[0] != len(self.channel_names):
            raise DataError(
                f"trial {self.trial_id}: data shape {self.data.shape} does not match "
                f"{len(self.channel_names)} channel names"
            )
        if self.fs <= 0:
            raise DataError(f"trial {self.trial_id}: fs must be positive")
        if self.attended_locus not in LOCI:
            raise DataError(f"trial {self.trial_id}: unknown attended_locus {self.attended_locus!r}")

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def locus_label(self) -> int:
        return LOCI.index(self.attended_locus)


@dataclass
class DecisionWindow:
    x: np.ndarray  # [channels, T]
    locus_label: int
    subject_label: int
    source: Tuple[int, int, int]  # (subject_id, trial_id, start_sample)


# ---------------------------------------------------------------------------
# container format
# ---------------------------------------------------------------------------

def load_dataset(manifest_path) -> List[EEGTrial]:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    with open(manifest_path) as fh:
        man = json.load(fh)
    try:
        fs = float(man["fs"])
        names = tuple(man["channel_names"])
        entries = man["trials"]
    except KeyError as exc:
        raise DataError(f"{manifest_path}: missing field {exc.args[0]!r}") from None
    trials = []
    for e in entries:
        tid = e.get("trial_id")
        path = manifest_path.parent / e["data_file"]
        if not path.exists():
            raise DataError(f"trial {tid}: data file {path} missing")
        n = int(e["n_samples"])
        expected = 4 * len(names) * n
        actual = path.stat().st_size
        if actual != expected:
            raise DataError(
                f"trial {tid}: {path.name} has {actual} bytes, expected {expected} "
                f"({len(names)} channels x {n} samples x 4)"
            )
        if e.get("attended_locus") not in LOCI:
            raise DataError(f"trial {tid}: field attended_locus has unknown value {e.get('attended_locus')!r}")
        data = np.fromfile(path, dtype="<f4").reshape(len(names), n)
        data.flags.writeable = False
        trials.append(EEGTrial(
            subject_id=int(e["subject_id"]), trial_id=int(tid), fs=fs, channel_names=names, data=data,
            attended_locus=e["attended_locus"], attended_speaker=int(e["attended_speaker"]), story=int(e["story"]),
        ))
    return trials


def save_dataset(trials: Sequence[EEGTrial], directory, ground_truth: Optional[dict] = None) -> Path:
    """Write trials as ``manifest.json`` plus one little-endian float32 file per trial."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if not trials:
        names, fs = BIOSEMI64, FS
    else:
        names, fs = trials[0].channel_names, trials[0].fs
    entries = []
    for t in trials:
        if t.channel_names != names or t.fs != fs:
            raise DataError("all trials in a manifest must share channel names and fs")
        fname = f"s{t.subject_id:02d}_t{t.trial_id:04d}.f32"
        np.ascontiguousarray(t.data, dtype="<f4").tofile(directory / fname)
        entries.append(dict(
            subject_id=t.subject_id, trial_id=t.trial_id, attended_locus=t.attended_locus,
            attended_speaker=t.attended_speaker, story=t.story, n_samples=t.n_samples, data_file=fname,
        ))
    man = {"fs": fs, "channel_names": list(names), "trials": entries}
    if ground_truth is not None:
        man["ground_truth"] = ground_truth
    path = directory / "manifest.json"
    with open(path, "w") as fh:
        json.dump(man, fh, indent=1)
    return path


def read_trial_file(path, n_channels: int) -> np.ndarray:
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % n_channels:
        raise DataError(f"{path}: {raw.size * 4} bytes is not a whole number of {n_channels}-channel samples")
    return raw.reshape(n_channels, -1)


# ---------------------------------------------------------------------------
# normalization and channel selection
# ---------------------------------------------------------------------------

def channel_stds(data: np.ndarray) -> np.ndarray:
    return data.astype(np.float64).std(axis=1)


def normalize_trial(trial: EEGTrial) -> EEGTrial:
    """Scale every channel to unit standard deviation over the whole trial."""
    std = channel_stds(trial.data)
    bad = np.flatnonzero(~(std > 0))
    if bad.size:
        raise DataError(
            f"trial {trial.trial_id}: zero-variance channel(s) {[trial.channel_names[i] for i in bad]}"
        )
    data = (trial.data / std[:, None]).astype(np.float32)
    data.flags.writeable = False
    return replace(trial, data=data)


def select_channels(trial: EEGTrial, names: Sequence[str]) -> EEGTrial:
    missing = [n for n in names if n not in trial.channel_names]
    if missing:
        raise DataError(f"trial {trial.trial_id}: channels not present: {missing}")
    idx = [trial.channel_names.index(n) for n in names]
    return replace(trial, channel_names=tuple(names), data=trial.data[idx])


# ---------------------------------------------------------------------------
# windowing
# ---------------------------------------------------------------------------

def hop_length(T: int, alpha: float) -> int:
    """round-half-up((1 - alpha) * T), at least 1."""
    if not 0 <= alpha < 1:
        raise ValueError(f"overlap ratio must lie in [0, 1), got {alpha}")
    return max(1, int(math.floor((1 - alpha) * T + 0.5)))


def window_count(L: int, T: int, alpha: float) -> int:
    if T > L:
        return 0
    return (L - T) // hop_length(T, alpha) + 1


def window_starts(T: int, alpha: float, lo: int, hi: int) -> np.ndarray:
    """Start samples of windows fully inside [lo, hi)."""
    n = window_count(hi - lo, T, alpha)
    return lo + hop_length(T, alpha) * np.arange(n, dtype=np.int64)


def _demean(x: np.ndarray) -> np.ndarray:
    return (x - x.mean(axis=-1, keepdims=True)).astype(np.float32)


def extract_windows(trial: EEGTrial, T: int, alpha: float, lo: int = 0, hi: Optional[int] = None) -> List[DecisionWindow]:
    hi = trial.n_samples if hi is None else hi
    if T > hi - lo:
        raise DataError(f"trial {trial.trial_id}: window of {T} samples exceeds range of {hi - lo}")
    out = []
    for s in window_starts(T, alpha, lo, hi):
        out.append(DecisionWindow(
            x=_demean(trial.data[:, s:s + T]), locus_label=trial.locus_label,
            subject_label=trial.subject_id, source=(trial.subject_id, trial.trial_id, int(s)),
        ))
    return out


@dataclass
class WindowIndex:
    """Lazy window references: trial position and start sample, materialized on demand."""

    trial: np.ndarray
    start: np.ndarray
    length: int

    def __len__(self) -> int:
        return len(self.start)

    def take(self, sel) -> "WindowIndex":
        return WindowIndex(self.trial[sel], self.start[sel], self.length)

    @staticmethod
    def concat(parts: Sequence["WindowIndex"], length: int) -> "WindowIndex":
        if not parts:
            return WindowIndex(np.zeros(0, np.int64), np.zeros(0, np.int64), length)
        return WindowIndex(
            np.concatenate([p.trial for p in parts]), np.concatenate([p.start for p in parts]), length
        )


def index_windows(trials: Sequence[EEGTrial], ranges: Sequence[Tuple[int, int, int]], T: int, alpha: float) -> WindowIndex:
    """Windows for (trial_index, lo, hi) ranges; ranges too short for one window contribute none."""
    parts = []
    for ti, lo, hi in ranges:
        starts = window_starts(T, alpha, lo, hi)
        parts.append(WindowIndex(np.full(len(starts), ti, np.int64), starts, T))
    return WindowIndex.concat(parts, T)


def gather(trials: Sequence[EEGTrial], idx: WindowIndex, demean: bool = True):
    """Materialize windows: returns (x [n, C, T] float32, locus [n], subject [n])."""
    T = idx.length
    n = len(idx)
    C = trials[int(idx.trial[0])].data.shape[0] if n else 0
    x = np.empty((n, C, T), dtype=np.float32)
    locus = np.empty(n, np.int64)
    subject = np.empty(n, np.int64)
    for i, (ti, s) in enumerate(zip(idx.trial, idx.start)):
        tr = trials[int(ti)]
        x[i] = tr.data[:, s:s + T]
        locus[i] = tr.locus_label
        subject[i] = tr.subject_id
    if demean and n:
        x -= x.mean(axis=-1, keepdims=True)
    return x, locus, subject


def stack_windows(windows: Sequence[DecisionWindow]):
    x = np.stack([w.x for w in windows])
    return x, np.array([w.locus_label for w in windows]), np.array([w.subject_label for w in windows])


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def mask_span(T: int, beta: float, rng: np.random.Generator) -> Tuple[int, int]:
    """Draw (t0, t): length t uniform in [0, tau), start t0 uniform in [0, T - t)."""
    tau = int(math.floor(beta * T + 0.5))
    if tau <= 0:
        return 0, 0
    t = int(rng.integers(0, tau))
    t0 = int(rng.integers(0, T - t))
    return t0, t


def time_mask(window: DecisionWindow, beta: float, rng: np.random.Generator) -> DecisionWindow:
    t0, t = mask_span(window.x.shape[-1], beta, rng)
    if t == 0:
        return replace(window, x=window.x.copy())
    x = window.x.copy()
    x[:, t0:t0 + t] = 0
    return replace(window, x=x)


def time_mask_batch(x: np.ndarray, beta: float, rng: np.random.Generator) -> np.ndarray:
    """Independently mask each item of x [n, C, T] in place; returns x."""
    T = x.shape[-1]
    for i in range(x.shape[0]):
        t0, t = mask_span(T, beta, rng)
        if t:
            x[i, :, t0:t0 + t] = 0
    return x


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass
class SplitSpec:
    protocol: str
    held_out: Optional[int]
    train: List[Tuple[int, int, int]]
    val: List[Tuple[int, int, int]]
    test: List[Tuple[int, int, int]]

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol, "held_out": self.held_out,
            "train": [list(r) for r in self.train], "val": [list(r) for r in self.val],
            "test": [list(r) for r in self.test],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        return cls(d["protocol"], d["held_out"], [tuple(r) for r in d["train"]],
                   [tuple(r) for r in d["val"]], [tuple(r) for r in d["test"]])

    def trial_ids(self, part: str) -> set:
        return {r[0] for r in getattr(self, part)}


PROTOCOLS = ("every-trial", "leave-one-speaker-out", "leave-one-subject-out")


def split_every_trial(trials: Sequence[EEGTrial]) -> SplitSpec:
    train, val, test = [], [], []
    for i, t in enumerate(trials):
        L = t.n_samples
        a, b = L * 70 // 100, L * 85 // 100
        train.append((i, 0, a))
        val.append((i, a, b))
        test.append((i, b, L))
    return SplitSpec("every-trial", None, train, val, test)


def split_by_range(trials: Sequence[EEGTrial], train_frac: Tuple[float, float],
                   val_frac=(0.70, 0.85), test_frac=(0.85, 1.0), protocol="trial-range") -> SplitSpec:
    """Per-trial fractional ranges; used for the trial-train-range experiment."""
    def cut(L, frac):
        return int(round(frac[0] * L)), int(round(frac[1] * L))

    parts = ([], [], [])
    for i, t in enumerate(trials):
        for part, frac in zip(parts, (train_frac, val_frac, test_frac)):
            part.append((i,) + cut(t.n_samples, frac))
    return SplitSpec(protocol, None, *parts)


def _leave_out(trials, protocol, held_out, is_test, seed, val_fraction=0.15) -> SplitSpec:
    test_idx = [i for i, t in enumerate(trials) if is_test(t)]
    rest = [i for i, t in enumerate(trials) if not is_test(t)]
    if not test_idx:
        raise DataError(f"{protocol}: no trials for held-out {held_out}")
    if not rest:
        raise DataError(f"{protocol}: no trials left for training after holding out {held_out}")
    rng = np.random.default_rng([seed, held_out])
    rest = [rest[i] for i in rng.permutation(len(rest))]
    n_val = int(math.floor(val_fraction * len(rest) + 0.5))
    val = sorted(rest[:n_val])
    train = sorted(rest[n_val:])
    full = lambda idx: [(i, 0, trials[i].n_samples) for i in idx]
    return SplitSpec(protocol, held_out, full(train), full(val), full(test_idx))


def split_leave_speaker_out(trials: Sequence[EEGTrial], speaker: int, seed: int = 0) -> SplitSpec:
    if speaker not in (1, 2):
        raise DataError(f"leave-one-speaker-out holds out speaker 1 or 2, not {speaker}")
    return _leave_out(trials, "leave-one-speaker-out", speaker, lambda t: t.attended_speaker == speaker, seed)


def split_leave_subject_out(trials: Sequence[EEGTrial], subject: int, seed: int = 0) -> SplitSpec:
    if subject not in {t.subject_id for t in trials}:
        raise DataError(f"subject {subject} is not in the dataset")
    return _leave_out(trials, "leave-one-subject-out", subject, lambda t: t.subject_id == subject, seed)


def held_out_values(trials: Sequence[EEGTrial], protocol: str) -> list:
    """The runs a protocol averages over."""
    if protocol == "every-trial":
        return [None]
    if protocol == "leave-one-speaker-out":
        return [1, 2]
    if protocol == "leave-one-subject-out":
        return sorted({t.subject_id for t in trials})
    raise DataError(f"unknown protocol {protocol!r}")


def make_split(trials: Sequence[EEGTrial], protocol: str, held_out=None, seed: int = 0) -> SplitSpec:
    if protocol == "every-trial":
        return split_every_trial(trials)
    if protocol == "leave-one-speaker-out":
        return split_leave_speaker_out(trials, held_out, seed)
    if protocol == "leave-one-subject-out":
        return split_leave_subject_out(trials, held_out, seed)
    raise DataError(f"unknown protocol {protocol!r}")


# ---------------------------------------------------------------------------
# synthetic EEG
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    n_subjects: int = 16
    n_trials: int = 8
    duration_s: float = 360.0
    fs: float = FS
    snr_db: float = 0.0
    informative_channels: Tuple[str, ...] = ("Fp1", "Fp2")
    # per-locus sign pattern over the informative channels
    left_topography: Tuple[float, ...] = (1.0, 1.0)
    right_topography: Tuple[float, ...] = (1.0, -1.0)
    template_freq_hz: float = 6.0
    phase_jitter: float = 0.05
    mixing_strength: float = 0.5
    # fraction of time the template is switched on; < 1 gives bursty, history-dependent evidence
    burst_on_fraction: float = 1.0
    burst_mean_s: float = 2.0
    # when set, the template crossfades from informative_channels to these channels over each trial
    drift_channels: Optional[Tuple[str, ...]] = None
    channel_names: Tuple[str, ...] = BIOSEMI64

    _TUPLES = ("informative_channels", "left_topography", "right_topography", "drift_channels", "channel_names")

    def __post_init__(self):
        k = len(self.informative_channels)
        if len(self.left_topography) != k or len(self.right_topography) != k:
            raise DataError("topographies must have one sign per informative channel")
        if self.drift_channels is not None and len(self.drift_channels) != k:
            raise DataError("drift_channels must match informative_channels in length")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in self._TUPLES:
            if d[key] is not None:
                d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for key in cls._TUPLES:
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


# KUL-like attended-speaker / story schedule; loci alternate so every subject is balanced
_SPEAKER_STORY = ((1, 1), (2, 2), (3, 3), (3, 4))


def _oscillation(n: int, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Unit-power narrowband oscillation with a random-walk phase."""
    phase = rng.uniform(0, 2 * np.pi) + np.cumsum(rng.normal(0, cfg.phase_jitter, n))
    return np.sqrt(2) * np.sin(2 * np.pi * cfg.template_freq_hz * np.arange(n) / cfg.fs + phase)


def _bursts(n: int, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.burst_on_fraction >= 1:
        return np.ones(n)
    if cfg.burst_on_fraction <= 0:
        return np.zeros(n)
    gate = np.zeros(n)
    on_len = cfg.burst_mean_s * cfg.fs
    off_len = on_len * (1 - cfg.burst_on_fraction) / cfg.burst_on_fraction
    state = rng.random() < cfg.burst_on_fraction
    pos = 0
    while pos < n:
        seg = int(max(1, rng.exponential(on_len if state else off_len)))
        gate[pos:pos + seg] = float(state)
        pos += seg
        state = not state
    return gate


def synth_generate(config: SynthConfig, seed: int = 0):
    """Generate trials plus the manifest's ground-truth block.

    The informative channels carry one shared oscillation whose sign pattern
    across those channels encodes the locus (in phase for left, anti-phase
    for right by default). Every channel also carries white noise passed
    through a per-subject mixing matrix, which is what identifies subjects.
    """
    cfg = config
    if cfg.duration_s <= 0 or cfg.fs <= 0:
        raise DataError("duration and fs must be positive")
    names = tuple(cfg.channel_names)
    C = len(names)
    n = int(round(cfg.duration_s * cfg.fs))
    inf_idx = [names.index(c) for c in cfg.informative_channels]
    drift_idx = [names.index(c) for c in cfg.drift_channels] if cfg.drift_channels else None
    amp = 10 ** (cfg.snr_db / 20)  # template rms relative to unit noise; 0 at -inf dB
    subj_seeds = np.random.SeedSequence(seed).spawn(cfg.n_subjects)
    trials = []
    tid = 0
    for s in range(cfg.n_subjects):
        srng = np.random.default_rng(subj_seeds[s])
        M = np.eye(C) + cfg.mixing_strength * srng.normal(size=(C, C)) / np.sqrt(C)
        M /= np.linalg.norm(M, axis=1, keepdims=True)
        trial_seeds = subj_seeds[s].spawn(cfg.n_trials)
        for k in range(cfg.n_trials):
            trng = np.random.default_rng(trial_seeds[k])
            locus = LOCI[(k + s) % 2]
            speaker, story = _SPEAKER_STORY[(k // 2) % len(_SPEAKER_STORY)]
            data = M @ trng.normal(size=(C, n))
            if amp > 0:
                topo = np.asarray(cfg.left_topography if locus == "left" else cfg.right_topography)
                sig = amp * _oscillation(n, cfg, trng) * _bursts(n, cfg, trng)
                if drift_idx is None:
                    data[inf_idx] += topo[:, None] * sig
                else:
                    ramp = np.linspace(0.0, 1.0, n)
                    data[inf_idx] += topo[:, None] * sig * (1 - ramp)
                    data[drift_idx] += topo[:, None] * sig * ramp
            arr = data.astype(np.float32)
            arr.flags.writeable = False
            trials.append(EEGTrial(s, tid, cfg.fs, names, arr, locus, speaker, story))
            tid += 1
    ground_truth = {
        "informative_channel_indices": inf_idx,
        "drift_channel_indices": drift_idx,
        "template": {"kind": "sign_topography_oscillation", "freq_hz": cfg.template_freq_hz,
                     "left_topography": list(cfg.left_topography),
                     "right_topography": list(cfg.right_topography), "amplitude_rms": amp},
        "seed": seed,
        "config": cfg.to_dict(),
    }
    return trials, ground_truth
