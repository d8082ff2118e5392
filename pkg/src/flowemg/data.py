"""Recording sessions, sliding windows, normalization, the synthetic corpus,
classical augmentation baselines, and the ``EMGW`` dataset file format."""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write_bytes
from .rng import stream

log = logging.getLogger(__name__)

SPLITS = ("train", "test", "synthetic")
PAPER_TRAIN_TRIALS = frozenset({1, 3, 4, 6})
PAPER_TEST_TRIALS = frozenset({2, 5})


@dataclass
class RecordingSession:
    subject_id: str
    sampling_rate: float
    signal: np.ndarray  # (C, T)
    labels: np.ndarray  # (T,), 0 = rest
    trials: np.ndarray  # (T,)

    def __post_init__(self):
        if self.sampling_rate <= 0:
            raise ValueError("sampling_rate must be positive")
        T = self.signal.shape[1]
        if self.labels.shape != (T,) or self.trials.shape != (T,):
            raise ValueError("labels and trials must have one entry per sample")

    @property
    def channels(self) -> int:
        return self.signal.shape[0]


@dataclass
class WindowDataset:
    windows: np.ndarray  # (N, C, L) float32
    labels: np.ndarray  # (N,) int
    trials: np.ndarray  # (N,) int; 0 for synthetic windows
    subject_id: str = "s0"
    split: str = "train"
    K: int = 0

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.trials = np.asarray(self.trials, dtype=np.int64)
        if self.windows.ndim != 3:
            raise ValueError("windows must be (N, C, L)")
        n = self.windows.shape[0]
        if self.labels.shape != (n,) or self.trials.shape != (n,):
            raise ValueError("labels/trials must have one entry per window")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}")

    def __len__(self) -> int:
        return self.windows.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.windows.shape[1], self.windows.shape[2]

    def subset(self, idx) -> "WindowDataset":
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.int64)
        return replace(self, windows=self.windows[idx], labels=self.labels[idx],
                       trials=self.trials[idx])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.K + 1)[1:]


def concat_datasets(parts: list[WindowDataset], split: str | None = None) -> WindowDataset:
    first = parts[0]
    return WindowDataset(np.concatenate([p.windows for p in parts]),
                         np.concatenate([p.labels for p in parts]),
                         np.concatenate([p.trials for p in parts]),
                         first.subject_id, split or first.split, max(p.K for p in parts))


# ---------------------------------------------------------------- windowing


def _samples(ms: float, fs: float) -> int:
    n = ms * fs / 1000.0
    if abs(n - round(n)) > 1e-9 or round(n) < 1:
        raise ValueError(f"{ms} ms at {fs} Hz is not a whole number of samples")
    return int(round(n))


def _majority(values: np.ndarray) -> int:
    """Most frequent value; ties go to the value that occurs first."""
    uniq, first, counts = np.unique(values, return_index=True, return_counts=True)
    best = counts.max()
    cands = np.flatnonzero(counts == best)
    return int(uniq[cands[np.argmin(first[cands])]])


def segment_windows(session: RecordingSession, win_ms: float = 200.0,
                    stride_ms: float = 50.0) -> WindowDataset:
    fs = session.sampling_rate
    L = _samples(win_ms, fs)
    stride = _samples(stride_ms, fs)
    T = session.signal.shape[1]
    C = session.channels
    K = int(session.labels.max()) if T else 0
    if T < L:
        return WindowDataset(np.zeros((0, C, L), np.float32), np.zeros(0), np.zeros(0),
                             session.subject_id, "train", K)
    offsets = np.arange(0, T - L + 1, stride)
    windows = np.lib.stride_tricks.sliding_window_view(session.signal, L, axis=1)[:, offsets]
    windows = np.ascontiguousarray(windows.transpose(1, 0, 2), dtype=np.float32)
    labels = np.array([_majority(session.labels[o:o + L]) for o in offsets])
    trials = np.array([_majority(session.trials[o:o + L]) for o in offsets])
    return WindowDataset(windows, labels, trials, session.subject_id, "train", K)


def drop_rest_and_split(ds: WindowDataset, train_trials=PAPER_TRAIN_TRIALS,
                        test_trials=PAPER_TEST_TRIALS) -> tuple[WindowDataset, WindowDataset]:
    """Remove rest windows, route by trial id, and re-index labels to 1..K."""
    train_trials, test_trials = set(train_trials), set(test_trials)
    if train_trials & test_trials:
        raise ValueError(f"trial sets overlap: {sorted(train_trials & test_trials)}")
    active = ds.labels != 0
    gestures = np.unique(ds.labels[active])
    remap = np.zeros(int(ds.labels.max(initial=0)) + 1, dtype=np.int64)
    remap[gestures] = np.arange(1, len(gestures) + 1)
    K = len(gestures)
    in_train = active & np.isin(ds.trials, list(train_trials))
    in_test = active & np.isin(ds.trials, list(test_trials))
    orphans = int(np.sum(active & ~in_train & ~in_test))
    if orphans:
        log.warning("dropped %d windows whose trial is in neither split", orphans)

    def take(mask, split):
        sub = ds.subset(np.flatnonzero(mask))
        return replace(sub, labels=remap[sub.labels], split=split, K=K)

    return take(in_train, "train"), take(in_test, "test")


# ---------------------------------------------------------------- normalization


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    source_split: str = "train"


def zscore_fit(train: WindowDataset, eps: float = 1e-8) -> NormStats:
    """Per-channel population mean/std over every train window and time step."""
    if len(train) == 0:
        raise ValueError("cannot fit normalization on an empty split")
    if train.split != "train":
        raise ValueError("normalization statistics must come from a train split")
    x = train.windows.astype(np.float64)
    mean = x.mean(axis=(0, 2))
    std = x.std(axis=(0, 2))
    flat = std < eps
    if flat.any():
        log.warning("channels %s have zero variance; std clamped to %g", np.flatnonzero(flat), eps)
        std = np.where(flat, eps, std)
    return NormStats(mean, std, train.split)


def zscore_apply(ds: WindowDataset, stats: NormStats) -> WindowDataset:
    x = (ds.windows - stats.mean[None, :, None]) / stats.std[None, :, None]
    return replace(ds, windows=x.astype(np.float32))


def zscore_invert(ds: WindowDataset, stats: NormStats) -> WindowDataset:
    x = ds.windows * stats.std[None, :, None] + stats.mean[None, :, None]
    return replace(ds, windows=x.astype(np.float32))


# ---------------------------------------------------------------- synthetic corpus


@dataclass
class SynthConfig:
    K: int = 6
    C: int = 4
    L: int = 400
    sampling_rate: float = 2000.0
    subjects: int = 1
    trials: int = 6
    windows_per_class_trial: int = 40
    stride: int = 100
    rest_samples: int = 1000
    # class k occupies [band_low + k*band_step, ... + band_width] Hz
    band_low: float = 30.0
    band_step: float = 45.0
    band_width: float = 140.0
    envelope_rate_low: float = 1.5
    envelope_rate_step: float = 1.0
    envelope_depth: float = 0.5
    mixing_seed: int = 7
    crosstalk: float = 0.35
    noise_floor: float = 0.25
    trial_gain_jitter: float = 0.25
    trial_band_jitter: float = 12.0
    pattern_jitter: float = 0.35

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("need at least two classes")
        nyq = self.sampling_rate / 2
        for k in range(self.K):
            lo, hi = self.band(k)
            if not (0 < lo < hi < nyq):
                raise ValueError(f"band for class {k + 1} outside (0, {nyq})")

    def band(self, k: int) -> tuple[float, float]:
        """Frequency band of 0-based class ``k``."""
        lo = self.band_low + k * self.band_step
        return lo, lo + self.band_width

    @property
    def gesture_samples(self) -> int:
        return self.L + (self.windows_per_class_trial - 1) * self.stride


def bandlimited_noise(rng: np.random.Generator, n: int, fs: float, lo: float, hi: float) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    spec[(freqs < lo) | (freqs > hi)] = 0
    out = np.fft.irfft(spec, n)
    return out / (out.std() + 1e-12)


def _class_patterns(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    rng = stream(cfg.mixing_seed, "synth-mixing")
    mixing = np.eye(cfg.C) + cfg.crosstalk * rng.uniform(0, 1, size=(cfg.C, cfg.C))
    activation = rng.uniform(0.2, 1.0, size=(cfg.K, cfg.C))
    return mixing, activation


def synth_generate(cfg: SynthConfig, seed: int = 0) -> list[RecordingSession]:
    """One continuous session per subject: per trial, every class produces a
    burst of band-limited noise shaped by its envelope and mixed across
    channels, separated by rest (noise floor only)."""
    mixing, activation = _class_patterns(cfg)
    fs = cfg.sampling_rate
    sessions = []
    for s in range(cfg.subjects):
        sid = f"s{s}"
        rng = stream(seed, sid, "synth")
        subj_gain = rng.uniform(0.8, 1.2, size=cfg.C)
        segs, labs, trs = [], [], []
        for trial in range(1, cfg.trials + 1):
            order = rng.permutation(cfg.K)
            for k in order:
                rest = cfg.noise_floor * rng.standard_normal((cfg.C, cfg.rest_samples))
                segs.append(rest)
                labs.append(np.zeros(cfg.rest_samples, np.int64))
                trs.append(np.full(cfg.rest_samples, trial))
                n = cfg.gesture_samples
                lo, hi = cfg.band(k)
                shift = rng.uniform(-cfg.trial_band_jitter, cfg.trial_band_jitter)
                pattern = activation[k] * np.exp(cfg.pattern_jitter * rng.standard_normal(cfg.C))
                sources = np.stack([bandlimited_noise(rng, n, fs, lo + shift, hi + shift)
                                    for _ in range(cfg.C)])
                tt = np.arange(n) / fs
                rate = cfg.envelope_rate_low + k * cfg.envelope_rate_step
                env = 1.0 + cfg.envelope_depth * np.sin(2 * np.pi * rate * tt + rng.uniform(0, 2 * np.pi))
                ramp = np.minimum(1.0, np.minimum(tt, tt[-1] - tt) / 0.05)
                gain = 1.0 + cfg.trial_gain_jitter * rng.standard_normal()
                burst = mixing @ (pattern[:, None] * sources) * (env * ramp * abs(gain))[None, :]
                burst = subj_gain[:, None] * burst + cfg.noise_floor * rng.standard_normal((cfg.C, n))
                segs.append(burst)
                labs.append(np.full(n, k + 1, np.int64))
                trs.append(np.full(n, trial))
        rest = cfg.noise_floor * rng.standard_normal((cfg.C, cfg.rest_samples))
        segs.append(rest)
        labs.append(np.zeros(cfg.rest_samples, np.int64))
        trs.append(np.full(cfg.rest_samples, cfg.trials))
        sessions.append(RecordingSession(sid, fs, np.concatenate(segs, axis=1),
                                         np.concatenate(labs), np.concatenate(trs)))
    return sessions


def prepare_subject(session: RecordingSession, win_ms: float = 200.0, stride_ms: float = 50.0,
                    train_trials=PAPER_TRAIN_TRIALS, test_trials=PAPER_TEST_TRIALS):
    """Window, split, and z-score one subject; returns (train, test, stats)."""
    train, test = drop_rest_and_split(segment_windows(session, win_ms, stride_ms),
                                      train_trials, test_trials)
    stats = zscore_fit(train)
    return zscore_apply(train, stats), zscore_apply(test, stats), stats


def read_session_csv(path, subject_id: str = "s0", sampling_rate: float | None = None) -> RecordingSession:
    """Raw session with header ``t,ch0..chC-1,label,trial`` (t in seconds)."""
    with open(path, newline="") as fh:
        header = next(csv.reader(fh))
    chans = [h for h in header if h.startswith("ch")]
    expected = ["t", *[f"ch{i}" for i in range(len(chans))], "label", "trial"]
    if header != expected:
        raise ValueError(f"unexpected CSV header {header}")
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    t = raw[:, 0]
    if sampling_rate is None:
        if len(t) < 2:
            raise ValueError("cannot infer sampling rate from fewer than two samples")
        sampling_rate = float(round(1.0 / np.median(np.diff(t)), 6))
    return RecordingSession(subject_id, sampling_rate, raw[:, 1:1 + len(chans)].T.copy(),
                            raw[:, -2].astype(np.int64), raw[:, -1].astype(np.int64))


# ---------------------------------------------------------------- augmentation baselines


def mixup_pair(xi: np.ndarray, xj: np.ndarray, yi: int, yj: int, lam: float):
    """Convex combination with the label of the dominant component (ties -> i)."""
    x = lam * xi + (1.0 - lam) * xj
    return x.astype(xi.dtype), (yi if lam >= 0.5 else yj)


def augment_baseline(ds: WindowDataset, method: str, params: dict | None = None,
                     seed: int = 0) -> WindowDataset:
    """Return ``ds`` followed by ``len(ds)`` augmented windows."""
    params = params or {}
    if len(ds) == 0:
        raise ValueError("cannot augment an empty dataset")
    rng = stream(seed, ds.subject_id, "augment", method)
    x = ds.windows
    if method == "replicate":
        new_x, new_y = x.copy(), ds.labels.copy()
    elif method == "jitter_scale":
        sig_s = params.get("sigma_scale", 0.1)
        sig_j = params.get("sigma_jitter", 0.03)
        s = rng.normal(1.0, sig_s, size=(len(ds), 1, 1)) if sig_s > 0 else np.ones((len(ds), 1, 1))
        noise = rng.normal(0.0, sig_j, size=x.shape) if sig_j > 0 else 0.0
        new_x = (s * x + noise).astype(np.float32)
        new_y = ds.labels.copy()
    elif method == "mixup":
        alpha = params.get("alpha", 0.2)
        if alpha <= 0:
            raise ValueError("mixup alpha must be positive")
        if len(ds) < 2:
            raise ValueError("mixup needs at least two samples")
        partner = rng.permutation(len(ds))
        same = partner == np.arange(len(ds))
        partner[same] = (partner[same] + 1) % len(ds)
        lam = rng.beta(alpha, alpha, size=len(ds))
        new_x = np.empty_like(x)
        new_y = np.empty_like(ds.labels)
        for i, (j, lm) in enumerate(zip(partner, lam)):
            new_x[i], new_y[i] = mixup_pair(x[i], x[j], ds.labels[i], ds.labels[j], lm)
    else:
        raise ValueError(f"unknown augmentation {method!r}")
    return WindowDataset(np.concatenate([x, new_x]), np.concatenate([ds.labels, new_y]),
                         np.concatenate([ds.trials, ds.trials]), ds.subject_id, ds.split, ds.K)


# ---------------------------------------------------------------- EMGW files

MAGIC = b"EMGW"
VERSION = 1
_SPLIT_CODES = {name: i for i, name in enumerate(SPLITS)}


class DatasetFormatError(ValueError):
    pass


class BadMagicError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedPayloadError(DatasetFormatError):
    pass


def encode_dataset(ds: WindowDataset) -> bytes:
    n = len(ds)
    C, L = ds.shape
    sid = ds.subject_id.encode("utf-8")
    head = MAGIC + struct.pack("<I", VERSION) + struct.pack("<4I", n, C, L, ds.K)
    head += struct.pack("<B", _SPLIT_CODES[ds.split]) + struct.pack("<H", len(sid)) + sid
    return b"".join([head, ds.windows.astype("<f4").tobytes(),
                     ds.labels.astype("<u2").tobytes(), ds.trials.astype("<u2").tobytes()])


def decode_dataset(buf: bytes) -> WindowDataset:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError("bad magic: not an EMGW dataset")
    pos = 4

    def take(nbytes):
        nonlocal pos
        if pos + nbytes > len(buf):
            raise TruncatedPayloadError("truncated payload")
        out = buf[pos:pos + nbytes]
        pos += nbytes
        return out

    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise VersionMismatchError(f"dataset version {version}, expected {VERSION}")
    n, C, L, K = struct.unpack("<4I", take(16))
    (code,) = struct.unpack("<B", take(1))
    if code >= len(SPLITS):
        raise DatasetFormatError(f"unknown split code {code}")
    (slen,) = struct.unpack("<H", take(2))
    sid = take(slen).decode("utf-8")
    windows = np.frombuffer(take(4 * n * C * L), dtype="<f4").reshape(n, C, L)
    labels = np.frombuffer(take(2 * n), dtype="<u2")
    trials = np.frombuffer(take(2 * n), dtype="<u2")
    if pos != len(buf):
        raise DatasetFormatError("trailing bytes after payload")
    return WindowDataset(windows.copy(), labels.astype(np.int64), trials.astype(np.int64),
                         sid, SPLITS[code], K)


def dataset_save(ds: WindowDataset, path) -> None:
    atomic_write_bytes(path, encode_dataset(ds))


def dataset_load(path) -> WindowDataset:
    return decode_dataset(Path(path).read_bytes())
