"""Per-channel z-scoring, phase trimming and sliding windows."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .dataset import Repetition
from .errors import ContractError, ShapeError

SIGMA_FLOOR = 1e-8


@dataclass
class ChannelStats:
    mu: np.ndarray
    sigma: np.ndarray
    n_values: int


def compute_stats(train: Sequence[Repetition]) -> ChannelStats:
    """Pooled per-channel mean and population std over all samples and timesteps."""
    train = list(train)
    if not train:
        raise ContractError("cannot compute statistics of an empty training set")
    if any(r.split == "test" for r in train):
        raise ContractError("test-split repetition passed to compute_stats")
    channels = {r.n_channels for r in train}
    if len(channels) != 1:
        raise ShapeError(f"inconsistent channel counts {sorted(channels)}")
    pooled = np.concatenate([r.signal for r in train], axis=0)
    mu = pooled.mean(axis=0)
    sigma = np.sqrt(((pooled - mu) ** 2).mean(axis=0))
    return ChannelStats(mu, sigma, pooled.shape[0])


def zscore(rep: Repetition, stats: ChannelStats) -> Repetition:
    if rep.n_channels != stats.mu.shape[0]:
        raise ShapeError(f"stats for {stats.mu.shape[0]} channels, repetition has {rep.n_channels}")
    v = (rep.signal - stats.mu) / np.maximum(stats.sigma, SIGMA_FLOOR)
    return replace(rep, signal=v)


@dataclass
class WindowConfig:
    window_ms: float = 200.0
    stride_ms: float = 10.0
    phase: str = "transient"
    transient_s: float = 0.5
    plateau_offset_s: float = 0.5
    plateau_len_s: float = 3.0

    def __post_init__(self):
        if self.phase not in ("transient", "plateau"):
            raise ContractError(f"phase must be 'transient' or 'plateau', got {self.phase!r}")

    def window_samples(self, fs: float) -> int:
        w = math.floor(self.window_ms / 1000.0 * fs)
        if w < 1:
            raise ContractError(f"window of {self.window_ms} ms is shorter than one sample at {fs} Hz")
        return w

    def stride_samples(self, fs: float) -> int:
        s = math.floor(self.stride_ms / 1000.0 * fs)
        if s < 1:
            raise ContractError(f"stride of {self.stride_ms} ms is shorter than one sample at {fs} Hz")
        return s

    def phase_bounds(self, fs: float) -> tuple[int, int]:
        if self.phase == "transient":
            return 0, round(self.transient_s * fs)
        start = round(self.plateau_offset_s * fs)
        return start, start + round(self.plateau_len_s * fs)


def extract_phase(rep: Repetition, cfg: WindowConfig) -> Repetition:
    lo, hi = cfg.phase_bounds(rep.sample_rate_hz)
    if rep.n_samples < hi:
        raise ContractError(
            f"{cfg.phase} phase needs {hi} samples, repetition has {rep.n_samples}"
        )
    return replace(rep, signal=rep.signal[lo:hi])


def window_count(T: int, W: int, s: int) -> int:
    if T < W:
        raise ContractError(f"sequence of {T} samples shorter than window {W}")
    return (T - W) // s + 1


def window_starts(T: int, W: int, s: int) -> np.ndarray:
    return np.arange(window_count(T, W, s)) * s


def window(rep: Repetition, cfg: WindowConfig) -> np.ndarray:
    """All windows of ``rep`` as an (n, W, C) array; starts at 0, s, 2s, ..."""
    fs = rep.sample_rate_hz
    W, s = cfg.window_samples(fs), cfg.stride_samples(fs)
    starts = window_starts(rep.n_samples, W, s)
    return np.stack([rep.signal[a : a + W] for a in starts])


@dataclass
class WindowedDataset:
    windows: np.ndarray  # N x W x C
    labels: np.ndarray  # N
    subject_rows: np.ndarray  # N; -1 when the model has no embedding

    def __post_init__(self):
        n = len(self.windows)
        if len(self.labels) != n or len(self.subject_rows) != n:
            raise ShapeError("windows, labels and subject_rows differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "WindowedDataset":
        return WindowedDataset(self.windows[idx], self.labels[idx], self.subject_rows[idx])

    @classmethod
    def concat(cls, parts: Iterable["WindowedDataset"]) -> "WindowedDataset":
        parts = list(parts)
        if not parts:
            raise ContractError("nothing to concatenate")
        return cls(
            np.concatenate([p.windows for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.subject_rows for p in parts]),
        )


def build_windows(
    reps: Sequence[Repetition],
    stats: ChannelStats,
    cfg: WindowConfig,
    subject_rows: dict[str, int] | None = None,
    trim: bool = True,
) -> WindowedDataset:
    """Trim (optional), normalize and window every repetition.

    ``subject_rows`` maps subject ids to embedding rows; subjects absent from
    it (or no mapping at all) get row -1.
    """
    if not reps:
        raise ContractError("no repetitions to window")
    subject_rows = subject_rows or {}
    wins, labels, rows = [], [], []
    for rep in reps:
        r = extract_phase(rep, cfg) if trim else rep
        w = window(zscore(r, stats), cfg)
        wins.append(w)
        labels.append(np.full(len(w), rep.gesture_id, dtype=np.int64))
        rows.append(np.full(len(w), subject_rows.get(rep.subject_id, -1), dtype=np.int64))
    return WindowedDataset(np.concatenate(wins), np.concatenate(labels), np.concatenate(rows))


def phase_stats(reps: Sequence[Repetition], cfg: WindowConfig, trimmed: bool = True) -> ChannelStats:
    """Statistics on the phase the model trains on, or on whole repetitions."""
    if trimmed:
        reps = [extract_phase(r, cfg) for r in reps]
    return compute_stats(reps)
