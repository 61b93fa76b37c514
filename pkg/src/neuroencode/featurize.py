"""Waveform -> windowed features -> volume-aligned features -> FIR delay stack.

Conventions
-----------
* A window's timestamp is its **end** time: the feature summarises the audio
  heard up to that instant (the final-token readout looks backwards).
* Volume ``t`` (0-based) is captured at ``(t + 1) * tr`` seconds, so a story
  of ``T`` volumes spans ``[0, T * tr]`` seconds.
* Lanczos kernel: ``sinc(x) * sinc(x / a)`` for ``|x| < a`` with
  ``x = 2 * cutoff_hz * dt``; the default cutoff is the target sampling rate.
  Weights are renormalised to sum to one for every output sample.
"""
from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import container
from .encoder import EncoderWeights, LoraAdapterSet, encode_readout

DEFAULT_DELAYS = (2.0, 4.0, 6.0, 8.0)


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class WindowedFeatures:
    times: np.ndarray
    matrix: np.ndarray


@dataclass
class VolumeFeatures:
    matrix: np.ndarray
    tr: float = 2.0


@dataclass
class DelayedFeatures:
    matrix: np.ndarray
    delays: tuple[float, ...] = DEFAULT_DELAYS
    tr: float = 2.0


@dataclass
class Windows:
    """Segments of a waveform, as a zero-copy ``(n, window_samples)`` view."""

    segments: np.ndarray
    times: np.ndarray
    starts: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.times)


def slide_windows(w: Waveform, win_s: float = 2.0, stride_s: float = 0.1) -> Windows:
    win = int(round(win_s * w.sample_rate))
    stride = int(round(stride_s * w.sample_rate))
    if win < 1 or stride < 1:
        raise ValueError("window and stride must be at least one sample")
    if len(w.samples) < win:
        raise ValueError(f"waveform of {w.duration:.3f}s is shorter than one {win_s}s window")
    n = (len(w.samples) - win) // stride + 1
    view = np.lib.stride_tricks.sliding_window_view(w.samples, win)[::stride][:n]
    starts = np.arange(n) * stride
    return Windows(view, (starts + win) / w.sample_rate, starts)


def extract_features(weights: EncoderWeights, adapters: LoraAdapterSet | None, windows: Windows,
                     layer: int | None = None) -> WindowedFeatures:
    return WindowedFeatures(windows.times.copy(), encode_readout(weights, adapters, windows.segments, layer))


def volume_times(n_volumes: int, tr: float = 2.0) -> np.ndarray:
    return (np.arange(n_volumes) + 1) * tr


def lanczos_kernel(x: np.ndarray, a: int = 3) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    w = np.sinc(x) * np.sinc(x / a)
    w[np.abs(x) >= a] = 0.0
    return w


def lanczos_matrix(source_times: np.ndarray, target_times: np.ndarray, a: int = 3,
                   cutoff_hz: float | None = None) -> np.ndarray:
    """Row-normalised interpolation matrix ``(n_targets, n_sources)``."""
    source_times = np.asarray(source_times, dtype=np.float64)
    target_times = np.asarray(target_times, dtype=np.float64)
    lo, hi = source_times[0], source_times[-1]
    eps = 1e-9 * max(1.0, abs(hi))
    if target_times.min() < lo - eps or target_times.max() > hi + eps:
        raise ValueError(f"target times must lie within the source support [{lo}, {hi}]")
    if cutoff_hz is None:
        if len(target_times) < 2:
            raise ValueError("cutoff_hz is required for a single target time")
        cutoff_hz = 1.0 / float(np.median(np.diff(target_times)))
    x = 2.0 * cutoff_hz * (source_times[None, :] - target_times[:, None])
    w = lanczos_kernel(x, a)
    total = w.sum(axis=1, keepdims=True)
    if np.any(total == 0):
        raise ValueError("a target time has no source samples within the kernel support")
    return w / total


def lanczos_resample(f: WindowedFeatures, target_times: Sequence[float], a: int = 3,
                     cutoff_hz: float | None = None, tr: float | None = None) -> VolumeFeatures:
    target_times = np.asarray(target_times, dtype=np.float64)
    m = lanczos_matrix(f.times, target_times, a, cutoff_hz)
    if tr is None:
        tr = float(np.median(np.diff(target_times))) if len(target_times) > 1 else 2.0
    return VolumeFeatures(m @ f.matrix, tr)


def delay_shifts(delays: Sequence[float], tr: float) -> list[int]:
    shifts = []
    for d in delays:
        k = d / tr
        if abs(k - round(k)) > 1e-9:
            raise ValueError(f"delay {d}s is not a whole number of TRs ({tr}s)")
        shifts.append(int(round(k)))
    return shifts


def delay_indices(n_rows: int, shifts: Sequence[int], offset: int = 0) -> np.ndarray:
    """Source row for every (output row, delay); ``-1`` marks zero padding.

    ``offset`` is the absolute index of the first output row when the source
    block starts at absolute row 0.
    """
    rows = np.arange(n_rows)[:, None] + offset - np.asarray(shifts)[None, :]
    return np.where(rows >= 0, rows, -1)


def delay_stack(v: VolumeFeatures, delays: Sequence[float] = DEFAULT_DELAYS) -> DelayedFeatures:
    shifts = delay_shifts(delays, v.tr)
    x = np.asarray(v.matrix, dtype=np.float64)
    t, p = x.shape
    out = np.zeros((t, p * len(shifts)))
    for i, k in enumerate(shifts):
        if k < t:
            out[k:, i * p:(i + 1) * p] = x[: t - k]
    return DelayedFeatures(out, tuple(delays), v.tr)


def zscore(x: np.ndarray, axis: int = 0) -> np.ndarray:
    """Z-score along ``axis``; zero-variance slices become zeros."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=axis, keepdims=True)
    sd = x.std(axis=axis, keepdims=True)
    return np.divide(x - mu, sd, out=np.zeros_like(x), where=sd > 0)


def column_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and std per column, with zero std replaced by one."""
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    return mu, np.where(sd > 0, sd, 1.0)


@dataclass
class PreparedStory:
    """Windows and the interpolation matrix for one story, reused across epochs."""

    story_id: str
    windows: Windows
    n_volumes: int
    tr: float
    lanczos: np.ndarray  # (n_volumes, n_windows)

    def window_span(self, row_lo: int, row_hi: int) -> tuple[int, int]:
        """Smallest window range with nonzero weight for volume rows ``[row_lo, row_hi)``."""
        cols = np.flatnonzero(np.any(self.lanczos[row_lo:row_hi] != 0.0, axis=0))
        return int(cols[0]), int(cols[-1]) + 1


def prepare_story(story_id: str, w: Waveform, n_volumes: int, tr: float = 2.0, win_s: float = 2.0,
                  stride_s: float = 0.1, lanczos_a: int = 3, cutoff_hz: float | None = None) -> PreparedStory:
    windows = slide_windows(w, win_s, stride_s)
    m = lanczos_matrix(windows.times, volume_times(n_volumes, tr), lanczos_a,
                       1.0 / tr if cutoff_hz is None else cutoff_hz)
    return PreparedStory(story_id, windows, n_volumes, tr, m)


def story_volume_features(weights: EncoderWeights, adapters: LoraAdapterSet | None, story: PreparedStory,
                          layer: int | None = None) -> np.ndarray:
    feats = encode_readout(weights, adapters, story.windows.segments, layer)
    return story.lanczos @ feats


def design_matrix(volume_features: np.ndarray, delays: Sequence[float] = DEFAULT_DELAYS,
                  tr: float = 2.0) -> np.ndarray:
    """Per-story z-scored, delay-stacked design matrix."""
    return delay_stack(VolumeFeatures(zscore(volume_features), tr), delays).matrix


# ---------------------------------------------------------------------------
# files


def save_features(path, matrix: np.ndarray, *, tr: float | None = None, delays: Sequence[float] | None = None,
                  model_checksum: str | None = None, times: np.ndarray | None = None, single: bool = False,
                  meta: dict | None = None) -> str:
    arr = np.asarray(matrix, dtype=np.float32 if single else np.float64)
    arrays = {"matrix": arr}
    if times is not None:
        arrays["times"] = np.asarray(times, dtype=np.float64)
    header = {"shape": list(arr.shape), "dtype": arr.dtype.name, "tr": tr,
              "delays": list(delays) if delays is not None else None, "model_checksum": model_checksum,
              **(meta or {})}
    return container.write(path, "features", arrays, header)


def load_features(path) -> tuple[np.ndarray, dict]:
    header, arrays = container.read(path, "features")
    return arrays["matrix"].astype(np.float64), header


def write_wav(path, w: Waveform) -> None:
    """16-bit mono PCM WAV; samples are clipped to [-1, 1]."""
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate))
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2 or fh.getnchannels() != 1:
            raise ValueError(f"{path}: only 16-bit mono PCM is supported")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    return Waveform(np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0, rate)
