"""Linear probes for acoustic (mel filterbank) and lexical (word embedding) content per layer.

Probe targets are paired with window-level features by time: filterbank
frames with the window ending closest to the frame end, words with the
window ending closest to the word offset (configurable).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import ridge
from .encoder import EncoderWeights, LoraAdapterSet, encode_all_layers
from .featurize import Waveform, Windows, WindowedFeatures, slide_windows

PROBE_KINDS = ("filterbank", "word")
EMBEDDING_DIM = 300
LOG_FLOOR = 1e-10


@dataclass
class FilterbankFeatures:
    times: np.ndarray  # frame end times
    matrix: np.ndarray  # (frames, n_mels), log energies


@dataclass(frozen=True)
class WordAlignment:
    words: tuple[tuple[int, float, float], ...]

    def __post_init__(self):
        prev_on, prev_off = -np.inf, -np.inf
        for _, on, off in self.words:
            if off < on:
                raise ValueError("word offset precedes its onset")
            if on <= prev_on or on < prev_off:
                raise ValueError("words must have increasing onsets and must not overlap")
            prev_on, prev_off = on, off

    def __len__(self) -> int:
        return len(self.words)

    def anchor_times(self, anchor: str = "offset") -> np.ndarray:
        on = np.array([w[1] for w in self.words], dtype=np.float64)
        off = np.array([w[2] for w in self.words], dtype=np.float64)
        if anchor == "offset":
            return off
        if anchor == "onset":
            return on
        if anchor == "midpoint":
            return 0.5 * (on + off)
        raise ValueError(f"unknown anchor {anchor!r}")

    @property
    def ids(self) -> np.ndarray:
        return np.array([w[0] for w in self.words], dtype=np.int64)


@dataclass(frozen=True)
class EmbeddingTable:
    vectors: np.ndarray  # (vocabulary, 300)

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[1] != EMBEDDING_DIM:
            raise ValueError(f"embeddings must be {EMBEDDING_DIM}-dimensional")

    @classmethod
    def seeded(cls, n_words: int, seed: int = 0) -> "EmbeddingTable":
        return cls(np.random.default_rng(seed).normal(size=(n_words, EMBEDDING_DIM)))

    def lookup(self, ids: Sequence[int]) -> np.ndarray:
        return self.vectors[np.asarray(ids, dtype=np.int64)]


# ---------------------------------------------------------------------------
# filterbank


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filters(n_mels: int, n_fft: int, sample_rate: int, fmin: float = 0.0, fmax: float | None = None
                ) -> np.ndarray:
    """Triangular filters ``(n_mels, n_fft // 2 + 1)`` with peaks of 1 at mel-spaced centres."""
    fmax = sample_rate / 2.0 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def filter_centers(n_mels: int, sample_rate: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    fmax = sample_rate / 2.0 if fmax is None else fmax
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))[1:-1]


def compute_filterbank(w: Waveform, n_mels: int = 24, frame_s: float = 0.05, hop_s: float = 0.025,
                       floor: float = LOG_FLOOR) -> FilterbankFeatures:
    """Log mel energies of Hann-windowed power spectra; energies below ``floor`` are clipped to it."""
    frame = int(round(frame_s * w.sample_rate))
    hop = int(round(hop_s * w.sample_rate))
    if frame < 2 or hop < 1 or n_mels < 1:
        raise ValueError("invalid filterbank frame, hop or size")
    if frame > len(w.samples):
        raise ValueError("filterbank frame is longer than the waveform")
    frames = np.lib.stride_tricks.sliding_window_view(w.samples, frame)[::hop]
    power = np.abs(np.fft.rfft(frames * np.hanning(frame), axis=1)) ** 2
    energy = power @ mel_filters(n_mels, frame, w.sample_rate).T
    times = (np.arange(len(frames)) * hop + frame) / w.sample_rate
    return FilterbankFeatures(times, np.log(np.maximum(energy, floor)))


# ---------------------------------------------------------------------------
# alignment


def nearest_rows(times: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Index of the nearest entry of sorted ``times`` for each query; ties go to the earlier row."""
    times = np.asarray(times, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    eps = 1e-9 * max(1.0, abs(times[-1]))
    if query.size and (query.min() < times[0] - eps or query.max() > times[-1] + eps):
        raise ValueError(f"alignment times must lie within the feature support [{times[0]}, {times[-1]}]")
    right = np.clip(np.searchsorted(times, query), 1, len(times) - 1) if len(times) > 1 else np.zeros(len(query), int)
    if len(times) == 1:
        return right
    left = right - 1
    take_right = (times[right] - query) < (query - times[left]) - 1e-12
    return np.where(take_right, right, left)


def align_features_to_words(f: WindowedFeatures, a: WordAlignment, anchor: str = "offset"
                            ) -> tuple[np.ndarray, np.ndarray]:
    """Feature row index and word id for every word (nearest window end to the anchor time)."""
    return nearest_rows(f.times, a.anchor_times(anchor)), a.ids


def words_in_support(a: WordAlignment, times: np.ndarray, anchor: str = "offset") -> WordAlignment:
    t = a.anchor_times(anchor)
    keep = (t >= times[0]) & (t <= times[-1])
    return WordAlignment(tuple(w for w, k in zip(a.words, keep) if k))


# ---------------------------------------------------------------------------
# probes


@dataclass
class ProbeFit:
    fit: ridge.RidgeFit
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: np.ndarray
    r2: float
    r2_per_dim: np.ndarray
    train_r2: float

    def predict(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.x_mean) / self.x_scale) @ self.fit.beta + self.y_mean


def r2_score(y: np.ndarray, y_hat: np.ndarray) -> np.ndarray:
    """Per-column ``1 - SSE / SST`` with SST about the column mean; constant columns score 0."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    sse = ((y - y_hat) ** 2).sum(axis=0)
    sst = ((y - y.mean(axis=0)) ** 2).sum(axis=0)
    return np.where(sst > 0, 1.0 - sse / np.where(sst > 0, sst, 1.0), 0.0)


def fit_probe(x_train: np.ndarray, y_train: np.ndarray, x_test: np.ndarray, y_test: np.ndarray,
              cv: ridge.CvConfig = ridge.CvConfig()) -> ProbeFit:
    """Ridge probe with cross-validated per-target alphas, scored by held-out R² (mean over targets)."""
    x_train = np.asarray(x_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.float64)
    mu = x_train.mean(axis=0)
    sd = x_train.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    y_mean = y_train.mean(axis=0)
    fit = ridge.fit_cv((x_train - mu) / sd, y_train - y_mean, cv)
    probe = ProbeFit(fit, mu, sd, y_mean, 0.0, np.zeros(0), 0.0)
    per_dim = r2_score(y_test, probe.predict(np.asarray(x_test, dtype=np.float64)))
    probe.r2 = float(per_dim.mean())
    probe.r2_per_dim = per_dim
    probe.train_r2 = float(r2_score(y_train, probe.predict(x_train)).mean())
    return probe


@dataclass
class ProbeStory:
    windows: Windows
    filterbank: FilterbankFeatures
    words: WordAlignment


def prepare_probe_story(w: Waveform, words: WordAlignment, win_s: float = 2.0, stride_s: float = 0.1,
                        n_mels: int = 24, anchor: str = "offset") -> ProbeStory:
    windows = slide_windows(w, win_s, stride_s)
    return ProbeStory(windows, compute_filterbank(w, n_mels), words_in_support(words, windows.times, anchor))


def probe_targets(story: ProbeStory, kind: str, table: EmbeddingTable | None = None, anchor: str = "offset"
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Feature-row indices and target matrix for one story."""
    times = story.windows.times
    if kind == "filterbank":
        fb = story.filterbank
        # the last frame may end up to one hop before the last window
        frames = nearest_rows(fb.times, np.clip(times, fb.times[0], fb.times[-1]))
        return np.arange(len(times)), fb.matrix[frames]
    if kind == "word":
        if table is None:
            raise ValueError("word probes need an embedding table")
        rows, ids = align_features_to_words(WindowedFeatures(times, np.empty((len(times), 0))), story.words, anchor)
        return rows, table.lookup(ids)
    raise ValueError(f"unknown probe kind {kind!r}")


def _probe_xy(layer_feats: Mapping[str, np.ndarray], stories: Mapping[str, ProbeStory], ids: Sequence[str],
              kind: str, table: EmbeddingTable | None, anchor: str) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for sid in ids:
        rows, y = probe_targets(stories[sid], kind, table, anchor)
        if kind == "filterbank":
            xs.append(layer_feats[sid])
        else:
            xs.append(layer_feats[sid][rows])
        ys.append(y)
    return np.concatenate(xs), np.concatenate(ys)


@dataclass
class ProbeRow:
    model_id: str
    layer: int
    probe_kind: str
    r2: float
    r2_minus_pretrained: float


def probe_sweep(models: Mapping[str, tuple[EncoderWeights, LoraAdapterSet | None]],
                stories: Mapping[str, ProbeStory], train_ids: Sequence[str], test_ids: Sequence[str],
                table: EmbeddingTable, *, layers: Sequence[int] | None = None,
                kinds: Sequence[str] = PROBE_KINDS, pretrained_id: str = "pretrained",
                cv: ridge.CvConfig = ridge.CvConfig(), anchor: str = "offset") -> list[ProbeRow]:
    """R² for every (model, layer, kind); the pretrained model must be among ``models``."""
    if pretrained_id not in models:
        raise ValueError(f"models must include the pretrained baseline {pretrained_id!r}")
    results: dict[tuple[str, int, str], float] = {}
    order = [pretrained_id] + sorted(k for k in models if k != pretrained_id)
    for mid in order:
        weights, adapters = models[mid]
        n_layers = weights.config.n_layers
        use_layers = list(range(n_layers + 1)) if layers is None else list(layers)
        allf = {sid: encode_all_layers(weights, adapters, stories[sid].windows.segments)
                for sid in list(train_ids) + list(test_ids)}
        for layer in use_layers:
            lf = {sid: f[layer] for sid, f in allf.items()}
            for kind in kinds:
                xtr, ytr = _probe_xy(lf, stories, train_ids, kind, table, anchor)
                xte, yte = _probe_xy(lf, stories, test_ids, kind, table, anchor)
                results[(mid, layer, kind)] = fit_probe(xtr, ytr, xte, yte, cv).r2
    return [ProbeRow(mid, layer, kind, r2, r2 - results[(pretrained_id, layer, kind)])
            for (mid, layer, kind), r2 in results.items()]


def rows_to_csv(rows: Sequence[ProbeRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model_id", "layer", "probe_kind", "r2", "r2_minus_pretrained"])
    for r in rows:
        w.writerow([r.model_id, r.layer, r.probe_kind, f"{r.r2:.6f}", f"{r.r2_minus_pretrained:.6f}"])
    return buf.getvalue()
