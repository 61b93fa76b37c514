"""Synthetic stories, teacher model and subjects with planted ground truth.

Stories are background noise plus "word" tokens, each token a short two-tone
chirp with a vocabulary-specific spectrum. Token identities follow a slowly
drifting topic so that feature content varies on the time scale of fMRI
volumes.

Responses come from a teacher encoder: the base encoder plus a planted
low-rank perturbation of Q/K/V in a few layers, shared by every subject, and
optionally a smaller subject-specific perturbation in further layers.
Auditory-cortex (AC) voxels read an early teacher layer, the rest read the
readout layer.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import container
from .encoder import EncoderConfig, EncoderWeights, LoraAdapterSet, TARGETS, init_encoder
from .featurize import (DEFAULT_DELAYS, PreparedStory, Waveform, design_matrix, prepare_story, read_wav,
                        story_volume_features, write_wav, zscore)

ROI_NAMES = ("all", "ac", "non_ac", "left", "right")


@dataclass(frozen=True)
class Token:
    token_id: int
    onset: float
    offset: float


@dataclass
class StorySpec:
    story_id: str
    duration: float
    seed: int
    tokens: list[Token] = field(default_factory=list)


@dataclass(frozen=True)
class Vocabulary:
    """Per-token acoustic signature: two tone frequencies drawn from ``seed``."""

    n_tokens: int = 40
    seed: int = 7
    token_dur: float = 0.3

    def tones(self, sample_rate: int) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        hi = 0.45 * sample_rate
        return np.sort(rng.uniform(60.0, hi, size=(self.n_tokens, 2)), axis=1)


@dataclass(frozen=True)
class TeacherSpec:
    encoder: EncoderConfig = EncoderConfig()
    rank: int = 2
    magnitude: float = 3.0
    layers: tuple[int, ...] = (1, 4)
    readout_layer: int = 9
    ac_layer: int = 2
    seed: int = 11
    individual_magnitude: float = 0.0
    individual_layers: tuple[int, ...] = (3,)


@dataclass
class SubjectSpec:
    subject_id: str
    n_voxels: int = 200
    n_ac: int = 40
    noise_sigma: float = 1.0
    seed: int = 0
    subspace_dim: int = 16
    shared_weight: float = 0.5

    def rois(self) -> dict[str, np.ndarray]:
        """Boolean voxel masks; AC voxels come first and are split evenly between hemispheres."""
        v = self.n_voxels
        ac = np.zeros(v, dtype=bool)
        ac[: self.n_ac] = True
        left = np.zeros(v, dtype=bool)
        left[: self.n_ac // 2] = True
        n_left_rest = v // 2 - self.n_ac // 2
        left[self.n_ac: self.n_ac + n_left_rest] = True
        return {"all": np.ones(v, dtype=bool), "ac": ac, "non_ac": ~ac, "left": left, "right": ~left}


# ---------------------------------------------------------------------------
# stories


def schedule_tokens(duration: float, seed: int, vocab: Vocabulary = Vocabulary(), rate: float = 3.0,
                    n_topics: int = 4, topic_s: float = 12.0, start: float = 0.2) -> list[Token]:
    """Non-overlapping token events; token identities follow a slowly switching topic."""
    rng = np.random.default_rng(seed)
    topic_rng = np.random.default_rng(vocab.seed + 2)
    # each topic prefers a random subset of the vocabulary
    prefs = topic_rng.dirichlet(np.full(vocab.n_tokens, 0.3), size=n_topics)
    tokens = []
    t = start
    topic = int(rng.integers(n_topics))
    next_switch = rng.exponential(topic_s)
    mean_gap = max(1.0 / rate - vocab.token_dur, 0.01)
    while t + vocab.token_dur <= duration:
        if t >= next_switch:
            topic = int(rng.integers(n_topics))
            next_switch = t + rng.exponential(topic_s)
        tok = int(rng.choice(vocab.n_tokens, p=prefs[topic]))
        tokens.append(Token(tok, round(t, 6), round(t + vocab.token_dur, 6)))
        t += vocab.token_dur + rng.exponential(mean_gap)
    return tokens


def make_story(story_id: str, duration: float, seed: int, vocab: Vocabulary = Vocabulary(),
               rate: float = 3.0) -> StorySpec:
    return StorySpec(story_id, duration, seed, schedule_tokens(duration, seed, vocab, rate))


def _background(n: int, sample_rate: int, rng: np.random.Generator, level: float) -> np.ndarray:
    white = rng.normal(size=n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    spec[(freqs < 40.0) | (freqs > 0.45 * sample_rate)] = 0.0
    band = np.fft.irfft(spec, n)
    band /= band.std() + 1e-12
    # slow loudness drift so the background is not stationary
    env_knots = rng.uniform(0.5, 1.5, size=int(n / sample_rate / 4.0) + 2)
    env = np.interp(np.arange(n) / sample_rate, np.arange(len(env_knots)) * 4.0, env_knots)
    return level * env * band


def token_signal(token_id: int, vocab: Vocabulary, sample_rate: int) -> np.ndarray:
    n = int(round(vocab.token_dur * sample_rate))
    f1, f2 = vocab.tones(sample_rate)[token_id]
    t = np.arange(n) / sample_rate
    env = np.sin(np.pi * (np.arange(n) + 0.5) / n) ** 2
    return env * (0.6 * np.sin(2 * np.pi * f1 * t) + 0.4 * np.sin(2 * np.pi * f2 * t))


def gen_waveform(spec: StorySpec, sample_rate: int = 1600, vocab: Vocabulary = Vocabulary(),
                 background_level: float = 0.02) -> Waveform:
    n = int(round(spec.duration * sample_rate))
    rng = np.random.default_rng(spec.seed)
    x = _background(n, sample_rate, rng, background_level)
    cache: dict[int, np.ndarray] = {}
    for tok in spec.tokens:
        sig = cache.setdefault(tok.token_id, token_signal(tok.token_id, vocab, sample_rate))
        s = int(round(tok.onset * sample_rate))
        e = min(s + len(sig), n)
        x[s:e] += 0.5 * sig[: e - s]
    return Waveform(x, sample_rate)


# ---------------------------------------------------------------------------
# teacher and responses


def _perturb(factors: dict, layers: Sequence[int], rank: int, magnitude: float, d: int,
             rng: np.random.Generator) -> None:
    for layer in layers:
        for t in TARGETS:
            a = rng.normal(0.0, 1.0 / np.sqrt(d), (rank, d))
            b = rng.normal(0.0, magnitude / np.sqrt(rank), (d, rank))
            factors[(layer, t)] = (a, b)


def planted_adapters(spec: TeacherSpec, subject_seed: int | None = None) -> LoraAdapterSet:
    """Rank-``spec.rank`` perturbation of Q, K and V in ``spec.layers`` (alpha = rank).

    With ``subject_seed`` and a nonzero ``individual_magnitude``, the
    ``individual_layers`` get a perturbation drawn from that seed.
    """
    d = spec.encoder.d_model
    if set(spec.layers) & set(spec.individual_layers) and spec.individual_magnitude:
        raise ValueError("individual_layers must not overlap layers")
    factors: dict = {}
    _perturb(factors, spec.layers, spec.rank, spec.magnitude, d, np.random.default_rng(spec.seed))
    if subject_seed is not None and spec.individual_magnitude:
        rng = np.random.default_rng([spec.seed, subject_seed])
        _perturb(factors, spec.individual_layers, spec.rank, spec.individual_magnitude, d, rng)
    return LoraAdapterSet(spec.rank, float(spec.rank), factors)


def teacher_features(base: EncoderWeights, spec: TeacherSpec, stories: Sequence[PreparedStory],
                     subject_seed: int | None = None) -> dict[str, dict[str, np.ndarray]]:
    """Volume-aligned teacher features per story: ``{"ac": ..., "hi": ...}``."""
    planted = planted_adapters(spec, subject_seed)
    out = {}
    for st in stories:
        out[st.story_id] = {
            "ac": story_volume_features(base, planted, st, spec.ac_layer),
            "hi": story_volume_features(base, planted, st, spec.readout_layer),
        }
    return out


HRF = np.array([0.6, 1.0, 0.7, 0.3])


def voxel_maps(subject: SubjectSpec, n_features: int, shared_seed: int = 1234) -> tuple[np.ndarray, np.ndarray]:
    """Unit-norm loading vectors for AC and non-AC voxels, shape ``(n_features, n_voxels)`` each.

    Loadings mix a subspace shared by every subject with a subject-specific one.
    """
    rng = np.random.default_rng(subject.seed)
    k = min(subject.subspace_dim, n_features)
    shared = np.linalg.qr(np.random.default_rng(shared_seed).normal(size=(n_features, k)))[0]
    own = np.linalg.qr(rng.normal(size=(n_features, k)))[0]
    maps = []
    for _ in range(2):
        c_sh = rng.normal(size=(k, subject.n_voxels))
        c_own = rng.normal(size=(k, subject.n_voxels))
        m = subject.shared_weight * shared @ c_sh + (1.0 - subject.shared_weight) * own @ c_own
        maps.append(m / np.linalg.norm(m, axis=0, keepdims=True))
    return maps[0], maps[1]


def true_weights(subject: SubjectSpec, n_features: int, delays: Sequence[float] = DEFAULT_DELAYS
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Planted delayed-design weights ``(W_ac, W_hi)``, each ``(n_delays * n_features, n_voxels)``.

    AC voxels only load on the early-layer features and the rest only on the readout layer.
    """
    m_ac, m_hi = voxel_maps(subject, n_features)
    hrf = HRF[: len(delays)]
    ac = subject.rois()["ac"]
    w_ac = np.kron(hrf[:, None], m_ac) * ac[None, :]
    w_hi = np.kron(hrf[:, None], m_hi) * (~ac)[None, :]
    return w_ac, w_hi


def gen_responses(subject: SubjectSpec, teacher: dict[str, dict[str, np.ndarray]], story_ids: Sequence[str],
                  delays: Sequence[float] = DEFAULT_DELAYS, tr: float = 2.0) -> dict[str, np.ndarray]:
    """Per-story z-scored responses ``zscore(signal + noise)`` with unit-variance signal per voxel."""
    n_features = next(iter(teacher.values()))["hi"].shape[1]
    w_ac, w_hi = true_weights(subject, n_features, delays)
    signal = {}
    for sid in story_ids:
        f = teacher[sid]
        signal[sid] = design_matrix(f["ac"], delays, tr) @ w_ac + design_matrix(f["hi"], delays, tr) @ w_hi
    pooled = np.concatenate([signal[s] for s in story_ids])
    scale = pooled.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    sigma = np.broadcast_to(np.asarray(subject.noise_sigma, dtype=float), (subject.n_voxels,))
    out = {}
    for i, sid in enumerate(story_ids):
        rng = np.random.default_rng([subject.seed, 977, i])
        noise = rng.normal(size=signal[sid].shape) * sigma
        out[sid] = zscore(signal[sid] / scale + noise)
    return out


# ---------------------------------------------------------------------------
# datasets


@dataclass
class DatasetConfig:
    n_stories: int = 12
    story_s: float = 120.0
    tr: float = 2.0
    n_subjects: int = 3
    n_voxels: int = 200
    n_ac: int = 40
    noise_sigma: float = 0.8
    seed: int = 0
    token_rate: float = 3.0
    background_level: float = 0.02
    teacher: TeacherSpec = TeacherSpec()
    vocab: Vocabulary = Vocabulary()
    subspace_dim: int = 16
    shared_weight: float = 0.5

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        t = dict(d.pop("teacher", {}))
        enc = EncoderConfig.from_dict(t.pop("encoder")) if "encoder" in t else EncoderConfig()
        for k in ("layers", "individual_layers"):
            if k in t:
                t[k] = tuple(t[k])
        voc = Vocabulary(**d.pop("vocab", {}))
        return cls(teacher=TeacherSpec(encoder=enc, **t), vocab=voc, **d)


def split_stories(story_ids: Sequence[str]) -> dict[str, list[str]]:
    """One test story, two validation stories, the rest training (in id order)."""
    ids = list(story_ids)
    if len(ids) < 4:
        raise ValueError("need at least 4 stories for a train/val/test split")
    return {"test": ids[:1], "val": ids[1:3], "train": ids[3:]}


@dataclass
class Dataset:
    config: DatasetConfig
    stories: dict[str, StorySpec]
    waveforms: dict[str, Waveform]
    responses: dict[str, dict[str, np.ndarray]]  # subject -> story -> (T, V)
    subjects: dict[str, SubjectSpec]
    split: dict[str, list[str]]

    @property
    def story_ids(self) -> list[str]:
        return list(self.stories)

    def n_volumes(self, story_id: str) -> int:
        return int(round(self.stories[story_id].duration / self.config.tr))

    def rois(self, subject_id: str) -> dict[str, np.ndarray]:
        return self.subjects[subject_id].rois()

    def prepare(self, win_s: float = 2.0, stride_s: float = 0.1) -> dict[str, PreparedStory]:
        return {sid: prepare_story(sid, self.waveforms[sid], self.n_volumes(sid), self.config.tr, win_s, stride_s)
                for sid in self.story_ids}


def story_ids_for(n: int) -> list[str]:
    return [f"story{i:02d}" for i in range(n)]


def generate(cfg: DatasetConfig = DatasetConfig(), base: EncoderWeights | None = None) -> Dataset:
    """Build stories, teacher features and responses for every subject."""
    enc_cfg = cfg.teacher.encoder
    min_s = enc_cfg.window_s + max(DEFAULT_DELAYS)
    if cfg.story_s < min_s:
        raise ValueError(f"stories must last at least {min_s}s")
    base = init_encoder(enc_cfg) if base is None else base
    ids = story_ids_for(cfg.n_stories)
    stories = {sid: make_story(sid, cfg.story_s, cfg.seed * 1000 + i, cfg.vocab, cfg.token_rate) for i, sid in enumerate(ids)}
    waves = {sid: gen_waveform(s, enc_cfg.sample_rate, cfg.vocab, cfg.background_level) for sid, s in stories.items()}
    # responses are generated from the quantised audio that gets written to disk
    waves = {sid: _quantise(w) for sid, w in waves.items()}
    n_vol = int(round(cfg.story_s / cfg.tr))
    prepared = [prepare_story(sid, waves[sid], n_vol, cfg.tr, enc_cfg.window_s) for sid in ids]
    teach = teacher_features(base, cfg.teacher, prepared)
    individual = cfg.teacher.individual_magnitude != 0.0
    subjects = {}
    responses = {}
    for j in range(cfg.n_subjects):
        sub = SubjectSpec(f"S{j + 1:02d}", cfg.n_voxels, cfg.n_ac, cfg.noise_sigma, seed=cfg.seed * 100 + j + 1,
                          subspace_dim=cfg.subspace_dim, shared_weight=cfg.shared_weight)
        subjects[sub.subject_id] = sub
        own = teacher_features(base, cfg.teacher, prepared, sub.seed) if individual else teach
        responses[sub.subject_id] = gen_responses(sub, own, ids, tr=cfg.tr)
    return Dataset(cfg, stories, waves, responses, subjects, split_stories(ids))


def _quantise(w: Waveform) -> Waveform:
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767)
    return Waveform(pcm / 32767.0, w.sample_rate)


def save_dataset(ds: Dataset, root) -> dict:
    """Write ``stories/``, ``responses/``, ``rois/`` and ``manifest.json``; returns the manifest."""
    root = Path(root)
    sums = {}
    for sid, w in ds.waveforms.items():
        p = root / "stories" / f"{sid}.wav"
        write_wav(p, w)
        sums[f"stories/{sid}.wav"] = container.sha256_file(p)
    for sub, per_story in ds.responses.items():
        for sid, r in per_story.items():
            rel = f"responses/{sub}/{sid}.bin"
            sums[rel] = container.write(root / rel, "responses", {"matrix": r},
                                        {"subject": sub, "story": sid, "tr": ds.config.tr, "shape": list(r.shape)})
        rois = {k: np.flatnonzero(v).tolist() for k, v in ds.rois(sub).items()}
        p = root / "rois" / f"{sub}.json"
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps({"subject": sub, "n_voxels": ds.subjects[sub].n_voxels, "rois": rois},
                                sort_keys=True, indent=1))
        sums[f"rois/{sub}.json"] = container.sha256_file(p)
    manifest = {
        "config": ds.config.to_dict(),
        "split": ds.split,
        "stories": {sid: {"duration": s.duration, "seed": s.seed,
                          "tokens": [[t.token_id, t.onset, t.offset] for t in s.tokens]}
                    for sid, s in ds.stories.items()},
        "subjects": {k: asdict(v) for k, v in ds.subjects.items()},
        "checksums": sums,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return manifest


def load_dataset(root) -> Dataset:
    root = Path(root)
    man = json.loads((root / "manifest.json").read_text())
    cfg = DatasetConfig.from_dict(man["config"])
    stories = {sid: StorySpec(sid, v["duration"], v["seed"], [Token(int(a), b, c) for a, b, c in v["tokens"]])
               for sid, v in man["stories"].items()}
    waves = {sid: read_wav(root / "stories" / f"{sid}.wav") for sid in stories}
    subjects = {k: SubjectSpec(**v) for k, v in man["subjects"].items()}
    responses = {sub: {sid: container.read(root / "responses" / sub / f"{sid}.bin", "responses")[1]["matrix"]
                       for sid in stories} for sub in subjects}
    return Dataset(cfg, stories, waves, responses, subjects, man["split"])


def dataset_checksum(root) -> str:
    man = json.loads((Path(root) / "manifest.json").read_text())
    return hashlib.sha256(json.dumps(man["checksums"], sort_keys=True).encode()).hexdigest()
