"""Desk-scale audio encoder: strided linear frame projection followed by pre-LN transformer layers.

Hidden state ``0`` is the frame-encoder output; hidden state ``l`` (1-based)
is the residual stream after transformer layer ``l``. Weight matrices follow
the ``y = x @ W.T`` convention, so a LoRA update on ``W`` is ``(alpha/r) B @ A``
with ``A`` of shape ``(r, d_in)`` and ``B`` of shape ``(d_out, r)``.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import container
from . import gradcore as gc
from .gradcore import Tensor

TARGETS = ("q", "k", "v")


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 9
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    sample_rate: int = 1600
    frame_size: int = 320
    frame_stride: int = 320
    window_s: float = 2.0
    readout_layer: int = 9
    residual_scale: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 1 <= self.readout_layer <= self.n_layers:
            raise ValueError("readout_layer must lie in 1..n_layers")
        if self.frame_size < 1 or self.frame_stride < 1 or self.d_model < 2:
            raise ValueError("invalid frame or model size")
        if self.window_samples < self.frame_size:
            raise ValueError("window shorter than one frame")

    @property
    def window_samples(self) -> int:
        return int(round(self.window_s * self.sample_rate))

    @property
    def n_frames(self) -> int:
        return (self.window_samples - self.frame_size) // self.frame_stride + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


@dataclass
class EncoderWeights:
    config: EncoderConfig
    params: dict[str, np.ndarray]
    frozen: bool = True

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return h.hexdigest()

    def copy(self) -> "EncoderWeights":
        return EncoderWeights(self.config, {k: v.copy() for k, v in self.params.items()}, self.frozen)

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))


@dataclass
class LoraAdapterSet:
    """Low-rank factor pairs keyed by ``(layer, target)``."""

    rank: int = 4
    alpha: float = 4.0
    factors: dict[tuple[int, str], tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("LoRA rank must be >= 1")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def copy(self) -> "LoraAdapterSet":
        return LoraAdapterSet(self.rank, self.alpha, {k: (a.copy(), b.copy()) for k, (a, b) in self.factors.items()})

    def parameter_count(self) -> int:
        return int(sum(a.size + b.size for a, b in self.factors.values()))

    def keys(self):
        return sorted(self.factors, key=lambda k: (k[0], TARGETS.index(k[1])))


@dataclass
class BottleneckHead:
    down: np.ndarray  # (P, k)
    up: np.ndarray  # (k, V)

    def __post_init__(self):
        p, k = self.down.shape
        k2, v = self.up.shape
        if k != k2:
            raise ValueError("head factors disagree on the bottleneck rank")
        if k > min(p, v):
            raise ValueError(f"bottleneck rank {k} exceeds min(P={p}, V={v})")

    @property
    def rank(self) -> int:
        return self.down.shape[1]

    def copy(self) -> "BottleneckHead":
        return BottleneckHead(self.down.copy(), self.up.copy())


# ---------------------------------------------------------------------------
# construction


def init_encoder(config: EncoderConfig) -> EncoderWeights:
    rng = np.random.default_rng(config.seed)
    d, f = config.d_model, config.d_ff
    res = config.residual_scale
    p: dict[str, np.ndarray] = {
        "frame.w": rng.normal(0.0, 1.0 / np.sqrt(config.frame_size), (d, config.frame_size)),
        "frame.ln.g": np.ones(d),
        "frame.ln.b": np.zeros(d),
    }
    for layer in range(1, config.n_layers + 1):
        pre = f"L{layer}."
        p[pre + "ln1.g"] = np.ones(d)
        p[pre + "ln1.b"] = np.zeros(d)
        for t in TARGETS:
            p[pre + "w" + t] = rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))
        p[pre + "wo"] = rng.normal(0.0, res / np.sqrt(d), (d, d))
        p[pre + "ln2.g"] = np.ones(d)
        p[pre + "ln2.b"] = np.zeros(d)
        p[pre + "w1"] = rng.normal(0.0, 1.0 / np.sqrt(d), (f, d))
        p[pre + "w2"] = rng.normal(0.0, res / np.sqrt(f), (d, f))
    return EncoderWeights(config, p, frozen=True)


def init_lora(config: EncoderConfig, rank: int = 4, alpha: float | None = None, *,
              layers: Sequence[int] | None = None, targets: Sequence[str] = TARGETS,
              seed: int = 0, a_std: float = 0.02) -> LoraAdapterSet:
    """Fresh adapters: ``A ~ N(0, a_std^2)``, ``B = 0``. ``alpha`` defaults to ``rank``."""
    rng = np.random.default_rng(seed)
    layers = range(1, config.n_layers + 1) if layers is None else layers
    d = config.d_model
    factors = {}
    for layer in layers:
        if not 1 <= layer <= config.n_layers:
            raise ValueError(f"layer {layer} out of range")
        for t in targets:
            if t not in TARGETS:
                raise ValueError(f"unknown LoRA target {t!r}")
            factors[(int(layer), t)] = (rng.normal(0.0, a_std, (rank, d)), np.zeros((d, rank)))
    return LoraAdapterSet(rank, float(rank if alpha is None else alpha), factors)


def init_head(n_features: int, n_targets: int, rank: int = 100, seed: int = 0) -> BottleneckHead:
    rank = min(rank, n_features, n_targets)
    rng = np.random.default_rng(seed)
    return BottleneckHead(rng.normal(0, 1 / np.sqrt(n_features), (n_features, rank)),
                          rng.normal(0, 1 / np.sqrt(rank), (rank, n_targets)))


def head_from_weights(beta: np.ndarray, rank: int = 100) -> BottleneckHead:
    """Rank-``rank`` factorisation of a full ``(P, V)`` weight matrix via truncated SVD."""
    u, s, vt = np.linalg.svd(beta, full_matrices=False)
    k = min(rank, len(s))
    root = np.sqrt(s[:k])
    return BottleneckHead(u[:, :k] * root, root[:, None] * vt[:k])


def lora_parameter_formula(n_layers: int, d_model: int, rank: int = 4, n_targets: int = 3) -> int:
    return n_layers * n_targets * 2 * rank * d_model


# ---------------------------------------------------------------------------
# forward


def _positions(n_frames: int, d: int) -> np.ndarray:
    pos = np.arange(n_frames)[:, None]
    i = np.arange(d // 2)[None, :]
    ang = pos / (10000.0 ** (2 * i / d))
    out = np.zeros((n_frames, d))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)[:, : d - d // 2]
    return out


def frame_windows(config: EncoderConfig, windows: np.ndarray) -> np.ndarray:
    """Cut windows ``(n, window_samples)`` into frames ``(n, n_frames, frame_size)``."""
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 2 or windows.shape[1] != config.window_samples:
        raise ValueError(f"expected windows of {config.window_samples} samples, got shape {windows.shape}")
    n = windows.shape[0]
    view = np.lib.stride_tricks.sliding_window_view(windows, config.frame_size, axis=1)
    frames = view[:, ::config.frame_stride][:, : config.n_frames]
    return np.ascontiguousarray(frames).reshape(n, config.n_frames, config.frame_size)


def leaves(weights: EncoderWeights, adapters: LoraAdapterSet | None = None, *,
           train_base: bool = False, train_lora: bool = False) -> dict[str, Tensor]:
    """Wrap weights (and adapters) as graph leaves; LoRA factors are named ``lora.<layer>.<t>.A|B``."""
    out = {k: Tensor(v, requires_grad=train_base) for k, v in weights.params.items()}
    if adapters is not None:
        for (layer, t), (a, b) in adapters.factors.items():
            out[f"lora.{layer}.{t}.A"] = Tensor(a, requires_grad=train_lora)
            out[f"lora.{layer}.{t}.B"] = Tensor(b, requires_grad=train_lora)
    return out


def _effective(p: dict[str, Tensor], layer: int, t: str, lora_scale: float) -> Tensor:
    w = p[f"L{layer}.w{t}"]
    a_key = f"lora.{layer}.{t}.A"
    if a_key not in p:
        return w
    return w + gc.matmul(p[f"lora.{layer}.{t}.B"], p[a_key]) * lora_scale


def _project(rows: Tensor, p: dict[str, Tensor], layer: int, t: str, lora_scale: float) -> Tensor:
    return gc.matmul(rows, gc.transpose(_effective(p, layer, t, lora_scale)))


def _layer(x: Tensor, p: dict[str, Tensor], layer: int, cfg: EncoderConfig, lora_scale: float,
           last_only: bool) -> Tensor:
    n, f, d = x.shape
    h = cfg.n_heads
    dh = d // h
    pre = f"L{layer}."
    a = gc.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
    rows = gc.reshape(a, (n * f, d))
    k = gc.transpose(gc.reshape(_project(rows, p, layer, "k", lora_scale), (n, f, h, dh)), (0, 2, 3, 1))
    v = gc.transpose(gc.reshape(_project(rows, p, layer, "v", lora_scale), (n, f, h, dh)), (0, 2, 1, 3))
    if last_only:
        fq = 1
        qrows = gc.reshape(a[:, f - 1:, :], (n, d))
        resid = x[:, f - 1:, :]
    else:
        fq = f
        qrows = rows
        resid = x
    q = gc.transpose(gc.reshape(_project(qrows, p, layer, "q", lora_scale), (n, fq, h, dh)), (0, 2, 1, 3))
    scores = gc.matmul(q, k) * (1.0 / np.sqrt(dh))
    att = gc.softmax(scores, axis=-1)
    ctx = gc.reshape(gc.transpose(gc.matmul(att, v), (0, 2, 1, 3)), (n * fq, d))
    r = resid + gc.reshape(gc.matmul(ctx, gc.transpose(p[pre + "wo"])), (n, fq, d))
    b = gc.reshape(gc.layer_norm(r, p[pre + "ln2.g"], p[pre + "ln2.b"]), (n * fq, d))
    ff = gc.matmul(gc.gelu(gc.matmul(b, gc.transpose(p[pre + "w1"]))), gc.transpose(p[pre + "w2"]))
    return r + gc.reshape(ff, (n, fq, d))


def run_graph(p: dict[str, Tensor], cfg: EncoderConfig, lora_scale: float, windows: np.ndarray, *,
              upto: int | None = None, last_only_at_top: bool = False) -> list[Tensor]:
    """Hidden states ``[h0, h1, ..., h_upto]`` as graph tensors of shape ``(n, frames, d)``.

    With ``last_only_at_top`` the top layer is evaluated for the final frame
    only (shape ``(n, 1, d)``), which is all a final-token readout needs.
    """
    upto = cfg.n_layers if upto is None else upto
    frames = frame_windows(cfg, windows)
    n = frames.shape[0]
    d = cfg.d_model
    emb = gc.matmul(Tensor(frames.reshape(n * cfg.n_frames, cfg.frame_size)), gc.transpose(p["frame.w"]))
    emb = gc.layer_norm(gc.reshape(emb, (n, cfg.n_frames, d)), p["frame.ln.g"], p["frame.ln.b"])
    pos = np.broadcast_to(_positions(cfg.n_frames, d), (n, cfg.n_frames, d))
    x = emb + Tensor(pos)
    hidden = [x]
    for layer in range(1, upto + 1):
        x = _layer(x, p, layer, cfg, lora_scale, last_only_at_top and layer == upto)
        hidden.append(x)
    return hidden


def _as_batch(window: np.ndarray) -> tuple[np.ndarray, bool]:
    window = np.asarray(window, dtype=np.float64)
    if window.ndim == 1:
        return window[None, :], True
    return window, False


def forward(weights: EncoderWeights, adapters: LoraAdapterSet | None, window: np.ndarray) -> list[np.ndarray]:
    """Per-layer hidden states (layer 0 = frame encoder) for one window or a batch of windows."""
    batch, single = _as_batch(window)
    if batch.shape[-1] != weights.config.window_samples:
        raise ValueError(f"window must have {weights.config.window_samples} samples, got {batch.shape[-1]}")
    scale = adapters.scale if adapters is not None else 1.0
    hidden = run_graph(leaves(weights, adapters), weights.config, scale, batch)
    return [h.data[0] if single else h.data for h in hidden]


def readout(hidden_states: Sequence[np.ndarray], layer: int) -> np.ndarray:
    """Final-frame hidden state of ``layer`` (works for single windows and batches)."""
    if not 0 <= layer < len(hidden_states):
        raise IndexError(f"layer {layer} out of range 0..{len(hidden_states) - 1}")
    return np.asarray(hidden_states[layer])[..., -1, :]


def encode_readout(weights: EncoderWeights, adapters: LoraAdapterSet | None, windows: np.ndarray,
                   layer: int | None = None, chunk: int = 512) -> np.ndarray:
    """Final-frame state of ``layer`` for a batch of windows, shape ``(n, d)``.

    Only the final frame of the top layer is computed; windows are processed in
    fixed-size chunks so results do not depend on the batch they arrive in.
    """
    cfg = weights.config
    layer = cfg.readout_layer if layer is None else layer
    windows = np.asarray(windows, dtype=np.float64)
    scale = adapters.scale if adapters is not None else 1.0
    p = leaves(weights, adapters)
    out = np.empty((len(windows), cfg.d_model))
    for s in range(0, len(windows), chunk):
        if layer == 0:
            hs = run_graph(p, cfg, scale, windows[s:s + chunk], upto=0)
        else:
            hs = run_graph(p, cfg, scale, windows[s:s + chunk], upto=layer, last_only_at_top=True)
        out[s:s + chunk] = hs[-1].data[:, -1, :]
    return out


def encode_all_layers(weights: EncoderWeights, adapters: LoraAdapterSet | None, windows: np.ndarray,
                      chunk: int = 256) -> np.ndarray:
    """Final-frame states for every layer 0..n_layers, shape ``(n_layers + 1, n, d)``."""
    cfg = weights.config
    windows = np.asarray(windows, dtype=np.float64)
    scale = adapters.scale if adapters is not None else 1.0
    p = leaves(weights, adapters)
    out = np.empty((cfg.n_layers + 1, len(windows), cfg.d_model))
    for s in range(0, len(windows), chunk):
        hs = run_graph(p, cfg, scale, windows[s:s + chunk])
        for i, h in enumerate(hs):
            out[i, s:s + chunk] = h.data[:, -1, :]
    return out


def merge_lora(weights: EncoderWeights, adapters: LoraAdapterSet) -> EncoderWeights:
    merged = weights.copy()
    d = weights.config.d_model
    for (layer, t), (a, b) in adapters.factors.items():
        key = f"L{layer}.w{t}"
        if key not in merged.params:
            raise ValueError(f"no weight {key} to merge into")
        if a.shape[1] != d or b.shape[0] != d or a.shape[0] != b.shape[1]:
            raise ValueError(f"adapter {layer}.{t} dimensions do not match d_model={d}")
        merged.params[key] = merged.params[key] + adapters.scale * (b @ a)
    return merged


def head_predict(head: BottleneckHead, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.shape[-1] != head.down.shape[0]:
        raise ValueError(f"features have {features.shape[-1]} columns, head expects {head.down.shape[0]}")
    return features @ head.down @ head.up


# ---------------------------------------------------------------------------
# checkpoints


def adapter_arrays(adapters: LoraAdapterSet) -> dict[str, np.ndarray]:
    """Payload order: layers ascending, targets q, k, v, ``A`` before ``B``."""
    arrays = {}
    for layer, t in adapters.keys():
        a, b = adapters.factors[(layer, t)]
        arrays[f"L{layer}.{t}.A"] = a
        arrays[f"L{layer}.{t}.B"] = b
    return arrays


def save_adapters(path, adapters: LoraAdapterSet, config: EncoderConfig, head: BottleneckHead | None = None,
                  meta: dict | None = None) -> str:
    arrays = adapter_arrays(adapters)
    if head is not None:
        arrays["head.down"] = head.down
        arrays["head.up"] = head.up
    header = {
        "config": config.to_dict(),
        "rank": adapters.rank,
        "alpha": adapters.alpha,
        "targets": [[layer, t] for layer, t in adapters.keys()],
        **(meta or {}),
    }
    return container.write(path, "lora_adapters", arrays, header)


def load_adapters(path) -> tuple[LoraAdapterSet, EncoderConfig, BottleneckHead | None, dict]:
    header, arrays = container.read(path, "lora_adapters")
    factors = {}
    for layer, t in header["targets"]:
        factors[(int(layer), t)] = (arrays[f"L{layer}.{t}.A"], arrays[f"L{layer}.{t}.B"])
    head = None
    if "head.down" in arrays:
        head = BottleneckHead(arrays["head.down"], arrays["head.up"])
    return (LoraAdapterSet(int(header["rank"]), float(header["alpha"]), factors),
            EncoderConfig.from_dict(header["config"]), head, header)


def save_weights(path, weights: EncoderWeights, meta: dict | None = None) -> str:
    header = {"config": weights.config.to_dict(), "frozen": weights.frozen, "checksum": weights.checksum(),
              **(meta or {})}
    return container.write(path, "encoder_weights", dict(sorted(weights.params.items())), header)


def load_weights(path) -> EncoderWeights:
    header, arrays = container.read(path, "encoder_weights")
    return EncoderWeights(EncoderConfig.from_dict(header["config"]), dict(arrays), bool(header["frozen"]))
