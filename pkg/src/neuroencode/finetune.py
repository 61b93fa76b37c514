"""LoRA fine-tuning on the spatial-correlation loss with epoch-wise re-fit evaluation.

A training batch is a contiguous block of volumes from one story. Its loss is
computed end to end: the windows covering the block (plus the FIR-delay
history and Lanczos support) go through the live encoder, are resampled with
the constant Lanczos weights, z-scored with constant per-story statistics,
delay-stacked and projected by the bottleneck head.

Epoch ``0`` is the untrained model. After every epoch the head is discarded
and a ridge model is re-fit on the training stories with features from the
current encoder; its validation voxel-mean correlation selects the best epoch.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import gradcore as gc
from . import ridge
from .encoder import (BottleneckHead, EncoderWeights, LoraAdapterSet, encode_readout, head_from_weights, init_lora,
                      leaves, run_graph, save_adapters, save_weights)
from .featurize import DEFAULT_DELAYS, PreparedStory, delay_indices, delay_shifts, design_matrix
from .gradcore import Tensor

TARGET_KINDS = ("brain", "teacher_features")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    head_learning_rate: float | None = None  # defaults to learning_rate
    epochs: int = 20
    batch_trs: int = 50
    target_kind: str = "brain"
    roi: str = "all"
    use_lora: bool = True
    lora_rank: int = 4
    lora_alpha: float | None = None
    lora_a_std: float = 0.02
    head_rank: int = 100
    seed: int = 0
    eval_every: int = 1
    chunk: int = 256
    delays: tuple[float, ...] = DEFAULT_DELAYS
    cv: ridge.CvConfig = ridge.CvConfig()

    def __post_init__(self):
        if self.batch_trs < 2:
            raise ValueError("batch_trs must be at least 2")
        if self.target_kind not in TARGET_KINDS:
            raise ValueError(f"target_kind must be one of {TARGET_KINDS}")
        if self.epochs < 0 or self.eval_every < 1 or self.learning_rate < 0:
            raise ValueError("invalid epochs, eval_every or learning_rate")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["delays"] = list(self.delays)
        d["cv"] = {"alphas": [float(a) for a in self.cv.alphas], "n_folds": self.cv.n_folds,
                   "chunk_length": self.cv.chunk_length}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "cv" in d:
            cv = dict(d["cv"])
            if "alphas" in cv:
                cv["alphas"] = tuple(float(a) for a in cv["alphas"])
            d["cv"] = ridge.CvConfig(**cv)
        if "delays" in d:
            d["delays"] = tuple(d["delays"])
        return cls(**d)


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    val_rho: float | None
    wall_time: float
    zero_variance_rows: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float | dict[str, float]) -> None:
    """In-place Adam update with bias correction; ``lr`` is a scalar or a per-parameter mapping."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k in sorted(params):
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        rate = lr[k] if isinstance(lr, dict) else lr
        params[k] -= rate * (m / c1) / (np.sqrt(v / c2) + state.eps)


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine decay from ``base_lr`` at step 0 to 0 at ``total_steps``."""
    if total_steps <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))


# ---------------------------------------------------------------------------
# loss


def _row_corr(r: np.ndarray, p: np.ndarray):
    a = r - r.mean(axis=1, keepdims=True)
    b = p - p.mean(axis=1, keepdims=True)
    na = np.sqrt((a * a).sum(axis=1))
    nb = np.sqrt((b * b).sum(axis=1))
    tol = 1e-12 * np.sqrt(r.shape[1])
    flat = (na <= tol * np.abs(r).max(axis=1)) | (nb <= tol * np.abs(p).max(axis=1))
    denom = np.where(flat, 1.0, na * nb)
    corr = np.where(flat, 0.0, (a * b).sum(axis=1) / denom)
    return corr, a, b, na, nb, flat


def spatial_corr_value(r: np.ndarray, r_hat: np.ndarray) -> tuple[float, int]:
    """Loss value and number of zero-variance rows, without building a graph."""
    r = np.asarray(r, dtype=np.float64)
    r_hat = np.asarray(r_hat, dtype=np.float64)
    _check_loss_shapes(r, r_hat.shape)
    corr, *_, flat = _row_corr(r, r_hat)
    return -float(corr.sum()) / r.shape[0], int(flat.sum())


def _check_loss_shapes(r: np.ndarray, shape) -> None:
    if r.shape != tuple(shape) or r.ndim != 2:
        raise gc.ShapeError(f"targets {r.shape} and predictions {tuple(shape)} must be equal 2-d shapes")
    if r.shape[1] < 2:
        raise ValueError("spatial correlation needs at least 2 voxels")


def spatial_corr_loss(r: np.ndarray, r_hat: Tensor) -> Tensor:
    """``-(1/T) * sum_t corr_voxels(R_t, R_hat_t)``; zero-variance rows contribute 0.

    :func:`spatial_corr_value` returns the number of such rows.
    """
    r = np.asarray(r, dtype=np.float64)
    r_hat = gc.as_tensor(r_hat)
    _check_loss_shapes(r, r_hat.shape)
    t = r.shape[0]
    corr, a, b, na, nb, flat = _row_corr(r, r_hat.data)

    def bw(g):
        scale = np.where(flat, 0.0, 1.0)[:, None]
        safe_ab = np.where(flat, 1.0, na * nb)[:, None]
        safe_bb = np.where(flat, 1.0, nb * nb)[:, None]
        dcorr = (a / safe_ab - corr[:, None] * b / safe_bb) * scale
        return (-(float(g) / t) * dcorr,)

    return gc.make_op(np.asarray(-corr.sum() / t), (r_hat,), bw, "spatial_corr_loss")


# ---------------------------------------------------------------------------
# data


@dataclass
class StudyData:
    """Prepared stories plus targets for one subject, with the story split."""

    stories: dict[str, PreparedStory]
    targets: dict[str, np.ndarray]  # story -> (T, V)
    train: list[str]
    val: list[str]
    test: list[str] = field(default_factory=list)
    tr: float = 2.0

    def restrict(self, mask: np.ndarray | None) -> "StudyData":
        if mask is None:
            return self
        mask = np.asarray(mask, dtype=bool)
        return StudyData(self.stories, {k: np.ascontiguousarray(v[:, mask]) for k, v in self.targets.items()},
                         self.train, self.val, self.test, self.tr)

    @property
    def n_targets(self) -> int:
        return next(iter(self.targets.values())).shape[1]


def build_teacher_targets(teacher: dict[str, np.ndarray], n_volumes: dict[str, int] | None = None
                          ) -> dict[str, np.ndarray]:
    """Teacher feature columns as per-story z-scored pseudo-voxels."""
    out = {}
    for sid, f in teacher.items():
        f = np.asarray(f, dtype=np.float64)
        if n_volumes is not None and f.shape[0] != n_volumes[sid]:
            raise ValueError(f"{sid}: teacher has {f.shape[0]} rows, story has {n_volumes[sid]} volumes")
        mu = f.mean(axis=0)
        sd = f.std(axis=0)
        out[sid] = np.divide(f - mu, sd, out=np.zeros_like(f), where=sd > 0)
    return out


def volume_features(weights: EncoderWeights, adapters: LoraAdapterSet | None, stories: dict[str, PreparedStory],
                    ids: Sequence[str], layer: int | None = None) -> dict[str, np.ndarray]:
    return {sid: stories[sid].lanczos @ encode_readout(weights, adapters, stories[sid].windows.segments, layer)
            for sid in ids}


def stack(mats: dict[str, np.ndarray], ids: Sequence[str]) -> np.ndarray:
    return np.concatenate([mats[s] for s in ids])


@dataclass
class Evaluation:
    val_rho: np.ndarray  # per voxel
    fit: ridge.RidgeFit
    features: dict[str, np.ndarray]  # volume features per story (train + val)

    @property
    def mean(self) -> float:
        return float(self.val_rho.mean())


def fit_encoding(features: dict[str, np.ndarray], targets: dict[str, np.ndarray], train: Sequence[str],
                 cv: ridge.CvConfig = ridge.CvConfig(), delays=DEFAULT_DELAYS, tr: float = 2.0) -> ridge.RidgeFit:
    x = np.concatenate([design_matrix(features[s], delays, tr) for s in train])
    return ridge.fit_cv(x, stack(targets, train), cv)


def score_encoding(fit: ridge.RidgeFit, features: dict[str, np.ndarray], targets: dict[str, np.ndarray],
                   ids: Sequence[str], delays=DEFAULT_DELAYS, tr: float = 2.0) -> np.ndarray:
    """Per-voxel temporal correlation over the concatenated volumes of ``ids``."""
    x = np.concatenate([design_matrix(features[s], delays, tr) for s in ids])
    return ridge.score_temporal(stack(targets, ids), ridge.predict(fit, x))


def evaluate_epoch(weights: EncoderWeights, adapters: LoraAdapterSet | None, data: StudyData,
                   cv: ridge.CvConfig = ridge.CvConfig(), delays=DEFAULT_DELAYS, layer: int | None = None
                   ) -> Evaluation:
    """Re-extract features, fit ridge on the training stories and score the validation stories."""
    feats = volume_features(weights, adapters, data.stories, list(data.train) + list(data.val), layer)
    fit = fit_encoding(feats, data.targets, data.train, cv, delays, data.tr)
    rho = score_encoding(fit, feats, data.targets, data.val, delays, data.tr)
    return Evaluation(rho, fit, feats)


def select_best_epoch(reports: Sequence[EpochReport]) -> int:
    """Epoch with the highest validation correlation; ties go to the earliest."""
    scored = [r for r in reports if r.val_rho is not None]
    if not scored:
        raise ValueError("no evaluated epochs to choose from")
    best = scored[0]
    for r in scored[1:]:
        if r.val_rho > best.val_rho:
            best = r
    return best.epoch


# ---------------------------------------------------------------------------
# batches


def batch_blocks(n_volumes: int, batch_trs: int) -> list[tuple[int, int]]:
    """Near-equal contiguous blocks of at most ``batch_trs`` volumes."""
    n_blocks = -(-n_volumes // batch_trs)
    edges = np.linspace(0, n_volumes, n_blocks + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def batch_plan(data: StudyData, batch_trs: int, rng: np.random.Generator) -> list[tuple[str, int, int]]:
    blocks = [(sid, lo, hi) for sid in data.train for lo, hi in batch_blocks(data.stories[sid].n_volumes, batch_trs)]
    order = rng.permutation(len(blocks))
    return [blocks[i] for i in order]


@dataclass
class ZStats:
    mean: np.ndarray
    scale: np.ndarray  # 1 / std, 0 where std == 0


def zstats(features: dict[str, np.ndarray]) -> dict[str, ZStats]:
    out = {}
    for sid, f in features.items():
        sd = f.std(axis=0)
        out[sid] = ZStats(f.mean(axis=0), np.divide(1.0, sd, out=np.zeros_like(sd), where=sd > 0))
    return out


def batch_prediction(p: dict[str, Tensor], weights: EncoderWeights, lora_scale: float, story: PreparedStory,
                     lo: int, hi: int, stats: ZStats, head: tuple[Tensor, Tensor], shifts: Sequence[int],
                     layer: int, chunk: int = 256) -> Tensor:
    """Head output for volumes ``[lo, hi)`` of ``story`` as a graph tensor."""
    cfg = weights.config
    first = max(0, lo - max(shifts))
    w_lo, w_hi = story.window_span(first, hi)
    segs = story.windows.segments[w_lo:w_hi]
    parts = []
    for s in range(0, len(segs), chunk):
        hs = run_graph(p, cfg, lora_scale, segs[s:s + chunk], upto=layer, last_only_at_top=layer > 0)
        top = hs[-1]
        parts.append(gc.reshape(top[:, top.shape[1] - 1:, :], (top.shape[0], cfg.d_model)))
    feats = parts[0] if len(parts) == 1 else gc.concat(parts, axis=0)
    vol = gc.matmul(Tensor(story.lanczos[first:hi, w_lo:w_hi]), feats)
    n = hi - first
    z = gc.scale_shift(vol, np.broadcast_to(stats.scale, (n, cfg.d_model)),
                       np.broadcast_to(-stats.mean * stats.scale, (n, cfg.d_model)))
    idx = delay_indices(hi - lo, shifts, offset=lo - first)
    design = gc.concat([gc.gather_rows(z, idx[:, i]) for i in range(len(shifts))], axis=1)
    return gc.matmul(gc.matmul(design, head[0]), head[1])


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainState:
    weights: EncoderWeights  # trainable copy when use_lora is False
    adapters: LoraAdapterSet | None
    head: BottleneckHead
    adam: AdamState
    stats: dict[str, ZStats]

    def params(self, use_lora: bool) -> dict[str, np.ndarray]:
        """Views onto the trainable arrays, keyed by leaf name (updated in place)."""
        out = {"head.down": self.head.down, "head.up": self.head.up}
        if use_lora:
            for (layer, t), (a, b) in self.adapters.factors.items():
                out[f"lora.{layer}.{t}.A"] = a
                out[f"lora.{layer}.{t}.B"] = b
        else:
            out.update(self.weights.params)
        return out


def train_epoch(state: TrainState, data: StudyData, cfg: TrainConfig, rng: np.random.Generator,
                schedule: Callable[[int], float] | None = None) -> tuple[float, int]:
    """One pass over shuffled contiguous batches; returns (mean loss, zero-variance rows).

    ``schedule(step)`` multiplies both learning rates (constant 1 by default).
    """
    weights = state.weights
    layer = weights.config.readout_layer
    shifts = delay_shifts(cfg.delays, data.tr)
    lora_scale = state.adapters.scale if state.adapters is not None else 1.0
    head_rate = cfg.learning_rate if cfg.head_learning_rate is None else cfg.head_learning_rate
    losses = []
    flagged = 0
    for sid, lo, hi in batch_plan(data, cfg.batch_trs, rng):
        p = leaves(weights, state.adapters, train_base=not cfg.use_lora, train_lora=cfg.use_lora)
        head = (Tensor(state.head.down, requires_grad=True), Tensor(state.head.up, requires_grad=True))
        p["head.down"], p["head.up"] = head
        pred = batch_prediction(p, weights, lora_scale, data.stories[sid], lo, hi, state.stats[sid], head, shifts,
                                layer, cfg.chunk)
        target = data.targets[sid][lo:hi]
        loss = spatial_corr_loss(target, pred)
        flagged += spatial_corr_value(target, pred.data)[1]
        if not np.isfinite(loss.data):
            raise gc.NonFiniteError(f"non-finite loss on {sid}[{lo}:{hi}] at step {state.adam.step}")
        grads = gc.backward(loss)
        params = state.params(cfg.use_lora)
        mult = 1.0 if schedule is None else schedule(state.adam.step)
        rates = {k: mult * (head_rate if k.startswith("head.") else cfg.learning_rate) for k in params}
        adam_step(params, {k: grads[p[k]] for k in params}, state.adam, rates)
        losses.append(float(loss.data))
    return float(np.mean(losses)), flagged


def training_loss(features: dict[str, np.ndarray], head: BottleneckHead, data: StudyData, cfg: TrainConfig
                  ) -> float:
    """Mean batch loss over the training stories, computed without a graph."""
    losses = []
    for sid in data.train:
        pred = design_matrix(features[sid], cfg.delays, data.tr) @ head.down @ head.up
        for lo, hi in batch_blocks(len(pred), cfg.batch_trs):
            losses.append(spatial_corr_value(data.targets[sid][lo:hi], pred[lo:hi])[0])
    return float(np.mean(losses))


@dataclass
class FinetuneResult:
    reports: list[EpochReport]
    best_epoch: int
    adapters: list[LoraAdapterSet | None]  # per epoch
    weights: list[EncoderWeights]  # per epoch (shared object when the base is frozen)
    heads: list[BottleneckHead]
    baseline: Evaluation

    @property
    def best_adapters(self) -> LoraAdapterSet | None:
        return self.adapters[self.best_epoch]

    @property
    def best_weights(self) -> EncoderWeights:
        return self.weights[self.best_epoch]

    @property
    def val_curve(self) -> list[float | None]:
        return [r.val_rho for r in self.reports]


def finetune(base: EncoderWeights, data: StudyData, cfg: TrainConfig = TrainConfig(), *,
             roi_mask: np.ndarray | None = None, out_dir: str | Path | None = None,
             log: Callable[[EpochReport], None] | None = None) -> FinetuneResult:
    """Fine-tune and evaluate every ``cfg.eval_every`` epochs.

    The loss only sees the ``roi_mask`` columns of the targets; evaluation
    always scores every column.
    """
    full_data = data
    train_data = data.restrict(roi_mask)
    layer = base.config.readout_layer
    base_sum = base.checksum()
    t0 = time.perf_counter()
    baseline = evaluate_epoch(base, None, full_data, cfg.cv, cfg.delays, layer)

    # initial head: truncated ridge weights fit on the loss targets
    feats0 = baseline.features
    if roi_mask is None:
        beta = baseline.fit.beta
    else:
        beta = fit_encoding(feats0, train_data.targets, data.train, cfg.cv, cfg.delays, data.tr).beta
    head = head_from_weights(beta, min(cfg.head_rank, *beta.shape))

    if cfg.use_lora:
        adapters = init_lora(base.config, cfg.lora_rank, cfg.lora_alpha, seed=cfg.seed, a_std=cfg.lora_a_std)
        weights = base
    else:
        adapters = None
        weights = base.copy()
        weights.frozen = False
    state = TrainState(weights, adapters, head, AdamState.for_params({}), zstats(feats0))
    state.adam = AdamState.for_params(state.params(cfg.use_lora))

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "epochs.jsonl").write_text("")

    rep0 = EpochReport(0, training_loss(feats0, head, train_data, cfg), baseline.mean, time.perf_counter() - t0)
    reports = [rep0]
    snap_adapters = [adapters.copy() if adapters is not None else None]
    snap_weights = [weights if cfg.use_lora else weights.copy()]
    snap_heads = [head.copy()]
    _emit(out, rep0, snap_adapters[0], snap_weights[0], snap_heads[0], cfg, log)

    rng = np.random.default_rng(cfg.seed)
    n_batches = len(batch_plan(train_data, cfg.batch_trs, np.random.default_rng(0)))
    total = cfg.epochs * n_batches
    schedule = None if cfg.use_lora else (lambda step: cosine_lr(1.0, step, total))
    for epoch in range(1, cfg.epochs + 1):
        t_start = time.perf_counter()
        loss, flagged = train_epoch(state, train_data, cfg, rng, schedule)
        val = None
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            ev = evaluate_epoch(state.weights, state.adapters, full_data, cfg.cv, cfg.delays, layer)
            val = ev.mean
            feats = ev.features
        else:
            feats = volume_features(state.weights, state.adapters, data.stories, data.train, layer)
        state.stats = zstats(feats)
        rep = EpochReport(epoch, loss, val, time.perf_counter() - t_start, flagged)
        reports.append(rep)
        snap_adapters.append(state.adapters.copy() if state.adapters is not None else None)
        snap_weights.append(state.weights if cfg.use_lora else state.weights.copy())
        snap_heads.append(state.head.copy())
        _emit(out, rep, snap_adapters[-1], snap_weights[-1], snap_heads[-1], cfg, log)

    if cfg.use_lora and base.checksum() != base_sum:
        raise RuntimeError("frozen encoder weights changed during LoRA training")
    best = select_best_epoch(reports)
    if out is not None:
        best_rep = reports[best]
        (out / "best.json").write_text(json.dumps({"epoch": best, "val_rho": best_rep.val_rho,
                                                   "config": cfg.to_dict()}, sort_keys=True, indent=1))
    return FinetuneResult(reports, best, snap_adapters, snap_weights, snap_heads, baseline)


def _emit(out: Path | None, rep: EpochReport, adapters, weights, head, cfg: TrainConfig, log) -> None:
    if log is not None:
        log(rep)
    if out is None:
        return
    with open(out / "epochs.jsonl", "a") as fh:
        fh.write(rep.to_json() + "\n")
    name = out / f"epoch{rep.epoch:03d}.bin"
    if adapters is not None:
        save_adapters(name, adapters, weights.config, head, {"epoch": rep.epoch})
    else:
        save_weights(name, weights, {"epoch": rep.epoch, "head_rank": head.rank})
        from . import container
        container.write(out / f"epoch{rep.epoch:03d}.head.bin", "head", {"down": head.down, "up": head.up},
                        {"epoch": rep.epoch})


def test_scores(result: FinetuneResult, data: StudyData, epoch: int | None = None,
                cv: ridge.CvConfig = ridge.CvConfig(), delays=DEFAULT_DELAYS) -> np.ndarray:
    """Per-voxel test-story correlation of a ridge model refit with features from ``epoch`` (default best)."""
    epoch = result.best_epoch if epoch is None else epoch
    return heldout_scores(result.weights[epoch], result.adapters[epoch], data, cv, delays)


def heldout_scores(weights: EncoderWeights, adapters: LoraAdapterSet | None, data: StudyData,
                   cv: ridge.CvConfig = ridge.CvConfig(), delays=DEFAULT_DELAYS) -> np.ndarray:
    feats = volume_features(weights, adapters, data.stories, list(data.train) + list(data.test))
    fit = fit_encoding(feats, data.targets, data.train, cv, delays, data.tr)
    return score_encoding(fit, feats, data.targets, data.test, delays, data.tr)


def finetune_full(base: EncoderWeights, data: StudyData, cfg: TrainConfig = TrainConfig(use_lora=False), **kw
                  ) -> FinetuneResult:
    """Baseline that updates every encoder weight with a cosine learning-rate schedule."""
    if cfg.use_lora:
        raise ValueError("finetune_full needs use_lora=False")
    return finetune(base, data, cfg, **kw)
