"""Shared helpers for the test-suite."""
import time

import numpy as np

from neuroencode import encoder as enc
from neuroencode import finetune as ft
from neuroencode import gradcore as gc
from neuroencode import ridge
from neuroencode import synthdata as sd

TINY_ENCODER = enc.EncoderConfig(n_layers=3, d_model=8, n_heads=2, d_ff=16, sample_rate=400, frame_size=80,
                                 frame_stride=80, window_s=2.0, readout_layer=3, seed=3)
TINY_DATA = sd.DatasetConfig(n_stories=5, story_s=40.0, n_subjects=2, n_voxels=24, n_ac=6, noise_sigma=0.5,
                             subspace_dim=4, teacher=sd.TeacherSpec(encoder=TINY_ENCODER, layers=(2,),
                                                                    readout_layer=3, ac_layer=1))
TINY_CV = ridge.CvConfig(alphas=(1.0, 10.0, 100.0, 1000.0), n_folds=4, chunk_length=10)


def max_rel_err(analytic, numeric) -> float:
    """``max |a - n| / max |n|``: gradient error relative to the gradient's scale."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-300)
    return float(np.abs(analytic - numeric).max() / scale)


def check_op_grad(build, arrays, step=1e-5, seed=0):
    """Compare the gradient of ``sum(w * build(*tensors))`` (random fixed ``w``) with finite differences.

    Returns the worst relative error over all inputs.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=float) for a in arrays]
    out_shape = build(*[gc.Tensor(a) for a in arrays]).shape
    w = rng.uniform(-1, 1, out_shape)

    def value():
        return float((build(*[gc.Tensor(a) for a in arrays]).data * w).sum())

    leaves = [gc.Tensor(a, requires_grad=True) for a in arrays]
    y = build(*leaves)
    grads = gc.backward(gc.sum(gc.mul(y, gc.Tensor(w))))
    worst = 0.0
    for leaf, arr in zip(leaves, arrays):
        num = gc.numerical_grad(value, arr, step)
        worst = max(worst, max_rel_err(grads[leaf], num))
    return worst


def tiny_train(**kw):
    base = dict(learning_rate=3e-3, head_learning_rate=1e-3, epochs=2, batch_trs=10, head_rank=8, cv=TINY_CV,
                seed=0)
    return ft.TrainConfig(**{**base, **kw})


ACCEPTANCE: list[str] = []


class Criterion:
    """Times a block and records one pass/fail line for the terminal summary."""

    def __init__(self, number: int, name: str, budget_s: float):
        self.number, self.name, self.budget_s = number, name, budget_s
        self.detail = ""

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.t0
        ok = exc_type is None
        status = "PASS" if ok else "FAIL"
        if ok and elapsed > self.budget_s:
            status = "FAIL"
            self.detail += f" (over the {self.budget_s:.0f}s budget)"
        if exc_type is AssertionError and not self.detail:
            self.detail = str(exc).splitlines()[0]
        ACCEPTANCE.append(f"[{status}] criterion {self.number} {self.name}: {self.detail.strip()} [{elapsed:.1f}s]")
        if ok and status == "FAIL":
            raise AssertionError(f"criterion {self.number} took {elapsed:.1f}s, budget {self.budget_s:.0f}s")
        return False
