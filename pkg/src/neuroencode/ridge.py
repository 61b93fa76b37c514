"""Multi-target ridge regression on a shared SVD, chunked cross-validation and temporal scoring."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import container

DEFAULT_ALPHAS = tuple(np.logspace(0, 5, 10))


@dataclass(frozen=True)
class CvConfig:
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    n_folds: int = 5
    chunk_length: int = 20

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=float)
        if a.ndim != 1 or len(a) == 0 or np.any(a <= 0) or np.any(np.diff(a) <= 0):
            raise ValueError("alpha grid must be positive and strictly increasing")
        if self.chunk_length < 1 or self.n_folds < 2:
            raise ValueError("need chunk_length >= 1 and n_folds >= 2")


@dataclass
class RidgeFit:
    beta: np.ndarray  # (P', V)
    alphas: np.ndarray  # (V,)
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: np.ndarray
    dropped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    meta: dict = field(default_factory=dict)

    @property
    def n_features(self) -> int:
        return self.beta.shape[0]


def _per_target_alpha(alpha, n_targets: int) -> np.ndarray:
    a = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (n_targets,)).copy()
    if np.any(a < 0):
        raise ValueError("ridge penalty must be non-negative")
    return a


def svd_path(x: np.ndarray, y: np.ndarray, alphas: np.ndarray) -> np.ndarray:
    """``V diag(s / (s^2 + alpha_v)) U^T Y[:, v]`` for every target ``v`` from one SVD.

    Directions with (numerically) zero singular value get coefficient zero, so
    ``alpha = 0`` gives the minimum-norm least-squares solution.
    """
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    uty = u.T @ y
    tol = s.max(initial=0.0) * max(x.shape) * np.finfo(float).eps
    keep = s > tol
    denom = s[:, None] ** 2 + alphas[None, :]
    d = np.divide(s[:, None], denom, out=np.zeros_like(denom), where=keep[:, None] & (denom > 0))
    return vt.T @ (d * uty)


def fit_ridge(x: np.ndarray, y: np.ndarray, alpha, *, standardize: bool = False) -> RidgeFit:
    """Ridge weights for every column of ``y``.

    ``alpha`` is a scalar or one value per target. With ``standardize`` the
    columns of ``x`` are z-scored and ``y`` centred using these data; the
    statistics are stored for :func:`predict`.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"x {x.shape} and y {y.shape} disagree on the number of samples")
    if x.shape[0] < 2:
        raise ValueError("need at least two samples")
    alphas = _per_target_alpha(alpha, y.shape[1])
    dropped = ~np.any(x != 0.0, axis=0)
    if dropped.any():
        warnings.warn(f"dropping {int(dropped.sum())} all-zero design column(s)", RuntimeWarning, stacklevel=2)
    if standardize:
        x_mean = x.mean(axis=0)
        sd = x.std(axis=0)
        x_scale = np.where(sd > 0, sd, 1.0)
        y_mean = y.mean(axis=0)
    else:
        x_mean = np.zeros(x.shape[1])
        x_scale = np.ones(x.shape[1])
        y_mean = np.zeros(y.shape[1])
    xs = (x - x_mean) / x_scale
    beta = np.zeros((x.shape[1], y.shape[1]))
    live = ~dropped
    if live.any():
        beta[live] = svd_path(xs[:, live], y - y_mean, alphas)
    return RidgeFit(beta, alphas, x_mean, x_scale, y_mean, dropped)


def ridge_normal_equations(x: np.ndarray, y: np.ndarray, alpha: float) -> np.ndarray:
    """Reference solution ``(X^T X + alpha I)^{-1} X^T Y`` (independent of the SVD path)."""
    p = x.shape[1]
    return np.linalg.solve(x.T @ x + alpha * np.eye(p), x.T @ y)


def predict(fit: RidgeFit, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != fit.n_features:
        raise ValueError(f"design has {x.shape[-1]} columns, fit expects {fit.n_features}")
    return ((x - fit.x_mean) / fit.x_scale) @ fit.beta + fit.y_mean


def score_temporal(r: np.ndarray, r_hat: np.ndarray, *, return_flags: bool = False):
    """Pearson correlation over time for each column.

    Columns where either side has zero variance score 0; with
    ``return_flags`` a boolean mask of those columns is returned as well.
    """
    r = np.asarray(r, dtype=np.float64)
    r_hat = np.asarray(r_hat, dtype=np.float64)
    if r.shape != r_hat.shape:
        raise ValueError(f"shape mismatch {r.shape} vs {r_hat.shape}")
    if r.ndim == 1:
        r, r_hat = r[:, None], r_hat[:, None]
    if r.shape[0] < 3:
        raise ValueError("need at least 3 time points")
    a = r - r.mean(axis=0)
    b = r_hat - r_hat.mean(axis=0)
    na = np.sqrt((a * a).sum(axis=0))
    nb = np.sqrt((b * b).sum(axis=0))
    # relative threshold: constant columns leave rounding-level residue after centring
    tol = 1e-12 * np.sqrt(len(r))
    flat = (na <= tol * np.abs(r).max(axis=0)) | (nb <= tol * np.abs(r_hat).max(axis=0))
    denom = np.where(flat, 1.0, na * nb)
    rho = np.where(flat, 0.0, (a * b).sum(axis=0) / denom)
    if return_flags:
        return rho, flat
    return rho


def chunk_folds(n_rows: int, n_folds: int, chunk_length: int) -> list[np.ndarray]:
    """Held-out row indices per fold; each fold is a contiguous run of whole chunks."""
    n_chunks = -(-n_rows // chunk_length)
    if n_chunks < n_folds:
        raise ValueError(f"{n_rows} rows make {n_chunks} chunks of {chunk_length}, fewer than {n_folds} folds")
    chunk_of_row = np.arange(n_rows) // chunk_length
    fold_of_chunk = (np.arange(n_chunks) * n_folds) // n_chunks
    fold_of_row = fold_of_chunk[chunk_of_row]
    return [np.flatnonzero(fold_of_row == f) for f in range(n_folds)]


def cv_scores(x: np.ndarray, y: np.ndarray, cfg: CvConfig) -> np.ndarray:
    """Mean held-out temporal correlation, shape ``(n_alphas, V)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] < cfg.n_folds * cfg.chunk_length:
        raise ValueError(f"need at least {cfg.n_folds * cfg.chunk_length} rows for cross-validation")
    alphas = np.asarray(cfg.alphas, dtype=np.float64)
    folds = chunk_folds(x.shape[0], cfg.n_folds, cfg.chunk_length)
    total = np.zeros((len(alphas), y.shape[1]))
    for held in folds:
        train = np.ones(x.shape[0], dtype=bool)
        train[held] = False
        xt, yt = x[train], y[train]
        live = np.any(xt != 0.0, axis=0)
        u, s, vt = np.linalg.svd(xt[:, live], full_matrices=False)
        uty = u.T @ yt
        xh = x[held][:, live] @ vt.T
        for i, a in enumerate(alphas):
            pred = xh @ ((s / (s * s + a))[:, None] * uty)
            total[i] += score_temporal(y[held], pred)
    return total / len(folds)


def select_alphas(scores: np.ndarray, alphas, tol: float = 1e-12) -> np.ndarray:
    """Per column, the largest alpha whose score is within ``tol`` of the best."""
    alphas = np.asarray(alphas, dtype=np.float64)
    best = scores.max(axis=0)
    ok = scores >= best - tol
    idx = len(alphas) - 1 - np.argmax(ok[::-1], axis=0)
    return alphas[idx]


def cv_select_alpha(x: np.ndarray, y: np.ndarray, cfg: CvConfig = CvConfig()) -> np.ndarray:
    return select_alphas(cv_scores(x, y, cfg), cfg.alphas)


def fit_cv(x: np.ndarray, y: np.ndarray, cfg: CvConfig = CvConfig()) -> RidgeFit:
    """Cross-validate per-target alphas, then refit on all rows."""
    alphas = cv_select_alpha(x, y, cfg)
    fit = fit_ridge(x, y, alphas)
    fit.meta = {"alpha_grid": [float(a) for a in cfg.alphas], "n_folds": cfg.n_folds,
                "chunk_length": cfg.chunk_length, "n_rows": int(x.shape[0])}
    return fit


def save_fit(path, fit: RidgeFit, meta: dict | None = None) -> str:
    arrays = {"beta": fit.beta, "alphas": fit.alphas, "x_mean": fit.x_mean, "x_scale": fit.x_scale,
              "y_mean": fit.y_mean, "dropped": fit.dropped.astype(np.uint8)}
    return container.write(path, "ridge_fit", arrays, {**fit.meta, **(meta or {})})


def load_fit(path) -> RidgeFit:
    header, a = container.read(path, "ridge_fit")
    meta = {k: v for k, v in header.items() if k not in ("arrays", "kind")}
    return RidgeFit(a["beta"], a["alphas"], a["x_mean"], a["x_scale"], a["y_mean"], a["dropped"].astype(bool), meta)
