"""Fidelity and utility metrics for synthetic records."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError, DataError
from .trainer import TrainConfig


def dimension_probs(m) -> np.ndarray:
    """Per-column success rate of a binary record matrix."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] == 0:
        raise ContractError("dimension_probs needs a non-empty 2-d matrix")
    return m.mean(axis=0)


def binarize(x, threshold: float = 0.5) -> np.ndarray:
    """1 where x > threshold, else 0 (ties go to 0)."""
    if not np.isfinite(threshold):
        raise ContractError("threshold must be finite")
    return (np.asarray(x, dtype=np.float64) > threshold).astype(np.float64)


def bernoulli_binarize(x, rng: np.random.Generator) -> np.ndarray:
    """Treat clipped outputs as success probabilities and draw each entry."""
    p = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return (rng.random(p.shape) < p).astype(np.float64)


def check_binary(m, what: str = "matrix") -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    bad = np.argwhere((m != 0.0) & (m != 1.0))
    if len(bad):
        r, c = bad[0]
        raise DataError(f"{what} is not binary: entry ({r}, {c}) = {m[r, c]}")
    return m


def pearson(a, b) -> float | None:
    """Pearson correlation, or None when either vector is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float(da @ da) * float(db @ db))
    if denom == 0.0:
        return None
    return float(np.clip((da @ db) / denom, -1.0, 1.0))


@dataclass
class MetricsReport:
    dim_probs_real: np.ndarray
    dim_probs_synth: np.ndarray
    rho: float | None
    sae: float
    rmse: float

    def rows(self) -> list[tuple[str, str]]:
        rho = "NA" if self.rho is None else repr(self.rho)
        return [("rho", rho), ("sae", repr(self.sae)), ("rmse", repr(self.rmse))]

    def summary(self) -> str:
        rho = "undefined (constant probabilities)" if self.rho is None else f"{self.rho:.4f}"
        return (f"features={len(self.dim_probs_real)} rho={rho} "
                f"SAE={self.sae:.4f} RMSE={self.rmse:.4f}")


def compare_probs(p_real, p_synth) -> MetricsReport:
    p_real = np.asarray(p_real, dtype=np.float64)
    p_synth = np.asarray(p_synth, dtype=np.float64)
    if p_real.shape != p_synth.shape:
        raise ContractError(f"feature counts differ: {p_real.shape} vs {p_synth.shape}")
    diff = p_real - p_synth
    return MetricsReport(
        dim_probs_real=p_real,
        dim_probs_synth=p_synth,
        rho=pearson(p_real, p_synth),
        sae=float(np.sum(np.abs(diff))),
        rmse=float(np.sqrt(np.sum(diff * diff) / len(diff))),
    )


def eval_binary(real, synth) -> MetricsReport:
    real = check_binary(real, "real data")
    synth = check_binary(synth, "synthetic data")
    if real.shape[1] != synth.shape[1]:
        raise ContractError(f"feature counts differ: {real.shape[1]} vs {synth.shape[1]}")
    return compare_probs(dimension_probs(real), dimension_probs(synth))


def normal_reference_bandwidth(values) -> float:
    """1.06 * std * n**(-1/5); a constant sample falls back to std = 1."""
    values = np.asarray(values, dtype=np.float64)
    sd = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    if sd == 0.0:
        sd = 1.0
    return 1.06 * sd * len(values) ** (-0.2)


def kde(values, bandwidth="auto", grid=None) -> np.ndarray:
    """Gaussian kernel density of `values` evaluated on `grid`."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if len(values) == 0:
        raise ContractError("kde needs at least one value")
    h = normal_reference_bandwidth(values) if bandwidth == "auto" else float(bandwidth)
    if not h > 0:
        raise ContractError(f"bandwidth must be positive, got {h}")
    grid = np.asarray(grid, dtype=np.float64)
    u = (grid[..., None] - values) / h
    return np.exp(-0.5 * u * u).sum(axis=-1) / (len(values) * h * math.sqrt(2.0 * math.pi))


def kde_curves(real, synth, points: int = 200, bandwidth="auto"):
    """Per-feature (grid, density_real, density_synth) over the pooled range."""
    real = np.atleast_2d(np.asarray(real, dtype=np.float64))
    synth = np.atleast_2d(np.asarray(synth, dtype=np.float64))
    curves = []
    for j in range(real.shape[1]):
        lo = min(real[:, j].min(), synth[:, j].min())
        hi = max(real[:, j].max(), synth[:, j].max())
        pad = 0.1 * (hi - lo) if hi > lo else 1.0
        grid = np.linspace(lo - pad, hi + pad, points)
        curves.append((grid, kde(real[:, j], bandwidth, grid), kde(synth[:, j], bandwidth, grid)))
    return curves


def auc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic; ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ContractError("scores and labels differ in length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("auc needs both classes present")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def fit_logistic(X, y, steps: int = 400, lr: float = 0.05, seed: int = 0):
    """Full-batch logistic regression on clean records, trained with Adam."""
    from .guidance import train_classifier

    cfg = TrainConfig(lr=lr, batch_size=len(X), max_steps=steps, seed=seed)
    return train_classifier(X, y, None, cfg, kind="logistic", time_conditioned=False,
                            num_classes=2)


def augmentation_curve(real_train, synth_pool, real_test, step: int, max_synth: int | None = None,
                       steps: int = 400, lr: float = 0.05, seed: int = 0) -> list[tuple[int, float]]:
    """Test AUC of logistic regression as synthetic rows are added to the
    real training set in increments of `step`.

    Each of the data arguments is an (X, y) pair with binary labels.
    """
    if step < 1:
        raise ContractError("step must be >= 1")
    X_real, y_real = (np.asarray(a) for a in real_train)
    X_syn, y_syn = (np.asarray(a) for a in synth_pool)
    X_test, y_test = (np.asarray(a) for a in real_test)
    limit = len(X_syn) if max_synth is None else min(max_synth, len(X_syn))
    curve = []
    for n in range(0, limit + 1, step):
        X = np.concatenate([X_real, X_syn[:n]])
        y = np.concatenate([y_real, y_syn[:n]]).astype(int)
        clf = fit_logistic(X, y, steps=steps, lr=lr, seed=seed)
        curve.append((n, auc(clf.predict_proba(X_test)[:, 1], y_test)))
    return curve
