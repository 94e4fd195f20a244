"""Datasets: CSV ingestion, standardization and seeded synthetic generators."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

KINDS = ("binary", "continuous")


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray | None = None
    kind: str = "continuous"
    columns: list[str] = field(default_factory=list)
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    truth: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.labels is not None and len(self.labels) != len(self.features):
            raise DataError("label count differs from record count")
        if not self.columns:
            self.columns = [f"x{j}" for j in range(self.features.shape[1])]

    @property
    def n(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def standardized(self) -> "Dataset":
        """Per-column z-scores; the statistics are kept for inverse_transform."""
        mean = self.features.mean(axis=0)
        std = self.features.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        return Dataset((self.features - mean) / std, self.labels, self.kind, list(self.columns),
                       mean, std, dict(self.truth))

    def inverse_transform(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.mean is None:
            return x.copy()
        return x * self.std + self.mean

    def subset(self, idx) -> "Dataset":
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.features[idx], labels, self.kind, list(self.columns),
                       self.mean, self.std, dict(self.truth))


def _parse_rows(text: str, source: str, header: bool):
    rows = list(csv.reader(io.StringIO(text)))
    rows = [r for r in rows if r and any(cell.strip() for cell in r)]
    names = None
    if header:
        if not rows:
            raise DataError(f"{source}: empty file")
        names, rows = [c.strip() for c in rows[0]], rows[1:]
    if not rows:
        raise DataError(f"{source}: no data rows")
    width = len(rows[0])
    out = np.empty((len(rows), width))
    offset = 2 if header else 1
    for i, row in enumerate(rows):
        if len(row) != width:
            raise DataError(f"{source}: row {i + offset} has {len(row)} fields, expected {width}")
        for j, cell in enumerate(row):
            try:
                out[i, j] = float(cell)
            except ValueError:
                raise DataError(f"{source}: row {i + offset}, column {j + 1}: "
                                f"not a number: {cell!r}") from None
            if not np.isfinite(out[i, j]):
                raise DataError(f"{source}: row {i + offset}, column {j + 1}: non-finite value")
    return names, out


def load_csv(path, kind: str = "continuous", labeled: bool = False, header: bool = False,
             standardize: bool = True) -> Dataset:
    """Read a rectangular numeric CSV.

    With `labeled`, the final column holds integer class labels. Continuous
    features are z-scored unless `standardize` is False.
    """
    if kind not in KINDS:
        raise ConfigError(f"kind must be one of {KINDS}, got {kind!r}")
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    names, values = _parse_rows(text, str(path), header)
    labels = None
    if labeled:
        if values.shape[1] < 2:
            raise DataError(f"{path}: labeled file needs at least one feature column")
        raw = values[:, -1]
        if np.any(raw != np.round(raw)) or np.any(raw < 0):
            bad = int(np.argmax((raw != np.round(raw)) | (raw < 0)))
            raise DataError(f"{path}: row {bad + 1 + bool(header)}: label {raw[bad]} is not a "
                            "non-negative integer")
        labels = raw.astype(int)
        values = values[:, :-1]
        if names:
            names = names[:-1]
    if kind == "binary":
        bad = np.argwhere((values != 0) & (values != 1))
        if len(bad):
            r, c = bad[0]
            raise DataError(f"{path}: row {r + 1 + bool(header)}, column {c + 1}: "
                            f"{values[r, c]} is not binary")
    ds = Dataset(values, labels, kind, names or [])
    if kind == "continuous" and standardize:
        ds = ds.standardized()
    return ds


def write_csv(path, rows, header=None, fmt=repr):
    """Write rows with a fixed float format so output is byte-reproducible."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(header)
        for row in rows:
            w.writerow([fmt(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def bernoulli_product(p, n: int, seed: int = 0) -> Dataset:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or np.any((p < 0) | (p > 1)):
        raise ConfigError("bernoulli_product needs a vector of probabilities in [0, 1]")
    rng = np.random.default_rng(seed)
    x = (rng.random((int(n), len(p))) < p).astype(np.float64)
    return Dataset(x, kind="binary", truth={"p": p.copy()})


def gaussian_mixture(means, covs, weights, n: int, seed: int = 0) -> Dataset:
    """Records from a Gaussian mixture; labels are the component indices."""
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    covs = np.asarray(covs, dtype=np.float64)
    if covs.ndim == 2:
        covs = covs[None]
    weights = np.asarray(weights, dtype=np.float64)
    k, d = means.shape
    if covs.shape != (k, d, d) or weights.shape != (k,):
        raise ConfigError("means, covs and weights disagree on component count / dimension")
    if np.any(weights < 0) or not np.isclose(weights.sum(), 1.0):
        raise ConfigError("mixture weights must be non-negative and sum to 1")
    rng = np.random.default_rng(seed)
    comp = rng.choice(k, size=int(n), p=weights)
    chol = np.linalg.cholesky(covs)
    z = rng.standard_normal((int(n), d))
    x = means[comp] + np.einsum("nij,nj->ni", chol[comp], z)
    return Dataset(x, comp.astype(int), "continuous",
                   truth={"means": means, "covs": covs, "weights": weights})


def two_class_blobs(n: int, dim: int = 2, separation: float = 4.0, scale: float = 1.0,
                    seed: int = 0) -> Dataset:
    """Two isotropic Gaussian classes at -/+ separation/2 along the diagonal."""
    direction = np.ones(dim) / np.sqrt(dim)
    means = np.stack([-0.5 * separation * direction, 0.5 * separation * direction])
    covs = np.stack([scale ** 2 * np.eye(dim)] * 2)
    ds = gaussian_mixture(means, covs, np.array([0.5, 0.5]), n, seed)
    ds.truth["separation"] = separation
    return ds


def correlated_gaussian(n: int, dim: int = 16, noise: float = 0.1, seed: int = 0) -> Dataset:
    """Records driven by one shared factor: x = z * 1 + noise * e."""
    cov = np.ones((dim, dim)) + noise ** 2 * np.eye(dim)
    return gaussian_mixture(np.zeros((1, dim)), cov[None], np.array([1.0]), n, seed)


GENERATORS = {
    "bernoulli_product": bernoulli_product,
    "gaussian_mixture": gaussian_mixture,
    "two_class_blobs": two_class_blobs,
    "correlated_gaussian": correlated_gaussian,
}


def generate(name: str, **kwargs) -> Dataset:
    try:
        fn = GENERATORS[name]
    except KeyError:
        raise ConfigError(f"unknown generator {name!r}; choose from {sorted(GENERATORS)}") from None
    return fn(**kwargs)
