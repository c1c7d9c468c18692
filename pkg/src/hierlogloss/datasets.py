"""Synthetic Gaussian mixtures with exact posteriors, MNIST IDX files, dataset files."""
from __future__ import annotations

import gzip
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .container import header_int, read_container, write_container
from .errors import BadMagic, CountMismatch, HeaderMismatch, NonPDCovariance, TruncatedFile

DATASET_MAGIC = "hierlogloss-dataset v1"
IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Features with a trailing constant-1 column, integer labels, optional exact posteriors."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    posteriors: Optional[np.ndarray] = None
    meta: Dict[str, str] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ValueError(f"features {X.shape} and labels {y.shape} disagree")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in 0..{self.num_classes - 1}")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        if self.posteriors is not None:
            P = np.asarray(self.posteriors, dtype=np.float64)
            if P.shape != (X.shape[0], self.num_classes):
                raise ValueError(f"posteriors {P.shape} do not match {X.shape[0]} x {self.num_classes}")
            object.__setattr__(self, "posteriors", P)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        """Feature dimension without the intercept column."""
        return self.features.shape[1] - 1

    @property
    def raw_features(self) -> np.ndarray:
        return self.features[:, :-1]


def with_intercept(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return np.column_stack([X, np.ones(X.shape[0])])


# Gaussian mixtures


@dataclass(frozen=True, eq=False)
class GaussianMixtureSpec:
    """Equiprobable classes with ``X | Y=i ~ N(means[i], sigma^2 I + alpha_scale A_i^T A_i)``.

    Scenario ``"A"`` has no ``factors`` (isotropic, shared covariance).
    """

    means: np.ndarray
    scenario: str
    sigma: float
    alpha_scale: float = 0.1
    factors: Optional[np.ndarray] = None
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in ("A", "B"):
            raise ValueError(f"scenario must be 'A' or 'B', got {self.scenario!r}")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        means = np.asarray(self.means, dtype=np.float64)
        object.__setattr__(self, "means", means)
        if self.scenario == "B":
            if self.factors is None:
                raise ValueError("scenario B needs covariance factors")
            object.__setattr__(self, "factors", np.asarray(self.factors, dtype=np.float64))
        elif self.factors is not None:
            raise ValueError("scenario A takes no covariance factors")
        chols = []
        for i in range(means.shape[0]):
            try:
                chols.append(np.linalg.cholesky(self.covariance(i)))
            except np.linalg.LinAlgError as exc:
                raise NonPDCovariance(f"class {i} covariance is not positive definite") from exc
        object.__setattr__(self, "_chols", tuple(chols))

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def covariance(self, i: int) -> np.ndarray:
        cov = self.sigma**2 * np.eye(self.dim)
        if self.scenario == "B":
            A = self.factors[i]
            cov = cov + self.alpha_scale * A.T @ A
        return cov

    def cholesky(self, i: int) -> np.ndarray:
        return self._chols[i]

    def with_sigma(self, sigma: float) -> "GaussianMixtureSpec":
        return GaussianMixtureSpec(self.means, self.scenario, sigma, self.alpha_scale, self.factors, self.seed)

    def to_json(self) -> str:
        doc = {
            "scenario": self.scenario,
            "classes": self.num_classes,
            "dim": self.dim,
            "sigma": self.sigma,
            "alpha_scale": self.alpha_scale,
            "seed": self.seed,
            "means": self.means.tolist(),
            "factors": None if self.factors is None else self.factors.tolist(),
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GaussianMixtureSpec":
        doc = json.loads(text)
        return cls(doc["means"], doc["scenario"], doc["sigma"], doc["alpha_scale"], doc["factors"], doc["seed"])

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def make_mixture_spec(
    num_classes: int, dim: int, scenario: str, sigma: float, alpha_scale: float = 0.1, seed: int = 0
) -> GaussianMixtureSpec:
    """Draw class means (and scenario-B factors) with i.i.d. standard normal entries."""
    rng = np.random.default_rng([seed, 0])
    means = rng.normal(size=(num_classes, dim))
    factors = rng.normal(size=(num_classes, dim, dim)) if scenario == "B" else None
    return GaussianMixtureSpec(means, scenario, sigma, alpha_scale, factors, seed)


def bayes_log_posterior(spec: GaussianMixtureSpec, x) -> np.ndarray:
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != spec.dim:
        raise ValueError(f"expected {spec.dim} features (no intercept), got {X.shape[1]}")
    logp = np.empty((X.shape[0], spec.num_classes))
    for i in range(spec.num_classes):
        L = spec.cholesky(i)
        white = solve_triangular(L, (X - spec.means[i]).T, lower=True)
        logp[:, i] = -0.5 * np.sum(white**2, axis=0) - np.sum(np.log(np.diag(L)))
    logp -= logsumexp(logp, axis=1, keepdims=True)
    return logp[0] if single else logp


def bayes_posterior(spec: GaussianMixtureSpec, x) -> np.ndarray:
    """Exact ``P(Y | X=x)`` under uniform priors; ``x`` excludes the intercept."""
    return np.exp(bayes_log_posterior(spec, x))


def sample_mixture(spec: GaussianMixtureSpec, n: int, stream: int = 0) -> LabeledDataset:
    """Draw ``n`` labeled samples; ``stream`` separates e.g. train (0) from test (1)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng([spec.seed, 1, stream])
    y = rng.integers(0, spec.num_classes, size=n)
    z = rng.normal(size=(n, spec.dim))
    X = np.empty((n, spec.dim))
    for i in range(spec.num_classes):
        m = y == i
        X[m] = spec.means[i] + z[m] @ spec.cholesky(i).T
    P = bayes_posterior(spec, X)
    meta = {"spec_digest": spec.digest(), "stream": str(stream)}
    return LabeledDataset(with_intercept(X), y, spec.num_classes, P, meta)


def expected_bayes_error(spec: GaussianMixtureSpec, n: int = 20000, stream: int = 99) -> float:
    """Monte-Carlo estimate of ``1 - E max_y P(y|X)``."""
    return float(np.mean(1.0 - sample_mixture(spec, n, stream).posteriors.max(axis=1)))


def calibrate_sigma(
    base: GaussianMixtureSpec, target_error: float = 0.25, n: int = 20000, iters: int = 40
) -> GaussianMixtureSpec:
    """Bisect ``sigma`` (log scale) so the pilot Bayes error hits ``target_error``.

    The pilot draw reuses one random stream, so the error is a smooth
    function of sigma and bisection is deterministic.
    """
    lo, hi = np.log(1e-3), np.log(1e3)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if expected_bayes_error(base.with_sigma(float(np.exp(mid))), n) < target_error:
            lo = mid
        else:
            hi = mid
    return base.with_sigma(float(np.exp(0.5 * (lo + hi))))


# MNIST IDX


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise TruncatedFile(f"{path}: header is incomplete")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise BadMagic(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(raw) < 4 + 4 * ndim:
        raise TruncatedFile(f"{path}: header is incomplete")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    body = raw[4 + 4 * ndim :]
    count = int(np.prod(dims))
    if len(body) < count:
        raise TruncatedFile(f"{path}: expected {count} bytes of data, found {len(body)}")
    return np.frombuffer(body[:count], dtype=np.uint8).reshape(dims)


def load_mnist_idx(images_path, labels_path, crop: int = 4) -> LabeledDataset:
    """Images scaled to [0, 1], ``crop`` pixels removed from every side, flattened row-major."""
    images = _read_idx(images_path, IDX_IMAGES, 3)
    labels = _read_idx(labels_path, IDX_LABELS, 1)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatch(f"{images.shape[0]} images but {labels.shape[0]} labels")
    n, rows, cols = images.shape
    if crop < 0 or 2 * crop >= min(rows, cols):
        raise ValueError(f"crop {crop} does not fit {rows}x{cols} images")
    images = images[:, crop : rows - crop, crop : cols - crop]
    X = images.reshape(n, -1).astype(np.float64) / 255.0
    k = max(10, int(labels.max()) + 1) if n else 10
    return LabeledDataset(with_intercept(X), labels.astype(np.int64), k, None, {"crop": str(crop)})


def find_mnist_files(directory, split: str):
    """Locate the standard ``{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]`` pair."""
    prefix = {"train": "train", "test": "t10k"}[split]
    directory = Path(directory)
    found = []
    for stem in (f"{prefix}-images-idx3-ubyte", f"{prefix}-labels-idx1-ubyte"):
        for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
            if (directory / name).exists():
                found.append(directory / name)
                break
        else:
            return None
    return tuple(found)


# dataset container


def save_dataset(path, data: LabeledDataset) -> None:
    header = {
        "n": len(data),
        "dim": data.dim,
        "classes": data.num_classes,
        "posteriors": int(data.posteriors is not None),
    }
    for key, value in sorted(data.meta.items()):
        header[f"meta.{key}"] = value
    arrays = [data.features, data.labels.astype(np.float64)]
    if data.posteriors is not None:
        arrays.append(data.posteriors)
    write_container(path, DATASET_MAGIC, header, arrays)


def load_dataset(path) -> LabeledDataset:
    header, payload = read_container(path, DATASET_MAGIC)
    n = header_int(header, "n", path)
    d = header_int(header, "dim", path)
    k = header_int(header, "classes", path)
    has_post = header_int(header, "posteriors", path)
    expected = n * (d + 1) + n + (n * k if has_post else 0)
    if payload.size != expected:
        raise HeaderMismatch(f"{path}: header implies {expected} values, payload holds {payload.size}")
    X = payload[: n * (d + 1)].reshape(n, d + 1)
    y = payload[n * (d + 1) : n * (d + 2)]
    if not np.all(y == np.round(y)) or (n and (y.min() < 0 or y.max() >= k)):
        raise HeaderMismatch(f"{path}: label block is not a valid class index vector")
    P = payload[n * (d + 2) :].reshape(n, k) if has_post else None
    meta = {key[5:]: value for key, value in header.items() if key.startswith("meta.")}
    return LabeledDataset(X, y.astype(np.int64), k, P, meta)
