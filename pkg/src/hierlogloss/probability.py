"""Log-loss, regret and divergences for categorical and Bernoulli assignments.

All quantities are in nats. The exact routines raise ``SupportMismatch``
when an assignment puts zero mass on an outcome the true distribution can
produce; only :func:`empirical_report` clamps, because it runs on real data.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import LabelOutOfRange, LengthMismatch, NotNormalized, SupportMismatch

NORMALIZATION_TOL = 1e-9
CLAMP_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class Categorical:
    """Probability vector over ``K >= 2`` classes.

    Inputs whose sum is within ``1e-9`` of one are renormalized exactly;
    anything further off is rejected.
    """

    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float64).reshape(-1)
        if p.size < 2:
            raise LengthMismatch(f"need at least 2 classes, got {p.size}")
        if not np.all(np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
            raise NotNormalized("entries must lie in [0, 1]")
        total = p.sum()
        if abs(total - 1.0) > NORMALIZATION_TOL:
            raise NotNormalized(f"entries sum to {total!r}")
        p = p / total
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    def __len__(self):
        return self.probs.size

    def __array__(self, dtype=None, copy=None):
        return self.probs if dtype is None else self.probs.astype(dtype)


@dataclass(frozen=True)
class LossReport:
    log_loss: float
    regret: Optional[float]
    zero_one_error: float


def _vec(p) -> np.ndarray:
    if isinstance(p, Categorical):
        return p.probs
    return np.asarray(p, dtype=np.float64)


def _check_pair(p, q):
    p, q = _vec(p), _vec(q)
    if p.shape != q.shape:
        raise LengthMismatch(f"lengths differ: {p.shape} vs {q.shape}")
    if np.any((p > 0) & (q <= 0)):
        raise SupportMismatch("q assigns zero mass where p is positive")
    return p, q


def cross_entropy(p, q) -> float:
    """Expected ``log 1/q(Y)`` under ``Y ~ p``, with ``0 log(1/0) = 0``."""
    p, q = _check_pair(p, q)
    m = p > 0
    return float(-np.sum(p[m] * np.log(q[m])))


def entropy(p) -> float:
    p = _vec(p)
    m = p > 0
    return float(-np.sum(p[m] * np.log(p[m])))


def kl_divergence(p, q) -> float:
    """Regret of ``q`` against ``p``, i.e. ``D(p || q)``.

    Summed term by term as ``p log(p/q)``, which equals
    ``cross_entropy(p, q) - cross_entropy(p, p)`` without the cancellation.
    """
    p, q = _check_pair(p, q)
    m = p > 0
    return float(np.sum(p[m] * np.log(p[m] / q[m])))


def _bernoulli(p) -> float:
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"Bernoulli parameter {p!r} outside [0, 1]")
    return p


def binary_entropy(p) -> float:
    p = _bernoulli(p)
    h = 0.0
    if p > 0:
        h -= p * np.log(p)
    if p < 1:
        h -= (1 - p) * np.log1p(-p)
    return float(h)


def binary_log_loss(p, q) -> float:
    """``p log 1/q + (1-p) log 1/(1-q)``."""
    p, q = _bernoulli(p), _bernoulli(q)
    if (p > 0 and q == 0) or (p < 1 and q == 1):
        raise SupportMismatch(f"q={q!r} cannot explain p={p!r}")
    loss = 0.0
    if p > 0:
        loss -= p * np.log(q)
    if p < 1:
        loss -= (1 - p) * np.log1p(-q)
    return float(loss)


def binary_divergence(p, q) -> float:
    """``d(p || q)`` between ``Ber(p)`` and ``Ber(q)``."""
    p, q = _bernoulli(p), _bernoulli(q)
    if (p > 0 and q == 0) or (p < 1 and q == 1):
        raise SupportMismatch(f"q={q!r} cannot explain p={p!r}")
    d = 0.0
    if p > 0:
        d += p * np.log(p / q)
    if p < 1:
        d += (1 - p) * np.log((1 - p) / (1 - q))
    return float(d)


def binary_divergence_array(p, q) -> np.ndarray:
    """Elementwise ``d(p || q)`` for arrays; same conventions as the scalar."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if np.any((p > 0) & (q <= 0)) or np.any((p < 1) & (q >= 1)):
        raise SupportMismatch("q cannot explain p for some entries")
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0) / np.where(p > 0, q, 1.0)), 0.0)
        b = np.where(
            p < 1,
            (1 - p) * np.log(np.where(p < 1, 1 - p, 1.0) / np.where(p < 1, 1 - q, 1.0)),
            0.0,
        )
    return a + b


def kl_divergence_rows(p, q) -> np.ndarray:
    """Row-wise ``D(p_n || q_n)`` for two ``N x K`` arrays."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise LengthMismatch(f"shapes differ: {p.shape} vs {q.shape}")
    if np.any((p > 0) & (q <= 0)):
        raise SupportMismatch("q assigns zero mass where p is positive")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0) / np.where(p > 0, q, 1.0)), 0.0)
    return terms.sum(axis=-1)


def _rows(x) -> np.ndarray:
    if isinstance(x, np.ndarray):
        return x.astype(np.float64, copy=False)
    return np.asarray([_vec(row) for row in x], dtype=np.float64)


def empirical_report(
    q_assignments: Sequence, labels: Sequence[int], true_posteriors: Optional[Sequence] = None
) -> LossReport:
    """Average log-loss, regret and zero-one error of a batch of predictions.

    Probabilities of the realized labels are clamped below at ``1e-12`` so
    the result is always finite. Regret is the log-loss minus the log-loss of
    the true posteriors on the same samples, so it can be negative on a
    finite sample.
    """
    q = _rows(q_assignments)
    y = np.asarray(labels)
    if q.ndim != 2 or q.shape[0] != y.shape[0]:
        raise LengthMismatch(f"{q.shape[0] if q.ndim else 0} assignments vs {y.shape[0]} labels")
    n, k = q.shape
    if n == 0:
        raise LengthMismatch("empty batch")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise LabelOutOfRange("labels must be integers")
        y = y.astype(np.int64)
    if np.any(y < 0) or np.any(y >= k):
        raise LabelOutOfRange(f"labels must lie in 0..{k - 1}")
    rows = np.arange(n)
    log_loss = float(np.mean(-np.log(np.maximum(q[rows, y], CLAMP_EPS))))
    # np.argmax returns the first maximal index: ties go to the lowest class
    error = float(np.mean(np.argmax(q, axis=1) != y))
    regret = None
    if true_posteriors is not None:
        p = _rows(true_posteriors)
        if p.shape != q.shape:
            raise LengthMismatch(f"posteriors {p.shape} vs assignments {q.shape}")
        optimal = float(np.mean(-np.log(np.maximum(p[rows, y], CLAMP_EPS))))
        regret = log_loss - optimal
    return LossReport(log_loss=log_loss, regret=regret, zero_one_error=error)
