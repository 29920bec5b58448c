"""Class-conditional label noise: transition matrices, corruption, diagnostics.

A transition matrix is column-stochastic: ``phi[i, j] = P(noisy = i | clean = j)``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .ndcore import as_matrix
from .textpipe import LabeledDataset

log = logging.getLogger(__name__)

COLUMN_TOL = 1e-9


@dataclass(frozen=True)
class TransitionMatrix:
    phi: np.ndarray
    kind: str = "custom"
    p: float | None = None

    def __post_init__(self):
        phi = as_matrix(self.phi)
        if phi.shape[0] != phi.shape[1]:
            raise ValueError(f"transition matrix must be square, got {phi.shape}")
        if np.any(phi < 0):
            raise ValueError("transition matrix has negative entries")
        sums = phi.sum(axis=0)
        if np.any(np.abs(sums - 1.0) > COLUMN_TOL):
            raise ValueError(f"columns must sum to 1, got {sums}")
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)

    @property
    def k(self) -> int:
        return self.phi.shape[0]

    def flip_rate(self, prior=None) -> float:
        """Expected fraction of flipped labels under a class prior (uniform by default)."""
        prior = np.full(self.k, 1.0 / self.k) if prior is None else np.asarray(prior, float)
        return float(np.dot(1.0 - np.diag(self.phi), prior))


def _check_p(p, k):
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"noise level p must lie in [0, 1], got {p}")
    if k < 2:
        raise ValueError("need at least two classes")


def build_uniform_noise(k: int, p: float) -> TransitionMatrix:
    """(1 - p) I + (p / k) 11^T.

    Note the realised flip rate is p (1 - 1/k), not p: a "flip" may land on
    the original class.
    """
    _check_p(p, k)
    phi = (1.0 - p) * np.eye(k) + (p / k) * np.ones((k, k))
    return TransitionMatrix(phi, "uniform", p)


def build_random_noise(k: int, p: float, rng: np.random.Generator) -> TransitionMatrix:
    """(1 - p) I + p Delta, each column of Delta uniform on the simplex off its diagonal."""
    _check_p(p, k)
    delta = np.zeros((k, k))
    for j in range(k):
        e = rng.standard_exponential(k - 1)
        delta[np.arange(k) != j, j] = e / e.sum()
    phi = p * delta
    phi[np.diag_indices(k)] = 1.0 - p
    return TransitionMatrix(phi, "random", p)


def column_normalize(m) -> np.ndarray:
    m = as_matrix(m)
    sums = m.sum(axis=0)
    if np.any(sums == 0):
        raise ValueError("cannot normalize a zero column")
    return m / sums


def build_custom_noise(matrix) -> TransitionMatrix:
    m = as_matrix(matrix)
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"transition matrix must be square, got {m.shape}")
    if np.any(m < 0):
        raise ValueError("transition matrix has negative entries")
    sums = m.sum(axis=0)
    if np.any(sums == 0):
        raise ValueError("transition matrix has a zero column")
    if np.any(np.abs(sums - 1.0) > 0.01):
        warnings.warn(f"column sums {np.round(sums, 4).tolist()} renormalized to 1", stacklevel=2)
    return TransitionMatrix(m / sums, "custom")


def class_dependent_noise(keep) -> TransitionMatrix:
    """Per-class keep rates on the diagonal; each residue spread evenly over the other classes."""
    keep = np.asarray(keep, dtype=np.float64)
    k = keep.size
    if k < 2 or np.any((keep < 0) | (keep > 1)):
        raise ValueError("keep rates must lie in [0, 1] for at least two classes")
    m = np.tile((1.0 - keep) / (k - 1), (k, 1))
    m[np.diag_indices(k)] = keep
    return build_custom_noise(m)


def sample_noisy(labels, phi: TransitionMatrix, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw from column phi[:, y] with exactly one uniform per label."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= phi.k):
        raise ValueError(f"labels outside [0, {phi.k})")
    cdf = np.cumsum(phi.phi, axis=0)  # (k, k), column j is the CDF for clean class j
    u = rng.random(labels.size)
    col = cdf[:, labels]  # (k, n)
    noisy = (u[None, :] >= col).sum(axis=0)
    # guard against cdf[-1] < 1 by rounding
    return np.minimum(noisy, phi.k - 1)


def corrupt_labels(dataset: LabeledDataset, phi: TransitionMatrix, rng: np.random.Generator) -> LabeledDataset:
    if dataset.split == "test":
        raise ValueError("refusing to corrupt a test split")
    if dataset.k != phi.k:
        raise ValueError(f"dataset has {dataset.k} classes, transition matrix {phi.k}")
    return dataset.with_noisy(sample_noisy(dataset.labels, phi, rng))


def flip_fraction(clean, noisy) -> float:
    clean, noisy = np.asarray(clean), np.asarray(noisy)
    return float(np.mean(clean != noisy)) if clean.size else 0.0


def pearson(a, b) -> float:
    x = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(b, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError("pearson: shapes differ")
    if x.size < 2:
        raise ValueError("pearson: need at least two entries")
    x = x - x.mean()
    y = y - y.mean()
    sx, sy = np.sqrt(np.dot(x, x)), np.sqrt(np.dot(y, y))
    if sx == 0 or sy == 0:
        raise ValueError("pearson: constant input")
    return float(np.dot(x, y) / (sx * sy))


def frobenius_norm(m) -> float:
    return float(np.sqrt(np.sum(np.asarray(m, dtype=np.float64) ** 2)))


# ------------------------------------------------------------------- CSV

def save_matrix_csv(path, m) -> None:
    m = np.asarray(m, dtype=np.float64)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in m:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_matrix_csv(path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    rows.append([float(v) for v in line.split(",")])
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: non-numeric entry") from None
    return as_matrix(rows)


def load_transition_csv(path) -> TransitionMatrix:
    return TransitionMatrix(load_matrix_csv(path), "custom")
