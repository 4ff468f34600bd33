"""Elementary speaker-vector operations.

Vectors are plain 1-D numpy arrays; all arithmetic here is float64
regardless of the input dtype. Batch variants accept 2-D arrays with one
vector per row.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateVector, EmptyInput, ShapeError

VECTOR_DIM = 512

_NORM_FLOOR = 1e-12
_STD_FLOOR = 1e-9


def as_vector(v, dim=None):
    """Validate and return ``v`` as a finite float64 1-D array."""
    a = np.asarray(v, dtype=np.float64)
    if a.ndim != 1:
        raise ShapeError(f"expected a 1-D vector, got shape {a.shape}")
    if dim is not None and a.shape[0] != dim:
        raise ShapeError(f"expected dimension {dim}, got {a.shape[0]}")
    if not np.all(np.isfinite(a)):
        raise DegenerateVector("vector contains non-finite entries")
    return a


def cosine(a, b) -> float:
    """Cosine similarity of two vectors; inputs need not be unit-norm."""
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na <= _NORM_FLOOR or nb <= _NORM_FLOOR:
        raise DegenerateVector("cosine of a zero-norm vector is undefined")
    return float(np.dot(a, b) / (na * nb))


def euclidean(a, b) -> float:
    """Euclidean distance between two equally sized vectors."""
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(np.linalg.norm(a - b))


def mvn(v):
    """Normalize a vector to zero mean and unit standard deviation.

    The standard deviation uses the population convention (divisor D).
    Constant vectors have no spread to normalize and are rejected.
    """
    a = as_vector(v)
    mean = a.mean()
    std = a.std()
    if std <= _STD_FLOOR:
        raise DegenerateVector("constant vector cannot be mean-variance normalized")
    return (a - mean) / std


def mvn_rows(m):
    """Row-wise :func:`mvn` for a 2-D batch."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D batch, got shape {a.shape}")
    mean = a.mean(axis=1, keepdims=True)
    std = a.std(axis=1, keepdims=True)
    if np.any(std <= _STD_FLOOR):
        raise DegenerateVector("constant row cannot be mean-variance normalized")
    return (a - mean) / std


def mean_vector(vectors):
    """Per-dimension arithmetic mean of a non-empty list of vectors."""
    vs = list(vectors)
    if not vs:
        raise EmptyInput("mean of an empty vector list")
    first = as_vector(vs[0])
    acc = np.zeros_like(first)
    for v in vs:
        a = as_vector(v)
        if a.shape != first.shape:
            raise ShapeError(f"dimension mismatch: {first.shape[0]} vs {a.shape[0]}")
        acc += a
    return acc / len(vs)


def normalized_rows(m, floor=_NORM_FLOOR):
    """Return ``m`` with unit-norm rows; zero-norm rows raise."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D batch, got shape {a.shape}")
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    if np.any(norms <= floor):
        raise DegenerateVector("zero-norm row cannot be normalized")
    return a / norms


def cosine_matrix(a, b):
    """Pairwise cosine similarities between rows of ``a`` and rows of ``b``."""
    return normalized_rows(a) @ normalized_rows(b).T
