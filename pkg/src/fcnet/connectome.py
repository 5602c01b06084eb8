"""
Functional connectivity features from ROI time series.

Each subject is a (num_rois, num_timepoints) matrix. Pairwise Pearson
correlations form a symmetric connectivity matrix whose strict upper
triangle, read row by row, becomes the subject's feature vector. For
``n`` ROIs the vector has ``n * (n - 1) / 2`` entries and feature ``k``
corresponds to the ROI pair returned by :func:`pair_from_index`.

Zero-variance (flat) rows have no defined correlation. Their pairs are
set to 0 and counted in ``ConnectivityMatrix.degenerate_pairs`` so a whole
batch can still be extracted.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import FeatureMatrix
from .errors import DegenerateSeriesError, InputError


@dataclass
class TimeSeriesMatrix:
    """ROI signals of one subject, shape (num_rois, num_timepoints)."""

    subject_id: str
    series: np.ndarray

    def __post_init__(self):
        self.series = np.asarray(self.series, dtype=np.float64)
        if self.series.ndim != 2:
            raise InputError(f"{self.subject_id}: series must be 2-D")
        n_rois, n_time = self.series.shape
        if n_rois < 2 or n_time < 3:
            raise InputError(
                f"{self.subject_id}: need >= 2 ROIs and >= 3 timepoints, got {self.series.shape}"
            )
        if not np.isfinite(self.series).all():
            raise InputError(f"{self.subject_id}: series contains non-finite values")

    @property
    def num_rois(self) -> int:
        return self.series.shape[0]


@dataclass
class ConnectivityMatrix:
    values: np.ndarray
    degenerate_pairs: int = 0


def num_pairs(n: int) -> int:
    return n * (n - 1) // 2


def pair_index(i: int, j: int, n: int) -> int:
    """Position of ROI pair ``(i, j)``, ``i < j``, in a flattened vector."""
    if not 0 <= i < j < n:
        raise InputError(f"need 0 <= i < j < n, got i={i}, j={j}, n={n}")
    return i * (2 * n - i - 1) // 2 + (j - i - 1)


def pair_from_index(k: int, n: int) -> tuple[int, int]:
    """Inverse of :func:`pair_index`."""
    if not 0 <= k < num_pairs(n):
        raise InputError(f"index {k} out of range for n={n}")
    # Row i starts at i*(2n-i-1)/2; solve the quadratic then fix rounding.
    i = int((2 * n - 1 - math.sqrt((2 * n - 1) ** 2 - 8 * k)) // 2)
    i = max(0, min(i, n - 2))
    while pair_index(i, i + 1, n) > k:
        i -= 1
    while i + 1 < n - 1 and pair_index(i + 1, i + 2, n) <= k:
        i += 1
    return i, k - pair_index(i, i + 1, n) + i + 1


def pearson(x, y) -> float:
    """Pearson correlation of two equal-length series.

    Raises
    ------
    InputError
        On length mismatch, fewer than two samples or non-finite values.
    DegenerateSeriesError
        If either series has zero variance.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise InputError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise InputError("need at least two samples")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise InputError("non-finite values")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateSeriesError("zero-variance series")
    return float(np.dot(dx, dy)) / (math.sqrt(sxx) * math.sqrt(syy))


def connectivity_matrix(ts: TimeSeriesMatrix) -> ConnectivityMatrix:
    x = ts.series
    n = x.shape[0]
    centered = x - x.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.einsum("ij,ij->i", centered, centered))
    flat = norms == 0.0
    safe = np.where(flat, 1.0, norms)
    unit = centered / safe[:, None]
    corr = unit @ unit.T
    iu = np.triu_indices(n, 1)
    upper = corr[iu]
    bad = flat[iu[0]] | flat[iu[1]]
    upper[bad] = 0.0
    out = np.zeros((n, n))
    out[iu] = upper
    out = out + out.T
    out[np.diag_indices(n)] = np.where(flat, 0.0, 1.0)
    return ConnectivityMatrix(out, int(np.count_nonzero(bad)))


def flatten_upper_triangle(m) -> np.ndarray:
    """Strict upper triangle of a square matrix in row-major order."""
    values = m.values if isinstance(m, ConnectivityMatrix) else np.asarray(m)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise InputError(f"expected a square matrix, got shape {values.shape}")
    return values[np.triu_indices(values.shape[0], 1)]


def subject_features(ts: TimeSeriesMatrix) -> tuple[np.ndarray, int]:
    cm = connectivity_matrix(ts)
    return flatten_upper_triangle(cm), cm.degenerate_pairs


def extract_features(
    subjects: Sequence[TimeSeriesMatrix],
    labels: Sequence[int] | None = None,
    num_rois: int | None = None,
    jobs: int = 1,
) -> FeatureMatrix:
    """Build one feature row per subject, preserving order.

    ``num_rois`` fixes the column count of an empty result. With ``jobs > 1``
    subjects are processed on a thread pool; output is identical to the
    sequential path because each row is computed independently.
    """
    subjects = list(subjects)
    if labels is None:
        labels = [0] * len(subjects)
    labels = list(labels)
    if len(labels) != len(subjects):
        raise InputError(f"{len(subjects)} subjects but {len(labels)} labels")
    if num_rois is None:
        num_rois = subjects[0].num_rois if subjects else 2
    for s in subjects:
        if s.num_rois != num_rois:
            raise InputError(
                f"subject {s.subject_id!r} has {s.num_rois} ROIs, expected {num_rois}"
            )
    width = num_pairs(num_rois)
    if not subjects:
        return FeatureMatrix(np.zeros((0, width)), np.zeros(0, dtype=np.int8), [],
                             {"num_rois": num_rois, "num_features": width})
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(subject_features, subjects))
    else:
        results = [subject_features(s) for s in subjects]
    values = np.vstack([r[0] for r in results])
    prov = {
        "num_rois": num_rois,
        "num_features": width,
        "degenerate_pairs": {s.subject_id: r[1] for s, r in zip(subjects, results) if r[1]},
    }
    return FeatureMatrix(values, labels, [s.subject_id for s in subjects], prov)
