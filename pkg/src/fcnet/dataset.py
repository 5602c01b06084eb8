"""The subjects-by-features table that flows between pipeline stages."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .errors import InputError

#: Label value of the positive (ASD-analog) class.
POSITIVE = 1
#: Label value of the negative (HC-analog) class.
NEGATIVE = 0


@dataclass
class FeatureMatrix:
    """Feature rows with binary labels.

    Parameters
    ----------
    values : np.ndarray
        Array of shape (num_subjects, num_features).
    labels : np.ndarray
        Integer array of 0/1 labels, one per row (1 = positive class).
    subject_ids : list of str, optional
        Row identifiers. Generated as ``"s<row>"`` when omitted.
    provenance : dict
        Free-form JSON-serialisable metadata (generator spec, selection, ...).
    """

    values: np.ndarray
    labels: np.ndarray
    subject_ids: list[str] | None = None
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise InputError(f"feature values must be 2-D, got shape {self.values.shape}")
        self.labels = np.asarray(self.labels, dtype=np.int8).reshape(-1)
        if self.labels.shape[0] != self.values.shape[0]:
            raise InputError(
                f"{self.values.shape[0]} rows but {self.labels.shape[0]} labels"
            )
        if self.labels.size and not np.isin(self.labels, (0, 1)).all():
            raise InputError("labels must be 0 or 1")
        if self.subject_ids is None:
            self.subject_ids = [f"s{i}" for i in range(self.values.shape[0])]
        else:
            self.subject_ids = [str(s) for s in self.subject_ids]
            if len(self.subject_ids) != self.values.shape[0]:
                raise InputError("subject_ids length does not match row count")

    @property
    def num_subjects(self) -> int:
        return self.values.shape[0]

    @property
    def num_features(self) -> int:
        return self.values.shape[1]

    def class_counts(self) -> tuple[int, int]:
        """Return ``(num_positive, num_negative)``."""
        n_pos = int(np.count_nonzero(self.labels == POSITIVE))
        return n_pos, int(self.labels.size - n_pos)

    def rows(self, index: Sequence[int] | np.ndarray) -> FeatureMatrix:
        index = np.asarray(index, dtype=np.intp)
        return FeatureMatrix(
            self.values[index],
            self.labels[index],
            [self.subject_ids[i] for i in index],
            dict(self.provenance),
        )

    def columns(self, index: Sequence[int] | np.ndarray) -> FeatureMatrix:
        index = np.asarray(index, dtype=np.intp)
        prov = dict(self.provenance)
        prov["columns"] = [int(i) for i in index]
        return FeatureMatrix(self.values[:, index], self.labels, list(self.subject_ids), prov)

    def require_both_classes(self) -> None:
        n_pos, n_neg = self.class_counts()
        if n_pos == 0 or n_neg == 0:
            raise InputError(
                f"both classes must be present (positives={n_pos}, negatives={n_neg})"
            )
