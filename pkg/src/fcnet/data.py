"""
Synthetic generators and on-disk formats.

Random streams
--------------
Every generator draws from ``numpy.random.Philox`` (a counter-based bit
generator) keyed by ``(seed, stream)``; normal variates come from
``Generator.standard_normal``. A given spec therefore reproduces the same
arrays bit for bit on every call.

FeatureMatrixFile layout (little-endian)
----------------------------------------
==========  ==========  ===============================================
offset      type        content
==========  ==========  ===============================================
0           4 bytes     magic ``b"FCFM"``
4           u32         version, currently 1
8           u64         rows
16          u64         cols
24          f32[r*c]    values, row-major
24 + 4rc    u8[rows]    labels, each 0 or 1
...         bytes       optional UTF-8 JSON footer (provenance), to EOF
==========  ==========  ===============================================

Values are stored as 32-bit floats; everything is computed in 64-bit.
"""

from __future__ import annotations

import csv
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .connectome import TimeSeriesMatrix
from .dataset import FeatureMatrix
from .errors import FormatError, InputError

MAGIC = b"FCFM"
VERSION = 1
HEADER = struct.Struct("<4sIQQ")

STREAM_FEATURES = 1
STREAM_PLANTED = 2
STREAM_TIMESERIES = 3


def philox(seed: int, stream: int = 0, *extra: int) -> np.random.Generator:
    """Deterministic generator for ``(seed, stream, *extra)``."""
    key = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, stream, *extra])
    return np.random.Generator(np.random.Philox(key))


@dataclass
class SyntheticSpec:
    """Gaussian two-class feature generator.

    ``samples_per_class`` is either one count for both classes or a
    ``(positives, negatives)`` pair for imbalanced data.
    """

    num_features: int
    planted_indices: Sequence[int]
    mean_shift: float
    samples_per_class: int | tuple[int, int]
    noise_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.planted_indices = sorted({int(i) for i in self.planted_indices})
        if self.num_features < 1:
            raise InputError("num_features must be positive")
        if self.planted_indices and not (
            0 <= self.planted_indices[0] and self.planted_indices[-1] < self.num_features
        ):
            raise InputError("planted indices outside [0, num_features)")
        if self.mean_shift < 0:
            raise InputError("mean_shift must be >= 0")
        if self.noise_std <= 0:
            raise InputError("noise_std must be positive")

    @property
    def class_sizes(self) -> tuple[int, int]:
        if isinstance(self.samples_per_class, int):
            return self.samples_per_class, self.samples_per_class
        n_pos, n_neg = self.samples_per_class
        return int(n_pos), int(n_neg)


def random_planted(num_features: int, num_planted: int, seed: int) -> list[int]:
    """Seeded choice of ``num_planted`` distinct feature indices."""
    if not 0 <= num_planted <= num_features:
        raise InputError("num_planted must lie in [0, num_features]")
    rng = philox(seed, STREAM_PLANTED)
    return sorted(int(i) for i in rng.choice(num_features, num_planted, replace=False))


def synth_features(spec: SyntheticSpec) -> FeatureMatrix:
    """Rows are positives first, then negatives.

    Non-planted columns are ``N(0, noise_std^2)`` in both classes; planted
    columns are shifted by ``+shift/2`` for positives and ``-shift/2`` for
    negatives.
    """
    n_pos, n_neg = spec.class_sizes
    rng = philox(spec.seed, STREAM_FEATURES)
    values = spec.noise_std * rng.standard_normal((n_pos + n_neg, spec.num_features))
    planted = np.asarray(spec.planted_indices, dtype=np.intp)
    if planted.size:
        values[:n_pos, planted] += spec.mean_shift / 2
        values[n_pos:, planted] -= spec.mean_shift / 2
    labels = np.r_[np.ones(n_pos, np.int8), np.zeros(n_neg, np.int8)]
    prov = {
        "generator": "synth_features",
        "seed": spec.seed,
        "mean_shift": spec.mean_shift,
        "noise_std": spec.noise_std,
        "planted_indices": list(spec.planted_indices),
    }
    return FeatureMatrix(values, labels, None, prov)


@dataclass
class CouplingSpec:
    """Class-dependent coupling for :func:`synth_timeseries`.

    Each pair ``(i, j)`` in ``pairs`` has ROI ``j`` mixed with ROI ``i``'s
    signal at weight ``positive_weight`` for positive subjects and
    ``negative_weight`` for negative ones.
    """

    pairs: Sequence[tuple[int, int]] = ()
    positive_weight: float = 0.8
    negative_weight: float = 0.0
    shared_amplitude: float = 0.0
    num_components: int = 3
    noise_std: float = 1.0
    positive_fraction: float = 0.5


def synth_timeseries(num_subjects: int, num_rois: int, num_timepoints: int,
                     coupling: CouplingSpec | None = None,
                     seed: int = 0) -> tuple[list[TimeSeriesMatrix], np.ndarray]:
    """Random ROI signals plus labels.

    Every ROI gets independent Gaussian noise plus a random mixture of
    ``num_components`` shared sinusoids scaled by ``shared_amplitude``.
    Coupled pairs then receive the class-dependent mixing described in
    :class:`CouplingSpec`.
    """
    if num_rois < 2 or num_timepoints < 3 or num_subjects < 0:
        raise InputError("need num_rois >= 2 and num_timepoints >= 3")
    coupling = coupling or CouplingSpec()
    for i, j in coupling.pairs:
        if not (0 <= i < num_rois and 0 <= j < num_rois and i != j):
            raise InputError(f"bad coupled pair ({i}, {j})")
    n_pos = int(round(coupling.positive_fraction * num_subjects))
    labels = np.r_[np.ones(n_pos, np.int8), np.zeros(num_subjects - n_pos, np.int8)]
    t = np.arange(num_timepoints)
    out = []
    for s in range(num_subjects):
        rng = philox(seed, STREAM_TIMESERIES, s)
        freqs = rng.uniform(0.01, 0.1, coupling.num_components)
        phases = rng.uniform(0, 2 * np.pi, coupling.num_components)
        basis = np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None])
        mix = rng.standard_normal((num_rois, coupling.num_components))
        series = coupling.shared_amplitude * (mix @ basis)
        series += coupling.noise_std * rng.standard_normal((num_rois, num_timepoints))
        w = coupling.positive_weight if labels[s] else coupling.negative_weight
        for i, j in coupling.pairs:
            series[j] = (1 - abs(w)) * series[j] + w * series[i]
        out.append(TimeSeriesMatrix(f"sub{s:04d}", series))
    return out, labels


# -- files ---------------------------------------------------------------


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_feature_matrix(fm: FeatureMatrix, footer: dict | None = None) -> bytes:
    rows, cols = fm.values.shape
    body = np.ascontiguousarray(fm.values, dtype="<f4").tobytes()
    labels = np.asarray(fm.labels, dtype=np.uint8).tobytes()
    if footer is None:
        footer = dict(fm.provenance)
        footer.setdefault("subject_ids", list(fm.subject_ids))
    tail = json.dumps(footer, sort_keys=True).encode("utf-8") if footer else b""
    return HEADER.pack(MAGIC, VERSION, rows, cols) + body + labels + tail


def decode_feature_matrix(buf: bytes) -> FeatureMatrix:
    if len(buf) < HEADER.size:
        raise FormatError(f"file too short for header ({len(buf)} bytes)", len(buf))
    magic, version, rows, cols = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    body_end = HEADER.size + rows * cols * 4
    labels_end = body_end + rows
    if len(buf) < labels_end:
        raise FormatError(
            f"truncated: need {labels_end} bytes for {rows}x{cols}, have {len(buf)}", len(buf)
        )
    values = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=HEADER.size)
    values = values.reshape(rows, cols).astype(np.float64)
    labels = np.frombuffer(buf, dtype=np.uint8, count=rows, offset=body_end)
    bad = np.flatnonzero(labels > 1)
    if bad.size:
        raise FormatError(f"label {labels[bad[0]]} not in {{0, 1}}", body_end + int(bad[0]))
    footer = {}
    if len(buf) > labels_end:
        try:
            footer = json.loads(buf[labels_end:].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"unreadable footer: {exc}", labels_end) from exc
        if not isinstance(footer, dict):
            raise FormatError("footer is not a JSON object", labels_end)
    ids = footer.pop("subject_ids", None)
    if ids is not None and len(ids) != rows:
        ids = None
    return FeatureMatrix(values, labels.astype(np.int8), ids, footer)


def save_feature_matrix(fm: FeatureMatrix, path) -> None:
    """Write ``fm``; ``.csv`` paths use the CSV variant, anything else FCFM."""
    if str(path).endswith(".csv"):
        save_feature_matrix_csv(fm, path)
    else:
        atomic_write_bytes(path, encode_feature_matrix(fm))


def load_feature_matrix(path) -> FeatureMatrix:
    if str(path).endswith(".csv"):
        return load_feature_matrix_csv(path)
    with open(path, "rb") as fh:
        return decode_feature_matrix(fh.read())


def feature_matrix_csv(fm: FeatureMatrix) -> str:
    """CSV variant: header ``feature_0..feature_{n-1},label``, one row per subject."""
    lines = [",".join([f"feature_{i}" for i in range(fm.num_features)] + ["label"])]
    for row, label in zip(fm.values, fm.labels):
        lines.append(",".join([format(float(v), ".9g") for v in row] + [str(int(label))]))
    return "\n".join(lines) + "\n"


def save_feature_matrix_csv(fm: FeatureMatrix, path) -> None:
    atomic_write_text(path, feature_matrix_csv(fm))


def load_feature_matrix_csv(path) -> FeatureMatrix:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError("empty CSV", 0) from None
        if not header or header[-1] != "label":
            raise FormatError("last column must be 'label'", 1)
        width = len(header) - 1
        values, labels = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width + 1:
                raise FormatError(f"expected {width + 1} fields, got {len(row)}", line_no)
            try:
                values.append([float(v) for v in row[:-1]])
                label = int(row[-1])
            except ValueError as exc:
                raise FormatError(str(exc), line_no) from exc
            if label not in (0, 1):
                raise FormatError(f"label {label} not in {{0, 1}}", line_no)
            labels.append(label)
    arr = np.asarray(values, dtype=np.float64).reshape(len(labels), width)
    return FeatureMatrix(arr, labels)


def read_manifest(path) -> dict[str, int]:
    """Subject manifest CSV: ``subject_id,label`` per line (header optional)."""
    out: dict[str, int] = {}
    with open(path, newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row or (line_no == 1 and row[0].strip() == "subject_id"):
                continue
            if len(row) != 2:
                raise FormatError("manifest rows need subject_id,label", line_no)
            sid, label = row[0].strip(), row[1].strip()
            if label not in ("0", "1"):
                raise FormatError(f"label {label!r} not in {{0, 1}}", line_no)
            out[sid] = int(label)
    return out


def read_timeseries_csv(path) -> TimeSeriesMatrix:
    """Rows are ROIs, columns timepoints, no header; stem is the subject id."""
    path = Path(path)
    try:
        series = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise FormatError(f"{path.name}: {exc}") from exc
    return TimeSeriesMatrix(path.stem, series)


def timeseries_csv(ts: TimeSeriesMatrix) -> str:
    lines = [",".join(format(float(v), ".17g") for v in row) for row in ts.series]
    return "\n".join(lines) + "\n"


def write_timeseries_csv(ts: TimeSeriesMatrix, directory) -> Path:
    path = Path(directory) / f"{ts.subject_id}.csv"
    atomic_write_text(path, timeseries_csv(ts))
    return path


def read_timeseries_dir(directory, manifest: dict[str, int]) -> tuple[list[TimeSeriesMatrix], list[int]]:
    """Load every ``*.csv`` in ``directory`` (sorted by name) with its label."""
    files = sorted(Path(directory).glob("*.csv"))
    if not files:
        raise InputError(f"no time-series CSV files in {directory}")
    missing = [f.stem for f in files if f.stem not in manifest]
    if missing:
        raise InputError(f"subjects missing from manifest: {', '.join(missing)}")
    subjects = [read_timeseries_csv(f) for f in files]
    return subjects, [manifest[s.subject_id] for s in subjects]
