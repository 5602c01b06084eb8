"""
Filter feature selection: scoring, ranking and subset selection.

Three scores are available:

``dsdc``
    Difference between step distribution curves. A feature's range
    ``[min, max]`` is cut into ``bin_count`` equal half-open bins
    ``[edge_i, edge_{i+1})`` (the maximum goes to the last bin). Each class
    gets a histogram normalised by its size and the score is the L1
    distance between the two, so it lies in ``[0, 2]``.
``fisher``
    ``((mean_pos - mean)^2 + (mean_neg - mean)^2) / (var_pos + var_neg)``
    with unbiased class variances. Zero denominator with non-zero numerator
    gives ``inf``.
``abs_pcc``
    Absolute Pearson correlation between the feature and the 0/1 labels.

Rankings sort by descending score, ties by ascending feature index.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .data import atomic_write_text
from .dataset import FeatureMatrix
from .errors import FormatError, InputError

METHODS = ("dsdc", "fisher", "abs_pcc")
DEFAULT_BIN_COUNT = 20
#: Filter threshold reported for ABIDE I; only a sensible default there.
DEFAULT_DSDC_THRESHOLD = 0.241

_CHUNK = 2048


@dataclass
class StepDistributionPair:
    lower_bound: float
    upper_bound: float
    bin_width: float
    bin_count: int
    pos_counts: np.ndarray
    neg_counts: np.ndarray

    @property
    def pos_total(self) -> int:
        return int(self.pos_counts.sum())

    @property
    def neg_total(self) -> int:
        return int(self.neg_counts.sum())

    def heights(self) -> tuple[np.ndarray, np.ndarray]:
        """Class-normalised bin heights (the two step curves)."""
        return self.pos_counts / self.pos_total, self.neg_counts / self.neg_total


@dataclass
class FeatureRanking:
    method: str
    scores: np.ndarray
    order: np.ndarray
    degenerate: np.ndarray | None = None

    @property
    def ranks(self) -> np.ndarray:
        """0-based rank of each feature."""
        ranks = np.empty_like(self.order)
        ranks[self.order] = np.arange(self.order.size)
        return ranks


@dataclass
class FeatureSubset:
    selected_indices: np.ndarray
    provenance: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.selected_indices.size)


def _check_labels(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels).reshape(-1)
    if labels.size != n:
        raise InputError(f"{n} values but {labels.size} labels")
    if not np.isin(labels, (0, 1)).all():
        raise InputError("labels must be 0 or 1")
    pos = labels == 1
    if not pos.any() or pos.all():
        raise InputError("both classes must be present")
    return pos


def bin_edges(lower: float, width: float, bin_count: int) -> np.ndarray:
    return lower + width * np.arange(bin_count + 1)


def _bin_indices(x: np.ndarray, bin_count: int) -> np.ndarray:
    """Column-wise bin index of every entry of ``x`` (samples x features)."""
    lo = x.min(axis=0)
    hi = x.max(axis=0)
    width = (hi - lo) / bin_count
    flat = width == 0.0
    safe = np.where(flat, 1.0, width)
    idx = np.floor((x - lo) / safe).astype(np.int64)
    np.clip(idx, 0, bin_count - 1, out=idx)
    # Division rounding can put a value on the wrong side of an edge;
    # re-check against the explicit edges so membership is exactly half-open.
    lower_edge = lo + safe * idx
    idx -= (x < lower_edge) & (idx > 0)
    upper_edge = lo + safe * (idx + 1)
    idx += (x >= upper_edge) & (idx < bin_count - 1)
    idx[:, flat] = 0
    return idx


def build_step_distributions(values, labels, bin_count: int = DEFAULT_BIN_COUNT) -> StepDistributionPair:
    """Class-conditional step distributions of a single feature.

    A constant feature collapses to one bin of zero width.
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if bin_count < 1:
        raise InputError("bin_count must be >= 1")
    if not np.isfinite(values).all():
        raise InputError("values must be finite")
    pos = _check_labels(labels, values.size)
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        return StepDistributionPair(lo, hi, 0.0, 1,
                                    np.array([pos.sum()]), np.array([(~pos).sum()]))
    idx = _bin_indices(values[:, None], bin_count)[:, 0]
    return StepDistributionPair(
        lo, hi, (hi - lo) / bin_count, bin_count,
        np.bincount(idx[pos], minlength=bin_count),
        np.bincount(idx[~pos], minlength=bin_count),
    )


def dsdc_score(dist: StepDistributionPair) -> float:
    if dist.pos_total <= 0 or dist.neg_total <= 0:
        raise InputError("both class totals must be positive")
    p, q = dist.heights()
    return float(np.abs(p - q).sum())


def _dsdc_block(x: np.ndarray, pos: np.ndarray, bin_count: int) -> np.ndarray:
    n_feat = x.shape[1]
    idx = _bin_indices(x, bin_count)
    idx += np.arange(n_feat) * bin_count
    size = n_feat * bin_count
    pos_counts = np.bincount(idx[pos].ravel(), minlength=size).reshape(n_feat, bin_count)
    neg_counts = np.bincount(idx[~pos].ravel(), minlength=size).reshape(n_feat, bin_count)
    diff = pos_counts / pos.sum() - neg_counts / (~pos).sum()
    return np.abs(diff).sum(axis=1)


def _fisher_block(x: np.ndarray, pos: np.ndarray) -> np.ndarray:
    xp, xn = x[pos], x[~pos]
    mean = x.mean(axis=0)
    mp, mn = xp.mean(axis=0), xn.mean(axis=0)
    num = (mp - mean) ** 2 + (mn - mean) ** 2
    den = xp.var(axis=0, ddof=1) + xn.var(axis=0, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = num / den
    out[(den == 0) & (num > 0)] = np.inf
    out[(den == 0) & (num == 0)] = 0.0
    return out


def _abs_pcc_block(x: np.ndarray, pos: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    y = pos.astype(np.float64)
    dy = y - y.mean()
    dx = x - x.mean(axis=0)
    sxx = np.einsum("ij,ij->j", dx, dx)
    flat = sxx == 0.0
    num = dy @ dx
    den = np.sqrt(np.where(flat, 1.0, sxx)) * math.sqrt(float(dy @ dy))
    out = np.abs(num / den)
    out[flat] = 0.0
    return out, flat


def fisher_score(values, labels) -> float:
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    pos = _check_labels(labels, values.size)
    if pos.sum() < 2 or (~pos).sum() < 2:
        raise InputError("need at least two samples per class")
    return float(_fisher_block(values[:, None], pos)[0])


def abs_pcc_score(values, labels) -> float:
    """Absolute label correlation; 0 for a constant feature."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    pos = _check_labels(labels, values.size)
    return float(_abs_pcc_block(values[:, None], pos)[0][0])


def score_features(
    x: np.ndarray, labels, method: str, bin_count: int = DEFAULT_BIN_COUNT, jobs: int = 1
) -> tuple[np.ndarray, np.ndarray | None]:
    """Score every column of ``x``; returns ``(scores, degenerate_mask)``.

    Columns are processed in fixed-size blocks. Each column's score depends
    only on that column, so block size and ``jobs`` do not change results.
    """
    if method not in METHODS:
        raise InputError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    x = np.asarray(x)
    pos = _check_labels(labels, x.shape[0])
    if method == "fisher" and (pos.sum() < 2 or (~pos).sum() < 2):
        raise InputError("fisher score needs at least two samples per class")
    blocks = [slice(s, min(s + _CHUNK, x.shape[1])) for s in range(0, x.shape[1], _CHUNK)]

    def run(sl):
        block = np.asarray(x[:, sl], dtype=np.float64)
        if method == "dsdc":
            return _dsdc_block(block, pos, bin_count), None
        if method == "fisher":
            return _fisher_block(block, pos), None
        return _abs_pcc_block(block, pos)

    if jobs > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(run, blocks))
    else:
        parts = [run(sl) for sl in blocks]
    scores = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0)
    degenerate = None
    if method == "abs_pcc":
        degenerate = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0, bool)
    return scores, degenerate


def order_by_score(scores: np.ndarray) -> np.ndarray:
    # lexsort uses the last key as primary.
    return np.lexsort((np.arange(scores.size), -scores))


def rank_features(fm: FeatureMatrix, method: str = "dsdc", bin_count: int = DEFAULT_BIN_COUNT,
                  jobs: int = 1) -> FeatureRanking:
    fm.require_both_classes()
    scores, degenerate = score_features(fm.values, fm.labels, method, bin_count, jobs)
    return FeatureRanking(method, scores, order_by_score(scores), degenerate)


def select_by_threshold(r: FeatureRanking, threshold: float) -> FeatureSubset:
    """Features scoring strictly above ``threshold``."""
    idx = np.flatnonzero(r.scores > threshold)
    prov = {"method": r.method, "threshold": float(threshold), "size": int(idx.size)}
    if idx.size == 0:
        prov["empty"] = True
    return FeatureSubset(idx, prov)


def select_top_k(r: FeatureRanking, k: int) -> FeatureSubset:
    n = r.scores.size
    if not 0 <= k <= n:
        raise InputError(f"k={k} outside [0, {n}]")
    idx = np.sort(r.order[:k])
    prov = {"method": r.method, "top_k": int(k), "size": int(k)}
    if k == 0:
        prov["empty"] = True
    return FeatureSubset(idx, prov)


@dataclass
class SweepRow:
    threshold: float
    subset_size: int
    mean_accuracy: float


@dataclass
class SweepReport:
    method: str
    rows: list[SweepRow]
    best: SweepRow


def threshold_sweep(
    fm: FeatureMatrix,
    thresholds: Sequence[float],
    evaluator: Callable[[FeatureSubset], float],
    method: str = "dsdc",
    ranking: FeatureRanking | None = None,
) -> SweepReport:
    """Evaluate the subset induced by each threshold and pick the best.

    The winner has the highest mean accuracy; ties go to the smaller subset,
    then to the earlier threshold. Empty subsets are not evaluated and
    get ``nan`` accuracy.
    """
    thresholds = list(thresholds)
    if not thresholds:
        raise InputError("need at least one threshold")
    if ranking is None:
        ranking = rank_features(fm, method)
    rows = []
    for t in thresholds:
        subset = select_by_threshold(ranking, t)
        if len(subset) == 0:
            rows.append(SweepRow(float(t), 0, math.nan))
            continue
        try:
            acc = float(evaluator(subset))
        except Exception as exc:
            raise RuntimeError(f"evaluator failed at threshold {t}: {exc}") from exc
        rows.append(SweepRow(float(t), len(subset), acc))
    scored = [r for r in rows if not math.isnan(r.mean_accuracy)]
    if not scored:
        raise InputError("every threshold produced an empty subset")
    best = min(scored, key=lambda r: (-r.mean_accuracy, r.subset_size))
    return SweepReport(ranking.method, rows, best)


def ranking_csv(r: FeatureRanking) -> str:
    ranks = r.ranks
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["feature_index", "score", "rank"])
    for i, s in enumerate(r.scores):
        w.writerow([i, format(float(s), ".17g"), int(ranks[i])])
    return buf.getvalue()


def write_ranking_csv(r: FeatureRanking, path) -> None:
    atomic_write_text(path, ranking_csv(r))


def subset_to_json(subset: FeatureSubset) -> dict[str, Any]:
    return {"selected_indices": [int(i) for i in subset.selected_indices],
            "provenance": subset.provenance}


def subset_from_json(doc: dict[str, Any]) -> FeatureSubset:
    try:
        idx = np.asarray(doc["selected_indices"], dtype=np.int64)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed subset document: {exc}") from exc
    if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0):
        raise InputError("subset indices must be unique, non-negative and ascending")
    return FeatureSubset(idx, dict(doc.get("provenance", {})))


def load_subset(path) -> FeatureSubset:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"subset file is not JSON: {exc}", exc.pos) from exc
    return subset_from_json(doc)


def sweep_csv(report: SweepReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", "subset_size", "mean_accuracy"])
    for row in report.rows:
        w.writerow([format(row.threshold, ".17g"), row.subset_size,
                    format(row.mean_accuracy, ".17g")])
    return buf.getvalue()


def write_sweep_csv(report: SweepReport, path) -> None:
    atomic_write_text(path, sweep_csv(report))
