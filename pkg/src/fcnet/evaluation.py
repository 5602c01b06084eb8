"""
Cross-validation harness and baseline comparisons.

Fold layout: within each repetition the samples of every class are shuffled
and dealt round-robin into ``folds`` parts. Fold ``f`` tests on part ``f``,
validates on part ``f + 1`` (mod ``folds``) and trains on the rest, so the
test parts of one repetition partition the data. With ten folds this is an
8:1:1 split.

Feature ranking and selection run inside every fold on the training rows
only.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from . import feature_selection as fs
from .data import atomic_write_text, philox
from .dataset import FeatureMatrix
from .errors import FcnetError, InputError
from .metrics import ConfusionMatrix, det_curve, metrics, roc_and_auc, welch_ttest
from .training import TrainingConfig, evaluate, train_model

STREAM_SPLIT = 21
STREAM_CV = 22
STREAM_BASELINE = 23


# -- splits ---------------------------------------------------------------


def _largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    total = float(sum(ratios))
    quotas = [n * r / total for r in ratios]
    sizes = [math.floor(q) for q in quotas]
    short = n - sum(sizes)
    by_fraction = sorted(range(len(ratios)), key=lambda k: (-(quotas[k] - sizes[k]), k))
    for k in by_fraction[:short]:
        sizes[k] += 1
    return sizes


def stratified_split(labels, ratios: Sequence[float] = (8, 1, 1), seed: int = 0) -> list[np.ndarray]:
    """Shuffle each class and cut it in proportion to ``ratios``.

    Part sizes per class are the floors of their quotas; leftover samples go
    to the parts with the largest fractional remainders (earlier part on a
    tie). Returns one sorted index array per ratio.
    """
    labels = np.asarray(labels).reshape(-1)
    if len(ratios) < 2 or min(ratios) <= 0:
        raise InputError("need at least two positive ratios")
    rng = philox(seed, STREAM_SPLIT)
    parts: list[list[int]] = [[] for _ in ratios]
    for cls in (1, 0):
        members = np.flatnonzero(labels == cls)
        if members.size == 0:
            raise InputError("both classes must be present")
        sizes = _largest_remainder(members.size, ratios)
        if min(sizes) == 0:
            raise InputError(
                f"class {cls} has {members.size} samples, too few for ratios {tuple(ratios)}"
            )
        members = rng.permutation(members)
        start = 0
        for k, size in enumerate(sizes):
            parts[k].extend(members[start:start + size].tolist())
            start += size
    return [np.sort(np.asarray(p, dtype=np.int64)) for p in parts]


@dataclass
class Fold:
    repeat: int
    fold: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def fold_parts(labels, folds: int, seed: int) -> list[np.ndarray]:
    labels = np.asarray(labels).reshape(-1)
    if folds < 2:
        raise InputError("need at least two folds")
    rng = philox(seed, STREAM_CV)
    dealt = np.concatenate([rng.permutation(np.flatnonzero(labels == c)) for c in (1, 0)])
    parts = [np.sort(dealt[k::folds]) for k in range(folds)]
    return parts


def make_split_plan(labels, repeats: int = 10, folds: int = 10, seed: int = 0) -> list[Fold]:
    """Train/validation/test indices for every (repeat, fold)."""
    labels = np.asarray(labels).reshape(-1)
    n_pos = int(np.sum(labels == 1))
    n_neg = labels.size - n_pos
    if min(n_pos, n_neg) < min(folds, 3):
        raise InputError(f"classes of size {n_pos}/{n_neg} cannot fill {folds} stratified folds")
    plan = []
    for r in range(repeats):
        parts = fold_parts(labels, folds, seed * 1000003 + r)
        for f in range(folds):
            test = parts[f]
            if folds >= 3:
                val = parts[(f + 1) % folds]
                train = np.sort(np.concatenate([parts[k] for k in range(folds)
                                                if k not in (f, (f + 1) % folds)]))
            else:
                # Two folds leave no separate validation part; carve it
                # out of the training side instead.
                rest = np.sort(np.concatenate([parts[k] for k in range(folds) if k != f]))
                tr, va = stratified_split(labels[rest], (8, 1), seed + 7919 * r + f)
                train, val = rest[tr], rest[va]
            plan.append(Fold(r, f, train, val, test))
    return plan


# -- linear baseline ---------------------------------------------------------


@dataclass
class LinearModel:
    weights: np.ndarray
    bias: float
    mean: np.ndarray
    scale: np.ndarray
    epochs: int

    def decision(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.mean) / self.scale) @ self.weights + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return (self.decision(x) > 0).astype(np.int8)


def fit_linear_baseline(x: np.ndarray, y: np.ndarray, seed: int = 0, lr: float = 1e-2,
                        max_epochs: int = 2000, tol: float = 1e-6) -> LinearModel:
    """Logistic regression by full-batch RMSProp on standardised features.

    Stops when the gradient norm drops below ``tol`` or after ``max_epochs``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if not (y == 1).any() or (y == 1).all():
        raise InputError("linear baseline needs both classes in training data")
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    xs = (x - mean) / scale
    rng = philox(seed, STREAM_BASELINE)
    w = rng.normal(0.0, 0.01, x.shape[1])
    b = 0.0
    vw = np.zeros_like(w)
    vb = 0.0
    rho, eps = 0.9, 1e-8
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        z = xs @ w + b
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        err = (p - y) / y.size
        gw = xs.T @ err
        gb = float(err.sum())
        if math.sqrt(float(gw @ gw) + gb * gb) < tol:
            break
        vw = rho * vw + (1 - rho) * gw * gw
        vb = rho * vb + (1 - rho) * gb * gb
        w = w - lr * gw / (np.sqrt(vw) + eps)
        b = b - lr * gb / (math.sqrt(vb) + eps)
    return LinearModel(w, b, mean, scale, epoch)


def linear_baseline(train: FeatureMatrix, test: FeatureMatrix, seed: int = 0) -> np.ndarray:
    """Predicted labels for ``test`` from a logistic model fitted on ``train``."""
    return fit_linear_baseline(train.values, train.labels, seed).predict(test.values)


def _cv_baseline_accuracy(fm: FeatureMatrix, parts: list[np.ndarray], seed: int) -> float:
    accs = []
    for f, test in enumerate(parts):
        train = np.sort(np.concatenate([p for k, p in enumerate(parts) if k != f]))
        pred = linear_baseline(fm.rows(train), fm.rows(test), seed + f)
        accs.append(float(np.mean(pred == fm.labels[test])))
    return float(np.mean(accs))


def make_cv_evaluator(fm: FeatureMatrix, folds: int = 10, seed: int = 0
                      ) -> Callable[[fs.FeatureSubset], float]:
    """Evaluator for :func:`feature_selection.threshold_sweep`.

    Every subset is scored on the same folds with the same seeds, so equal
    subsets get equal accuracies.
    """
    parts = fold_parts(fm.labels, folds, seed)

    def evaluate_subset(subset: fs.FeatureSubset) -> float:
        return _cv_baseline_accuracy(fm.columns(subset.selected_indices), parts, seed)

    return evaluate_subset


@dataclass
class ComparisonRow:
    method: str
    k: int
    mean_accuracy: float


def compare_feature_selection(fm: FeatureMatrix, methods: Sequence[str], k_grid: Sequence[int],
                              folds: int = 10, seed: int = 0) -> list[ComparisonRow]:
    """Mean CV accuracy of the linear baseline on each method's top-k features.

    Rankings are recomputed on the training rows of every fold.
    """
    fm.require_both_classes()
    for m in methods:
        if m not in fs.METHODS:
            raise InputError(f"unknown method {m!r}")
    for k in k_grid:
        if not 1 <= k <= fm.num_features:
            raise InputError(f"k={k} outside [1, {fm.num_features}]")
    parts = fold_parts(fm.labels, folds, seed)
    acc = {(m, k): [] for m in methods for k in k_grid}
    for f, test in enumerate(parts):
        train = np.sort(np.concatenate([p for j, p in enumerate(parts) if j != f]))
        train_fm, test_fm = fm.rows(train), fm.rows(test)
        for m in methods:
            ranking = fs.rank_features(train_fm, m)
            for k in k_grid:
                cols = fs.select_top_k(ranking, k).selected_indices
                pred = linear_baseline(train_fm.columns(cols), test_fm.columns(cols), seed + f)
                acc[(m, k)].append(float(np.mean(pred == test_fm.labels)))
    return [ComparisonRow(m, int(k), float(np.mean(acc[(m, k)]))) for m in methods for k in k_grid]


def comparison_csv(rows: Sequence[ComparisonRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "k", "mean_accuracy"])
    for r in rows:
        w.writerow([r.method, r.k, format(r.mean_accuracy, ".17g")])
    return buf.getvalue()


def write_comparison_csv(rows: Sequence[ComparisonRow], path) -> None:
    atomic_write_text(path, comparison_csv(rows))


# -- cross-validation of the full pipeline ------------------------------------


@dataclass
class SelectionConfig:
    """How features are chosen inside each fold: a threshold or a top-k.

    With neither given, the default DSDC threshold applies.
    """

    method: str = "dsdc"
    threshold: float | None = None
    top_k: int | None = None

    def __post_init__(self):
        if self.method not in fs.METHODS:
            raise InputError(f"unknown method {self.method!r}")
        if self.threshold is not None and self.top_k is not None:
            raise InputError("give at most one of threshold and top_k")
        if self.threshold is None and self.top_k is None:
            self.threshold = fs.DEFAULT_DSDC_THRESHOLD
        if self.top_k is not None and self.top_k < 0:
            raise InputError("top_k must be >= 0")

    def select(self, ranking: fs.FeatureRanking) -> fs.FeatureSubset:
        if self.top_k is not None:
            return fs.select_top_k(ranking, min(self.top_k, ranking.scores.size))
        return fs.select_by_threshold(ranking, self.threshold)


@dataclass
class FoldResult:
    repeat: int
    fold: int
    confusion: ConfusionMatrix
    accuracy: float
    sensitivity: float
    specificity: float
    auc: float
    num_features: int
    epochs: int
    train_seconds: float
    test_indices: list[int]
    test_scores: list[float]


@dataclass
class EvaluationReport:
    folds: list[FoldResult]
    mean_accuracy: float
    mean_sensitivity: float
    mean_specificity: float
    mean_auc: float
    mean_train_seconds: float
    best_fold: dict[str, Any]
    worst_fold: dict[str, Any]
    roc: dict[str, list[float]]
    det: dict[str, list[float]]
    config: dict[str, Any] = field(default_factory=dict)

    def to_json(self, timings: bool = True) -> dict[str, Any]:
        doc = asdict(self)
        for f in doc["folds"]:
            f["confusion"] = dict(f["confusion"])
            if not timings:
                f.pop("train_seconds")
        if not timings:
            doc.pop("mean_train_seconds")
        return doc


Ranker = Callable[[FeatureMatrix, str], fs.FeatureRanking]


def _default_ranker(fm: FeatureMatrix, method: str) -> fs.FeatureRanking:
    return fs.rank_features(fm, method)


def run_fold(fm: FeatureMatrix, fold: Fold, cfg: TrainingConfig, selection: SelectionConfig,
             pretrain: bool = True, ranker: Ranker | None = None) -> FoldResult:
    ranker = ranker or _default_ranker
    start = time.perf_counter()
    train = fm.rows(fold.train)
    try:
        subset = selection.select(ranker(train, selection.method))
        if len(subset) == 0:
            raise InputError("feature selection kept no features")
        cols = subset.selected_indices
        fold_cfg = cfg.with_(seed=int(np.random.SeedSequence(
            [cfg.seed, fold.repeat, fold.fold]).generate_state(1)[0]))
        model = train_model(train.columns(cols), fm.rows(fold.val).columns(cols), fold_cfg,
                            pretrain=pretrain)
    except FcnetError as exc:
        raise type(exc)(f"repeat {fold.repeat}, fold {fold.fold}: {exc}") from exc
    elapsed = time.perf_counter() - start
    test = fm.rows(fold.test).columns(cols)
    cm, scores = evaluate(model, test)
    m = metrics(cm)
    _, _, auc = roc_and_auc(scores, test.labels)
    return FoldResult(fold.repeat, fold.fold, cm, m.accuracy, m.sensitivity, m.specificity,
                      auc, int(cols.size), len(model.history or []), elapsed,
                      [int(i) for i in fold.test], [float(s) for s in scores])


def _fold_task(args):
    return run_fold(*args)


def run_cv(fm: FeatureMatrix, cfg: TrainingConfig, repeats: int = 10, folds: int = 10,
           selection: SelectionConfig | None = None, pretrain: bool = True,
           jobs: int = 1, ranker: Ranker | None = None) -> EvaluationReport:
    """Repeated stratified k-fold evaluation of the whole pipeline.

    Folds may run in worker processes (``jobs > 1``); each fold's seed is
    derived from ``(cfg.seed, repeat, fold)`` and results are assembled in
    (repeat, fold) order, so the report does not depend on ``jobs``.
    """
    fm.require_both_classes()
    selection = selection or SelectionConfig()
    plan = make_split_plan(fm.labels, repeats, folds, cfg.seed)
    tasks = [(fm, fold, cfg, selection, pretrain, ranker) for fold in plan]
    if jobs > 1 and ranker is None:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_fold_task, tasks))
    else:
        results = [_fold_task(t) for t in tasks]
    return assemble_report(fm, results, {
        "training": cfg.to_dict(), "selection": asdict(selection), "repeats": repeats,
        "folds": folds, "pretrain": pretrain,
    })


def assemble_report(fm: FeatureMatrix, results: list[FoldResult],
                    config: dict[str, Any]) -> EvaluationReport:
    def summary(r: FoldResult) -> dict[str, Any]:
        return {"repeat": r.repeat, "fold": r.fold, "accuracy": r.accuracy,
                "sensitivity": r.sensitivity, "specificity": r.specificity}

    pooled_idx = np.concatenate([r.test_indices for r in results])
    pooled_scores = np.concatenate([r.test_scores for r in results])
    fpr, tpr, _ = roc_and_auc(pooled_scores, fm.labels[pooled_idx])
    dfpr, fnr = det_curve(pooled_scores, fm.labels[pooled_idx])
    best = max(results, key=lambda r: (r.accuracy, -r.repeat, -r.fold))
    worst = min(results, key=lambda r: (r.accuracy, r.repeat, r.fold))
    return EvaluationReport(
        folds=results,
        mean_accuracy=float(np.mean([r.accuracy for r in results])),
        mean_sensitivity=float(np.mean([r.sensitivity for r in results])),
        mean_specificity=float(np.mean([r.specificity for r in results])),
        mean_auc=float(np.mean([r.auc for r in results])),
        mean_train_seconds=float(np.mean([r.train_seconds for r in results])),
        best_fold=summary(best),
        worst_fold=summary(worst),
        roc={"fpr": fpr.tolist(), "tpr": tpr.tolist()},
        det={"fpr": dfpr.tolist(), "fnr": fnr.tolist()},
        config=config,
    )


def compare_accuracies(a: EvaluationReport, b: EvaluationReport):
    """Welch t-test on the per-fold accuracies of two reports."""
    return welch_ttest([r.accuracy for r in a.folds], [r.accuracy for r in b.folds])


def _g(x: float) -> str:
    return format(float(x), ".17g")


def report_json(report: EvaluationReport, timings: bool = True) -> str:
    def default(o):
        if isinstance(o, (np.integer,)):
            return int(o)
        if isinstance(o, (np.floating,)):
            return float(o)
        raise TypeError(type(o).__name__)

    return json.dumps(report.to_json(timings), default=default, indent=1)


def folds_csv(report: EvaluationReport, timings: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["repeat", "fold", "tp", "fn", "tn", "fp", "accuracy", "sensitivity",
                "specificity", "auc", "num_features", "epochs"]
               + (["train_seconds"] if timings else []))
    for r in report.folds:
        c = r.confusion
        w.writerow([r.repeat, r.fold, c.tp, c.fn, c.tn, c.fp, _g(r.accuracy), _g(r.sensitivity),
                    _g(r.specificity), _g(r.auc), r.num_features, r.epochs]
                   + ([_g(r.train_seconds)] if timings else []))
    return buf.getvalue()


def curve_csv(x: Sequence[float], y: Sequence[float], names: tuple[str, str]) -> str:
    lines = [",".join(names)] + [f"{_g(a)},{_g(b)}" for a, b in zip(x, y)]
    return "\n".join(lines) + "\n"
