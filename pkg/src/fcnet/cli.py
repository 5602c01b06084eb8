"""Command-line front end: ``fcnet <subcommand> ...``.

Every subcommand computes all of its results before touching the output
paths, then writes each file atomically. On any error nothing is written
and the process exits with a nonzero status:

==  =====================================
0   success
2   usage error (bad flags)
3   input or file-format error
4   numerical failure during training
5   the checkpoint constraint was never met
==  =====================================

Seed precedence: ``--seed``, then a ``seed`` key in the ``--config`` file,
then the ``FCNET_SEED`` environment variable, then 0.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from . import feature_selection as fs
from .connectome import extract_features
from .data import (CouplingSpec, SyntheticSpec, atomic_write_bytes, encode_feature_matrix,
                   feature_matrix_csv, load_feature_matrix, random_planted, read_manifest,
                   read_timeseries_dir, synth_features, synth_timeseries, timeseries_csv)
from .errors import FcnetError, InputError
from .evaluation import (SelectionConfig, comparison_csv, compare_feature_selection, curve_csv,
                         folds_csv, make_cv_evaluator, report_json, run_cv, stratified_split)
from .network import TrainedModel
from .training import CONSTRAINT_TYPES, TrainingConfig, train_model

SEED_ENV = "FCNET_SEED"


# -- helpers -------------------------------------------------------------------


@dataclass
class RunManifest:
    """Provenance written next to a trained model or CV report."""

    command: str
    config: dict[str, Any]
    seeds: dict[str, int]
    input_digests: dict[str, str]
    tool_version: str = __version__
    timings: dict[str, float] = field(default_factory=dict)

    def to_text(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"


class Stopwatch:
    def __init__(self):
        self.timings: dict[str, float] = {}

    def stage(self, name: str):
        watch = self

        class _Stage:
            def __enter__(self):
                self.start = time.perf_counter()

            def __exit__(self, *exc):
                watch.timings[name] = time.perf_counter() - self.start
                return False

        return _Stage()


class Outputs:
    """Files staged in memory and written together at the end of a command."""

    def __init__(self):
        self._files: dict[Path, bytes] = {}
        self._dirs: list[Path] = []

    def add(self, path, content: str | bytes) -> None:
        data = content.encode("utf-8") if isinstance(content, str) else content
        self._files[Path(path)] = data

    def add_dir(self, path) -> None:
        self._dirs.append(Path(path))

    def commit(self) -> None:
        made = [d for d in self._dirs if not d.exists()]
        for path in self._files:
            if not (path.parent.exists() or path.parent in made):
                raise InputError(f"output directory {path.parent} does not exist")
        written: list[Path] = []
        try:
            for d in made:
                d.mkdir(parents=True)
            for path, data in self._files.items():
                atomic_write_bytes(path, data)
                written.append(path)
        except BaseException:
            for path in written:
                path.unlink(missing_ok=True)
            for d in reversed(made):
                if d.exists() and not any(d.iterdir()):
                    d.rmdir()
            raise


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def resolve_seed(flag: int | None, fallback: int = 0) -> int:
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise InputError(f"{SEED_ENV}={env!r} is not an integer") from None
    return fallback


def load_config(path, seed_flag: int | None, **overrides) -> TrainingConfig:
    doc: dict[str, Any] = {}
    if path is not None:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"config {path} is not valid JSON: {exc}") from exc
    cfg = TrainingConfig.from_dict(doc)
    seed = seed_flag if seed_flag is not None else (
        cfg.seed if "seed" in doc else resolve_seed(None, cfg.seed))
    return cfg.with_(seed=seed, **{k: v for k, v in overrides.items() if v is not None})


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _method_list(text: str) -> list[str]:
    methods = [t.strip() for t in text.split(",") if t.strip()]
    bad = [m for m in methods if m not in fs.METHODS]
    if bad or not methods:
        raise argparse.ArgumentTypeError(f"methods must come from {', '.join(fs.METHODS)}")
    return methods


def _class_sizes(text: str) -> int | tuple[int, int]:
    parts = _int_list(text)
    if len(parts) == 1:
        return parts[0]
    if len(parts) == 2:
        return parts[0], parts[1]
    raise argparse.ArgumentTypeError("give N or POS,NEG")


def _pairs(text: str) -> list[tuple[int, int]]:
    out = []
    for item in text.split(","):
        if not item.strip():
            continue
        try:
            i, j = item.split("-")
            out.append((int(i), int(j)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"pairs look like 0-1,2-5; got {item!r}")
    return out


def _selection(args) -> SelectionConfig:
    return SelectionConfig(args.method, args.threshold, args.top_k)


# -- subcommands -----------------------------------------------------------------


def cmd_extract(args) -> None:
    manifest = read_manifest(args.manifest)
    subjects, labels = read_timeseries_dir(args.timeseries_dir, manifest)
    fm = extract_features(subjects, labels, jobs=args.jobs)
    out = Outputs()
    out.add(args.out, encode_feature_matrix(fm))
    out.commit()


def cmd_select(args) -> None:
    fm = load_feature_matrix(args.input)
    ranking = fs.rank_features(fm, args.method, jobs=args.jobs)
    out = Outputs()
    if args.sweep is not None:
        evaluator = make_cv_evaluator(fm, folds=args.folds, seed=resolve_seed(args.seed))
        report = fs.threshold_sweep(fm, args.sweep, evaluator, args.method, ranking)
        out.add(args.out, fs.sweep_csv(report))
    else:
        if args.top_k is not None:
            subset = fs.select_top_k(ranking, args.top_k)
        else:
            threshold = fs.DEFAULT_DSDC_THRESHOLD if args.threshold is None else args.threshold
            subset = fs.select_by_threshold(ranking, threshold)
        subset.provenance["input_sha256"] = sha256_file(args.input)
        out.add(args.out, json.dumps(fs.subset_to_json(subset), indent=1) + "\n")
    if args.ranking is not None:
        out.add(args.ranking, fs.ranking_csv(ranking))
    out.commit()


def cmd_train(args) -> None:
    watch = Stopwatch()
    cfg = load_config(args.config, args.seed, constraint_type=args.constraint)
    with watch.stage("load"):
        fm = load_feature_matrix(args.input)
        digests = {"input": sha256_file(args.input)}
        if args.subset is not None:
            subset = fs.load_subset(args.subset)
            digests["subset"] = sha256_file(args.subset)
            if subset.selected_indices.size and subset.selected_indices[-1] >= fm.num_features:
                raise InputError("subset refers to features beyond the matrix width")
            if len(subset) == 0:
                raise InputError("subset is empty")
            cols = subset.selected_indices
        else:
            cols = np.arange(fm.num_features)
    fm.require_both_classes()
    train_idx, val_idx = stratified_split(fm.labels, (8, 1), cfg.seed)
    with watch.stage("train"):
        model = train_model(fm.rows(train_idx).columns(cols), fm.rows(val_idx).columns(cols),
                            cfg, pretrain=not args.no_pretrain)
    model.feature_indices = np.asarray(cols, dtype=np.int64)
    manifest = RunManifest("train", cfg.to_dict(), {"seed": cfg.seed}, digests,
                           timings=watch.timings)
    manifest.config["pretrain"] = not args.no_pretrain
    manifest.config["epochs_run"] = len(model.history or [])
    out = Outputs()
    out.add(args.out_model, model.dumps() + "\n")
    out.add(f"{args.out_model}.manifest.json", manifest.to_text())
    out.commit()


def _stem(path) -> str:
    p = str(path)
    return p[:-5] if p.endswith(".json") else p


def cmd_cv(args) -> None:
    watch = Stopwatch()
    cfg = load_config(args.config, args.seed, constraint_type=args.constraint)
    with watch.stage("load"):
        fm = load_feature_matrix(args.input)
    jobs = args.jobs if args.jobs is not None else (os.cpu_count() or 1)
    with watch.stage("cv"):
        report = run_cv(fm, cfg, args.repeats, args.folds, _selection(args),
                        pretrain=not args.no_pretrain, jobs=jobs)
    watch.timings["fold_train_seconds"] = float(sum(f.train_seconds for f in report.folds))
    stem = _stem(args.out_report)
    manifest = RunManifest("cv", report.config, {"seed": cfg.seed},
                           {"input": sha256_file(args.input)}, timings=watch.timings)
    out = Outputs()
    out.add(args.out_report, report_json(report, timings=False) + "\n")
    out.add(f"{stem}.folds.csv", folds_csv(report, timings=False))
    out.add(f"{stem}.roc.csv", curve_csv(report.roc["fpr"], report.roc["tpr"], ("fpr", "tpr")))
    out.add(f"{stem}.det.csv", curve_csv(report.det["fpr"], report.det["fnr"], ("fpr", "fnr")))
    out.add(f"{stem}.manifest.json", manifest.to_text())
    out.commit()
    print(f"mean accuracy {report.mean_accuracy:.4f}  sensitivity {report.mean_sensitivity:.4f}  "
          f"specificity {report.mean_specificity:.4f}  AUC {report.mean_auc:.4f}")


def cmd_compare_fs(args) -> None:
    fm = load_feature_matrix(args.input)
    rows = compare_feature_selection(fm, args.methods, args.k_grid, folds=args.folds,
                                     seed=resolve_seed(args.seed))
    out = Outputs()
    out.add(args.out, comparison_csv(rows))
    out.commit()


def cmd_synth(args) -> None:
    seed = resolve_seed(args.seed)
    out = Outputs()
    if args.kind == "features":
        if args.planted_indices is not None:
            planted = args.planted_indices
        else:
            planted = random_planted(args.num_features, args.planted, seed)
        spec = SyntheticSpec(args.num_features, planted, args.shift, args.samples_per_class,
                             args.noise_std, seed)
        fm = synth_features(spec)
        if str(args.out).endswith(".csv"):
            out.add(args.out, feature_matrix_csv(fm))
        else:
            out.add(args.out, encode_feature_matrix(fm))
    else:
        coupling = CouplingSpec(args.pairs, args.positive_weight, args.negative_weight,
                                args.shared_amplitude, noise_std=args.noise_std,
                                positive_fraction=args.positive_fraction)
        subjects, labels = synth_timeseries(args.num_subjects, args.num_rois,
                                            args.num_timepoints, coupling, seed)
        directory = Path(args.out)
        out.add_dir(directory)
        for ts in subjects:
            out.add(directory / f"{ts.subject_id}.csv", timeseries_csv(ts))
        manifest_lines = ["subject_id,label"] + [
            f"{ts.subject_id},{int(l)}" for ts, l in zip(subjects, labels)]
        manifest_path = args.manifest or directory.parent / f"{directory.name}.manifest.csv"
        out.add(manifest_path, "\n".join(manifest_lines) + "\n")
    out.commit()


def cmd_predict(args) -> None:
    try:
        with open(args.model) as fh:
            text = fh.read()
    except UnicodeDecodeError as exc:
        raise InputError(f"model file is not text: {exc}") from exc
    model = TrainedModel.loads(text)
    fm = load_feature_matrix(args.input)
    x = model.select_inputs(fm.values)
    if x.shape[1] != model.params.hidden1.fan_in:
        raise InputError(f"model expects {model.params.hidden1.fan_in} features, "
                         f"matrix has {fm.num_features}")
    probs = model.predict_proba(x)
    labels = model.predict(x)
    lines = ["subject_id,label,p_asd"] + [
        f"{sid},{int(lbl)},{float(p):.17g}"
        for sid, lbl, p in zip(fm.subject_ids, labels, probs[:, 0])]
    out = Outputs()
    out.add(args.out, "\n".join(lines) + "\n")
    out.commit()


# -- argument parsing ------------------------------------------------------------


def _add_selection_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", choices=fs.METHODS, default="dsdc")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--threshold", type=float, default=None,
                       help=f"keep features scoring above this (default {fs.DEFAULT_DSDC_THRESHOLD})")
    group.add_argument("--top-k", type=int, default=None, help="keep the K best-ranked features")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fcnet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"fcnet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="time-series CSVs -> feature matrix")
    p.add_argument("--timeseries-dir", required=True)
    p.add_argument("--manifest", required=True, help="CSV of subject_id,label")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("select", help="rank features and write a subset (or a threshold sweep)")
    p.add_argument("--in", dest="input", required=True)
    _add_selection_flags(p)
    p.add_argument("--sweep", type=_float_list, default=None,
                   help="comma-separated thresholds; writes a sweep CSV to --out")
    p.add_argument("--folds", type=int, default=10, help="CV folds for --sweep")
    p.add_argument("--ranking", default=None, help="also write the ranking CSV here")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("train", help="pretrain, transfer and fine-tune one model")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--subset", default=None, help="subset JSON from 'select'")
    p.add_argument("--config", default=None, help="TrainingConfig JSON")
    p.add_argument("--constraint", choices=CONSTRAINT_TYPES, default=None)
    p.add_argument("--no-pretrain", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-model", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cv", help="repeated stratified cross-validation of the pipeline")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--folds", type=int, default=10)
    _add_selection_flags(p)
    p.add_argument("--constraint", choices=CONSTRAINT_TYPES, default=None)
    p.add_argument("--no-pretrain", action="store_true")
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: all cores)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-report", required=True)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("compare-fs", help="linear-baseline accuracy per method and k")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--methods", type=_method_list, default=list(fs.METHODS))
    p.add_argument("--k-grid", type=_int_list, required=True)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare_fs)

    p = sub.add_parser("synth", help="generate synthetic data")
    kinds = p.add_subparsers(dest="kind", required=True)
    f = kinds.add_parser("features")
    f.add_argument("--num-features", type=int, required=True)
    planted = f.add_mutually_exclusive_group(required=True)
    planted.add_argument("--planted", type=int, help="number of randomly placed planted features")
    planted.add_argument("--planted-indices", type=_int_list)
    f.add_argument("--shift", type=float, required=True, help="class mean difference")
    f.add_argument("--samples-per-class", type=_class_sizes, required=True, help="N or POS,NEG")
    f.add_argument("--noise-std", type=float, default=1.0)
    f.add_argument("--seed", type=int, default=None)
    f.add_argument("--out", required=True)
    t = kinds.add_parser("timeseries")
    t.add_argument("--num-subjects", type=int, required=True)
    t.add_argument("--num-rois", type=int, required=True)
    t.add_argument("--num-timepoints", type=int, required=True)
    t.add_argument("--pairs", type=_pairs, default=[], help="coupled ROI pairs, e.g. 0-1,2-3")
    t.add_argument("--positive-weight", type=float, default=0.8)
    t.add_argument("--negative-weight", type=float, default=0.0)
    t.add_argument("--shared-amplitude", type=float, default=0.0)
    t.add_argument("--noise-std", type=float, default=1.0)
    t.add_argument("--positive-fraction", type=float, default=0.5)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--manifest", default=None,
                   help="manifest path (default: <out>.manifest.csv beside the directory)")
    t.add_argument("--out", required=True, help="output directory for per-subject CSVs")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("predict", help="label a feature matrix with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except FcnetError as exc:
        print(f"fcnet {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, UnicodeDecodeError) as exc:
        print(f"fcnet {args.command}: error: {exc}", file=sys.stderr)
        return InputError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
