import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fcnet import feature_selection as fs
from fcnet.data import SyntheticSpec, random_planted, synth_features
from fcnet.dataset import FeatureMatrix
from fcnet.errors import InputError
from fcnet.evaluation import make_cv_evaluator
from oracles import bin_counts_double_loop, dsdc_double_loop, fisher_formula


def test_step_distribution_uniform_grid():
    values = np.linspace(0, 1, 20)
    labels = np.arange(20) % 2
    d = fs.build_step_distributions(values, labels, 20)
    assert (d.pos_counts + d.neg_counts).tolist() == [1] * 20
    assert d.pos_total == 10 and d.neg_total == 10
    assert d.bin_width == pytest.approx(0.05)


def test_step_distribution_disjoint_classes():
    values = [0.0] * 5 + [1.0] * 7
    labels = [1] * 5 + [0] * 7
    d = fs.build_step_distributions(values, labels)
    assert d.pos_counts[0] == 5 and d.pos_counts[1:].sum() == 0
    assert d.neg_counts[19] == 7 and d.neg_counts[:19].sum() == 0
    assert fs.dsdc_score(d) == 2.0


def test_step_distribution_matches_binning_oracle():
    rng = np.random.default_rng(11)
    for _ in range(50):
        values = rng.normal(size=40)
        labels = rng.integers(0, 2, 40)
        labels[:2] = [0, 1]
        d = fs.build_step_distributions(values, labels)
        pos, neg = bin_counts_double_loop(values.tolist(), labels.tolist())
        assert d.pos_counts.tolist() == pos and d.neg_counts.tolist() == neg


def test_step_distribution_degenerate_and_errors():
    d = fs.build_step_distributions([2.0, 2.0, 2.0], [0, 1, 1])
    assert d.bin_count == 1 and fs.dsdc_score(d) == 0.0
    with pytest.raises(InputError):
        fs.build_step_distributions([1.0, 2.0], [1, 1])


def test_dsdc_examples():
    same = fs.StepDistributionPair(0, 1, 0.5, 2, np.array([2, 6]), np.array([1, 3]))
    assert fs.dsdc_score(same) == 0.0
    counts = fs.StepDistributionPair(0, 1, 0.5, 2, np.array([150, 50]), np.array([50, 150]))
    assert fs.dsdc_score(counts) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(InputError):
        fs.dsdc_score(fs.StepDistributionPair(0, 1, 0.5, 2, np.array([0, 0]), np.array([1, 1])))


def test_dsdc_edge_values_match_oracle():
    # Integer-valued features put many samples exactly on bin edges.
    rng = np.random.default_rng(5)
    x = rng.integers(0, 41, size=(60, 30)).astype(float) / 8.0
    y = np.r_[np.ones(30), np.zeros(30)].astype(int)
    scores, _ = fs.score_features(x, y, "dsdc")
    for j in range(30):
        assert scores[j] == pytest.approx(dsdc_double_loop(x[:, j], y), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dsdc_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=30)
    y = np.r_[np.ones(12), np.zeros(18)].astype(int)
    perm = rng.permutation(30)
    a = fs.dsdc_score(fs.build_step_distributions(x, y))
    b = fs.dsdc_score(fs.build_step_distributions(x[perm], y[perm]))
    assert a == pytest.approx(b, abs=1e-15)
    assert 0.0 <= a <= 2.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.5, 2.0, 4.0]), st.sampled_from([-3.0, 0.0, 8.0]))
def test_dsdc_affine_invariant(seed, scale, shift):
    # Power-of-two scales and small shifts keep bin membership exact.
    rng = np.random.default_rng(seed)
    x = rng.normal(size=25)
    y = np.r_[np.ones(10), np.zeros(15)].astype(int)
    a = fs.build_step_distributions(x, y)
    b = fs.build_step_distributions(scale * x + shift, y)
    if (a.pos_counts == b.pos_counts).all() and (a.neg_counts == b.neg_counts).all():
        assert fs.dsdc_score(a) == fs.dsdc_score(b)
    else:
        # Rounding moved a value across an edge; only allow a one-sample shift.
        moved = np.abs(a.pos_counts - b.pos_counts).sum() + np.abs(a.neg_counts - b.neg_counts).sum()
        assert moved <= 2


def test_fisher_examples():
    assert fs.fisher_score([1, 2, 3, 1, 2, 3], [1, 1, 1, 0, 0, 0]) == 0.0
    assert fs.fisher_score([0, 0, 0, 1, 1, 1], [1, 1, 1, 0, 0, 0]) == np.inf
    v, y = [1, 2, 3, 3, 4, 5], [1, 1, 1, 0, 0, 0]
    assert fs.fisher_score(v, y) == pytest.approx(fisher_formula(v, y), abs=1e-15)
    assert fs.fisher_score(v, y) == pytest.approx(1.0)
    assert fs.fisher_score([2, 2, 2, 2], [1, 1, 0, 0]) == 0.0


def test_abs_pcc_examples():
    y = np.array([0, 1, 1, 0, 1, 0, 0, 1])
    assert fs.abs_pcc_score(y.astype(float), y) == pytest.approx(1.0)
    assert fs.abs_pcc_score(1.0 - y, y) == pytest.approx(1.0)
    rng = np.random.default_rng(4)
    big = rng.integers(0, 2, 1000)
    assert fs.abs_pcc_score(rng.normal(size=1000), big) < 0.2
    scores, flat = fs.score_features(np.ones((8, 1)), y, "abs_pcc")
    assert scores[0] == 0.0 and flat[0]


def test_rank_features_planted_first_for_all_methods():
    spec = SyntheticSpec(50, [17], 5.0, 100, seed=3)
    fm = synth_features(spec)
    for method in fs.METHODS:
        assert fs.rank_features(fm, method).order[0] == 17


def test_rank_constant_last_and_ties():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 4))
    x[:, 1] = 3.0
    x[:, 3] = x[:, 2]
    y = np.r_[np.ones(20), np.zeros(20)]
    for method in ("dsdc", "abs_pcc"):
        r = fs.rank_features(FeatureMatrix(x, y), method)
        assert r.order[-1] == 1 and r.scores[1] == 0
        pos = {int(f): k for k, f in enumerate(r.order)}
        assert pos[3] == pos[2] + 1
    with pytest.raises(InputError):
        fs.rank_features(FeatureMatrix(x, y), "chi2")


def test_ranking_order_is_sorted_permutation():
    rng = np.random.default_rng(9)
    fm = FeatureMatrix(rng.normal(size=(30, 100)), np.r_[np.ones(15), np.zeros(15)])
    for method in fs.METHODS:
        r = fs.rank_features(fm, method)
        assert sorted(r.order.tolist()) == list(range(100))
        assert (np.diff(r.scores[r.order]) <= 0).all()


def test_fisher_inf_ranked_first():
    x = np.array([[0.0, 1.0], [0.0, 2.0], [1.0, 1.5], [1.0, 0.5]])
    r = fs.rank_features(FeatureMatrix(x, [1, 1, 0, 0]), "fisher")
    assert r.order[0] == 0 and np.isinf(r.scores[0])


def test_select_by_threshold():
    r = fs.FeatureRanking("dsdc", np.array([0.3, 0.241, 0.5]), fs.order_by_score(np.array([0.3, 0.241, 0.5])))
    assert fs.select_by_threshold(r, 0.241).selected_indices.tolist() == [0, 2]
    assert len(fs.select_by_threshold(r, 0.0)) == 3
    empty = fs.select_by_threshold(r, 0.9)
    assert len(empty) == 0 and empty.provenance["empty"]


def test_select_by_threshold_equals_set_definition():
    rng = np.random.default_rng(2)
    fm = FeatureMatrix(rng.normal(size=(50, 200)), np.r_[np.ones(25), np.zeros(25)])
    r = fs.rank_features(fm)
    for t in (0.1, 0.3, 0.5):
        assert fs.select_by_threshold(r, t).selected_indices.tolist() == \
            [i for i, s in enumerate(r.scores) if s > t]


def test_select_top_k():
    scores = np.array([0.1, 0.9, 0.5])
    r = fs.FeatureRanking("dsdc", scores, fs.order_by_score(scores))
    assert len(fs.select_top_k(r, 0)) == 0
    assert fs.select_top_k(r, 3).selected_indices.tolist() == [0, 1, 2]
    assert fs.select_top_k(r, 2).selected_indices.tolist() == [1, 2]
    with pytest.raises(InputError):
        fs.select_top_k(r, 4)


def test_threshold_sweep_basic():
    spec = SyntheticSpec(30, [0, 1], 3.0, 40, seed=1)
    fm = synth_features(spec)
    report = fs.threshold_sweep(fm, [0.3], lambda s: 0.75)
    assert len(report.rows) == 1 and report.best.threshold == 0.3
    calls = []
    r = fs.rank_features(fm)
    lo = float(np.sort(r.scores)[5])
    report = fs.threshold_sweep(fm, [lo - 1e-9, lo - 2e-9],
                                lambda s: calls.append(tuple(s.selected_indices)) or len(calls))
    assert calls[0] == calls[1]


def test_threshold_sweep_evaluator_error_names_threshold():
    fm = synth_features(SyntheticSpec(10, [0], 3.0, 20, seed=1))

    def boom(subset):
        raise ValueError("nope")

    with pytest.raises(RuntimeError, match="0.05"):
        fs.threshold_sweep(fm, [0.05], boom)


def test_threshold_sweep_ties_prefer_smaller_subset():
    fm = synth_features(SyntheticSpec(20, [0, 1, 2], 4.0, 30, seed=2))
    report = fs.threshold_sweep(fm, [0.0, 0.5, 1.0], lambda s: 0.9)
    assert report.best.subset_size == min(r.subset_size for r in report.rows if r.subset_size)


def test_threshold_sweep_recovers_planted():
    planted = random_planted(1000, 50, 7)
    fm = synth_features(SyntheticSpec(1000, planted, 2.0, 200, seed=7))
    evaluator = make_cv_evaluator(fm, folds=5, seed=0)
    report = fs.threshold_sweep(fm, [0.3, 0.4, 0.5, 0.6, 0.8], evaluator)
    chosen = fs.select_by_threshold(fs.rank_features(fm), report.best.threshold)
    kept = len(set(chosen.selected_indices.tolist()) & set(planted))
    assert kept >= 0.9 * len(planted)


def test_serialisation(tmp_path):
    scores = np.array([0.2, 0.7, 0.1])
    r = fs.FeatureRanking("dsdc", scores, fs.order_by_score(scores))
    fs.write_ranking_csv(r, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "feature_index,score,rank"
    assert lines[2] == "1,0.69999999999999996,0"
    subset = fs.select_top_k(r, 2)
    doc = json.loads(json.dumps(fs.subset_to_json(subset)))
    back = fs.subset_from_json(doc)
    assert back.selected_indices.tolist() == [0, 1]
    assert back.provenance["top_k"] == 2
    with pytest.raises(InputError):
        fs.subset_from_json({"selected_indices": [3, 1]})
