import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stenomil.evaluation import (
    FoldMetrics,
    ablation_report,
    average_ranges,
    concordance_auc,
    evaluate_fold,
    range_breakdown,
    roc_auc,
    stratified_kfold,
)
from stenomil.mil import Bag, MilModel
from stenomil.tensor import TrainConfig

# -- folds ----------------------------------------------------------------------------

def test_ten_patients_five_positive_exact_stratification():
    labels = np.array([1, 0] * 5)
    plan = stratified_kfold(labels, 5, seed=0)
    for f in plan.test_folds:
        assert len(f) == 2 and labels[f].sum() == 1


def test_folds_partition_cohort():
    labels = np.random.default_rng(0).integers(0, 2, 57)
    plan = stratified_kfold(labels, 5, seed=1)
    allidx = np.concatenate(plan.test_folds)
    assert sorted(allidx.tolist()) == list(range(57))
    for i in range(5):
        assert not set(plan.train(i)) & set(plan.test(i))
        assert len(plan.train(i)) + len(plan.test(i)) == 57


def test_126_patients_fold_sizes():
    labels = np.random.default_rng(2).integers(0, 2, 126)
    plan = stratified_kfold(labels, 5, seed=0)
    assert sorted(len(f) for f in plan.test_folds) == [25, 25, 25, 25, 26]


@settings(max_examples=50, deadline=None)
@given(st.integers(10, 200), st.integers(2, 10), st.integers(0, 2**32 - 1))
def test_stratification_within_one_patient(n, k, seed):
    labels = np.random.default_rng(seed).integers(0, 2, n)
    plan = stratified_kfold(labels, k, seed)
    expected = labels.sum() / k
    sizes = [len(f) for f in plan.test_folds]
    assert max(sizes) - min(sizes) <= 1
    for f in plan.test_folds:
        assert abs(labels[f].sum() - expected) < 1


def test_fold_plan_deterministic():
    labels = np.random.default_rng(3).integers(0, 2, 40)
    a, b = stratified_kfold(labels, 5, 9), stratified_kfold(labels, 5, 9)
    assert all(np.array_equal(x, y) for x, y in zip(a.test_folds, b.test_folds))
    c = stratified_kfold(labels, 5, 10)
    assert not all(np.array_equal(x, y) for x, y in zip(a.test_folds, c.test_folds))


def test_invalid_k_rejected():
    with pytest.raises(ValueError):
        stratified_kfold([0, 1, 0], 1, 0)
    with pytest.raises(ValueError):
        stratified_kfold([0, 1, 0], 4, 0)


# -- ROC / AUC --------------------------------------------------------------------------------

def test_perfect_ranking():
    assert roc_auc([0.9, 0.1], [1, 0]).auc == 1.0


def test_all_ties_give_half():
    assert roc_auc(np.full(9, 0.3), [1, 0, 1, 1, 0, 0, 1, 0, 0]).auc == 0.5


def test_auc_equals_concordance_on_50_random_instances_with_ties():
    rng = np.random.default_rng(0)
    for i in range(50):
        n = int(rng.integers(2, 80))
        scores = rng.integers(0, 6, n) / 5 if i % 2 else rng.random(n)
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        assert abs(roc_auc(scores, labels).auc - concordance_auc(scores, labels)) <= 1e-12


def test_concordance_oracle_by_hand():
    # pos {3, 1}, neg {2, 1}: pairs (3>2) (3>1) (1<2) (1=1) -> 2.5 / 4
    assert concordance_auc([3, 1, 2, 1], [1, 1, 0, 0]) == 0.625
    assert roc_auc([3, 1, 2, 1], [1, 1, 0, 0]).auc == 0.625


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.booleans()), min_size=2, max_size=40))
def test_curve_monotone_and_negation_symmetry(pairs):
    scores = np.array([p[0] for p in pairs], float)
    labels = np.array([p[1] for p in pairs], int)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    roc = roc_auc(scores, labels)
    assert np.all(np.diff(roc.sensitivity) >= 0) and np.all(np.diff(1 - roc.specificity) >= 0)
    assert np.all(np.diff(roc.thresholds) < 0)
    assert 0 <= roc.auc <= 1
    assert roc_auc(-scores, labels).auc == pytest.approx(1 - roc.auc, abs=1e-12)


def test_roc_needs_both_classes():
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 1])


def test_operating_point_highest_threshold_reaching_target():
    scores = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.05]
    labels = [1, 1, 0, 1, 0, 1, 0, 0, 1, 0]
    t, se, sp = roc_auc(scores, labels).operating_point(0.70)
    # positives at 0.9, 0.8, 0.6, 0.4, 0.1: 4 of 5 reached at threshold 0.4
    assert (t, se, sp) == (0.4, 0.8, 0.6)


def test_csv_lines():
    text = roc_auc([0.9, 0.1, 0.5], [1, 0, 1]).to_csv().splitlines()
    assert text[0] == "threshold,sensitivity,specificity"
    assert text[1] == "inf,0.0,1.0"
    assert len(text) == 5


# -- FFR ranges -------------------------------------------------------------------------------

def test_range_breakdown_absent_cells():
    ffr = np.array([0.6, 0.65, 0.75, 0.78, 0.85, 0.88, 0.92, 0.97])
    labels = (ffr <= 0.8).astype(int)
    scores = np.array([0.9, 0.2, 0.8, 0.6, 0.3, 0.7, 0.1, 0.2])
    rows = range_breakdown(scores, labels, ffr, 0.5)
    assert [r.name for r in rows] == ["FFR <= 0.7", "0.7 < FFR < 0.9", "FFR >= 0.9"]
    low, mid, high = rows
    assert low.specificity is None and low.sensitivity == 0.5
    assert high.sensitivity is None and high.specificity == 1.0
    assert mid.sensitivity == 1.0 and mid.specificity == 0.5


def test_range_breakdown_all_correct_gives_ones():
    ffr = np.array([0.6, 0.75, 0.85, 0.95])
    labels = (ffr <= 0.8).astype(int)
    rows = range_breakdown(labels.astype(float), labels, ffr, 0.5)
    for r in rows:
        assert all(v == 1.0 for v in (r.sensitivity, r.specificity) if v is not None)


def test_average_ranges_keeps_absent_cells_absent():
    ffr = np.array([0.6, 0.95])
    a = range_breakdown([0.9, 0.1], [1, 0], ffr, 0.5)
    b = range_breakdown([0.1, 0.9], [1, 0], ffr, 0.5)
    avg = average_ranges([a, b])
    assert avg[0].sensitivity == 0.5 and avg[0].specificity is None
    assert avg[2].sensitivity is None and avg[2].specificity == 0.5


# -- fold evaluation ----------------------------------------------------------------------------

def _bags(rng, n):
    return [Bag(rng.normal(size=(int(rng.integers(1, 6)), 1024)), rng.normal(size=512), i % 2) for i in range(n)]


def _snapshots(count, mode="combined", same=False):
    out = []
    for i in range(count):
        s = MilModel(mode, seed=0 if same else i).state_dict()
        s["train.iteration"] = np.array((i + 1) * 1000, dtype=np.int64)
        out.append(s)
    return out


def test_evaluate_fold_uses_last_ten_of_twenty():
    bags = _bags(np.random.default_rng(0), 12)
    m = evaluate_fold(_snapshots(20), bags, "combined")
    assert m.n_models == 10
    assert m.iterations.tolist() == list(range(11000, 21000, 1000))
    assert m.scores.shape == (10, 12)


def test_duplicated_checkpoint_has_zero_sd():
    bags = _bags(np.random.default_rng(1), 10)
    m = evaluate_fold(_snapshots(10, same=True), bags)
    assert m.auc_sd == 0.0


def test_evaluate_fold_rejects_mode_mismatch_and_short_lists():
    bags = _bags(np.random.default_rng(2), 6)
    with pytest.raises(ValueError):
        evaluate_fold(_snapshots(10, "arteries"), bags, "combined")
    with pytest.raises(ValueError):
        evaluate_fold(_snapshots(9), bags)


def test_arteries_only_on_myocardium_only_labels_is_chance():
    # labels live only in the myocardium features; artery encodings are pure noise
    rng = np.random.default_rng(0)
    bags, ffr = [], []
    for i in range(100):
        label = i % 2
        myo = rng.normal(size=512) * 0.3
        myo[:16] += 1.5 if label else -1.5
        bags.append(Bag(rng.normal(size=(int(rng.integers(2, 6)), 1024)), myo, label))
        ffr.append(0.7 if label else 0.9)
    plan = stratified_kfold([b.label for b in bags], 5, 0)
    cfg = TrainConfig(iterations=1000, checkpoint_interval=100, learning_rate=1e-3, seed=0)
    rep = ablation_report(bags, ffr, plan, cfg, ["arteries", "myo"])
    assert abs(rep.auc("arteries") - 0.5) <= 0.1
    assert rep.auc("myo") > 0.9


def test_ablation_report_schema_and_files(tmp_path):
    rng = np.random.default_rng(4)
    bags = _bags(rng, 20)
    ffr = np.where([b.label for b in bags], 0.7, 0.9)
    plan = stratified_kfold([b.label for b in bags], 2, 0)
    cfg = TrainConfig(iterations=20, checkpoint_interval=2, seed=0)
    rep = ablation_report(bags, ffr, plan, cfg, out_dir=tmp_path)
    assert list(rep.rows) == ["combined", "arteries", "myo"]
    table = (tmp_path / "report.txt").read_text()
    for mode in rep.rows:
        assert table.count(f"\n{mode} ") >= 1
        for fold in range(2):
            assert (tmp_path / f"roc_{mode}_{fold}.csv").is_file()
    assert "-" in table  # absent range cells print as "-"
    again = ablation_report(bags, ffr, plan, cfg)
    assert again.table() == rep.table()


def test_macro_average_over_folds_then_checkpoints():
    def fm(aucs):
        a = np.array(aucs, float)
        z = np.zeros_like(a)
        return FoldMetrics("combined", a, z, z, z, np.zeros((len(a), 2)), np.array([0, 1]), z.astype(int))

    from stenomil.evaluation import ModeSummary

    row = ModeSummary("combined", [fm([0.6, 0.8]), fm([0.8, 1.0])], [])
    assert row.auc_by_checkpoint().tolist() == pytest.approx([0.7, 0.9])
    assert row.auc == pytest.approx(0.8) and row.auc_sd_checkpoints == pytest.approx(0.1)
    assert row.auc_sd_folds == pytest.approx(0.1)


def test_range_counts_are_cohort_totals():
    from stenomil.evaluation import summarize_mode

    def fm(labels):
        n = len(labels)
        z = np.zeros(3)
        return FoldMetrics("myo", z, z, z, np.full(3, 0.5), np.zeros((3, n)), np.array(labels), np.arange(3))

    folds = [fm([1, 0, 0]), fm([1, 1, 0])]
    ffr = [np.array([0.65, 0.85, 0.95]), np.array([0.75, 0.6, 0.92])]
    low, mid, high = summarize_mode("myo", folds, ffr).ranges
    assert (low.n_pos, low.n_neg) == (2, 0)
    assert (mid.n_pos, mid.n_neg) == (1, 1)
    assert (high.n_pos, high.n_neg) == (0, 2)
