"""Folds, metrics, bitrate, Wilcoxon and KS against independent references."""

import itertools
import math

import numpy as np
import pytest
from scipy import stats

from tcfnet import evaluation as ev
from tcfnet.records import EpochSet


# ---------------------------------------------------------------- folds


def groups(subjects=3, sessions=4):
    return [(s, q) for s in range(1, subjects + 1) for q in range(1, sessions + 1)]


def test_leave_one_session_out():
    plan = ev.make_folds(groups(2, 4), "leave_one_session_out")
    assert len(plan.folds) == 8
    for f in plan.folds:
        assert len(f.test) == 1 and f.test[0] not in f.train
        assert {s for s, _ in f.train} == {f.subject} and len(f.train) == 3
    assert plan.folds[0].name == "sub-01_ses-1"


def test_leave_one_subject_out():
    plan = ev.make_folds(groups(3, 2), "leave_one_subject_out")
    assert [f.name for f in plan.folds] == ["sub-01", "sub-02", "sub-03"]
    for f in plan.folds:
        assert {s for s, _ in f.test} == {f.subject}
        assert f.subject not in {s for s, _ in f.train}


def test_fold_errors():
    with pytest.raises(ValueError):
        ev.make_folds(groups(1, 4), "leave_one_subject_out")
    with pytest.raises(ValueError):
        ev.make_folds(groups(2, 1), "leave_one_session_out")
    with pytest.raises(ValueError):
        ev.make_folds(groups(), "k_fold")


def epoch_set(groups_, per=20):
    n = per * len(groups_)
    subj = np.repeat([g[0] for g in groups_], per)
    sess = np.repeat([g[1] for g in groups_], per)
    z = np.zeros(n, dtype=np.int64)
    return EpochSet(np.zeros((n, 16, 120)), z, z, np.tile(np.arange(per), len(groups_)), z, sess, subj)


def test_split_epochs_disjoint_and_seeded():
    eps = epoch_set(groups(1, 4))
    f = ev.make_folds(groups(1, 4), "leave_one_session_out").folds[1]
    tr, va, te = ev.split_epochs(f, eps, 0.1, seed=3)
    assert len(te) == 20 and len(va) == 6 and len(tr) == 54
    assert not (set(tr) & set(va)) and not (set(tr) & set(te)) and not (set(va) & set(te))
    assert set(eps.session[te]) == {2}
    again = ev.split_epochs(f, eps, 0.1, seed=3)
    assert all(np.array_equal(a, b) for a, b in zip((tr, va, te), again))
    assert not np.array_equal(ev.split_epochs(f, eps, 0.1, seed=4)[1], va)


# ---------------------------------------------------------------- metrics


def test_accuracy_and_cross_entropy():
    assert ev.accuracy([1, 0, 1, 1], [1, 0, 0, 1]) == 75.0
    p = np.array([[0.9, 0.1], [0.2, 0.8]])
    assert ev.cross_entropy(p, [0, 1]) == pytest.approx(-(math.log(0.9) + math.log(0.8)) / 2)
    assert ev.cross_entropy(np.array([[1.0, 0.0]]), [1]) == pytest.approx(-math.log(1e-12))
    with pytest.raises(ValueError):
        ev.accuracy([], [])


def wolpaw(P, N):
    return math.log2(N) + P * math.log2(P) + (1 - P) * math.log2((1 - P) / (N - 1))


@pytest.mark.parametrize("P,N", [(0.9, 6), (0.5, 6), (0.7, 4), (0.99, 36)])
def test_bits_per_selection(P, N):
    assert ev.bits_per_selection(P, N) == pytest.approx(wolpaw(P, N), abs=1e-12)


def test_bitrate_endpoints():
    assert ev.bits_per_selection(1.0, 6) == pytest.approx(math.log2(6))
    assert ev.bits_per_selection(1 / 6, 6) == pytest.approx(0.0, abs=1e-12)
    assert ev.bitrate(1.0, 6, 2.4) == pytest.approx(math.log2(6) * 25)
    with pytest.raises(ValueError):
        ev.bits_per_selection(1.2)


# ---------------------------------------------------------------- Wilcoxon


def brute_force_p(d):
    """Enumerate every sign assignment of the midranked magnitudes."""
    d = np.asarray(d, float)
    d = d[d != 0]
    ranks = stats.rankdata(np.abs(d))
    W = min(ranks[d > 0].sum(), ranks[d < 0].sum())
    hits = 0
    for signs in itertools.product((0, 1), repeat=len(d)):
        wp = float(np.dot(signs, ranks))
        hits += min(wp, ranks.sum() - wp) <= W + 1e-9
    return W, hits / 2 ** len(d)


@pytest.mark.parametrize("seed", range(8))
def test_wilcoxon_exact_matches_enumeration(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(5, 12))
    d = np.round(r.normal(0.3, 1.0, n), 1)  # rounding produces ties
    res = ev.wilcoxon_signed_rank(d, np.zeros(n))
    W, p = brute_force_p(d)
    if len(d[d != 0]) < 5:
        pytest.skip("too many zeros")
    assert res.W == pytest.approx(W) and res.p == pytest.approx(p, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_wilcoxon_exact_matches_scipy_without_ties(seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=12), r.normal(size=12)
    ours = ev.wilcoxon_signed_rank(a, b)
    ref = stats.wilcoxon(a, b, method="exact")
    assert ours.W == pytest.approx(ref.statistic) and ours.p == pytest.approx(ref.pvalue, abs=1e-12)


def test_wilcoxon_normal_approximation():
    r = np.random.default_rng(0)
    a, b = r.normal(size=40), r.normal(0.3, 1, size=40)
    ours = ev.wilcoxon_signed_rank(a, b)
    ref = stats.wilcoxon(a, b, method="approx", correction=True)
    assert ours.method == "normal"
    assert ours.p == pytest.approx(ref.pvalue, rel=1e-9)


def test_wilcoxon_table_values_n9():
    # all nine differences positive except rank r: W = r (or 0)
    base = np.arange(1, 10, dtype=float)
    assert ev.wilcoxon_signed_rank(base, np.zeros(9)).p == pytest.approx(2 / 512)
    one = base.copy()
    one[0] *= -1
    assert ev.wilcoxon_signed_rank(one, np.zeros(9)).p == pytest.approx(4 / 512)
    two = base.copy()
    two[1] *= -1
    assert ev.wilcoxon_signed_rank(two, np.zeros(9)).p == pytest.approx(6 / 512)


def test_wilcoxon_degenerate():
    assert ev.wilcoxon_signed_rank([1, 2, 3, 4, 5], [1, 2, 3, 4, 5]).method == "undefined"
    with pytest.raises(ValueError):
        ev.wilcoxon_signed_rank([1, 2, 3], [0, 0, 0])


# ---------------------------------------------------------------- KS


@pytest.mark.parametrize("seed", range(4))
def test_ks_matches_scipy_with_fixed_parameters(seed):
    x = np.random.default_rng(seed).normal(2.0, 3.0, 30)
    D, p = ev.ks_normality(x, mean=2.0, sd=3.0)
    ref = stats.kstest(x, "norm", args=(2.0, 3.0), method="asymp")
    assert D == pytest.approx(ref.statistic, abs=1e-12) and p == pytest.approx(ref.pvalue, rel=1e-9)


def test_ks_estimated_parameters_and_rejection():
    x = np.random.default_rng(0).normal(size=50)
    ref = stats.kstest(x, "norm", args=(x.mean(), x.std(ddof=1)), method="asymp")
    assert ev.ks_normality(x)[0] == pytest.approx(ref.statistic)
    assert ev.ks_normality(np.random.default_rng(1).exponential(size=200) ** 3)[1] < 0.01
    with pytest.raises(ValueError):
        ev.ks_normality([1.0, 2.0])
    with pytest.raises(ValueError):
        ev.ks_normality(np.ones(10))


# ---------------------------------------------------------------- records and reports


def rec(topo, subject, acc, strategy="leave_one_session_out", fold=None):
    return ev.ResultRecord(topo, strategy, subject, fold or f"sub-{subject:02d}_ses-1", acc, 0.3, 100, "h", 0)


def test_results_csv_roundtrip():
    rs = [rec("lenet", 1, 91.25), rec("eeg-tcfnet", 2, 100.0 / 3)]
    text = ev.results_csv(rs)
    back = ev.read_results(text)
    assert [(r.topology, r.subject, r.accuracy) for r in back] == [("lenet", 1, 91.25), ("eeg-tcfnet", 2, 33.33333333)]
    assert ev.results_csv(back) == text
    with pytest.raises(ValueError):
        ev.ResultRecord("lenet", "s", 1, "f", 101.0, 0.1, 1, "h", 0)


def test_compare_report_shape_and_tests():
    r = np.random.default_rng(0)
    recs = []
    for topo in ("lenet", "lenet-fnb", "eeg-tcnet", "eeg-tcnet-fnb", "eeg-tcnet-lstm"):
        for s in range(1, 10):
            bump = 2.0 if topo == "lenet-fnb" else 0.0
            recs.append(rec(topo, s, 80 + s + bump + r.uniform(0, 0.5)))
    rows = ev.compare_report(recs)
    assert len(rows) == 12
    assert [row[1] for row in rows[:6]] == list(ev.TOPOLOGIES)
    lenet_fnb = rows[1]
    assert lenet_fnb[2] == "lenet" and lenet_fnb[3] == 9
    assert lenet_fnb[7] == pytest.approx(2.0, abs=0.5)
    assert lenet_fnb[9] == pytest.approx(2 / 512) and lenet_fnb[10] == "ok"
    assert rows[5][10].startswith("incomplete")
    assert all(row[10].startswith("incomplete") for row in rows[6:])
    text = ev.compare_csv(rows)
    assert text.splitlines()[0] == ",".join(ev.COMPARE_COLUMNS) and len(text.splitlines()) == 13


def test_compare_with_too_few_units_reports_undefined_p():
    recs = [rec(t, 1, 90.0 + i) for i, t in enumerate(ev.TOPOLOGIES)]
    rows = ev.compare_report(recs, ["leave_one_session_out"])
    assert rows[1][7] == pytest.approx(1.0) and math.isnan(rows[1][9])
    assert rows[1][10].startswith("p undefined")


def test_stats_report_lines():
    recs = [rec(t, s, 85.0 + s * (i + 1) % 7) for i, t in enumerate(ev.TOPOLOGIES) for s in range(1, 8)]
    text = ev.stats_report(recs)
    assert text.startswith("[leave_one_session_out]")
    assert sum(line.startswith("ks ") for line in text.splitlines()) == 6
    assert sum(line.startswith("wilcoxon ") for line in text.splitlines()) == 3
