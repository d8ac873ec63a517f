import itertools
import json

import numpy as np
import pytest
from scipy.stats import rankdata, wilcoxon
from sklearn.metrics import average_precision_score

from cmcppg import eval_analysis as ea
from cmcppg.errors import UndefinedMetric


def concordance(s, y):
    pos, neg = s[y == 1], s[y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def enum_wilcoxon(d):
    """Two-sided exact p by listing all sign assignments."""
    d = np.asarray([x for x in d if x != 0], dtype=float)
    n = len(d)
    if n == 0:
        return 1.0
    r = rankdata(np.abs(d))
    w = r[d > 0].sum()
    ws = [sum(r[i] for i in range(n) if signs[i]) for signs in itertools.product((0, 1), repeat=n)]
    ws = np.array(ws)
    lo, hi = np.mean(ws <= w + 1e-9), np.mean(ws >= w - 1e-9)
    return min(1.0, 2 * min(lo, hi))


# ---------------------------------------------------------------- AUROC / AUPRC

def test_auroc_examples():
    assert ea.auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert ea.auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert ea.auroc([0.5] * 6, [0, 1] * 3) == 0.5
    with pytest.raises(UndefinedMetric):
        ea.auroc([0.2, 0.3], [1, 1])


def test_auroc_matches_concordance_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 201))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        s = np.round(rng.random(n), int(rng.integers(1, 4)))  # rounding forces ties
        assert abs(ea.auroc(s, y) - concordance(s, y)) <= 1e-12


def test_auroc_invariances():
    rng = np.random.default_rng(1)
    s, y = rng.random(80), rng.integers(0, 2, 80)
    base = ea.auroc(s, y)
    assert ea.auroc(np.exp(3 * s) + 2, y) == base
    assert ea.auroc(-s, 1 - y) == pytest.approx(base, abs=1e-15)


def test_auprc_examples_and_sklearn():
    assert ea.auprc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert ea.auprc([0.3, 0.6, 0.9], [1, 1, 1]) == 1.0
    assert ea.auprc([0.9, 0.1], [0, 1]) == 0.5
    with pytest.raises(UndefinedMetric):
        ea.auprc([0.1, 0.2], [0, 0])
    rng = np.random.default_rng(2)
    for _ in range(50):
        n = int(rng.integers(2, 150))
        y = rng.integers(0, 2, n)
        y[0] = 1
        s = np.round(rng.random(n), 2)
        assert ea.auprc(s, y) == pytest.approx(average_precision_score(y, s), abs=1e-12)


def test_subgroup_eval_and_drop():
    s = np.array([0.1, 0.9, 0.2, 0.8, 0.6, 0.4, 0.3, 0.7])
    y = np.array([0, 1, 0, 1, 0, 1, 0, 1])
    q = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    out = ea.subgroup_eval(s, y, q)
    assert out["auroc_good"] == 1.0 and out["auroc_bad"] == 0.75 and out["drop_pct"] == 25.0
    assert ea.subgroup_eval(s, y, np.zeros(8))["drop_pct"] is None
    # the drop formula itself
    assert 100 * (0.90 - 0.72) / 0.90 == pytest.approx(20.0)
    same = ea.subgroup_eval(np.r_[s[:4], s[:4]], np.r_[y[:4], y[:4]], q)
    assert same["drop_pct"] == 0.0


# ---------------------------------------------------------------- bootstrap

def _per_patient_data(n_pat=30, per=4, seed=0):
    rng = np.random.default_rng(seed)
    pids = np.repeat([f"p{i:02d}" for i in range(n_pat)], per)
    y = np.repeat(np.arange(n_pat) % 2, per)
    s = rng.random(len(y)) * 0.6 + 0.4 * y
    return s, y, pids


def test_bootstrap_one_record_per_patient_and_reproducible():
    s, y, pids = _per_patient_data()
    a = ea.bootstrap_auroc(s, y, pids, draws=100, seed=7)
    b = ea.bootstrap_auroc(s, y, pids, draws=100, seed=7)
    assert a.values == b.values and a.indices == b.indices and len(a.values) == 100
    for idx in a.indices:
        assert len(idx) == 30 and sorted(set(pids[idx])) == sorted(set(pids))
    assert ea.bootstrap_auroc(s, y, pids, draws=100, seed=8).values != a.values


def test_bootstrap_single_record_patients_zero_variance():
    s, y, pids = _per_patient_data(per=1)
    r = ea.bootstrap_auroc(s, y, pids, draws=20, seed=0)
    assert r.std == 0.0 and len(set(r.values)) == 1


def test_bootstrap_sample_size_equals_patient_count():
    s, y, pids = _per_patient_data(n_pat=126, per=3)
    r = ea.bootstrap_auroc(s, y, pids, draws=5, seed=0)
    assert all(len(i) == 126 for i in r.indices)


def test_bootstrap_degenerate_paths():
    with pytest.raises(UndefinedMetric):
        ea.bootstrap_auroc([0.1, 0.2], [0, 1], ["a", "a"], draws=3)
    # patient b has mixed labels: draws lacking a positive are redrawn
    s = [0.1, 0.9, 0.2, 0.3]
    y = [0, 1, 0, 0]
    pids = ["a", "b", "b", "c"]
    r = ea.bootstrap_auroc(s, y, pids, draws=30, seed=0)
    assert r.redraws > 0 and r.skipped == 0 and all(v == 1.0 for v in r.values)
    with pytest.raises(UndefinedMetric):
        ea.bootstrap_auroc([0.1, 0.2, 0.3], [0, 0, 0], ["a", "b", "c"], draws=2)


# ---------------------------------------------------------------- Wilcoxon

def test_wilcoxon_examples():
    assert ea.wilcoxon_signed_rank([1, 2, 3], [0, 0, 0]).p_value == 0.25
    assert ea.wilcoxon_signed_rank([0.3, 0.5], [0.3, 0.5]).p_value == 1.0
    assert ea.wilcoxon_signed_rank([-1, 1], [0, 0]).p_value == 1.0
    with pytest.raises(ValueError):
        ea.wilcoxon_signed_rank([1, 2], [1])


def test_wilcoxon_exact_matches_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(150):
        n = int(rng.integers(1, 13))
        d = np.round(rng.normal(size=n), 1)  # rounding produces ties and zeros
        r = ea.wilcoxon_signed_rank(d, np.zeros(n))
        want = enum_wilcoxon(d)
        if r.n == 0:
            assert r.p_value == 1.0
        else:
            assert r.method == "exact" and r.p_value == pytest.approx(want, abs=1e-12)


def test_wilcoxon_normal_branch_matches_scipy():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b = rng.random(100), rng.random(100)
        b = np.round(b, 2)
        a = np.round(a, 2)
        r = ea.wilcoxon_signed_rank(a, b)
        ref = wilcoxon(a, b, zero_method="wilcox", correction=False, method="approx")
        assert r.method == "normal" and r.p_value == pytest.approx(ref.pvalue, rel=1e-9)


def test_bonferroni_and_pairwise():
    assert ea.bonferroni_threshold(6) == pytest.approx(0.05 / 15)
    assert round(ea.bonferroni_threshold(6), 4) == 0.0033
    assert ea.bonferroni_threshold(n_comparisons=4, alpha=0.1) == 0.025
    rng = np.random.default_rng(0)
    out = ea.pairwise_wilcoxon({m: rng.random(30) for m in "ABCDEF"})
    assert out["n_comparisons"] == 15 and out["threshold"] == pytest.approx(0.05 / 15)
    assert all(0 <= t["p_value"] <= 1 for t in out["tests"])


# ---------------------------------------------------------------- latent analysis

def test_purity_and_ccr_fixtures():
    rng = np.random.default_rng(0)
    ref = rng.normal(size=(50, 4))
    observed = np.ones(50, int)
    trusted = np.ones(50, int)
    observed[:10] = 0  # 10 mislabeled neighbours
    r = ea.latent_neighborhood_analysis(np.zeros((1, 4)), [1], ref, observed, trusted, k=50)
    assert r.purity == 0.8 and r.ccr == 0.0
    trusted2 = np.ones(50, int)
    trusted2[:10] = 0
    r = ea.latent_neighborhood_analysis(np.zeros((1, 4)), [1], ref, trusted2, trusted2, k=50)
    assert r.ccr == 0.2 and r.purity == 1.0 and r.same_class == 0.8


def test_copies_of_query_give_perfect_neighbourhood():
    q = np.random.default_rng(1).normal(size=(3, 5))
    ref = np.repeat(q, 10, axis=0)
    lab = np.repeat([0, 1, 1], 10)
    r = ea.latent_neighborhood_analysis(q, [0, 1, 1], ref, lab, lab, k=10)
    assert r.purity == 1.0 and r.ccr == 0.0


def test_neighbourhood_k_clamp_ranges_and_tie_rule(caplog):
    rng = np.random.default_rng(2)
    ref = rng.normal(size=(8, 2))
    obs, tru = rng.integers(0, 2, 8), rng.integers(0, 2, 8)
    r = ea.latent_neighborhood_analysis(rng.normal(size=(4, 2)), [0, 1, 0, 1], ref, obs, tru, k=50)
    assert r.k == 8 and "clamping" in caplog.text
    assert 0 <= r.purity <= 1 and 0 <= r.ccr <= 1
    # two references at equal distance: the lower index wins the single slot
    ref = np.array([[1.0, 0.0], [-1.0, 0.0]])
    r = ea.latent_neighborhood_analysis([[0.0, 0.0]], [0], ref, [0, 1], [0, 0], k=1)
    assert r.purity == 1.0
    r = ea.latent_neighborhood_analysis([[0.0, 0.0]], [0], ref[::-1], [1, 0], [0, 0], k=1)
    assert r.purity == 0.0


def test_pick_queries_deterministic():
    a = ea.pick_queries(1000, 100, 3)
    assert np.array_equal(a, ea.pick_queries(1000, 100, 3)) and len(set(a.tolist())) == 100
    assert len(ea.pick_queries(20, 100, 3)) == 20


# ---------------------------------------------------------------- timing and reports

def test_timing_compare():
    assert ea.timing_compare([5, 5, 5], [5, 5, 5])["ratio"] == 1.0
    assert ea.timing_compare([12.0], [10.0])["ratio"] == pytest.approx(1.2)


def test_metrics_report_schema_and_csv():
    s, y, pids = _per_patient_data()
    q = np.arange(len(y)) % 2
    rep = ea.evaluate("CMC", 0, s, y, q, pids, draws=10, boot_seed=1)
    rep.epoch_seconds_median, rep.ae_pretrain_seconds = 1.5, 3.0
    d = json.loads(ea.dumps_json(rep.to_json()))
    for key in ("auroc", "auprc", "auroc_good", "auroc_bad", "drop_pct", "epoch_seconds_median",
                "ae_pretrain_seconds", "bootstrap_mean"):
        assert key in d
    csv = ea.quality_csv([rep])
    assert csv.splitlines()[0] == "method,seed,auroc_good,auroc_bad,drop_pct"
    assert csv.splitlines()[1].startswith("CMC,0,")
    b = ea.bootstrap_csv({"CMC": [0.9, 0.8]})
    assert b.splitlines() == ["method,draw,auroc", "CMC,0,0.9", "CMC,1,0.8"]
