"""Ranking metrics, the patient bootstrap, paired tests and latent-space analysis."""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from cmcppg.errors import UndefinedMetric

log = logging.getLogger(__name__)

BOOTSTRAP_MAX_REDRAWS = 100
EXACT_WILCOXON_MAX_N = 12


def _check(scores, labels, need_negatives=True):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in length")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    y = y.astype(np.int64)
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0/1")
    n_pos = int(y.sum())
    if n_pos == 0 or (need_negatives and n_pos == len(y)):
        raise UndefinedMetric(f"need both classes, got {n_pos} positives of {len(y)}")
    return s, y


def auroc(scores, labels):
    """Probability a random positive outranks a random negative, ties count 1/2.

    Computed from midranks (Mann-Whitney U), which is exact for ties.
    """
    s, y = _check(scores, labels)
    r = stats.rankdata(s)  # average ranks for ties
    n1 = int(y.sum())
    n0 = len(y) - n1
    u = r[y == 1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def auprc(scores, labels):
    """Average precision: sum over thresholds of (R_k - R_{k-1}) * P_k."""
    s, y = _check(scores, labels, need_negatives=False)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    # keep the last index of every run of equal scores
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = tp[last]
    precision = tp / (last + 1.0)
    recall = tp / tp[-1]
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def subgroup_eval(scores, labels, quality, good=0):
    """AUROC on GOOD and BAD quality subsets and the relative drop in percent."""
    q = np.asarray(quality)
    s, y = np.asarray(scores), np.asarray(labels)
    out = {}
    for name, mask in (("good", q == good), ("bad", q != good)):
        try:
            out[f"auroc_{name}"] = auroc(s[mask], y[mask])
        except UndefinedMetric:
            out[f"auroc_{name}"] = None
    g, b = out["auroc_good"], out["auroc_bad"]
    out["drop_pct"] = None if g is None or b is None else 100.0 * (g - b) / g
    return out


# ---------------------------------------------------------------- bootstrap

def one_per_patient(patient_ids, rng):
    """Index of one uniformly chosen record for every patient, in sorted patient order."""
    pids = np.asarray(patient_ids, dtype=object)
    groups = {}
    for i, p in enumerate(pids.tolist()):
        groups.setdefault(p, []).append(i)
    return np.array([groups[p][int(rng.integers(len(groups[p])))] for p in sorted(groups)], dtype=np.int64)


@dataclass
class BootstrapResult:
    values: list
    mean: float | None
    std: float | None
    redraws: int
    skipped: int
    indices: list = field(default_factory=list, repr=False)


def bootstrap_auroc(scores, labels, patient_ids, draws=100, seed=0, metric=auroc):
    """One-record-per-patient bootstrap of ``metric``.

    Draw ``d`` uses its own generator seeded with ``(seed, d)``. A draw holding
    a single class is redrawn up to ``BOOTSTRAP_MAX_REDRAWS`` times and then
    skipped; if every draw is skipped UndefinedMetric is raised.
    """
    s, y = np.asarray(scores, dtype=np.float64), np.asarray(labels)
    if len(set(np.asarray(patient_ids, dtype=object).tolist())) < 2:
        raise UndefinedMetric("bootstrap needs at least two patients")
    values, picks, redraws, skipped = [], [], 0, 0
    for d in range(draws):
        rng = np.random.default_rng([seed, d])
        for _ in range(BOOTSTRAP_MAX_REDRAWS + 1):
            idx = one_per_patient(patient_ids, rng)
            try:
                v = metric(s[idx], y[idx])
                break
            except UndefinedMetric:
                redraws += 1
        else:
            skipped += 1
            continue
        values.append(v)
        picks.append(idx)
    if not values:
        raise UndefinedMetric(f"all {draws} bootstrap draws were single-class")
    if skipped:
        log.warning("%d of %d bootstrap draws skipped as single-class", skipped, draws)
    arr = np.asarray(values)
    return BootstrapResult(arr.tolist(), float(arr.mean()), float(arr.std(ddof=1)) if np.ptp(arr) > 0 else 0.0,
                           redraws, skipped, [p.tolist() for p in picks])


# ---------------------------------------------------------------- Wilcoxon

@dataclass
class WilcoxonResult:
    statistic: float  # W+, sum of ranks of positive differences
    p_value: float
    n: int
    method: str


def _exact_null(ranks):
    """Distribution of W+ over all 2^n sign patterns for the given ranks.

    Ranks are doubled to integers so tied midranks stay exact.
    """
    r2 = np.rint(2 * np.asarray(ranks)).astype(np.int64)
    counts = np.zeros(int(r2.sum()) + 1, dtype=np.int64)
    counts[0] = 1
    for r in r2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:len(counts) - r]
        counts = counts + shifted
    return counts  # index = 2 * W+


def wilcoxon_signed_rank(a, b, exact_max_n=EXACT_WILCOXON_MAX_N):
    """Two-sided paired signed-rank test of ``a - b``; zero differences are dropped.

    For n <= ``exact_max_n`` the p-value is P(|W - mu| >= |w - mu|) under the
    exact permutation null. Above that a normal approximation with tie
    correction is used.
    """
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"paired samples differ in length: {len(a)} vs {len(b)}")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, "no-differences")
    ranks = stats.rankdata(np.abs(d))
    w = float(ranks[d > 0].sum())
    mu = n * (n + 1) / 4.0
    if n <= exact_max_n:
        counts = _exact_null(ranks)
        w2 = np.arange(len(counts)) / 2.0
        extreme = np.abs(w2 - mu) >= abs(w - mu) - 1e-9
        p = float(counts[extreme].sum() / counts.sum())
        return WilcoxonResult(w, min(1.0, p), n, "exact")
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts ** 3 - tie_counts).sum() / 48.0
    z = (w - mu) / math.sqrt(var)
    p = float(2 * stats.norm.sf(abs(z)))
    return WilcoxonResult(w, min(1.0, p), n, "normal")


def bonferroni_threshold(n_methods=None, alpha=0.05, n_comparisons=None):
    """Per-comparison threshold alpha / m for all pairwise comparisons."""
    if n_comparisons is None:
        n_comparisons = n_methods * (n_methods - 1) // 2
    return alpha / n_comparisons


def pairwise_wilcoxon(samples: dict, alpha=0.05):
    """Signed-rank tests over every pair of methods' bootstrap values."""
    names = sorted(samples)
    pairs = list(itertools.combinations(names, 2))
    thr = bonferroni_threshold(n_comparisons=max(1, len(pairs)), alpha=alpha)
    rows = []
    for a, b in pairs:
        r = wilcoxon_signed_rank(samples[a], samples[b])
        rows.append({"a": a, "b": b, "statistic": r.statistic, "p_value": r.p_value,
                     "method": r.method, "significant": r.p_value < thr})
    return {"alpha": alpha, "n_comparisons": len(pairs), "threshold": thr, "tests": rows}


# ---------------------------------------------------------------- latent space

@dataclass
class NeighborhoodReport:
    purity: float
    ccr: float
    same_class: float
    k: int
    n_queries: int
    per_query: list = field(default_factory=list, repr=False)


def latent_neighborhood_analysis(query_latents, query_trusted, ref_latents, ref_observed, ref_trusted, k=50):
    """Neighbour purity and counter-class ratio in a latent space.

    For each query the ``k`` nearest reference records (Euclidean, ties broken
    by reference index) are collected. Purity is the fraction whose observed
    label equals their trusted label; CCR is the fraction whose trusted class
    differs from the query's trusted class.
    """
    Q = np.atleast_2d(np.asarray(query_latents, dtype=np.float64))
    R = np.atleast_2d(np.asarray(ref_latents, dtype=np.float64))
    q_true = np.asarray(query_trusted).ravel()
    obs, tru = np.asarray(ref_observed).ravel(), np.asarray(ref_trusted).ravel()
    n = len(R)
    if n == 0 or len(Q) == 0:
        raise UndefinedMetric("need at least one query and one reference record")
    if k > n:
        log.warning("k=%d exceeds the %d reference records; clamping", k, n)
        k = n
    correct = obs == tru
    per = []
    for q in range(len(Q)):
        diff = R - Q[q]
        d = (diff * diff).sum(axis=1)
        nb = np.lexsort((np.arange(n), d))[:k]
        per.append((float(np.mean(correct[nb])), float(np.mean(tru[nb] != q_true[q])),
                    float(np.mean(tru[nb] == q_true[q]))))
    arr = np.asarray(per)
    return NeighborhoodReport(float(arr[:, 0].mean()), float(arr[:, 1].mean()), float(arr[:, 2].mean()),
                              int(k), len(Q), arr.tolist())


def pick_queries(n, n_queries=100, seed=0):
    """Seeded sorted sample of query indices."""
    rng = np.random.default_rng([seed, 5])
    return np.sort(rng.choice(n, min(n_queries, n), replace=False))


# ---------------------------------------------------------------- timing

def timing_compare(cmc_seconds, ce_seconds):
    """Ratio of median per-epoch wall-clock times."""
    cmc, ce = float(np.median(cmc_seconds)), float(np.median(ce_seconds))
    return {"cmc_median_s": cmc, "ce_median_s": ce, "ratio": cmc / ce}


# ---------------------------------------------------------------- reports

@dataclass
class MetricsReport:
    method: str
    seed: int
    auroc: float | None
    auprc: float | None
    auroc_good: float | None = None
    auroc_bad: float | None = None
    drop_pct: float | None = None
    bootstrap_mean: float | None = None
    bootstrap_std: float | None = None
    epoch_seconds_median: float | None = None
    ae_pretrain_seconds: float | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self):
        return asdict(self)


def evaluate(method, seed, scores, labels, quality=None, patient_ids=None, draws=0, boot_seed=0):
    """Metrics for one score vector; undefined metrics are stored as None."""
    rep = MetricsReport(method, seed, None, None)
    try:
        rep.auroc = auroc(scores, labels)
        rep.auprc = auprc(scores, labels)
    except UndefinedMetric as exc:
        rep.extra["undefined"] = str(exc)
    if quality is not None:
        sg = subgroup_eval(scores, labels, quality)
        rep.auroc_good, rep.auroc_bad, rep.drop_pct = sg["auroc_good"], sg["auroc_bad"], sg["drop_pct"]
    if draws and patient_ids is not None:
        b = bootstrap_auroc(scores, labels, patient_ids, draws, boot_seed)
        rep.bootstrap_mean, rep.bootstrap_std = b.mean, b.std
    return rep


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def to_csv(rows, columns):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


QUALITY_CSV_COLUMNS = ["method", "seed", "auroc_good", "auroc_bad", "drop_pct"]
BOOTSTRAP_CSV_COLUMNS = ["method", "draw", "auroc"]


def quality_csv(reports):
    return to_csv([r.to_json() for r in reports], QUALITY_CSV_COLUMNS)


def bootstrap_csv(per_method: dict):
    rows = [{"method": m, "draw": i, "auroc": v} for m in sorted(per_method) for i, v in enumerate(per_method[m])]
    return to_csv(rows, BOOTSTRAP_CSV_COLUMNS)


def dumps_json(obj):
    return json.dumps(obj, sort_keys=True, indent=2, default=_default) + "\n"


def _default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")
