"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 7-10 share a single desk-scale CE vs CMC experiment run through
the command line (``tests/configs/desk_experiment.json``).
"""
import csv
import itertools
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import rankdata

import alarm_scenario as scenario
from acceptance_log import record
from cmcppg import cli
from cmcppg import eval_analysis as ea
from cmcppg.alarm_labeler import label_recordings, parse_alarm_log
from cmcppg.cmc_train import Normalization, TrainConfig, cmc_losses, total_loss, train
from cmcppg.embed_cluster import ClusterModel, _update, assign, kmeans
from cmcppg.nn import tensor as T
from cmcppg.nn.gradcheck import check_gradients
from cmcppg.nn.layers import BatchNorm1d, Conv1d, Linear
from cmcppg.nn.models import ArchSpec, ResNet1d
from cmcppg.nn.tensor import Tensor
from cmcppg.signal_core import write_waveform
from cmcppg.synth import NoiseSpec, gen_labeled_corpus

HERE = Path(__file__).parent
DESK_CONFIG = HERE / "configs" / "desk_experiment.json"


# ---------------------------------------------------------------- 1. loss formula

def _brute(F, c, mean):
    intra = inter = 0.0
    ni = nx = 0
    for i, j in itertools.permutations(range(len(F)), 2):
        d = float(np.sqrt(((F[i] - F[j]) ** 2).sum()))
        if c[i] == c[j]:
            intra, ni = intra + d, ni + 1
        else:
            inter, nx = inter - d, nx + 1
    if mean:
        return (intra / ni if ni else 0.0), (inter / nx if nx else 0.0)
    return intra, inter


def test_criterion_01_loss_oracle():
    t0 = time.perf_counter()
    a, b = cmc_losses(np.array([[0.0], [2.0], [10.0], [12.0]]), np.array([0, 0, 1, 1]), Normalization.RAW_SUM)
    fixture = (float(a.data), float(b.data)) == (8.0, -80.0)
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 17))
        F = rng.normal(size=(n, int(rng.integers(1, 5))))
        c = rng.integers(0, int(rng.integers(1, 5)), n)
        for mode in (Normalization.RAW_SUM, Normalization.PAIR_MEAN):
            got = [float(v.data) for v in cmc_losses(F, c, mode)]
            want = _brute(F, c, mode == Normalization.PAIR_MEAN)
            for g, w in zip(got, want):
                worst = max(worst, abs(g - w) / max(abs(w), 1e-12) if w else abs(g))
    secs = time.perf_counter() - t0
    ok = fixture and worst <= 1e-5 and secs < 1.0
    assert record(1, "loss fixture 8/-80 and 100 brute-force batches", ok,
                  f"fixture={fixture}, max rel err {worst:.1e}, {secs:.2f}s")


# ---------------------------------------------------------------- 2. reduction equivalence

def test_criterion_02_reduction_equivalence(small_corpus):
    t0 = time.perf_counter()
    assert len(small_corpus) == 512
    ids = np.arange(len(small_corpus)) % 6
    base = dict(epochs=3, preset="TINY", seed=5)
    ce = train(small_corpus, TrainConfig(loss_mode="CE", **base))
    cmc = train(small_corpus, TrainConfig(loss_mode="CMC", lambda1=0.0, lambda2=0.0, **base), ids)
    keys = ("epoch", "l_ce", "l_total", "val_loss")
    same_hist = [[h[k] for k in keys] for h in ce.history] == [[h[k] for k in keys] for h in cmc.history]
    same_w = all(np.array_equal(a, b) for (_, a), (_, b) in zip(ce.model.state_arrays(), cmc.model.state_arrays()))
    secs = time.perf_counter() - t0
    assert record(2, "lambda1=lambda2=0 CMC history bit-identical to CE", same_hist and same_w and secs < 60,
                  f"history={same_hist}, weights={same_w}, {secs:.1f}s")


# ---------------------------------------------------------------- 3. gradient fidelity

TOL = {np.float32: 1e-3, np.float64: 1e-6}


def _layer_cases(rng, dtype):
    """(name, loss_fn, tensors) for every layer type."""
    leaf = lambda a: Tensor(np.asarray(a, dtype=dtype), requires_grad=True)
    proj = lambda shape: Tensor(np.asarray(rng.normal(size=shape), dtype=dtype))
    with T.dtype_mode(dtype):
        lin = Linear(5, 3, rng)
        conv = Conv1d(3, 4, 5, rng, stride=2, bias=True)
        bn = BatchNorm1d(3)
    x2 = leaf(rng.normal(size=(4, 5)))
    x3 = leaf(rng.normal(size=(2, 11, 3)))
    xr = rng.normal(size=(5, 6))
    xr = leaf(np.where(np.abs(xr) < 0.05, 0.1, xr))
    xp = leaf(rng.permutation(48).reshape(2, 8, 3) * 0.1)
    xb = leaf(rng.normal(size=(4, 6, 3)) * 2 + 1)
    z = leaf(rng.normal(size=(6, 2)))
    y = rng.integers(0, 2, 6)
    r_lin, r_conv, r_relu = proj((4, 3)), proj((2, 6, 4)), proj((5, 6))
    r_bn, r_pool, r_gap = proj((4, 6, 3)), proj((2, 9, 3)), proj((2, 3))
    r_t = proj((4, 3, 6))
    target = np.asarray(rng.normal(size=(6, 2)), dtype=dtype)

    def bn_loss():
        bn.train()
        return (bn(xb) * r_bn).sum()

    return [
        ("linear", lambda: (lin(x2) * r_lin).sum(), [x2, lin.weight, lin.bias]),
        ("conv1d", lambda: (conv(x3) * r_conv).sum(), [x3, conv.weight, conv.bias]),
        ("relu", lambda: (T.relu(xr) * r_relu).sum(), [xr]),
        ("sigmoid", lambda: (T.sigmoid(xr) * r_relu).sum(), [xr]),
        ("batchnorm", bn_loss, [xb, bn.gamma, bn.beta]),
        ("pool/upsample/crop", lambda: (T.crop(T.upsample1d(T.max_pool1d(xp, 2), 3), 9) * r_pool).sum(), [xp]),
        ("transpose/reshape", lambda: (T.transpose12(xb) * r_t).sum() + T.reshape(xb, (4, 18)).mean(), [xb]),
        ("global_avg_pool", lambda: (T.global_avg_pool(xp) * r_gap).sum(), [xp]),
        ("cross_entropy", lambda: T.cross_entropy(z, y), [z]),
        ("symmetric_ce", lambda: T.symmetric_cross_entropy(z, y, 0.3, 1.2, -4.0), [z]),
        ("mse", lambda: T.mse(z, target), [z]),
    ]


def test_criterion_03_gradient_fidelity():
    t0 = time.perf_counter()
    worst = {np.float32: 0.0, np.float64: 0.0}
    failures = []
    cfg = TrainConfig(loss_mode="CMC", lambda1=0.3, lambda2=0.05)
    for dtype in (np.float32, np.float64):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            for name, fn, tensors in _layer_cases(rng, dtype):
                e = check_gradients(fn, tensors, rng=rng)
                worst[dtype] = max(worst[dtype], e)
                if e >= TOL[dtype]:
                    failures.append((name, dtype.__name__, seed, e))
            # full weighted loss through a TINY network
            with T.dtype_mode(dtype):
                m = ResNet1d(ArchSpec(preset="TINY", input_len=32, seed=seed))
            m.train()
            x = rng.normal(size=(6, 1, 32)).astype(dtype)
            y = rng.integers(0, 2, 6)
            cid = np.array([0, 0, 1, 1, 2, 2])

            def loss():
                logits, lat = m(x)
                return total_loss(logits, y, lat, cid, cfg).total

            params = m.parameters()
            picks = [params[i] for i in rng.choice(len(params), 6, replace=False)]
            e = check_gradients(loss, picks, h=1e-5 if dtype == np.float32 else None, max_entries=6, rng=rng)
            worst[dtype] = max(worst[dtype], e)
            if e >= TOL[dtype]:
                failures.append(("full loss", dtype.__name__, seed, e))
    secs = time.perf_counter() - t0
    ok = not failures and secs < 120
    assert record(3, "finite-difference checks, 20 seeds, every layer and the full loss", ok,
                  f"max rel err f32 {worst[np.float32]:.1e}, f64 {worst[np.float64]:.1e}, "
                  f"{len(failures)} failures, {secs:.0f}s"), failures


# ---------------------------------------------------------------- 4. K-means

def test_criterion_04_kmeans_invariants():
    X = np.array([[0.0], [1.0], [10.0], [11.0]])
    fixture = all(sorted(kmeans(X, 2, s).centroids[:, 0].tolist()) == [0.5, 10.5] and kmeans(X, 2, s).inertia == 1.0
                  for s in range(10))
    monotone = fixed = True
    for seed in range(10):
        rng = np.random.default_rng(seed)
        Z = np.concatenate([rng.normal(c, 1.0, size=(50, 4)) for c in (0, 3, 6)])
        cm = kmeans(Z, 6, seed)
        h = cm.inertia_history
        monotone &= all(b <= a * (1 + 1e-12) for a, b in zip(h, h[1:]))
        lab = assign(cm, Z)
        fixed &= bool(np.array_equal(_update(Z, lab, cm.centroids), cm.centroids))
        fixed &= bool(np.array_equal(assign(ClusterModel(6, _update(Z, lab, cm.centroids), 0, 0), Z), lab))
    assert record(4, "K-means monotone inertia, fixed point, {0,1,10,11} fixture", fixture and monotone and fixed,
                  f"fixture={fixture}, monotone={monotone}, fixed_point={fixed}")


# ---------------------------------------------------------------- 5. labeling golden test

def test_criterion_05_labeling_golden():
    ds, rep = label_recordings(parse_alarm_log(scenario.alarm_csv()).events, scenario.waveforms())
    got = [(r["label"], r["t_start_ms"] // 1000, r["n_samples"] / scenario.FS) for r in ds.manifest()["records"]]
    want = [(lab, t, 30.0) for lab, t in scenario.EXPECTED]
    ok = got == want and rep.excluded_pvc == 1
    assert record(5, "scripted alarm scenario gives AF[85,115) PVC[285,315) NSR[435,465) only", ok,
                  f"segments={[(g[0], g[1]) for g in got]}, excluded_pvc={rep.excluded_pvc}")


# ---------------------------------------------------------------- 6. metric oracles

def _enum_p(d):
    d = np.asarray([v for v in d if v != 0], dtype=float)
    if len(d) == 0:
        return 1.0
    r = rankdata(np.abs(d))
    w = r[d > 0].sum()
    ws = np.array([r[np.array(s, bool)].sum() for s in itertools.product((0, 1), repeat=len(d))])
    return min(1.0, 2 * min(np.mean(ws <= w + 1e-9), np.mean(ws >= w - 1e-9)))


def test_criterion_06_metric_oracles():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 201))
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        s = np.round(rng.random(n), int(rng.integers(1, 4)))
        pos, neg = s[y == 1], s[y == 0]
        conc = ((pos[:, None] > neg[None]).sum() + 0.5 * (pos[:, None] == neg[None]).sum()) / (len(pos) * len(neg))
        worst = max(worst, abs(ea.auroc(s, y) - conc))
    exact = True
    for _ in range(100):
        n = int(rng.integers(1, 13))
        d = np.round(rng.normal(size=n), 1)
        r = ea.wilcoxon_signed_rank(d, np.zeros(n))
        exact &= r.p_value == pytest.approx(_enum_p(d), abs=1e-12) and (r.n == 0 or r.method == "exact")
    fixture = ea.auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    ok = worst <= 1e-12 and exact and fixture
    assert record(6, "AUROC vs pair concordance, exact Wilcoxon vs enumeration, 0.75 fixture", ok,
                  f"max AUROC diff {worst:.1e}, wilcoxon={exact}, fixture={fixture}")


# ---------------------------------------------------------------- 7-10. desk-scale experiment

@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    code = cli.main(["experiment", "--config", str(DESK_CONFIG), "--out-dir", str(out)])
    secs = time.perf_counter() - t0
    assert code == 0
    with open(out / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    by = {}
    for r in rows:
        by.setdefault(r["method"], {})[int(r["seed"])] = r
    return {"dir": out, "seconds": secs, "rows": rows, "by": by}


def test_criterion_07_desk_trend(desk):
    ce, cmc = desk["by"]["CE"], desk["by"]["CMC"]
    seeds = sorted(ce)
    a_ce = np.array([float(ce[s]["auroc"]) for s in seeds])
    a_cmc = np.array([float(cmc[s]["auroc"]) for s in seeds])
    wins = int(np.sum(a_cmc > a_ce))
    ok = (len(seeds) == 5 and a_cmc.mean() >= a_ce.mean() - 0.005 and wins >= 3 and desk["seconds"] < 1200)
    per_seed = ", ".join(f"{c:.4f}/{m:.4f}" for c, m in zip(a_ce, a_cmc))
    assert record(7, "desk-scale CMC vs CE clean-test AUROC", ok,
                  f"mean CE {a_ce.mean():.4f} CMC {a_cmc.mean():.4f}, CMC wins {wins}/5 "
                  f"[CE/CMC per seed {per_seed}], {desk['seconds']:.0f}s")


def test_criterion_08_quality_subgroups(desk):
    ok = True
    detail = []
    for method, seeds in sorted(desk["by"].items()):
        good = [float(r["auroc_good"]) for r in seeds.values()]
        bad = [float(r["auroc_bad"]) for r in seeds.values()]
        ok &= all(g >= b for g, b in zip(good, bad))
        detail.append(f"{method} good {np.mean(good):.3f} bad {np.mean(bad):.3f}")
    with open(desk["dir"] / "quality.csv") as fh:
        q = list(csv.DictReader(fh))
    csv_ok = (set(q[0]) >= {"method", "auroc_good", "auroc_bad", "drop_pct"}
              and {r["method"].rsplit("-", 1)[1] for r in q} == set(desk["by"]))
    assert record(8, "GOOD-quality AUROC >= BAD-quality AUROC per method, subgroup CSV emitted", ok and csv_ok,
                  "; ".join(detail) + f"; csv={csv_ok}")


def test_criterion_09_latent_trend(desk):
    ce, cmc = desk["by"]["CE"], desk["by"]["CMC"]
    hits = sum(float(cmc[s]["purity"]) >= float(ce[s]["purity"]) and float(cmc[s]["ccr"]) <= float(ce[s]["ccr"])
               for s in ce)
    rng = np.random.default_rng(0)
    ref = rng.normal(size=(50, 4))
    obs, tru = np.ones(50, int), np.ones(50, int)
    obs[:10] = 0
    f1 = ea.latent_neighborhood_analysis(np.zeros((1, 4)), [1], ref, obs, tru, k=50).purity == 0.8
    tru2 = np.ones(50, int)
    tru2[:10] = 0
    f2 = ea.latent_neighborhood_analysis(np.zeros((1, 4)), [1], ref, tru2, tru2, k=50).ccr == 0.2
    with open(desk["dir"] / "latent.csv") as fh:
        per_cell = {}
        for r in csv.DictReader(fh):
            per_cell[(r["cell"], r["seed"])] = per_cell.get((r["cell"], r["seed"]), 0) + 1
    protocol = set(per_cell.values()) == {100}
    mean = lambda m, k: np.mean([float(r[k]) for r in desk["by"][m].values()])
    assert record(9, "purity(CMC) >= CE and CCR(CMC) <= CE in >= 3/5 seeds; 0.8/0.2 fixtures",
                  hits >= 3 and f1 and f2 and protocol,
                  f"{hits}/5 seeds, purity CE {mean('CE', 'purity'):.3f} CMC {mean('CMC', 'purity'):.3f}, "
                  f"CCR CE {mean('CE', 'ccr'):.3f} CMC {mean('CMC', 'ccr'):.3f}, fixtures={f1 and f2}, "
                  f"100 queries={protocol}")


def test_criterion_10_timing(desk):
    t = json.loads((desk["dir"] / "timing.json").read_text())["cmc_vs_ce"]
    with open(desk["dir"] / "metrics.jsonl") as fh:
        reports = [json.loads(line) for line in fh]
    ae_ok = all(r["ae_pretrain_seconds"] and r["ae_pretrain_seconds"] > 0 for r in reports)
    ok = t["ratio"] <= 1.25 and ae_ok
    assert record(10, "CMC per-epoch time <= 1.25x CE, AE pre-training reported", ok,
                  f"median epoch CE {t['ce_median_s']:.2f}s CMC {t['cmc_median_s']:.2f}s ratio {t['ratio']:.3f}, "
                  f"AE {np.mean([r['ae_pretrain_seconds'] for r in reports]):.1f}s")


# ---------------------------------------------------------------- 11. bootstrap protocol

def test_criterion_11_bootstrap_protocol():
    ds = gen_labeled_corpus(40, 5, {"NSR": 0.5, "AF": 0.5}, NoiseSpec(), seed=11, window_s=4.0)
    scores = np.random.default_rng(0).random(len(ds)) + 0.3 * ds.y_true
    a = ea.bootstrap_auroc(scores, ds.y_true, ds.patient_id, draws=100, seed=3)
    b = ea.bootstrap_auroc(scores, ds.y_true, ds.patient_id, draws=100, seed=3)
    n_pat = len(ds.patients())
    one_each = all(len(i) == n_pat and len(set(ds.patient_id[i].tolist())) == n_pat for i in a.indices)
    repro = a.values == b.values and len(a.values) == 100
    thr = ea.bonferroni_threshold(6)
    bonf = thr == 0.05 / 15 and round(thr, 4) == 0.0033
    assert record(11, "bootstrap one record per patient, reproducible draws, Bonferroni 0.05/15",
                  one_each and repro and bonf, f"per_patient={one_each}, reproducible={repro}, threshold {thr:.5f}")


# ---------------------------------------------------------------- 12. CLI reproducibility

SMALL = {"n_patients": 8, "segs_per_patient": 8, "class_mix": {"NSR": 0.25, "AF": 0.5, "PVC": 0.25},
         "window_s": 8.0, "noise": {"p_flip_good": 0.1, "p_flip_bad": 0.4, "p_bad_quality": 0.3}}
REPRO_CFG = {
    "schema_version": 1, "seed": 1, "synth": SMALL,
    "cluster": {"M": 3, "ae_epochs": 1, "latent_dim": 8},
    "train": {"epochs": 2, "batch_size": 16},
    "grid": {"lambda1": [0.01], "lambda2": [0.0, 0.001]},
    "eval": {"bootstrap_draws": 5, "k": 10, "n_queries": 10},
    "bench": {"epochs": 1, "n_records": 64},
    "experiment": {"seeds": [0, 1], "test": dict(SMALL, n_patients=10)},
}


def _run_all(root, cfg):
    """Every verb once; returns {verb: output dir}."""
    d = {v: root / v for v in cli.COMMANDS}
    data = root / "synth" / "data.ppgd"
    wdir = root / "waves"
    wdir.mkdir(parents=True)
    for i, w in enumerate(scenario.waveforms()):
        write_waveform(wdir / f"r{i}.ppgw", w)
    (root / "alarms.csv").write_bytes(scenario.alarm_csv())
    emb, clu = d["embed-cluster"] / "embedding.emb", d["embed-cluster"] / "clusters.json"
    calls = [
        ["synth", "--out", data],
        ["label", "--waveforms", wdir, "--alarms", root / "alarms.csv", "--out-dir", d["label"]],
        ["embed-cluster", "--dataset", data, "--out-dir", d["embed-cluster"]],
        ["train", "--dataset", data, "--embedding", emb, "--clusters", clu, "--loss-mode", "CMC",
         "--out-dir", d["train"]],
        ["grid-search", "--dataset", data, "--embedding", emb, "--clusters", clu, "--out-dir", d["grid-search"]],
        ["eval", "--checkpoint", d["train"] / "model.ckpt", "--dataset", data, "--out-dir", d["eval"]],
        ["analyze-latent", "--checkpoint", d["train"] / "model.ckpt", "--query", data, "--reference", data,
         "--out-dir", d["analyze-latent"]],
        ["experiment", "--out-dir", d["experiment"]],
        ["bench-timing", "--out-dir", d["bench-timing"]],
    ]
    for argv in calls:
        code = cli.main([argv[0], "--config", str(cfg)] + [str(a) for a in argv[1:]])
        assert code == 0, argv[0]
    return d


def _has_timing(path):
    if not str(path).endswith((".json", ".jsonl")):
        return False
    return cli.stable_hash(str(path)) != cli.sha256_bytes(
        json.dumps(_load_json(path), sort_keys=True).encode())


def _load_json(path):
    text = Path(path).read_text()
    if str(path).endswith(".jsonl"):
        return [json.loads(line) for line in text.splitlines() if line.strip()]
    return json.loads(text)


def test_criterion_12_cli_reproducibility(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(REPRO_CFG))
    runs = [_run_all(tmp_path / f"run{i}", cfg) for i in (1, 2)]
    byte_same, stable_same, timing_files, n = [], [], [], 0
    for verb in cli.COMMANDS:
        m1 = _load_json(runs[0][verb] / cli.MANIFEST)
        m2 = _load_json(runs[1][verb] / cli.MANIFEST)
        assert m1["config_sha256"] == m2["config_sha256"]
        assert sorted(m1["artifacts"]) == sorted(m2["artifacts"])
        for name, a in m1["artifacts"].items():
            b = m2["artifacts"][name]
            n += 1
            stable_same.append(a["stable_sha256"] == b["stable_sha256"])
            if _has_timing(runs[0][verb] / name):
                # wall-clock fields differ by nature; everything else must match
                timing_files.append(f"{verb}/{name}")
            else:
                byte_same.append(a["sha256"] == b["sha256"])
    ok = all(byte_same) and all(stable_same)
    assert record(12, "every CLI verb re-run gives identical artifacts (manifest hashes)", ok,
                  f"{sum(byte_same)}/{len(byte_same)} byte-identical, {sum(stable_same)}/{n} identical after "
                  f"stripping wall-clock fields ({', '.join(timing_files)})")
