"""CE / SCE / CMC comparison harness on synthetic corpora.

One call trains every (train size x preset x loss mode) cell for each
repeat seed, evaluates on a clean test corpus and gathers the subgroup,
bootstrap, paired-test, latent and timing analyses.
"""
from __future__ import annotations

import logging
import time
from dataclasses import replace

import numpy as np

from cmcppg import eval_analysis as ea
from cmcppg.cmc_train import LossMode, TrainConfig, grid_search_lambdas, predict, split_indices, train
from cmcppg.embed_cluster import assign, embed, kmeans, train_autoencoder
from cmcppg.synth import NoiseSpec, gen_labeled_corpus

log = logging.getLogger(__name__)


def derive_seed(*parts):
    """Stable 31-bit seed from integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0] & 0x7FFFFFFF)


def make_corpus(sc, seed, n_segments=None):
    spp = int(sc["segs_per_patient"])
    n_pat = int(sc["n_patients"]) if n_segments is None else max(2, int(n_segments) // spp)
    return gen_labeled_corpus(n_pat, spp, sc["class_mix"], NoiseSpec(**_noise_args(sc.get("noise", {}))), seed,
                              sc["fs_hz"], sc["window_s"], sc["mixed_patients"])


def _noise_args(d):
    d = dict(d)
    if "artifact_fraction" in d:
        d["artifact_fraction"] = tuple(d["artifact_fraction"])
    return d


def train_config(cfg, **over):
    t = dict(cfg["train"])
    t.update(over)
    return TrainConfig(**t)


def fit_clusters(ds, train_idx, cc, seed, fs_hz):
    """Autoencoder on the training split, K-means on its embeddings, ids for every record."""
    ae, rep = train_autoencoder(ds.X[train_idx], epochs=cc["ae_epochs"], lr=cc["ae_lr"], seed=seed,
                                batch_size=cc["ae_batch_size"], latent_dim=cc["latent_dim"],
                                view=cc["view"], fs_hz=fs_hz)
    emb = embed(ae, ds.X)
    cm = kmeans(emb[train_idx], cc["M"], seed, cc["max_iter"], cc["tol"])
    return ae, rep, emb, cm, assign(cm, emb)


def _grid_points(gc):
    return [(a, b) for a in gc["lambda1"] for b in gc["lambda2"]]


def run_experiment(cfg, progress=None):
    """Run the comparison described by a parsed config; returns a results dict.

    ``cfg`` needs ``synth`` (training corpus) and ``experiment.test`` (the
    clean test corpus). Loss modes default to CE and CMC.
    """
    ex = cfg.get("experiment", {})
    seeds = ex.get("seeds", [0])
    sizes = ex.get("train_sizes", [cfg["synth"]["n_patients"] * cfg["synth"]["segs_per_patient"]])
    presets = ex.get("presets", [cfg["train"]["preset"]])
    modes = ex.get("loss_modes", ["CE", "CMC"])
    test_sc = ex["test"]
    ec = cfg["eval"]
    g = cfg["seed"]
    cells, grids, latent_rows, timings = [], [], [], []
    chosen = {}
    t_start = time.perf_counter()
    for size in sizes:
        for rep_seed in seeds:
            data_seed = derive_seed(g, size, rep_seed, 1)
            train_ds = make_corpus(cfg["synth"], data_seed, size)
            test_ds = make_corpus(test_sc, derive_seed(g, size, rep_seed, 2))
            split_seed = derive_seed(g, size, rep_seed, 3)
            tri, vai = split_indices(train_ds, cfg["train"]["val_fraction"], split_seed)
            ae_t = time.perf_counter()
            ae, ae_rep, emb, cm, cid = fit_clusters(train_ds, tri, cfg["cluster"], derive_seed(g, size, rep_seed, 4),
                                                    train_ds.fs_hz)
            ae_seconds = time.perf_counter() - ae_t
            for pi, preset in enumerate(presets):
                model_seed = derive_seed(g, size, pi, rep_seed, 5)
                base = train_config(cfg, preset=preset, seed=model_seed)
                for mode in modes:
                    cell_id = f"n{size}-{preset}-{mode}"
                    if progress:
                        progress(f"seed {rep_seed} cell {cell_id}")
                    key = (size, preset)
                    if mode == "CMC":
                        if cfg["grid"]["tune_seed_only"] and key in chosen:
                            l1, l2 = chosen[key]
                            res = train(train_ds, replace(base, loss_mode=LossMode.CMC, lambda1=l1, lambda2=l2),
                                        cid, tri, vai)
                        else:
                            best, table = grid_search_lambdas(train_ds, cid, _grid_points(cfg["grid"]),
                                                              replace(base, loss_mode=LossMode.CMC), tri, vai)
                            l1, l2 = best.lambda1, best.lambda2
                            chosen[key] = (l1, l2)
                            res = best.result
                            for c in table:
                                grids.append({"cell": cell_id, "seed": rep_seed, "lambda1": c.lambda1,
                                              "lambda2": c.lambda2, "val_auroc": c.val_auroc,
                                              "best_epoch": c.best_epoch, "status": c.status})
                        lam = (l1, l2)
                    else:
                        res = train(train_ds, replace(base, loss_mode=LossMode(mode)), None, tri, vai)
                        lam = None
                    scores, lat = predict(res.model, test_ds.X)
                    rep = ea.evaluate(mode, rep_seed, scores, test_ds.y_true, test_ds.quality)
                    epoch_s = [h["seconds"] for h in res.history]
                    rep.epoch_seconds_median = float(np.median(epoch_s))
                    rep.ae_pretrain_seconds = ae_seconds
                    rep.extra.update({"cell": cell_id, "train_size": size, "preset": preset,
                                      "lambda": list(lam) if lam else None, "best_epoch": res.best_epoch,
                                      "ae_final_mse": ae_rep.final_mse})
                    # latent neighbourhoods: test queries against the training split
                    _, ref_lat = predict(res.model, train_ds.X[tri])
                    q = ea.pick_queries(len(test_ds), ec["n_queries"], derive_seed(g, rep_seed, 7))
                    nr = ea.latent_neighborhood_analysis(lat[q], test_ds.true_label[q] == 1, ref_lat,
                                                         train_ds.label[tri] == 1, train_ds.true_label[tri] == 1,
                                                         ec["k"])
                    rep.extra.update({"purity": nr.purity, "ccr": nr.ccr, "same_class": nr.same_class})
                    boot = None
                    if ec["bootstrap_draws"]:
                        b = ea.bootstrap_auroc(scores, test_ds.y_true, test_ds.patient_id, ec["bootstrap_draws"],
                                               derive_seed(g, rep_seed, 6))
                        boot = b.values
                        rep.bootstrap_mean, rep.bootstrap_std = b.mean, b.std
                    cells.append({"report": rep, "bootstrap": boot, "history": res.history, "scores": scores})
                    for qi, (p, c, s) in zip(q.tolist(), nr.per_query):
                        latent_rows.append({"cell": cell_id, "seed": rep_seed, "query": qi, "purity": p,
                                            "ccr": c, "same_class": s})
                    timings.append({"cell": cell_id, "seed": rep_seed, "mode": mode, "epoch_seconds": epoch_s,
                                    "ae_pretrain_seconds": ae_seconds})
    return _summarise(cells, grids, latent_rows, timings, ec["alpha"], time.perf_counter() - t_start)


def _summarise(cells, grids, latent_rows, timings, alpha, seconds):
    reports = [c["report"] for c in cells]
    summary = []
    for r in sorted(reports, key=lambda r: (r.extra["cell"], r.seed)):
        summary.append({"cell": r.extra["cell"], "seed": r.seed, "method": r.method, "auroc": r.auroc,
                        "auprc": r.auprc, "auroc_good": r.auroc_good, "auroc_bad": r.auroc_bad,
                        "drop_pct": r.drop_pct, "purity": r.extra["purity"], "ccr": r.extra["ccr"],
                        "best_epoch": r.extra["best_epoch"], "lambda1": (r.extra["lambda"] or [None, None])[0],
                        "lambda2": (r.extra["lambda"] or [None, None])[1]})
    # paired tests on bootstrap AUROCs, per (seed, size, preset) across methods
    tests = []
    groups = {}
    for c in cells:
        r = c["report"]
        if c["bootstrap"] is None:
            continue
        k = (r.seed, r.extra["train_size"], r.extra["preset"])
        groups.setdefault(k, {})[r.method] = c["bootstrap"]
    for k in sorted(groups):
        if len(groups[k]) >= 2:
            w = ea.pairwise_wilcoxon(groups[k], alpha)
            w.update({"seed": k[0], "train_size": k[1], "preset": k[2]})
            tests.append(w)
    by_mode = {}
    for t in timings:
        by_mode.setdefault(t["mode"], []).extend(t["epoch_seconds"])
    timing = {"per_mode_epoch_seconds": by_mode,
              "ae_pretrain_seconds": sorted({(t["seed"], t["ae_pretrain_seconds"]) for t in timings})}
    if "CE" in by_mode and "CMC" in by_mode:
        timing["cmc_vs_ce"] = ea.timing_compare(by_mode["CMC"], by_mode["CE"])
    return {"reports": reports, "summary": summary, "grid": grids, "latent": latent_rows, "wilcoxon": tests,
            "timing": timing, "bootstrap": {(c["report"].extra["cell"], c["report"].seed): c["bootstrap"]
                                            for c in cells}, "histories": {
                (c["report"].extra["cell"], c["report"].seed): c["history"] for c in cells}, "seconds": seconds}
