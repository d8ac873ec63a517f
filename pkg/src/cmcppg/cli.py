"""Command-line entry point.

Every command reads one JSON config, writes its artifacts plus a single
``run_manifest.json`` into ``--out-dir`` and exits with
0 ok, 1 I/O, 2 config, 3 undefined metric or data, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import glob
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace

import numpy as np

from cmcppg import __version__
from cmcppg import config as C
from cmcppg import eval_analysis as ea
from cmcppg.errors import (DeficitTooLarge, EmptyClass, FormatError, NumericError, ShapeError, SplitError,
                           TooFewPoints, UndefinedMetric)

log = logging.getLogger("cmcppg")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4
MANIFEST = "run_manifest.json"
# keys holding wall-clock measurements; stripped for the stable artifact hash
TIMING_KEYS = frozenset({"seconds", "val_seconds", "epoch_seconds", "epoch_seconds_median", "ae_pretrain_seconds",
                         "cmc_median_s", "ce_median_s", "ratio", "per_mode_epoch_seconds", "wall_clock_s",
                         "ae_seconds", "ce_epoch_seconds", "cmc_epoch_seconds"})


def sha256_bytes(b):
    return hashlib.sha256(b).hexdigest()


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _strip_timing(obj):
    if isinstance(obj, dict):
        return {k: _strip_timing(v) for k, v in obj.items() if k not in TIMING_KEYS}
    if isinstance(obj, list):
        return [_strip_timing(v) for v in obj]
    return obj


def stable_hash(path):
    """Hash of a JSON / JSON-lines artifact with wall-clock fields removed;
    plain file hash for anything else."""
    if path.endswith(".json") or path.endswith(".jsonl"):
        with open(path) as fh:
            text = fh.read()
        try:
            if path.endswith(".jsonl"):
                docs = [json.loads(line) for line in text.splitlines() if line.strip()]
            else:
                docs = json.loads(text)
        except json.JSONDecodeError:
            return sha256_file(path)
        return sha256_bytes(json.dumps(_strip_timing(docs), sort_keys=True).encode())
    return sha256_file(path)


class Run:
    """Collects artifacts for one command and writes the manifest."""

    def __init__(self, command, cfg, out_dir, inputs=()):
        self.command = command
        self.cfg = cfg
        self.out_dir = out_dir
        self.inputs = sorted(set(inputs))
        self.artifacts = []
        self.t0 = time.perf_counter()
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name):
        self.artifacts.append(name)
        return os.path.join(self.out_dir, name)

    def write_bytes(self, name, data: bytes):
        with open(self.path(name), "wb") as fh:
            fh.write(data)

    def write_text(self, name, text):
        self.write_bytes(name, text.encode("utf-8"))

    def write_json(self, name, obj):
        self.write_text(name, ea.dumps_json(obj))

    def finish(self, extra=None):
        arts = {}
        for name in sorted(set(self.artifacts)):
            p = os.path.join(self.out_dir, name)
            arts[name] = {"sha256": sha256_file(p), "stable_sha256": stable_hash(p), "bytes": os.path.getsize(p)}
        man = {
            "tool": "cmcppg",
            "version": __version__,
            "command": self.command,
            "config": self.cfg,
            "config_sha256": C.config_hash(self.cfg),
            "inputs": {os.path.abspath(p): sha256_file(p) for p in self.inputs},
            "artifacts": arts,
            "threads": _threads(),
            "wall_clock_s": time.perf_counter() - self.t0,
        }
        if extra:
            man.update(extra)
        with open(os.path.join(self.out_dir, MANIFEST), "w") as fh:
            fh.write(ea.dumps_json(man))
        return man


def _threads():
    v = os.environ.get("CMC_THREADS")
    return int(v) if v and v.isdigit() else None


def _limit_threads():
    n = _threads()
    if n is None:
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        log.warning("CMC_THREADS set but threadpoolctl is unavailable; BLAS threads unchanged")
        return
    threadpool_limits(n)


def _require_file(path):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"cannot read {path}")
    return path


# ---------------------------------------------------------------- commands

def cmd_synth(args, cfg):
    from cmcppg.dataset import dumps_dataset
    from cmcppg.experiment import make_corpus

    sc = C.require(cfg, "synth")
    out_dir, name = _out(args, "dataset.ppgd")
    run = Run("synth", cfg, out_dir)
    ds = make_corpus(sc, cfg["seed"])
    run.write_bytes(name, dumps_dataset(ds))
    run.finish({"counts": ds.counts()["per_class"]})
    return EXIT_OK


def _out(args, default_name):
    if getattr(args, "out", None):
        return os.path.dirname(os.path.abspath(args.out)), os.path.basename(args.out)
    if not args.out_dir:
        raise C.ConfigError("config error at --out-dir: an output location is required")
    return args.out_dir, default_name


def cmd_label(args, cfg):
    from cmcppg.alarm_labeler import LabelingConfig, label_recordings, parse_alarm_log
    from cmcppg.dataset import dumps_dataset
    from cmcppg.signal_core import read_waveform, resample

    lc = dict(cfg["labeling"])
    balance = lc.pop("balance")
    lab = LabelingConfig(**lc)
    paths = sorted(glob.glob(os.path.join(args.waveforms, "*.ppgw"))) if os.path.isdir(args.waveforms) else None
    if paths is None:
        raise FileNotFoundError(f"waveform directory {args.waveforms} does not exist")
    waves = []
    for p in paths:
        try:
            w = read_waveform(p)
        except (OSError, FormatError) as exc:
            raise OSError(f"cannot read waveform {p}: {exc}") from exc
        if args.fs_hz and w.fs_hz != args.fs_hz:
            w = resample(w, args.fs_hz)
        waves.append(w)
    with open(_require_file(args.alarms), "rb") as fh:
        parsed = parse_alarm_log(fh.read())
    out_dir, name = _out(args, "dataset.ppgd")
    run = Run("label", cfg, out_dir, [args.alarms] + paths)
    ds, report = label_recordings(parsed.events, waves, lab, tuple(balance) if balance else None, cfg["seed"])
    run.write_bytes(name, dumps_dataset(ds))
    run.write_json("label_report.json", {"skipped_out_of_bounds": report.skipped_out_of_bounds,
                                          "excluded_pvc": report.excluded_pvc,
                                          "deduplicated": report.deduplicated,
                                          "unknown_alarm_types": parsed.unknown,
                                          "counts": ds.counts()})
    run.finish()
    return EXIT_OK


def _ae_cache_key(ds_path, cc, seed, val_fraction):
    keep = {k: cc[k] for k in ("ae_epochs", "ae_lr", "ae_batch_size", "latent_dim", "view")}
    blob = json.dumps({"dataset": sha256_file(ds_path), "cluster": keep, "seed": seed,
                       "val_fraction": val_fraction}, sort_keys=True).encode()
    return sha256_bytes(blob)[:16]


def cmd_embed_cluster(args, cfg):
    from cmcppg.cmc_train import split_indices
    from cmcppg.dataset import read_dataset
    from cmcppg.embed_cluster import (assign, dumps_embedding, embed, kmeans, train_autoencoder,
                                      write_cluster_model)
    from cmcppg.nn import checkpoint

    ds = read_dataset(_require_file(args.dataset))
    cc = cfg["cluster"]
    seed = cfg["seed"]
    tri, _ = split_indices(ds, cfg["train"]["val_fraction"], seed)
    if len(tri) < cc["M"]:
        raise TooFewPoints(f"{len(tri)} training records cannot form M={cc['M']} clusters")
    run = Run("embed-cluster", cfg, args.out_dir, [args.dataset])
    cache_hit = False
    ae_report = None
    cache_path = None
    if args.ae_cache:
        os.makedirs(args.ae_cache, exist_ok=True)
        cache_path = os.path.join(args.ae_cache, f"ae-{_ae_cache_key(args.dataset, cc, seed, cfg['train']['val_fraction'])}.ckpt")
    if cache_path and os.path.isfile(cache_path):
        ae = checkpoint.load(cache_path)
        cache_hit = True
        log.info("reusing cached autoencoder %s", cache_path)
    else:
        ae, rep = train_autoencoder(ds.X[tri], epochs=cc["ae_epochs"], lr=cc["ae_lr"], seed=seed,
                                    batch_size=cc["ae_batch_size"], latent_dim=cc["latent_dim"], view=cc["view"],
                                    fs_hz=ds.fs_hz)
        ae_report = {"initial_mse": rep.initial_mse, "final_mse": rep.final_mse, "holdout_mse": rep.holdout_mse,
                     "epoch_mse": rep.epoch_mse, "ae_seconds": rep.seconds}
        if cache_path:
            checkpoint.save(ae, cache_path)
    emb = embed(ae, ds.X)
    cm = kmeans(emb[tri], cc["M"], seed, cc["max_iter"], cc["tol"])
    ids = assign(cm, emb)
    run.write_bytes("embedding.emb", dumps_embedding(emb))
    write_cluster_model(run.path("clusters.json"), cm)
    run.write_bytes("autoencoder.ckpt", checkpoint.dumps(ae))
    run.write_json("cluster_ids.json", {"cluster_id": ids.tolist(), "sizes": np.bincount(ids, minlength=cc["M"]).tolist()})
    run.finish({"ae_cache_hit": cache_hit, "ae_report": ae_report})
    return EXIT_OK


def _load_clusters(args, ds):
    from cmcppg.embed_cluster import assign, loads_embedding, read_cluster_model

    if not args.embedding or not args.clusters:
        return None
    with open(_require_file(args.embedding), "rb") as fh:
        emb = loads_embedding(fh.read())
    if len(emb) != len(ds):
        raise ShapeError(f"embedding has {len(emb)} rows but the dataset has {len(ds)} records")
    return assign(read_cluster_model(_require_file(args.clusters)), emb)


def _train_cfg(cfg, args):
    from cmcppg.cmc_train import TrainConfig

    t = dict(cfg["train"])
    for k in ("loss_mode", "lambda1", "lambda2", "epochs"):
        v = getattr(args, k, None)
        if v is not None:
            t[k] = v
    t["seed"] = cfg["seed"]
    return TrainConfig(**t)


def cmd_train(args, cfg):
    from cmcppg.cmc_train import LossMode, train
    from cmcppg.dataset import read_dataset
    from cmcppg.nn import checkpoint

    ds = read_dataset(_require_file(args.dataset))
    tc = _train_cfg(cfg, args)
    cid = _load_clusters(args, ds)
    if tc.loss_mode == LossMode.CMC and cid is None:
        raise C.ConfigError("config error at train.loss_mode: CMC needs --embedding and --clusters")
    inputs = [args.dataset] + [p for p in (args.embedding, args.clusters) if p]
    run = Run("train", cfg, args.out_dir, inputs)
    hist_path = run.path("history.jsonl")
    last_path = run.path("last.ckpt")
    open(hist_path, "w").close()

    def on_epoch(rec, model):
        # durability: an interrupted run keeps the last epoch and the partial history
        with open(hist_path, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        tmp = last_path + ".tmp"
        checkpoint.save(model, tmp)
        os.replace(tmp, last_path)

    res = train(ds, tc, cid, on_epoch=on_epoch)
    run.write_bytes("model.ckpt", checkpoint.dumps(res.model))
    run.finish({"best_epoch": res.best_epoch})
    return EXIT_OK


def cmd_grid_search(args, cfg):
    from cmcppg.cmc_train import grid_search_lambdas
    from cmcppg.dataset import read_dataset
    from cmcppg.nn import checkpoint

    ds = read_dataset(_require_file(args.dataset))
    cid = _load_clusters(args, ds)
    if cid is None:
        raise C.ConfigError("config error at --clusters: grid search needs --embedding and --clusters")
    tc = _train_cfg(cfg, args)
    gc = cfg["grid"]
    run = Run("grid-search", cfg, args.out_dir, [args.dataset, args.embedding, args.clusters])
    best, cells = grid_search_lambdas(ds, cid, [(a, b) for a in gc["lambda1"] for b in gc["lambda2"]], tc)
    rows = [{"lambda1": c.lambda1, "lambda2": c.lambda2, "val_auroc": c.val_auroc, "best_epoch": c.best_epoch,
             "status": c.status} for c in cells]
    run.write_text("grid.csv", ea.to_csv(rows, ["lambda1", "lambda2", "val_auroc", "best_epoch", "status"]))
    run.write_json("best.json", {"lambda1": best.lambda1, "lambda2": best.lambda2, "val_auroc": best.val_auroc,
                                 "best_epoch": best.best_epoch})
    run.write_bytes("model.ckpt", checkpoint.dumps(best.result.model))
    run.finish()
    return EXIT_OK


def _labels_for_eval(ds):
    return ds.y_true if ds.has_truth else ds.y


def cmd_eval(args, cfg):
    from cmcppg.cmc_train import predict
    from cmcppg.dataset import read_dataset
    from cmcppg.nn import checkpoint

    model = checkpoint.load(_require_file(args.checkpoint))
    ds = read_dataset(_require_file(args.dataset))
    y = _labels_for_eval(ds)
    run = Run("eval", cfg, args.out_dir, [args.checkpoint, args.dataset])
    scores, _ = predict(model, ds.X)
    ea.auroc(scores, y)  # raise UndefinedMetric early for single-class data
    rep = ea.evaluate(args.method, cfg["seed"], scores, y, ds.quality)
    draws = cfg["eval"]["bootstrap_draws"]
    boot = []
    if draws:
        b = ea.bootstrap_auroc(scores, y, ds.patient_id, draws, cfg["seed"])
        rep.bootstrap_mean, rep.bootstrap_std = b.mean, b.std
        rep.extra["bootstrap_skipped"] = b.skipped
        boot = b.values
    rep.extra["labels"] = "true" if ds.has_truth else "observed"
    run.write_json("metrics.json", rep.to_json())
    run.write_text("quality.csv", ea.quality_csv([rep]))
    run.write_text("bootstrap.csv", ea.bootstrap_csv({args.method: boot}))
    run.write_text("scores.csv", ea.to_csv([{"index": i, "patient_id": p, "score": float(s), "label": int(t)}
                                            for i, (p, s, t) in enumerate(zip(ds.patient_id, scores, y))],
                                           ["index", "patient_id", "score", "label"]))
    run.finish()
    return EXIT_OK


def cmd_analyze_latent(args, cfg):
    from cmcppg.cmc_train import predict
    from cmcppg.dataset import read_dataset
    from cmcppg.nn import checkpoint

    model = checkpoint.load(_require_file(args.checkpoint))
    qds = read_dataset(_require_file(args.query))
    rds = read_dataset(_require_file(args.reference))
    if not rds.has_truth:
        raise EmptyClass("reference dataset carries no trusted labels")
    k = args.k or cfg["eval"]["k"]
    n_q = args.n_queries or cfg["eval"]["n_queries"]
    run = Run("analyze-latent", cfg, args.out_dir, [args.checkpoint, args.query, args.reference])
    q = ea.pick_queries(len(qds), n_q, cfg["seed"])
    _, qlat = predict(model, qds.X[q])
    _, rlat = predict(model, rds.X)
    q_true = (qds.true_label[q] if qds.has_truth else qds.label[q]) == 1
    nr = ea.latent_neighborhood_analysis(qlat, q_true, rlat, rds.label == 1, rds.true_label == 1, k)
    rows = [{"query": int(i), "purity": p, "ccr": c, "same_class": s} for i, (p, c, s) in zip(q, nr.per_query)]
    run.write_text("latent.csv", ea.to_csv(rows, ["query", "purity", "ccr", "same_class"]))
    run.write_json("latent_summary.json", {"k": nr.k, "n_queries": nr.n_queries, "purity": nr.purity,
                                           "ccr": nr.ccr, "same_class": nr.same_class})
    run.finish()
    return EXIT_OK


def write_experiment(run, res):
    cols = ["cell", "seed", "method", "auroc", "auprc", "auroc_good", "auroc_bad", "drop_pct", "purity", "ccr",
            "best_epoch", "lambda1", "lambda2"]
    run.write_text("summary.csv", ea.to_csv(res["summary"], cols))
    run.write_text("quality.csv", ea.to_csv(
        [{"method": r["cell"], "seed": r["seed"], "auroc_good": r["auroc_good"], "auroc_bad": r["auroc_bad"],
          "drop_pct": r["drop_pct"]} for r in res["summary"]], ea.QUALITY_CSV_COLUMNS))
    boot_rows = [{"method": f"{cell}@{seed}", "draw": i, "auroc": v}
                 for (cell, seed), vals in sorted(res["bootstrap"].items()) if vals for i, v in enumerate(vals)]
    run.write_text("bootstrap.csv", ea.to_csv(boot_rows, ea.BOOTSTRAP_CSV_COLUMNS))
    run.write_text("grid.csv", ea.to_csv(res["grid"], ["cell", "seed", "lambda1", "lambda2", "val_auroc",
                                                       "best_epoch", "status"]))
    run.write_text("latent.csv", ea.to_csv(res["latent"], ["cell", "seed", "query", "purity", "ccr", "same_class"]))
    run.write_json("wilcoxon.json", res["wilcoxon"])
    run.write_json("timing.json", res["timing"])
    run.write_text("metrics.jsonl", "".join(json.dumps(r.to_json(), sort_keys=True, default=ea._default) + "\n"
                                            for r in sorted(res["reports"], key=lambda r: (r.extra["cell"], r.seed))))
    hist = []
    for (cell, seed), h in sorted(res["histories"].items()):
        hist += [dict(rec, cell=cell, seed=seed) for rec in h]
    run.write_text("history.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in hist))


def cmd_experiment(args, cfg):
    from cmcppg.experiment import run_experiment

    C.require(cfg, "synth")
    C.require(cfg, "experiment.test")
    run = Run("experiment", cfg, args.out_dir)
    res = run_experiment(cfg, progress=lambda m: log.info(m))
    write_experiment(run, res)
    run.finish()
    return EXIT_OK


def cmd_bench_timing(args, cfg):
    from cmcppg.cmc_train import LossMode, TrainConfig, split_indices, train
    from cmcppg.experiment import fit_clusters, make_corpus

    sc = C.require(cfg, "synth")
    bc = cfg["bench"]
    run = Run("bench-timing", cfg, args.out_dir)
    ds = make_corpus(sc, cfg["seed"], bc["n_records"])
    tri, vai = split_indices(ds, cfg["train"]["val_fraction"], cfg["seed"])
    _, ae_rep, _, _, cid = fit_clusters(ds, tri, cfg["cluster"], cfg["seed"], ds.fs_hz)
    base = TrainConfig(**dict(cfg["train"], epochs=bc["epochs"], seed=cfg["seed"]))
    ce, cmc = [], []
    # alternate single-epoch runs so machine load drifts hit both modes alike
    for e in range(bc["epochs"]):
        ce += [h["seconds"] for h in train(ds, replace(base, epochs=1, loss_mode=LossMode.CE), None, tri, vai).history]
        cmc += [h["seconds"] for h in train(ds, replace(base, epochs=1, loss_mode=LossMode.CMC), cid, tri, vai).history]
    out = ea.timing_compare(cmc, ce)
    out.update({"ce_epoch_seconds": ce, "cmc_epoch_seconds": cmc, "ae_pretrain_seconds": ae_rep.seconds,
                "n_records": len(ds)})
    run.write_json("timing.json", out)
    run.finish()
    print(f"CMC/CE per-epoch ratio {out['ratio']:.3f} (AE pre-training {ae_rep.seconds:.1f} s)")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "label": cmd_label,
    "embed-cluster": cmd_embed_cluster,
    "train": cmd_train,
    "grid-search": cmd_grid_search,
    "eval": cmd_eval,
    "analyze-latent": cmd_analyze_latent,
    "experiment": cmd_experiment,
    "bench-timing": cmd_bench_timing,
}


def build_parser():
    p = argparse.ArgumentParser(prog="cmcppg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="JSON run configuration")
        sp.add_argument("--out-dir", help="output directory (gets run_manifest.json)")
        sp.add_argument("--seed", type=int, help="override the global seed")
        return sp

    sp = add("synth", "generate a synthetic labeled corpus")
    sp.add_argument("--out", help="output dataset file; its directory gets the manifest")
    sp = add("label", "label waveforms from an alarm log")
    sp.add_argument("--waveforms", required=True, help="directory of .ppgw files")
    sp.add_argument("--alarms", required=True, help="alarm CSV (patient_id,onset_ms,alarm_type)")
    sp.add_argument("--fs-hz", type=float, help="resample waveforms to this rate first")
    sp.add_argument("--out", help="output dataset file")
    sp = add("embed-cluster", "fit the autoencoder and K-means")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--ae-cache", help="directory of cached autoencoder checkpoints")
    for name in ("train", "grid-search"):
        sp = add(name, "train a classifier" if name == "train" else "search lambda1/lambda2")
        sp.add_argument("--dataset", required=True)
        sp.add_argument("--embedding")
        sp.add_argument("--clusters")
        sp.add_argument("--epochs", type=int)
        if name == "train":
            sp.add_argument("--loss-mode", dest="loss_mode", choices=["CE", "SCE", "CMC"])
            sp.add_argument("--lambda1", type=float)
            sp.add_argument("--lambda2", type=float)
    sp = add("eval", "evaluate a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--method", default="model", help="name used in the reports")
    sp = add("analyze-latent", "latent neighbourhood purity and CCR")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--query", required=True)
    sp.add_argument("--reference", required=True)
    sp.add_argument("--k", type=int)
    sp.add_argument("--n-queries", dest="n_queries", type=int)
    add("experiment", "full CE/SCE/CMC comparison")
    add("bench-timing", "per-epoch CMC vs CE wall-clock")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _limit_threads()
    try:
        try:
            cfg = C.load(args.config)
        except FileNotFoundError as exc:
            raise C.ConfigError(f"config error at --config: cannot open {args.config}") from exc
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.command != "synth" and not args.out_dir and not getattr(args, "out", None):
            raise C.ConfigError("config error at --out-dir: an output directory is required")
        return COMMANDS[args.command](args, cfg)
    except (C.ConfigError, TooFewPoints, DeficitTooLarge) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (UndefinedMetric, EmptyClass, SplitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # remaining value errors come from constructor validation of config values
        print(f"error: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
