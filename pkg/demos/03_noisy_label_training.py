"""CE against CE plus cluster terms on a small noisy synthetic corpus.

Training labels are flipped more often on low-quality segments, as a
bedside alarm would mislabel them. The test corpus keeps true labels.
Takes under a minute on a laptop.

    python3 demos/03_noisy_label_training.py
"""
from dataclasses import replace

import numpy as np

from cmcppg import eval_analysis as ea
from cmcppg.cmc_train import LossMode, TrainConfig, predict, split_indices, train
from cmcppg.experiment import fit_clusters
from cmcppg.synth import NoiseSpec, gen_labeled_corpus

mix = {"NSR": 0.25, "AF": 0.5, "PVC": 0.25}
noisy = NoiseSpec(p_flip_good=0.15, p_flip_bad=0.45, p_bad_quality=0.4)
train_ds = gen_labeled_corpus(80, 20, mix, noisy, seed=1)
test_ds = gen_labeled_corpus(30, 20, mix, NoiseSpec(0.0, 0.0, 0.4), seed=2)
print(f"training labels flipped: {np.mean(train_ds.y != train_ds.y_true):.1%}")

tri, vai = split_indices(train_ds, 0.2, seed=0)
cluster_cfg = {"M": 6, "ae_epochs": 5, "ae_lr": 1e-3, "ae_batch_size": 64, "latent_dim": 16, "view": "acf",
               "max_iter": 300, "tol": 1e-6}
_, ae_rep, _, _, cid = fit_clusters(train_ds, tri, cluster_cfg, 0, train_ds.fs_hz)
print(f"autoencoder MSE {ae_rep.initial_mse:.4f} -> {ae_rep.final_mse:.4f}, cluster sizes {np.bincount(cid[tri])}")

base = TrainConfig(epochs=6, seed=0)
for mode, lam in [(LossMode.CE, (0.0, 0.0)), (LossMode.CMC, (0.01, 0.001))]:
    res = train(train_ds, replace(base, loss_mode=mode, lambda1=lam[0], lambda2=lam[1]), cid, tri, vai)
    scores, _ = predict(res.model, test_ds.X)
    sub = ea.subgroup_eval(scores, test_ds.y_true, test_ds.quality)
    print(f"{mode.value:>3}: test AUROC {ea.auroc(scores, test_ds.y_true):.4f} "
          f"(GOOD {sub['auroc_good']:.4f}, BAD {sub['auroc_bad']:.4f}), best epoch {res.best_epoch}")
