"""What the cluster terms measure.

The intra term sums distances between latents that share a cluster, the
inter term is minus the sum across clusters. Training adds both, scaled
by lambda1 and lambda2, to cross-entropy on the noisy labels.

    python3 demos/02_cluster_loss.py
"""
import numpy as np

from cmcppg.cmc_train import Normalization, cmc_losses

F = np.array([[0.0], [2.0], [10.0], [12.0]])
c = np.array([0, 0, 1, 1])
intra, inter = cmc_losses(F, c, Normalization.RAW_SUM)
print(f"two tight clusters, raw sums: intra {float(intra.data):g}, inter {float(inter.data):g}")
intra, inter = cmc_losses(F, c, Normalization.PAIR_MEAN)
print(f"same points, pair means:     intra {float(intra.data):g}, inter {float(inter.data):g}")

# squeezing the clusters lowers intra; pushing them apart lowers inter
for spread, gap in [(2.0, 10.0), (0.5, 10.0), (0.5, 30.0)]:
    F = np.array([[0.0], [spread], [gap], [gap + spread]])
    a, b = cmc_losses(F, c, Normalization.PAIR_MEAN)
    print(f"spread {spread:>4} gap {gap:>4}: intra {float(a.data):6.2f} inter {float(b.data):7.2f}")
