"""Cluster-membership-consistency loss and the training protocol.

Within every mini-batch the latent vectors F(x) of samples sharing a
cluster id are pulled together (intra term, sum of pairwise Euclidean
distances over ordered pairs i != j) and samples from different clusters
are pushed apart (inter term, negated sum over ordered cross-cluster
pairs). The total objective is ``ce + lambda1 * intra + lambda2 * inter``.
"""
from __future__ import annotations

import copy
import enum
import itertools
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from cmcppg.errors import NumericError, SplitError
from cmcppg.nn import tensor as T
from cmcppg.nn.models import ArchSpec, ResNet1d
from cmcppg.nn.optim import Adam
from cmcppg.nn.tensor import Tensor

log = logging.getLogger(__name__)


class LossMode(str, enum.Enum):
    CE = "CE"
    SCE = "SCE"
    CMC = "CMC"


class Normalization(str, enum.Enum):
    RAW_SUM = "RAW_SUM"
    PAIR_MEAN = "PAIR_MEAN"


@dataclass
class TrainConfig:
    lambda1: float = 0.01
    lambda2: float = 0.001
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    loss_mode: LossMode = LossMode.CE
    normalization: Normalization = Normalization.PAIR_MEAN
    margin: float | None = None
    val_fraction: float = 0.2
    preset: str = "TINY"
    norm: bool = True
    sce_alpha: float = 0.1
    sce_beta: float = 1.0
    sce_clamp: float = -4.0

    def __post_init__(self):
        self.loss_mode = LossMode(self.loss_mode)
        self.normalization = Normalization(self.normalization)
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda weights must be non-negative")


@dataclass
class LossBreakdown:
    l_ce: float
    l_intra: float
    l_inter: float
    l_total: float
    total: Tensor | None = field(default=None, repr=False)


# ---------------------------------------------------------------- loss terms

def pairwise_distances(F):
    """Euclidean distance matrix of the rows of ``F`` (B, d) as a Tensor.

    Distances are accumulated in float64 from explicit differences, so
    identical rows are exactly 0 apart. The gradient at a zero distance is 0.
    """
    X = F.data.astype(np.float64)
    b = len(X)
    sq = np.empty((b, b))
    chunk = max(1, 2_000_000 // max(1, b * X.shape[1]))
    for s in range(0, b, chunk):
        diff = X[s:s + chunk, None, :] - X[None, :, :]
        sq[s:s + chunk] = (diff * diff).sum(axis=2)
    D = np.sqrt(sq)

    def bw(g):
        G = g.astype(np.float64)
        G = G + G.T
        with np.errstate(divide="ignore", invalid="ignore"):
            G = np.where(D > 0, G / D, 0.0)
        gF = G.sum(axis=1)[:, None] * X - G @ X
        return (gF.astype(F.data.dtype),)

    return T._make(D.astype(F.data.dtype), (F,), bw)


def cluster_pair_weights(cluster_ids, mode=Normalization.PAIR_MEAN):
    """Weight matrices selecting ordered intra-cluster and cross-cluster pairs."""
    c = np.asarray(cluster_ids)
    same = c[:, None] == c[None, :]
    intra = same & ~np.eye(len(c), dtype=bool)
    inter = ~same
    w_intra, w_inter = intra.astype(np.float64), inter.astype(np.float64)
    if Normalization(mode) == Normalization.PAIR_MEAN:
        if intra.any():
            w_intra /= intra.sum()
        if inter.any():
            w_inter /= inter.sum()
    return w_intra, w_inter


def cmc_losses(latents, cluster_ids, mode=Normalization.PAIR_MEAN, margin=None):
    """Intra- and inter-cluster terms for one batch; returns two scalar Tensors.

    RAW_SUM gives the plain double sums; PAIR_MEAN divides each by its
    ordered-pair count (an empty set of pairs contributes 0). With
    ``margin`` set the inter term becomes mean(max(0, margin - d)) over
    cross-cluster pairs.
    """
    F = latents if isinstance(latents, Tensor) else Tensor(np.asarray(latents))
    D = pairwise_distances(F)
    w_intra, w_inter = cluster_pair_weights(cluster_ids, mode)
    dt = F.data.dtype
    intra = (D * Tensor(w_intra.astype(dt))).sum()
    if margin is None:
        inter = -(D * Tensor(w_inter.astype(dt))).sum()
    else:
        mask = w_inter > 0
        n = max(int(mask.sum()), 1)
        hinge = T.relu(Tensor(np.full(D.shape, margin, dtype=dt)) - D)
        inter = (hinge * Tensor((mask / n).astype(dt))).sum()
    return intra, inter


def total_loss(logits, labels, latents, cluster_ids, cfg: TrainConfig):
    """Classification loss plus (in CMC mode) the weighted cluster terms."""
    if cfg.loss_mode == LossMode.SCE:
        cls = T.symmetric_cross_entropy(logits, labels, cfg.sce_alpha, cfg.sce_beta, cfg.sce_clamp)
    else:
        cls = T.cross_entropy(logits, labels)
    if cfg.loss_mode != LossMode.CMC:
        v = float(cls.data)
        intra = inter = 0.0
        if cluster_ids is not None:
            # diagnostics only; no graph is built through them
            with T.no_grad():
                a, b = cmc_losses(Tensor(latents.data), cluster_ids, cfg.normalization, cfg.margin)
            intra, inter = float(a.data), float(b.data)
        return LossBreakdown(v, intra, inter, v, cls)
    intra, inter = cmc_losses(latents, cluster_ids, cfg.normalization, cfg.margin)
    total = cls + cfg.lambda1 * intra + cfg.lambda2 * inter
    return LossBreakdown(float(cls.data), float(intra.data), float(inter.data), float(total.data), total)


# ---------------------------------------------------------------- protocol

def patient_split(patient_ids, val_fraction=0.2, seed=0):
    """Seeded patient-level split; returns (train patients, val patients)."""
    pids = sorted(set(np.asarray(patient_ids, dtype=object).tolist()))
    if len(pids) < 2:
        raise SplitError(f"need at least 2 patients to split, got {len(pids)}")
    n_val = min(max(1, int(round(val_fraction * len(pids)))), len(pids) - 1)
    perm = np.random.default_rng([seed, 7]).permutation(len(pids))
    val = sorted(pids[i] for i in perm[:n_val])
    train = sorted(pids[i] for i in perm[n_val:])
    return train, val


def split_indices(ds, val_fraction=0.2, seed=0):
    train_p, val_p = patient_split(ds.patient_id, val_fraction, seed)
    val_set = set(val_p)
    in_val = np.array([p in val_set for p in ds.patient_id.tolist()], dtype=bool)
    return np.flatnonzero(~in_val), np.flatnonzero(in_val)


def _check_finite(bd: LossBreakdown, where):
    if not np.isfinite(bd.l_total):
        raise NumericError(f"non-finite loss {where}: {bd}")


def evaluate_loss(model, ds, idx, cluster_ids, cfg):
    """Mean total loss over ``idx`` in eval mode, fixed batch order."""
    model.eval()
    sums = np.zeros(4)
    n = 0
    y = ds.y
    with T.no_grad():
        for s in range(0, len(idx), cfg.batch_size):
            b = idx[s:s + cfg.batch_size]
            logits, lat = model(ds.batch(b))
            cid = None if cluster_ids is None else cluster_ids[b]
            bd = total_loss(logits, y[b], lat, cid, cfg)
            sums += len(b) * np.array([bd.l_ce, bd.l_intra, bd.l_inter, bd.l_total])
            n += len(b)
    return sums / max(n, 1)


@dataclass
class TrainResult:
    model: ResNet1d
    history: list
    best_epoch: int
    train_idx: np.ndarray
    val_idx: np.ndarray


def train(ds, cfg: TrainConfig, cluster_ids=None, train_idx=None, val_idx=None, on_epoch=None):
    """Train a ResNet classifier on the observed labels of ``ds``.

    Returns the model from the epoch with the smallest validation loss
    together with the per-epoch history. ``cluster_ids`` (one per record)
    is required in CMC mode. ``on_epoch(record, model)`` is called after
    every epoch with the current (not best) model.
    """
    if cfg.loss_mode == LossMode.CMC and cluster_ids is None:
        raise ValueError("CMC mode needs a cluster id for every record")
    if train_idx is None or val_idx is None:
        train_idx, val_idx = split_indices(ds, cfg.val_fraction, cfg.seed)
    cluster_ids = None if cluster_ids is None else np.asarray(cluster_ids)
    model = ResNet1d(ArchSpec(preset=cfg.preset, input_len=ds.seg_len, norm=cfg.norm, seed=cfg.seed))
    opt = Adam(model.parameters(), lr=cfg.lr)
    y = ds.y
    history = []
    best = (np.inf, 0, None)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        order = train_idx[np.random.default_rng([cfg.seed, epoch]).permutation(len(train_idx))]
        sums = np.zeros(4)
        n = 0
        for s in range(0, len(order), cfg.batch_size):
            b = order[s:s + cfg.batch_size]
            if len(b) < 2:
                continue
            logits, lat = model(ds.batch(b))
            cid = None if cluster_ids is None else cluster_ids[b]
            bd = total_loss(logits, y[b], lat, cid, cfg)
            _check_finite(bd, f"at epoch {epoch}")
            opt.zero_grad()
            T.backward(bd.total)
            opt.step()
            sums += len(b) * np.array([bd.l_ce, bd.l_intra, bd.l_inter, bd.l_total])
            n += len(b)
        seconds = time.perf_counter() - t0
        v0 = time.perf_counter()
        val = evaluate_loss(model, ds, val_idx, cluster_ids, cfg)
        if not np.isfinite(val[3]):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        tr = sums / max(n, 1)
        rec = {
            "epoch": epoch,
            "l_ce": float(tr[0]),
            "l_intra": float(tr[1]),
            "l_inter": float(tr[2]),
            "l_total": float(tr[3]),
            "val_loss": float(val[3]),
            "seconds": seconds,
            "val_seconds": time.perf_counter() - v0,
        }
        history.append(rec)
        log.info("epoch %d train %.4f val %.4f (%.1fs)", epoch, rec["l_total"], rec["val_loss"], seconds)
        if val[3] < best[0]:
            best = (val[3], epoch, [a.copy() for _, a in model.state_arrays()])
        if on_epoch is not None:
            on_epoch(rec, model)
    final = ResNet1d(model.spec)
    final.load_state_arrays(best[2])
    final.eval()
    return TrainResult(final, history, best[1], train_idx, val_idx)


def predict(model, X, batch_size=256):
    """AF probabilities and latent vectors for segments ``X`` (N, L)."""
    model.eval()
    probs, lats = [], []
    with T.no_grad():
        for s in range(0, len(X), batch_size):
            logits, lat = model(np.asarray(X[s:s + batch_size], dtype=np.float32)[:, None, :])
            probs.append(T.softmax(logits.data.astype(np.float64))[:, 1])
            lats.append(lat.data)
    if not probs:
        return np.zeros(0), np.zeros((0, model.latent_dim), np.float32)
    return np.concatenate(probs), np.concatenate(lats)


@dataclass
class GridCell:
    lambda1: float
    lambda2: float
    val_auroc: float | None
    best_epoch: int | None
    status: str
    result: TrainResult | None = field(default=None, repr=False)


def grid_search_lambdas(ds, cluster_ids, grid, cfg: TrainConfig, train_idx=None, val_idx=None):
    """Train one CMC model per (lambda1, lambda2) and pick the best by
    validation AUROC on observed labels. Ties go to the lexicographically
    smaller pair. Returns (best cell, all cells)."""
    from cmcppg.eval_analysis import auroc

    points = sorted({(float(a), float(b)) for a, b in grid})
    if not points:
        raise ValueError("grid must be non-empty")
    if train_idx is None or val_idx is None:
        train_idx, val_idx = split_indices(ds, cfg.val_fraction, cfg.seed)
    cells = []
    for l1, l2 in points:
        c = replace(cfg, lambda1=l1, lambda2=l2, loss_mode=LossMode.CMC)
        try:
            res = train(ds, c, cluster_ids, train_idx, val_idx)
            scores, _ = predict(res.model, ds.X[val_idx])
            a = auroc(scores, ds.y[val_idx])
            cells.append(GridCell(l1, l2, a, res.best_epoch, "ok", res))
        except Exception as exc:  # a failed cell is recorded, the search continues
            log.warning("grid cell (%g, %g) failed: %s", l1, l2, exc)
            cells.append(GridCell(l1, l2, None, None, f"failed: {type(exc).__name__}: {exc}"))
    ok = [c for c in cells if c.status == "ok"]
    if not ok:
        raise NumericError("every grid cell failed")
    best = max(ok, key=lambda c: (c.val_auroc, -c.lambda1, -c.lambda2))
    return best, cells


def default_grid():
    vals = (0.0, 1e-3, 1e-2, 1e-1)
    return list(itertools.product(vals, vals))


def clone_model(model):
    return copy.deepcopy(model)
