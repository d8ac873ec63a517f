"""Autoencoder embeddings and K-means cluster memberships.

The autoencoder and the clustering never see labels; the resulting cluster
ids are what the consistency loss pulls together and pushes apart.
"""
from __future__ import annotations

import io
import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from cmcppg.errors import FormatError, NumericError, ShapeError, TooFewPoints
from cmcppg.nn import tensor as T
from cmcppg.nn.models import ArchSpec, Autoencoder
from cmcppg.nn.optim import Adam
from cmcppg.signal_core import autocorr_view

VIEWS = ("raw", "acf")
ACF_MAX_LAG_S = 4.0


def view_length(seg_len, fs_hz, view):
    if view == "raw":
        return seg_len
    if view == "acf":
        return min(int(round(ACF_MAX_LAG_S * fs_hz)), seg_len - 2)
    raise ValueError(f"unknown view {view!r}; expected one of {VIEWS}")


def apply_view(X, view, n):
    X = np.asarray(X, dtype=np.float32)
    if view == "raw":
        return X
    return autocorr_view(X, n)


@dataclass
class AutoencoderReport:
    initial_mse: float
    final_mse: float
    holdout_mse: float | None
    epoch_mse: list = field(default_factory=list)
    seconds: float = 0.0


def _mse_eval(ae, X, batch_size=256):
    ae.eval()
    total = 0.0
    with T.no_grad():
        for s in range(0, len(X), batch_size):
            xb = X[s:s + batch_size][:, None, :]
            out = ae(xb)
            total += float(((out.data - xb) ** 2).sum(dtype=np.float64))
    return total / max(X.size, 1)


def train_autoencoder(X, epochs=10, lr=1e-3, seed=0, batch_size=64, latent_dim=64,
                      holdout_fraction=0.1, channels=(8, 16, 16), view="raw", fs_hz=None):
    """Fit a convolutional autoencoder on training-split segments ``X`` (N, L).

    With ``view="acf"`` the network is fit on each segment's autocorrelation
    out to a few seconds of lag instead of the raw samples (needs ``fs_hz``).
    A seeded ``holdout_fraction`` of ``X`` is kept out of the updates and only
    used to report reconstruction error.
    """
    t0 = time.perf_counter()
    X = np.asarray(X, dtype=np.float32)
    if view != "raw" and fs_hz is None:
        raise ValueError("fs_hz is needed for a non-raw view")
    n_in = view_length(X.shape[1], fs_hz, view)
    X = apply_view(X, view, n_in)
    rng = np.random.default_rng([seed, 17])
    perm = rng.permutation(len(X))
    n_hold = int(round(holdout_fraction * len(X))) if len(X) >= 10 else 0
    hold, fit = X[np.sort(perm[:n_hold])], X[np.sort(perm[n_hold:])]
    ae = Autoencoder(ArchSpec(kind="autoencoder", input_len=n_in, latent_dim=latent_dim,
                              ae_channels=tuple(channels), seed=seed, view=view))
    opt = Adam(ae.parameters(), lr=lr)
    initial = _mse_eval(ae, fit)
    history = []
    for epoch in range(epochs):
        ae.train()
        order = np.random.default_rng([seed, epoch]).permutation(len(fit))
        total, count = 0.0, 0
        for s in range(0, len(fit), batch_size):
            xb = fit[order[s:s + batch_size]][:, None, :]
            loss = T.mse(ae(xb), xb)
            if not np.isfinite(loss.data):
                raise NumericError(f"autoencoder loss diverged at epoch {epoch}")
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            total += float(loss.data) * len(xb)
            count += len(xb)
        history.append(total / count)
    final = _mse_eval(ae, fit)
    report = AutoencoderReport(initial, final, _mse_eval(ae, hold) if n_hold else None, history,
                               time.perf_counter() - t0)
    ae.eval()
    return ae, report


def embed(ae, X, batch_size=256):
    """Eval-mode encoder outputs, row-aligned with ``X`` (raw segments)."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 2:
        raise ShapeError(f"expected (N, L) segments, got {X.shape}")
    if ae.spec.view == "raw" and X.shape[1] != ae.spec.input_len:
        raise ShapeError(f"expected (N, {ae.spec.input_len}) segments, got {X.shape}")
    if ae.spec.view != "raw":
        if X.shape[1] < ae.spec.input_len + 2:
            raise ShapeError(f"segments of {X.shape[1]} samples are too short for {ae.spec.input_len} lags")
        X = apply_view(X, ae.spec.view, ae.spec.input_len)
    ae.eval()
    out = []
    with T.no_grad():
        for s in range(0, len(X), batch_size):
            out.append(ae.encode(X[s:s + batch_size][:, None, :]).data)
    if not out:
        return np.zeros((0, ae.spec.latent_dim), np.float32)
    return np.concatenate(out).astype(np.float32)


# ---------------------------------------------------------------- K-means

@dataclass
class ClusterModel:
    M: int
    centroids: np.ndarray
    inertia: float
    seed: int
    n_iter: int = 0
    inertia_history: list = field(default_factory=list)

    @property
    def dim(self):
        return self.centroids.shape[1]

    def to_json(self):
        return {
            "M": self.M,
            "dim": int(self.dim),
            "centroids": self.centroids.tolist(),
            "inertia": float(self.inertia),
            "seed": int(self.seed),
        }

    @classmethod
    def from_json(cls, d):
        c = np.asarray(d["centroids"], dtype=np.float64).reshape(int(d["M"]), int(d["dim"]))
        return cls(int(d["M"]), c, float(d["inertia"]), int(d["seed"]))


def _sq_dists(X, C):
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def assign(cm: ClusterModel, emb):
    """Nearest centroid; ties go to the lowest cluster id."""
    X = np.asarray(emb, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != cm.dim:
        raise ShapeError(f"embedding dim {X.shape} does not match centroids ({cm.dim})")
    # argmin returns the first minimum, which is the lowest id
    return _sq_dists(X, cm.centroids).argmin(axis=1)


def _kmeans_pp(X, M, rng):
    n = len(X)
    chosen = [int(rng.integers(n))]
    d2 = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, M):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(free))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[chosen].copy()


def _update(X, labels, C):
    M = len(C)
    new = np.zeros_like(C)
    counts = np.bincount(labels, minlength=M)
    np.add.at(new, labels, X)
    nonempty = counts > 0
    new[nonempty] /= counts[nonempty][:, None]
    if not nonempty.all():
        # reseed each empty cluster at the point farthest from its centroid
        d = ((X - C[labels]) ** 2).sum(axis=1)
        taken = set()
        for k in np.flatnonzero(~nonempty):
            for i in np.argsort(-d, kind="stable"):
                if int(i) not in taken:
                    taken.add(int(i))
                    new[k] = X[i]
                    break
    return new


def kmeans(emb, M=6, seed=0, max_iter=300, tol=1e-6):
    """k-means++ seeding followed by Lloyd iterations.

    Stops when assignments stop changing, the largest centroid shift drops
    below ``tol``, or after ``max_iter`` rounds. Inertia is checked to be
    non-increasing after every round.
    """
    X = np.asarray(emb, dtype=np.float64)
    if M < 2:
        raise ValueError("M must be at least 2")
    if len(X) < M:
        raise TooFewPoints(f"{len(X)} points cannot form {M} clusters")
    rng = np.random.default_rng(seed)
    C = _kmeans_pp(X, M, rng)
    labels = _sq_dists(X, C).argmin(axis=1)
    inertia = float(_sq_dists(X, C)[np.arange(len(X)), labels].sum())
    history = [inertia]
    it = 0
    for it in range(1, max_iter + 1):
        new_c = _update(X, labels, C)
        shift = float(np.sqrt(((new_c - C) ** 2).sum(axis=1)).max())
        C = new_c
        d = _sq_dists(X, C)
        new_labels = d.argmin(axis=1)
        inertia = float(d[np.arange(len(X)), new_labels].sum())
        if inertia > history[-1] * (1 + 1e-12) + 1e-12:
            raise NumericError(f"K-means inertia increased at iteration {it}")
        history.append(inertia)
        stable = np.array_equal(new_labels, labels)
        labels = new_labels
        if stable or shift < tol:
            break
    C = _update(X, labels, C)
    d = _sq_dists(X, C)
    labels = d.argmin(axis=1)
    inertia = float(d[np.arange(len(X)), labels].sum())
    return ClusterModel(M, C, inertia, seed, it, history + [inertia])


# ---------------------------------------------------------------- EMB1

EMB_MAGIC = b"EMB1"


def dumps_embedding(emb) -> bytes:
    emb = np.asarray(emb, dtype="<f4")
    header = json.dumps({"n": int(emb.shape[0]), "dim": int(emb.shape[1])}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(EMB_MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(emb.tobytes())
    return buf.getvalue()


def loads_embedding(raw: bytes):
    if raw[:4] != EMB_MAGIC:
        raise FormatError("missing EMB1 magic")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen])
    n, dim = int(header["n"]), int(header["dim"])
    body = raw[8 + hlen:]
    if len(body) != 4 * n * dim:
        raise FormatError("EMB1 body size does not match header")
    return np.frombuffer(body, dtype="<f4").reshape(n, dim).astype(np.float32)


def write_cluster_model(path, cm: ClusterModel):
    with open(path, "w") as fh:
        json.dump(cm.to_json(), fh, sort_keys=True)


def read_cluster_model(path):
    with open(path) as fh:
        return ClusterModel.from_json(json.load(fh))
