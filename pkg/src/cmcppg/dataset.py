"""Labeled segment collections and the PPGD1 container.

Layout: magic ``PPGD1``, u32-LE manifest length, UTF-8 JSON manifest, then the
segments as concatenated f32-LE blobs. Each manifest record carries the byte
offset of its blob relative to the start of the blob area.
"""
from __future__ import annotations

import enum
import io
import json
import struct
from collections import Counter
from dataclasses import dataclass

import numpy as np

from cmcppg.errors import FormatError
from cmcppg.signal_core import Quality, QualityFlag, QualitySource, Segment

PPGD_MAGIC = b"PPGD1"


class Rhythm(enum.IntEnum):
    NSR = 0
    AF = 1
    PVC = 2


class Provenance(enum.IntEnum):
    ALARM = 0
    SYNTH = 1


def binary_label(rhythm):
    """AF -> 1, anything else -> 0."""
    return (np.asarray(rhythm) == Rhythm.AF).astype(np.int64)


@dataclass(frozen=True, eq=False)
class LabeledSegment:
    segment: Segment
    label: Rhythm
    quality: QualityFlag
    provenance: Provenance
    true_label: Rhythm | None = None
    cluster_id: int | None = None

    @property
    def y(self):
        return int(self.label == Rhythm.AF)


class Dataset:
    """Column store of equal-length segments.

    ``true_label`` uses -1 where no ground truth exists; ``cluster_id`` is
    None until a cluster model assigns ids.
    """

    def __init__(self, X, label, patient_id, t_start_ms, quality, quality_source, provenance,
                 fs_hz, true_label=None, cluster_id=None, params=None):
        X = np.asarray(X, dtype=np.float32)
        if X.ndim != 2:
            raise ValueError(f"X must be (n_records, n_samples), got shape {X.shape}")
        self.X = X
        n = len(self.X)
        self.label = np.asarray(label, dtype=np.int8).reshape(n)
        self.patient_id = np.asarray(patient_id, dtype=object).reshape(n)
        self.t_start_ms = np.asarray(t_start_ms, dtype=np.int64).reshape(n)
        self.quality = np.asarray(quality, dtype=np.int8).reshape(n)
        self.quality_source = np.asarray(quality_source, dtype=np.int8).reshape(n)
        self.provenance = np.asarray(provenance, dtype=np.int8).reshape(n)
        self.fs_hz = float(fs_hz)
        self.true_label = (np.full(n, -1, np.int8) if true_label is None
                           else np.asarray(true_label, dtype=np.int8).reshape(n))
        self.cluster_id = None if cluster_id is None else np.asarray(cluster_id, dtype=np.int64).reshape(n)
        self.params = dict(params or {})

    def __len__(self):
        return len(self.label)

    @property
    def seg_len(self):
        return self.X.shape[1]

    @property
    def y(self):
        return binary_label(self.label)

    @property
    def y_true(self):
        if np.any(self.true_label < 0):
            raise ValueError("dataset has records without ground-truth labels")
        return binary_label(self.true_label)

    @property
    def has_truth(self):
        return len(self) > 0 and bool(np.all(self.true_label >= 0))

    def patients(self):
        return sorted(set(self.patient_id.tolist()))

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.label[idx], self.patient_id[idx], self.t_start_ms[idx],
                       self.quality[idx], self.quality_source[idx], self.provenance[idx], self.fs_hz,
                       self.true_label[idx], None if self.cluster_id is None else self.cluster_id[idx],
                       self.params)

    def with_clusters(self, cluster_id):
        out = self.subset(np.arange(len(self)))
        out.cluster_id = np.asarray(cluster_id, dtype=np.int64).reshape(len(self))
        return out

    def batch(self, idx):
        """Model input of shape (B, 1, L)."""
        return self.X[idx][:, None, :]

    def record(self, i):
        seg = Segment(str(self.patient_id[i]), int(self.t_start_ms[i]), self.fs_hz, self.X[i], True)
        tl = None if self.true_label[i] < 0 else Rhythm(int(self.true_label[i]))
        cid = None if self.cluster_id is None else int(self.cluster_id[i])
        q = QualityFlag(Quality(int(self.quality[i])), QualitySource(int(self.quality_source[i])))
        return LabeledSegment(seg, Rhythm(int(self.label[i])), q, Provenance(int(self.provenance[i])), tl, cid)

    def records(self):
        return [self.record(i) for i in range(len(self))]

    @classmethod
    def from_segments(cls, segs, fs_hz=None, seg_len=None, params=None):
        segs = list(segs)
        if not segs:
            return cls(np.zeros((0, seg_len or 0), np.float32), [], [], [], [], [], [], fs_hz or 0.0,
                       params=params)
        fs = segs[0].segment.fs_hz if fs_hz is None else fs_hz
        cids = [s.cluster_id for s in segs]
        return cls(
            np.stack([np.asarray(s.segment.samples, dtype=np.float32) for s in segs]),
            [int(s.label) for s in segs],
            [s.segment.patient_id for s in segs],
            [s.segment.t_start_ms for s in segs],
            [int(s.quality.value) for s in segs],
            [int(s.quality.source) for s in segs],
            [int(s.provenance) for s in segs],
            fs,
            [(-1 if s.true_label is None else int(s.true_label)) for s in segs],
            None if any(c is None for c in cids) else cids,
            params,
        )

    @classmethod
    def concat(cls, parts):
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("nothing to concatenate")
        first = parts[0]
        return cls(
            np.concatenate([p.X for p in parts]),
            np.concatenate([p.label for p in parts]),
            np.concatenate([p.patient_id for p in parts]),
            np.concatenate([p.t_start_ms for p in parts]),
            np.concatenate([p.quality for p in parts]),
            np.concatenate([p.quality_source for p in parts]),
            np.concatenate([p.provenance for p in parts]),
            first.fs_hz,
            np.concatenate([p.true_label for p in parts]),
            None if any(p.cluster_id is None for p in parts) else np.concatenate([p.cluster_id for p in parts]),
            first.params,
        )

    def sort_order(self):
        """Indices ordering records by (patient_id, t_start_ms, label)."""
        keys = list(zip(self.patient_id.tolist(), self.t_start_ms.tolist(), self.label.tolist()))
        return sorted(range(len(self)), key=lambda i: keys[i])

    # ------------------------------------------------------------ manifest

    def counts(self):
        per_class = Counter(Rhythm(int(v)).name for v in self.label)
        per_patient = Counter(self.patient_id.tolist())
        return {
            "n_records": len(self),
            "per_class": {k: per_class[k] for k in sorted(per_class)},
            "per_patient": {k: per_patient[k] for k in sorted(per_patient)},
        }

    def manifest(self):
        recs = []
        nbytes = 4 * self.seg_len
        for i in range(len(self)):
            rec = {
                "patient_id": str(self.patient_id[i]),
                "label": Rhythm(int(self.label[i])).name,
                "quality": Quality(int(self.quality[i])).name,
                "quality_source": QualitySource(int(self.quality_source[i])).name,
                "provenance": Provenance(int(self.provenance[i])).name,
                "offset": i * nbytes,
                "n_samples": self.seg_len,
                "fs_hz": self.fs_hz,
                "t_start_ms": int(self.t_start_ms[i]),
            }
            if self.true_label[i] >= 0:
                rec["true_label"] = Rhythm(int(self.true_label[i])).name
            if self.cluster_id is not None:
                rec["cluster_id"] = int(self.cluster_id[i])
            recs.append(rec)
        return {
            "format": "PPGD1",
            "version": 1,
            "fs_hz": self.fs_hz,
            "n_samples": self.seg_len,
            "params": self.params,
            "counts": self.counts(),
            "records": recs,
        }


def dumps_dataset(ds: Dataset) -> bytes:
    mb = json.dumps(ds.manifest(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(PPGD_MAGIC)
    buf.write(struct.pack("<I", len(mb)))
    buf.write(mb)
    buf.write(np.ascontiguousarray(ds.X, dtype="<f4").tobytes())
    return buf.getvalue()


def loads_dataset(raw: bytes) -> Dataset:
    if raw[:5] != PPGD_MAGIC:
        raise FormatError("missing PPGD1 magic")
    (mlen,) = struct.unpack("<I", raw[5:9])
    try:
        man = json.loads(raw[9:9 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad PPGD1 manifest: {exc}") from exc
    base = 9 + mlen
    recs = man["records"]
    seg_len = int(man.get("n_samples", 0))
    X = np.zeros((len(recs), seg_len), np.float32)
    for i, r in enumerate(recs):
        n = int(r["n_samples"])
        if n != seg_len:
            raise FormatError(f"record {i} has {n} samples, expected {seg_len}")
        start = base + int(r["offset"])
        if start + 4 * n > len(raw):
            raise FormatError(f"record {i} blob runs past end of file")
        X[i] = np.frombuffer(raw, dtype="<f4", count=n, offset=start)
    has_cid = bool(recs) and all("cluster_id" in r for r in recs)
    return Dataset(
        X,
        [Rhythm[r["label"]] for r in recs],
        [r["patient_id"] for r in recs],
        [r["t_start_ms"] for r in recs],
        [Quality[r["quality"]] for r in recs],
        [QualitySource[r.get("quality_source", "HEURISTIC")] for r in recs],
        [Provenance[r["provenance"]] for r in recs],
        float(man.get("fs_hz", 0.0)),
        [Rhythm[r["true_label"]] if "true_label" in r else -1 for r in recs],
        [r["cluster_id"] for r in recs] if has_cid else None,
        man.get("params", {}),
    )


def write_dataset(path, ds: Dataset):
    with open(path, "wb") as fh:
        fh.write(dumps_dataset(ds))


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return loads_dataset(fh.read())
