"""Waveform and segment types, preprocessing transforms, and the PPGW1 container."""
from __future__ import annotations

import enum
import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from cmcppg.errors import DeficitTooLarge, FormatError

CANONICAL_FS_HZ = 240.0
WINDOW_S = 30.0


class Quality(enum.IntEnum):
    GOOD = 0
    BAD = 1


class QualitySource(enum.IntEnum):
    GROUND_TRUTH = 0
    HEURISTIC = 1


@dataclass(frozen=True)
class QualityFlag:
    value: Quality
    source: QualitySource

    @property
    def good(self):
        return self.value == Quality.GOOD


@dataclass(frozen=True, eq=False)
class Waveform:
    patient_id: str
    fs_hz: float
    start_time_ms: int
    samples: np.ndarray

    def __post_init__(self):
        if not self.fs_hz > 0:
            raise ValueError(f"fs_hz must be positive, got {self.fs_hz}")
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("samples must be a non-empty 1-D sequence")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    @property
    def duration_s(self):
        return len(self.samples) / self.fs_hz

    @property
    def end_time_ms(self):
        return self.start_time_ms + int(round(1000 * len(self.samples) / self.fs_hz))

    def time_to_index(self, t_ms):
        return int(round((t_ms - self.start_time_ms) * self.fs_hz / 1000.0))


@dataclass(frozen=True, eq=False)
class Segment:
    patient_id: str
    t_start_ms: int
    fs_hz: float
    samples: np.ndarray
    normalized: bool = False

    def __len__(self):
        return len(self.samples)


def window_length(window_s, fs_hz):
    return int(round(window_s * fs_hz))


def segment_stream(w: Waveform, window_s=WINDOW_S, overlap_s=0.0):
    """Cut ``w`` into fixed windows left to right; a short tail is dropped."""
    n = window_length(window_s, w.fs_hz)
    if n < 2:
        raise ValueError("window_s * fs_hz must be at least 2 samples")
    if not 0 <= overlap_s < window_s:
        raise ValueError("overlap_s must satisfy 0 <= overlap_s < window_s")
    step = n - int(round(overlap_s * w.fs_hz))
    out = []
    for start in range(0, len(w.samples) - n + 1, step):
        t_ms = w.start_time_ms + int(round(start * 1000.0 / w.fs_hz))
        out.append(Segment(w.patient_id, t_ms, w.fs_hz, w.samples[start:start + n].copy()))
    return out


def extend_by_prefix(seg_samples, target_len):
    """Pad a short segment to ``target_len`` by appending its own first samples."""
    x = np.asarray(seg_samples)
    deficit = target_len - len(x)
    if deficit < 0:
        raise ValueError(f"target_len {target_len} is shorter than the input ({len(x)})")
    if deficit > len(x):
        raise DeficitTooLarge(f"cannot extend {len(x)} samples by {deficit}")
    return np.concatenate([x, x[:deficit]])


def resample(w: Waveform, target_fs_hz):
    """Linear-interpolation resampling; samples past the last input hold its value."""
    if not target_fs_hz > 0:
        raise ValueError("target_fs_hz must be positive")
    n = len(w.samples)
    m = int(round(n * target_fs_hz / w.fs_hz))
    pos = np.arange(m) * (w.fs_hz / target_fs_hz)
    out = np.interp(pos, np.arange(n), w.samples)
    return Waveform(w.patient_id, float(target_fs_hz), w.start_time_ms, out)


def minmax_normalize(samples):
    x = np.asarray(samples, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi > lo:
        return (x - lo) / (hi - lo)
    return np.zeros_like(x)


def normalize_segment(seg: Segment):
    return Segment(seg.patient_id, seg.t_start_ms, seg.fs_hz, minmax_normalize(seg.samples), True)


def lagged_correlation(x, min_lag, max_lag):
    """Pearson correlation between ``x[:-k]`` and ``x[k:]`` for k in [min_lag, max_lag]."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    max_lag = min(max_lag, n - 2)
    if max_lag < min_lag:
        return np.zeros(0)
    lags = np.arange(min_lag, max_lag + 1)
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    spec = np.fft.rfft(x, nfft)
    cross = np.fft.irfft(spec * np.conj(spec), nfft)[lags]
    c1 = np.concatenate([[0.0], np.cumsum(x)])
    c2 = np.concatenate([[0.0], np.cumsum(x * x)])
    cnt = n - lags
    sa, sb = c1[n - lags], c1[n] - c1[lags]
    qa, qb = c2[n - lags], c2[n] - c2[lags]
    cov = cross - sa * sb / cnt
    va = qa - sa * sa / cnt
    vb = qb - sb * sb / cnt
    denom = np.sqrt(np.maximum(va, 0) * np.maximum(vb, 0))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(denom > 1e-12 * cnt, cov / denom, 0.0)
    return r


def autocorr_view(X, n_lags):
    """Row-wise lagged autocorrelation at lags 0..n_lags-1.

    Beat phase drops out, so rhythm regularity shows up as peak structure.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if n_lags < 1 or n_lags > X.shape[1] - 2:
        raise ValueError(f"n_lags must lie in [1, {X.shape[1] - 2}], got {n_lags}")
    return np.stack([lagged_correlation(x, 0, n_lags - 1) for x in X]).astype(np.float32)


def signal_quality_index(samples, fs_hz, min_lag_s=0.25, max_lag_s=2.0):
    """Peak lagged autocorrelation over plausible beat periods; 0 for flat input."""
    x = np.asarray(samples, dtype=np.float64)
    if x.max() == x.min():
        return 0.0
    r = lagged_correlation(x, int(np.ceil(min_lag_s * fs_hz)), int(np.floor(max_lag_s * fs_hz)))
    return float(r.max()) if r.size else 0.0


def estimate_quality(seg: Segment, sqi_threshold=0.5):
    sqi = signal_quality_index(seg.samples, seg.fs_hz)
    value = Quality.GOOD if sqi >= sqi_threshold else Quality.BAD
    return QualityFlag(value, QualitySource.HEURISTIC)


# ---------------------------------------------------------------- PPGW1

PPGW_MAGIC = b"PPGW1"


def dumps_waveform(w: Waveform) -> bytes:
    header = {
        "patient_id": w.patient_id,
        "fs_hz": w.fs_hz,
        "start_time_ms": int(w.start_time_ms),
        "n_samples": len(w.samples),
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(PPGW_MAGIC)
    buf.write(struct.pack("<I", len(hb)))
    buf.write(hb)
    buf.write(np.asarray(w.samples, dtype="<f4").tobytes())
    return buf.getvalue()


def loads_waveform(raw: bytes) -> Waveform:
    if raw[:5] != PPGW_MAGIC:
        raise FormatError("missing PPGW1 magic")
    if len(raw) < 9:
        raise FormatError("truncated PPGW1 header")
    (hlen,) = struct.unpack("<I", raw[5:9])
    try:
        header = json.loads(raw[9:9 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad PPGW1 header: {exc}") from exc
    n = int(header["n_samples"])
    body = raw[9 + hlen:]
    if len(body) != 4 * n:
        raise FormatError(f"expected {n} samples, found {len(body) // 4}")
    samples = np.frombuffer(body, dtype="<f4").astype(np.float64)
    return Waveform(header["patient_id"], float(header["fs_hz"]), int(header["start_time_ms"]), samples)


def write_waveform(path, w: Waveform):
    with open(path, "wb") as fh:
        fh.write(dumps_waveform(w))


def read_waveform(path) -> Waveform:
    with open(path, "rb") as fh:
        return loads_waveform(fh.read())
