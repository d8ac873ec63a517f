"""Turn bedside-monitor alarm logs plus waveforms into labeled 30 s segments.

Rules:

* AF: one window centred on every AF alarm onset.
* PVC family: one centred window per alarm, unless an AF alarm of the same
  patient lies within ``pvc_exclusion_s`` of its onset.
* NSR: a gap between consecutive alarm onsets (or between an alarm and the
  waveform boundary) longer than ``nsr_min_gap_s + window_s`` yields one
  window centred on the gap midpoint.
"""
from __future__ import annotations

import csv
import enum
import io
import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from cmcppg.dataset import Dataset, LabeledSegment, Provenance, Rhythm
from cmcppg.errors import EmptyClass, FormatError
from cmcppg.signal_core import Segment, estimate_quality, normalize_segment

log = logging.getLogger(__name__)


class AlarmType(enum.Enum):
    AF = "AF"
    VT = "VT"
    PVC = "PVC"
    RONT = "RONT"
    COUPLET = "COUPLET"
    BIGEMINY = "BIGEMINY"
    TRIGEMINY = "TRIGEMINY"
    PVC_GE_X = "PVC_GE_X"
    VFIB = "VFIB"
    OTHER = "OTHER"


PVC_FAMILY = frozenset({AlarmType.VT, AlarmType.PVC, AlarmType.RONT, AlarmType.COUPLET,
                        AlarmType.BIGEMINY, AlarmType.TRIGEMINY, AlarmType.PVC_GE_X})


@dataclass(frozen=True, order=True)
class AlarmEvent:
    patient_id: str
    onset_ms: int
    alarm_type: AlarmType = field(compare=False)


@dataclass(frozen=True)
class LabelingConfig:
    window_s: float = 30.0
    half_window_s: float = 15.0
    pvc_exclusion_s: float = 30.0
    nsr_min_gap_s: float = 30.0
    sqi_threshold: float = 0.5
    dedup_window_s: float | None = None

    def __post_init__(self):
        for name in ("window_s", "half_window_s", "pvc_exclusion_s", "nsr_min_gap_s"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if abs(self.window_s - 2 * self.half_window_s) > 1e-9:
            raise ValueError("window_s must equal 2 * half_window_s")


@dataclass
class ParseResult:
    events: list
    unknown: int = 0


def parse_alarm_log(raw) -> ParseResult:
    """Parse ``patient_id,onset_ms,alarm_type`` CSV; unknown types become OTHER."""
    text = raw.decode("utf-8") if isinstance(raw, (bytes, bytearray)) else raw
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        return ParseResult([])
    if [h.strip() for h in header] != ["patient_id", "onset_ms", "alarm_type"]:
        raise FormatError(f"line 1: expected header patient_id,onset_ms,alarm_type, got {header}")
    events, unknown = [], 0
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise FormatError(f"line {lineno}: expected 3 fields, got {len(row)}")
        pid, onset, kind = (c.strip() for c in row)
        if not pid:
            raise FormatError(f"line {lineno}: empty patient_id")
        try:
            onset_ms = int(onset)
        except ValueError:
            raise FormatError(f"line {lineno}: onset_ms {onset!r} is not an integer") from None
        try:
            atype = AlarmType(kind.upper())
        except ValueError:
            atype = AlarmType.OTHER
            unknown += 1
        events.append(AlarmEvent(pid, onset_ms, atype))
    if unknown:
        log.warning("%d alarm rows with unknown type mapped to OTHER", unknown)
    events.sort(key=lambda e: (e.patient_id, e.onset_ms, e.alarm_type.value))
    return ParseResult(events, unknown)


@dataclass
class ExtractionReport:
    skipped_out_of_bounds: int = 0
    excluded_pvc: int = 0
    deduplicated: int = 0


def _by_patient(items, key):
    out = defaultdict(list)
    for it in items:
        out[key(it)].append(it)
    return out


def _index_waveforms(waveforms):
    if isinstance(waveforms, dict):
        flat = [w for ws in waveforms.values() for w in (ws if isinstance(ws, (list, tuple)) else [ws])]
    else:
        flat = list(waveforms)
    by_pid = _by_patient(flat, lambda w: w.patient_id)
    return {pid: sorted(ws, key=lambda w: w.start_time_ms) for pid, ws in by_pid.items()}


def _cut(waveforms, pid, center_ms, cfg, label, report):
    half_ms = int(round(cfg.half_window_s * 1000))
    t0 = center_ms - half_ms
    for w in waveforms.get(pid, []):
        n = int(round(cfg.window_s * w.fs_hz))
        start = w.time_to_index(t0)
        if start >= 0 and start + n <= len(w.samples):
            seg = normalize_segment(Segment(pid, t0, w.fs_hz, w.samples[start:start + n]))
            quality = estimate_quality(seg, cfg.sqi_threshold)
            return LabeledSegment(seg, label, quality, Provenance.ALARM)
    report.skipped_out_of_bounds += 1
    return None


def _dedup(events, window_s, report):
    if window_s is None:
        return events
    out, last = [], {}
    for e in events:
        key = (e.patient_id, e.alarm_type)
        if key in last and e.onset_ms - last[key] <= window_s * 1000:
            report.deduplicated += 1
            continue
        last[key] = e.onset_ms
        out.append(e)
    return out


def extract_af_segments(events, waveforms, cfg=LabelingConfig(), report=None):
    report = report if report is not None else ExtractionReport()
    wf = _index_waveforms(waveforms)
    af = _dedup([e for e in events if e.alarm_type == AlarmType.AF], cfg.dedup_window_s, report)
    out = [_cut(wf, e.patient_id, e.onset_ms, cfg, Rhythm.AF, report) for e in af]
    return [s for s in out if s is not None]


def extract_pvc_segments(events, waveforms, cfg=LabelingConfig(), report=None):
    report = report if report is not None else ExtractionReport()
    wf = _index_waveforms(waveforms)
    af_onsets = defaultdict(list)
    for e in events:
        if e.alarm_type == AlarmType.AF:
            af_onsets[e.patient_id].append(e.onset_ms)
    excl_ms = cfg.pvc_exclusion_s * 1000
    pvc = _dedup([e for e in events if e.alarm_type in PVC_FAMILY], cfg.dedup_window_s, report)
    out = []
    for e in pvc:
        if any(abs(t - e.onset_ms) <= excl_ms for t in af_onsets.get(e.patient_id, ())):
            report.excluded_pvc += 1
            continue
        seg = _cut(wf, e.patient_id, e.onset_ms, cfg, Rhythm.PVC, report)
        if seg is not None:
            out.append(seg)
    return out


def nsr_centers(onsets_ms, start_ms, end_ms, cfg=LabelingConfig()):
    """Midpoints of qualifying gaps among sorted alarm onsets inside one waveform.

    Boundary intervals count only next to an alarm; a waveform with no alarm
    yields nothing.
    """
    onsets = sorted(t for t in onsets_ms if start_ms <= t <= end_ms)
    if not onsets:
        return []
    need_ms = (cfg.nsr_min_gap_s + cfg.window_s) * 1000
    points = [start_ms] + onsets + [end_ms]
    return [(a + b) // 2 for a, b in zip(points[:-1], points[1:]) if b - a > need_ms]


def extract_nsr_segments(events, waveforms, cfg=LabelingConfig(), report=None):
    report = report if report is not None else ExtractionReport()
    wf = _index_waveforms(waveforms)
    onsets = defaultdict(list)
    for e in events:
        onsets[e.patient_id].append(e.onset_ms)
    out = []
    for pid in sorted(onsets):
        for w in wf.get(pid, []):
            for c in nsr_centers(onsets[pid], w.start_time_ms, w.end_time_ms, cfg):
                seg = _cut({pid: [w]}, pid, c, cfg, Rhythm.NSR, report)
                if seg is not None:
                    out.append(seg)
    return out


def _sorted(segs):
    return sorted(segs, key=lambda s: (s.segment.patient_id, s.segment.t_start_ms, int(s.label)))


def assemble_dataset(af, pvc, nsr, balance=(1, 1), seed=0, fs_hz=None, seg_len=None, params=None):
    """Merge the three classes; with ``balance=(a, b)`` the majority side is
    downsampled (seeded, without replacement) to an AF:non-AF ratio of a:b."""
    af, non_af = _sorted(af), _sorted(list(pvc) + list(nsr))
    rng = np.random.default_rng(seed)
    if balance is not None:
        a, b = balance
        if not af or not non_af:
            raise EmptyClass(f"cannot balance: {len(af)} AF and {len(non_af)} non-AF segments")
        want_non = int(round(len(af) * b / a))
        if len(non_af) > want_non:
            keep = np.sort(rng.choice(len(non_af), want_non, replace=False))
            non_af = [non_af[i] for i in keep]
        else:
            want_af = int(round(len(non_af) * a / b))
            if len(af) > want_af:
                keep = np.sort(rng.choice(len(af), want_af, replace=False))
                af = [af[i] for i in keep]
        if not af or not non_af:
            raise EmptyClass("a class is empty after balancing")
    segs = _sorted(af + non_af)
    return Dataset.from_segments(segs, fs_hz=fs_hz, seg_len=seg_len, params=params)


def label_recordings(events, waveforms, cfg=LabelingConfig(), balance=None, seed=0):
    """Full labeling pass; returns the dataset and an extraction report."""
    report = ExtractionReport()
    af = extract_af_segments(events, waveforms, cfg, report)
    pvc = extract_pvc_segments(events, waveforms, cfg, report)
    nsr = extract_nsr_segments(events, waveforms, cfg, report)
    fs = None
    wf = _index_waveforms(waveforms)
    if wf:
        fs = next(iter(wf.values()))[0].fs_hz
    seg_len = int(round(cfg.window_s * fs)) if fs else 0
    params = {"labeling": {k: v for k, v in vars(cfg).items()}, "balance": list(balance) if balance else None}
    if not (af or pvc or nsr):
        return Dataset.from_segments([], fs_hz=fs or 0.0, seg_len=seg_len, params=params), report
    ds = assemble_dataset(af, pvc, nsr, balance=balance, seed=seed, fs_hz=fs, params=params)
    return ds, report
