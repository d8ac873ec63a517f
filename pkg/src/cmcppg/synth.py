"""Seeded synthetic PPG with known rhythm, quality and label noise."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.signal import lfilter

from cmcppg.dataset import Dataset, Provenance, Rhythm
from cmcppg.signal_core import Quality, QualityFlag, QualitySource, Waveform, minmax_normalize

# beat template: systolic peak and dicrotic bump
SYSTOLIC_AMP, SYSTOLIC_WIDTH_S = 1.0, 0.09
DICROTIC_AMP, DICROTIC_WIDTH_S, DICROTIC_DELAY_S = 0.35, 0.12, 0.28
# AF RR ~ Uniform(0.45, 1.25) s
AF_RR_CENTRE_S = 0.85


@dataclass(frozen=True)
class RhythmSpec:
    rhythm: Rhythm = Rhythm.NSR
    mean_rr_s: float = 0.85
    rr_jitter: float | None = None  # NSR: normal sd; AF: uniform half-width
    pvc_period: int = 5

    def __post_init__(self):
        if not 0.3 <= self.mean_rr_s <= 2.0:
            raise ValueError("mean_rr_s must lie in [0.3, 2.0]")
        if self.rr_jitter is not None and self.rr_jitter < 0:
            raise ValueError("rr_jitter must be non-negative")
        if self.pvc_period < 2:
            raise ValueError("pvc_period must be at least 2")

    @property
    def jitter(self):
        if self.rr_jitter is not None:
            return self.rr_jitter
        return 0.4 if self.rhythm == Rhythm.AF else 0.04


@dataclass(frozen=True)
class NoiseSpec:
    p_flip_good: float = 0.0
    p_flip_bad: float = 0.0
    p_bad_quality: float = 0.0
    # light corruption applied to GOOD segments
    good_noise_sigma: float = 0.02
    good_wander_amp: float = 0.05
    # heavy corruption applied to BAD segments
    bad_noise_sigma: float = 0.1
    bad_wander_amp: float = 0.2
    artifact_amp: float = 3.0
    artifact_fraction: tuple = (0.3, 0.6)
    burst_prob: float = 0.5  # chance per burst slot of a new burst starting; sets burst count

    def __post_init__(self):
        for name in ("p_flip_good", "p_flip_bad", "p_bad_quality", "burst_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a probability, got {v}")
        if self.p_flip_bad < self.p_flip_good:
            raise ValueError("p_flip_bad must be >= p_flip_good")
        lo, hi = self.artifact_fraction
        if not 0.3 <= lo <= hi <= 1.0:
            raise ValueError("artifact_fraction must satisfy 0.3 <= lo <= hi <= 1")

    def to_json(self):
        d = asdict(self)
        d["artifact_fraction"] = list(self.artifact_fraction)
        return d


def rr_intervals(spec: RhythmSpec, n_beats, rng):
    """RR sequence and per-beat amplitude scale."""
    amp = np.ones(n_beats)
    if spec.rhythm == Rhythm.AF:
        # AF intervals ignore the patient's sinus rate unless a jitter is given
        centre = AF_RR_CENTRE_S if spec.rr_jitter is None else spec.mean_rr_s
        rr = rng.uniform(centre - spec.jitter, centre + spec.jitter, n_beats)
        return np.clip(rr, 0.3, 2.0), amp
    rr = np.clip(rng.normal(spec.mean_rr_s, spec.jitter, n_beats), 0.4, 1.4)
    if spec.rhythm == Rhythm.PVC:
        # every pvc_period-th beat arrives early and weak, then a compensatory pause
        ectopic = np.arange(spec.pvc_period - 1, n_beats, spec.pvc_period)
        rr[ectopic] = spec.mean_rr_s * 0.6
        pause = ectopic + 1
        pause = pause[pause < n_beats]
        rr[pause] = spec.mean_rr_s * 1.4
        amp[ectopic] = 0.6
    return rr, amp


def beat_times(spec: RhythmSpec, duration_s, rng):
    """Beat onsets covering [0, duration_s) plus one beat of lead-in."""
    n_max = int(np.ceil((duration_s + 2.0) / 0.3)) + 2
    rr, amp = rr_intervals(spec, n_max, rng)
    t = -rng.uniform(0, spec.mean_rr_s) + np.concatenate([[0.0], np.cumsum(rr[:-1])])
    keep = t < duration_s + 1.0
    return t[keep], amp[keep], rr[keep]


def render_pulses(times, amps, duration_s, fs_hz):
    t = np.arange(int(round(duration_s * fs_hz))) / fs_hz
    x = np.zeros_like(t)
    for tb, a in zip(times, amps):
        lo = np.searchsorted(t, tb - 4 * SYSTOLIC_WIDTH_S)
        hi = np.searchsorted(t, tb + DICROTIC_DELAY_S + 4 * DICROTIC_WIDTH_S)
        tt = t[lo:hi] - tb
        x[lo:hi] += a * (SYSTOLIC_AMP * np.exp(-0.5 * (tt / SYSTOLIC_WIDTH_S) ** 2)
                         + DICROTIC_AMP * np.exp(-0.5 * ((tt - DICROTIC_DELAY_S) / DICROTIC_WIDTH_S) ** 2))
    return x


def gen_beat_train(spec: RhythmSpec, duration_s, fs_hz, seed, patient_id="synth", start_time_ms=0):
    rng = np.random.default_rng(seed)
    times, amps, _ = beat_times(spec, duration_s, rng)
    x = render_pulses(times, amps, duration_s, fs_hz)
    return Waveform(patient_id, float(fs_hz), start_time_ms, x)


def _wander(n, fs_hz, amp, rng):
    t = np.arange(n) / fs_hz
    f = rng.uniform(0.05, 0.3)
    return amp * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))


def _artifact_bursts(n, fs_hz, noise: NoiseSpec, rng):
    """Mask and values of bounded random-walk bursts covering the target fraction."""
    target = rng.uniform(*noise.artifact_fraction)
    mask = np.zeros(n, dtype=bool)
    n_bursts = 1 + rng.binomial(5, noise.burst_prob)
    # fast mean-reverting walk clipped to +/- artifact_amp
    theta = 1.0 - np.exp(-1.0 / (0.03 * fs_hz))
    step = noise.artifact_amp * np.sqrt(theta * (2 - theta))
    values = np.zeros(n)
    need = int(np.ceil(target * n))
    while mask.sum() < need:
        length = max(1, int(rng.integers(need // n_bursts // 2 + 1, need // n_bursts + 2)))
        start = int(rng.integers(0, max(1, n - length)))
        v0 = rng.normal(0, noise.artifact_amp)
        walk = lfilter([step], [1.0, theta - 1.0], rng.normal(size=length), zi=[v0 * (1 - theta)])[0]
        values[start:start + length] = np.clip(walk, -noise.artifact_amp, noise.artifact_amp)
        mask[start:start + length] = True
    return mask, values


def corrupt(w: Waveform, noise: NoiseSpec, seed):
    """Add recording noise. Returns the corrupted waveform and its
    ground-truth quality flag (BAD with probability ``p_bad_quality``)."""
    rng = np.random.default_rng(seed)
    x = np.array(w.samples, dtype=np.float64)
    n = len(x)
    bad = rng.random() < noise.p_bad_quality
    if bad:
        mask, values = _artifact_bursts(n, w.fs_hz, noise, rng)
        x[mask] = values[mask]
        x += _wander(n, w.fs_hz, noise.bad_wander_amp, rng)
        x += rng.normal(0, noise.bad_noise_sigma, n)
        flag = QualityFlag(Quality.BAD, QualitySource.GROUND_TRUTH)
    else:
        if noise.good_wander_amp > 0:
            x += _wander(n, w.fs_hz, noise.good_wander_amp, rng)
        if noise.good_noise_sigma > 0:
            x += rng.normal(0, noise.good_noise_sigma, n)
        flag = QualityFlag(Quality.GOOD, QualitySource.GROUND_TRUTH)
    return Waveform(w.patient_id, w.fs_hz, w.start_time_ms, x), flag


def _flip(rhythm, rng):
    if rhythm == Rhythm.AF:
        return Rhythm.NSR if rng.random() < 0.5 else Rhythm.PVC
    return Rhythm.AF


def gen_patient(index, n_segments, rhythm, noise: NoiseSpec, seed, fs_hz=40.0, window_s=30.0,
                mixed=False, class_mix=None):
    """All segments of one patient; uses its own sub-seed so patients are
    independent of generation order."""
    rng = np.random.default_rng([seed, index])
    # label flips draw from their own stream so signals do not depend on flip rates
    flip_rng = np.random.default_rng([seed, index, 1])
    pid = f"p{index:05d}"
    mean_rr = rng.uniform(0.7, 1.0)
    pvc_period = int(rng.integers(3, 7))
    rows = []
    for s in range(n_segments):
        r = rhythm
        if mixed:
            r = Rhythm(int(rng.choice([int(k) for k in class_mix], p=list(class_mix.values()))))
        spec = RhythmSpec(r, mean_rr, pvc_period=pvc_period)
        w = gen_beat_train(spec, window_s, fs_hz, rng.integers(2**63), pid, s * int(window_s * 1000))
        w, flag = corrupt(w, noise, rng.integers(2**63))
        p = noise.p_flip_bad if flag.value == Quality.BAD else noise.p_flip_good
        observed = _flip(r, flip_rng) if flip_rng.random() < p else r
        rows.append((minmax_normalize(w.samples), observed, r, flag, w.start_time_ms, pid))
    return rows


def gen_labeled_corpus(n_patients, segs_per_patient, class_mix, noise: NoiseSpec, seed,
                       fs_hz=40.0, window_s=30.0, mixed_patients=False):
    """Synthetic corpus; each patient has one true rhythm unless ``mixed_patients``.

    ``class_mix`` maps Rhythm (or its name) to probability.
    """
    if n_patients < 1 or segs_per_patient < 1:
        raise ValueError("n_patients and segs_per_patient must be positive")
    mix = {Rhythm[k] if isinstance(k, str) else Rhythm(k): float(v) for k, v in class_mix.items()}
    if abs(sum(mix.values()) - 1.0) > 1e-9:
        raise ValueError("class_mix must sum to 1")
    classes = sorted(mix)
    probs = [mix[c] for c in classes]
    assign_rng = np.random.default_rng([seed, 2**31])
    rhythms = assign_rng.choice([int(c) for c in classes], size=n_patients, p=probs)
    rows = []
    for i in range(n_patients):
        rows += gen_patient(i, segs_per_patient, Rhythm(int(rhythms[i])), noise, seed, fs_hz, window_s,
                            mixed_patients, mix)
    params = {
        "generator": "synth",
        "seed": int(seed),
        "n_patients": int(n_patients),
        "segs_per_patient": int(segs_per_patient),
        "class_mix": {c.name: mix[c] for c in classes},
        "noise": noise.to_json(),
        "fs_hz": float(fs_hz),
        "window_s": float(window_s),
        "mixed_patients": bool(mixed_patients),
    }
    return Dataset(
        np.stack([r[0] for r in rows]).astype(np.float32),
        [int(r[1]) for r in rows],
        [r[5] for r in rows],
        [r[4] for r in rows],
        [int(r[3].value) for r in rows],
        [int(r[3].source) for r in rows],
        [int(Provenance.SYNTH)] * len(rows),
        fs_hz,
        [int(r[2]) for r in rows],
        None,
        params,
    )
