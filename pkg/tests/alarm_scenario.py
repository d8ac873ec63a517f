"""Scripted alarm scenario for the labeling rules.

Patient ``p1`` has an AF alarm at 100 s, a PVC at 200 s shadowed by an AF
alarm at 215 s, an isolated PVC at 300 s and an alarm-free stretch between
400 s and 500 s. VFIB alarms fill the other gaps so that only the 400-500 s
gap qualifies for NSR.

The monitor recording is split in two: 70-225 s and 240-530 s. The AF alarm
at 215 s therefore has no complete window and is skipped, which leaves the
expected set at exactly one AF, one PVC and one NSR segment.
"""
import numpy as np

from cmcppg.signal_core import Waveform

FS = 40.0
ALARMS = [(100, "AF"), (150, "VFIB"), (200, "PVC"), (215, "AF"), (255, "VFIB"), (300, "PVC"),
          (350, "VFIB"), (400, "VFIB"), (500, "VFIB")]
RECORDINGS = [(70, 225), (240, 530)]

# (label, t_start_s) of every emitted segment, sorted by time
EXPECTED = [("AF", 85), ("PVC", 285), ("NSR", 435)]


def alarm_csv(alarms=ALARMS, pid="p1"):
    lines = ["patient_id,onset_ms,alarm_type"]
    lines += [f"{pid},{t * 1000},{kind}" for t, kind in alarms]
    return ("\n".join(lines) + "\n").encode()


def waveforms(recordings=RECORDINGS, pid="p1", fs=FS):
    out = []
    for k, (a, b) in enumerate(recordings):
        t = np.arange(int(round((b - a) * fs))) / fs
        # 1.1 Hz pulse-like wave; clean so every segment is GOOD quality
        x = np.sin(2 * np.pi * 1.1 * t) + 0.3 * np.sin(2 * np.pi * 2.2 * t + k)
        out.append(Waveform(pid, fs, a * 1000, x))
    return out
