"""Turn a monitor alarm log into labeled 30 s windows.

A patient has an AF alarm at 100 s, a PVC at 200 s that an AF alarm at
215 s shadows, an isolated PVC at 300 s and a quiet stretch from 400 s
to 500 s. The recording has a gap between 225 s and 240 s.

    python3 demos/01_alarm_labeling.py
"""
import numpy as np

from cmcppg.alarm_labeler import LabelingConfig, label_recordings, parse_alarm_log
from cmcppg.signal_core import Waveform

FS = 40.0
log_csv = b"""patient_id,onset_ms,alarm_type
p1,100000,AF
p1,150000,VFIB
p1,200000,PVC
p1,215000,AF
p1,255000,VFIB
p1,300000,PVC
p1,350000,VFIB
p1,400000,VFIB
p1,500000,VFIB
"""


def recording(start_s, end_s):
    t = np.arange(int((end_s - start_s) * FS)) / FS
    return Waveform("p1", FS, start_s * 1000, np.sin(2 * np.pi * 1.1 * t))


parsed = parse_alarm_log(log_csv)
print(f"{len(parsed.events)} alarms parsed")
ds, report = label_recordings(parsed.events, [recording(70, 225), recording(240, 530)], LabelingConfig())
for rec in ds.manifest()["records"]:
    t0 = rec["t_start_ms"] / 1000
    print(f"  {rec['label']:<4} [{t0:.0f}, {t0 + 30:.0f}) s  quality {rec['quality']}")
print(f"PVC alarms dropped near AF: {report.excluded_pvc}")
print(f"windows falling outside a recording: {report.skipped_out_of_bounds}")
