"""Held-out mAP across IoU thresholds for MDFN-I1 and MDFN-I2 over three seeds.

Run: python3 demos/04_iou_trend.py   (six 2000-iteration runs, a bit over an hour)
"""
import numpy as np

from mdfn.experiments import TREND_SEEDS, is_non_increasing, iou_trend


def show(variant, seed, m_ap):
    print(f"{variant} seed {seed:<5} " + " ".join(f"{v:.3f}" for _, v in sorted(m_ap.items())), flush=True)


print("IoU thresholds      " + " ".join(f"{0.5 + 0.05 * i:.2f} " for i in range(7)))
res = iou_trend(TREND_SEEDS, progress=show)
for v, runs in res.items():
    mean = {k: np.mean([r[k] for r in runs.values()]) for k in next(iter(runs.values()))}
    print(f"{v} mean        " + " ".join(f"{x:.3f}" for _, x in sorted(mean.items())),
          "(non-increasing)" if all(is_non_increasing(r) for r in runs.values()) else "(NOT monotone)")
