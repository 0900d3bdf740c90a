"""Train MDFN-I2 on 64 fixed scenes and score it on the same scenes.

Run: python3 demos/03_overfit.py [iterations]   (2000 takes about 12 minutes)
"""
import sys
from dataclasses import replace

from mdfn.experiments import OVERFIT, held_out_map, overfit_run

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else OVERFIT.iterations
cfg = replace(OVERFIT, iterations=iterations,
              milestones=tuple(int(iterations * f) for f in (0.7, 0.9)))


def log(rec):
    if rec["iteration"] % 100 == 0:
        print(f"iter {rec['iteration']:>5}  lr {rec['lr']:.4f}  loss {rec['total']:.3f}", flush=True)


res = overfit_run(cfg, log=log)
print(f"trained {iterations} iterations in {res['seconds'] / 60:.1f} min")
print("training-set mAP  " + "  ".join(f"@{k} {v:.3f}" for k, v in sorted(res["train_map"].items())))
held = held_out_map(res["trainer"])
print("held-out mAP      " + "  ".join(f"@{k} {v:.3f}" for k, v in sorted(held.items())))
