"""Scaled-down experiment drivers: the overfit run and the IoU-threshold sweep."""
from __future__ import annotations

import time
from dataclasses import replace

from .evaluation import evaluate
from .train import RunConfig, Trainer, held_out_set

OVERFIT = RunConfig(variant="mdfn-i2", seed=42, train_count=64, iterations=2000)
# more scenes and flips so the held-out numbers mean something
TREND = RunConfig(variant="mdfn-i2", train_count=512, flip=True, iterations=2000)
TREND_SEEDS = (42, 7, 1234)


def overfit_run(cfg: RunConfig = OVERFIT, log=None) -> dict:
    """Train, then score the training set; returns losses, mAP and wall time."""
    start = time.perf_counter()
    tr = Trainer(cfg, log=log)
    records = tr.run()
    seconds = time.perf_counter() - start
    res = evaluate(tr.model, tr.dataset, cfg.iou_thresholds)["all"]
    return {"trainer": tr, "losses": [r["total"] for r in records], "train_map": res.mAP, "seconds": seconds}


def held_out_map(tr: Trainer) -> dict[str, float]:
    held = held_out_set(tr.cfg)
    return evaluate(tr.model, held, tr.cfg.iou_thresholds, list(held.spec.classes))["all"].mAP


def iou_trend(seeds=TREND_SEEDS, variants=("mdfn-i1", "mdfn-i2"), base: RunConfig = TREND, progress=None) -> dict:
    """Held-out mAP per threshold for each (variant, seed)."""
    out: dict[str, dict[int, dict[str, float]]] = {v: {} for v in variants}
    for seed in seeds:
        for v in variants:
            tr = Trainer(replace(base, variant=v, seed=seed))
            tr.run()
            out[v][seed] = held_out_map(tr)
            if progress is not None:
                progress(v, seed, out[v][seed])
    return out


def is_non_increasing(m_ap: dict[str, float]) -> bool:
    vals = [m_ap[k] for k in sorted(m_ap)]
    return all(b <= a for a, b in zip(vals, vals[1:]))
