"""Acceptance criteria 1-9, each at its stated tolerance; one PASS/FAIL line per criterion.

Criterion 7 trains MDFN-I2 for 2,000 iterations (about 12 minutes). The
3-seed MDFN-I1 vs MDFN-I2 comparison of criterion 8 trains six more networks
and only runs with ``MDFN_FULL_ACCEPTANCE=1``; it is reported, never blocking.
"""
import functools
import os
import time
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

from conftest import ACCEPTANCE, GRAD_TOL
from gradsuite import MODULES, PRIMITIVES, SHAPES_PER_OP, sweep
from test_boxes import brute_force_match, random_boxes
from test_evaluation import _random_instance, brute_ap, brute_nms, brute_tp_flags
from mdfn.boxes import Box, match
from mdfn.evaluation import Detection, average_precision, match_detections, nms_indices
from mdfn.experiments import OVERFIT, TREND_SEEDS, held_out_map, is_non_increasing, iou_trend, overfit_run
from mdfn.head import head_channels
from mdfn.inception import InceptionModule, InceptionSpec, UnsharedReference, cascade_ratio
from mdfn.network import NetworkSpec, build, full_width_spec, param_increase
from mdfn.tensor import ConvParams, Tensor, backward, tensor_sum
from mdfn.train import RunConfig, train

FULL = os.environ.get("MDFN_FULL_ACCEPTANCE") == "1"


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


def criterion(n: int):
    """Make sure a criterion that dies before ``record`` still gets a FAIL line."""
    def wrap(fn):
        @functools.wraps(fn)
        def inner(*a, **kw):
            try:
                return fn(*a, **kw)
            except Exception as e:
                ACCEPTANCE.setdefault(n, (False, f"{type(e).__name__}: {e}"))
                raise
        return inner
    return wrap


@pytest.fixture(scope="module")
def overfit():
    return overfit_run(OVERFIT)


@criterion(1)
def test_c1_gradient_suite():
    start = time.perf_counter()
    worst = {}
    for i, (name, case) in enumerate({**PRIMITIVES, **MODULES}.items()):
        worst[name] = sweep(case, seed=100 + i, n=SHAPES_PER_OP)
    seconds = time.perf_counter() - start
    bad = {k: v for k, v in worst.items() if not v < GRAD_TOL}
    top = max(worst, key=worst.get)
    record(1, not bad and seconds < 120,
           f"{len(worst)} ops/modules x {SHAPES_PER_OP} shapes, worst rel err {worst[top]:.1e} ({top}), "
           f"{seconds:.0f}s" + (f"; over tolerance: {sorted(bad)}" if bad else ""))


@criterion(2)
def test_c2_sharing_equivalence():
    rng = np.random.default_rng(2)
    worst = 0.0
    for kind in ("square", "cubic"):
        for stride in (1, 2):
            spec = InceptionSpec(kind, 5, bottleneck_channels=3, branch_channels=4, stride=stride)
            mod = InceptionModule(spec, rng)
            ref = UnsharedReference(mod)
            x = rng.standard_normal((2, 5, 8, 8))
            a, b = mod(Tensor(x)), ref(Tensor(x))
            w = Tensor(rng.standard_normal(a.shape))
            backward(tensor_sum(a * w))
            backward(tensor_sum(b * w))
            worst = max(worst, np.abs(a.data - b.data).max())
            tied = ref.tied_gradients()
            pairs = {"bottleneck": mod.bottleneck}
            pairs.update({f"stage{i + 1}": cv for i, cv in enumerate(mod.branches.stages())})
            for name, conv in pairs.items():
                worst = max(worst, np.abs(conv.weight.grad - tied[f"{name}.weight"]).max(),
                            np.abs(conv.bias.grad - tied[f"{name}.bias"]).max())
    record(2, worst <= 1e-12, f"max |shared - unshared| over activations and grads: {worst:.1e}")


@criterion(3)
def test_c3_binomial_structure():
    seen = {}
    for variant in ("mdfn-i1", "mdfn-i2"):
        for unit in build(NetworkSpec(variant=variant)).summary()["units"]:
            if unit["kind"] in ("square", "cubic"):
                seen.setdefault(unit["kind"], set()).add(tuple(unit["multiplicities"]))
                assert [blk["multiplicity"] for blk in unit["blocks"]] == unit["multiplicities"]
    ok = seen == {"square": {(1, 2, 1)}, "cubic": {(1, 3, 3, 1)}}
    record(3, ok, f"square {sorted(seen.get('square', []))}, cubic {sorted(seen.get('cubic', []))}")


@criterion(4)
def test_c4_parameter_claims():
    rng = np.random.default_rng(4)
    ratios = set()
    for c in (1, 8, 64):
        # realized 3x3 layers against the weight tensor a 5x5 layer would hold
        two = sum(ConvParams.init(c, c, 3, rng).weight.data.size for _ in range(2))
        one = np.empty((c, c, 5, 5)).size
        ratios.add(Fraction(two, one))
        ratios.add(cascade_ratio(c))
    inc = {v: param_increase(v, spec_for=full_width_spec) for v in ("mdfn-i1", "mdfn-i2")}
    ok = ratios == {Fraction(18, 25)} and all(0.05 <= v <= 0.20 for v in inc.values())
    record(4, ok, f"cascade/5x5 = {sorted(map(str, ratios))}; full-width increase "
                  + ", ".join(f"{k} {v:+.1%}" for k, v in inc.items()))


@criterion(5)
def test_c5_oracles():
    rng = np.random.default_rng(5)
    start = time.perf_counter()
    n = 1000
    m_ok = nms_ok = ap_ok = tp_ok = 0
    worst_ap = 0.0
    for _ in range(n):
        D = int(rng.integers(1, 41))
        G = int(rng.integers(0, min(D, 5) + 1))
        defaults, gts = random_boxes(rng, D), random_boxes(rng, G)
        m_ok += match(defaults, gts).matched.tolist() == brute_force_match(defaults, gts)

        k = int(rng.integers(1, 31))
        boxes = random_boxes(rng, k, 0.05, 0.4)
        scores = rng.integers(1, 10, size=k) / 10.0
        corners = np.concatenate([boxes[:, :2] - boxes[:, 2:] / 2, boxes[:, :2] + boxes[:, 2:] / 2], axis=1)
        nms_ok += nms_indices(corners, scores, 0.45).tolist() == brute_nms(boxes, scores, 0.45)

        dets, gt_map = _random_instance(rng)
        thr = float(rng.choice([0.5, 0.65, 0.8]))
        fast = average_precision([Detection(Box(*b), 0, s, img) for img, s, b in dets],
                                 [(img, Box(*b)) for img, bs in gt_map.items() for b in bs], thr)
        err = abs(fast - brute_ap(dets, gt_map, thr))
        worst_ap = max(worst_ap, err)
        ap_ok += err <= 1e-10
        one = [d for d in dets if d[0] == 0]
        tp_ok += (match_detections(np.array([d[2] for d in one]).reshape(-1, 4),
                                   np.array(gt_map[0]).reshape(-1, 4), thr).tolist()
                  == brute_tp_flags(one, {0: gt_map[0]}, thr))
    seconds = time.perf_counter() - start
    ok = m_ok == nms_ok == ap_ok == tp_ok == n and seconds < 60
    record(5, ok, f"matching {m_ok}/{n}, NMS {nms_ok}/{n}, detection-GT {tp_ok}/{n}, AP {ap_ok}/{n} "
                  f"(worst {worst_ap:.1e}), {seconds:.0f}s")


@criterion(6)
def test_c6_multibox_arithmetic():
    details = []
    ok = True
    for variant in ("mdfn-i1", "mdfn-i2", "baseline"):
        m = build(NetworkSpec(variant=variant))
        k, c = m.boxes_per_cell, m.num_classes
        ok &= all(h.out_channels == head_channels(k, c) == k * (c + 4) for h in m.heads)
        total = sum(k * a * b for a, b in m.tap_shapes)
        ok &= len(m.defaults) == total
        _, preds = m(np.zeros((1, 3, 64, 64)))
        ok &= sum(p.shape[1] // (c + 4) * p.shape[2] * p.shape[3] for p in preds) == total
        details.append(f"{variant} k(c+4)={k * (c + 4)} boxes={total}")
    record(6, ok, "; ".join(details))


@criterion(7)
def test_c7_overfit_run(overfit):
    m50 = overfit["train_map"]["0.50"]
    losses = overfit["losses"]
    minutes = overfit["seconds"] / 60
    grade = "pass" if m50 >= 0.90 else ("investigate" if m50 >= 0.80 else "fail")
    ok = m50 >= 0.90 and minutes <= 30 and losses[500] < losses[1]
    record(7, ok, f"MDFN-I2 train mAP@0.5 {m50:.3f} ({grade}) after {len(losses)} iterations, "
                  f"{minutes:.1f} min; loss it1 {losses[1]:.3f} -> it500 {losses[500]:.3f}")


@criterion(8)
def test_c8_multi_iou_trend(overfit):
    m = held_out_map(overfit["trainer"])
    mono = is_non_increasing(m)
    detail = "held-out mAP " + " ".join(f"{v:.3f}" for _, v in sorted(m.items()))
    if FULL:
        trend = iou_trend(TREND_SEEDS)
        mono &= all(is_non_increasing(r) for r in trend["mdfn-i2"].values())
        i1 = np.mean([r["0.75"] for r in trend["mdfn-i1"].values()])
        i2 = np.mean([r["0.75"] for r in trend["mdfn-i2"].values()])
        holds = i2 >= i1 - 0.02
        detail += (f"; 3-seed mAP@0.75 I1 {i1:.3f} vs I2 {i2:.3f} "
                   f"({'holds' if holds else 'does not hold'}, non-blocking)")
    else:
        detail += "; 3-seed I1 vs I2 comparison not run (set MDFN_FULL_ACCEPTANCE=1)"
    record(8, mono, detail)


@criterion(9)
def test_c9_determinism(tmp_path):
    cfg = RunConfig(iterations=40, checkpoint_every=0, flip=True, final_eval=False, eval_count=0)
    train(cfg, tmp_path / "a")
    train(replace(cfg), tmp_path / "b")
    a, b = (tmp_path / d / "final.ckpt" for d in ("a", "b"))
    same = a.read_bytes() == b.read_bytes()
    record(9, same, f"two {cfg.iterations}-iteration runs (seed {cfg.seed}): final checkpoints "
                    f"{'bit-identical' if same else 'differ'} ({a.stat().st_size} bytes)")
