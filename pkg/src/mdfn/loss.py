"""Joint confidence + localisation objective with hard-negative mining."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .boxes import MatchAssignment, encode_offsets
from .head import flatten_predictions
from .tensor import Tensor, log_softmax, reshape, smooth_l1, softmax_cross_entropy, take_rows, tensor_sum

BACKGROUND = 0


@dataclass
class LossReport:
    total: float
    conf: float
    loc: float
    n_matched: int
    n_negatives_used: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def mine_hard_negatives(background_loss: np.ndarray, positive: np.ndarray, n_keep: int) -> np.ndarray:
    """Indices of the ``n_keep`` highest-loss non-positive boxes (ties: lowest index)."""
    candidates = np.flatnonzero(~positive)
    n_keep = min(int(n_keep), len(candidates))
    if n_keep <= 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-background_loss[candidates], kind="stable")
    return np.sort(candidates[order[:n_keep]])


def multibox_loss(conf: Tensor, loc: Tensor, assignments: Sequence[MatchAssignment],
                  gts: Sequence[tuple[np.ndarray, np.ndarray]], defaults: np.ndarray,
                  alpha: float = 1.0, neg_pos_ratio: float = 3.0) -> tuple[Tensor, LossReport]:
    """Loss over flattened predictions.

    ``conf`` is ``(B, D, C)`` logits with background at index 0, ``loc`` is
    ``(B, D, 4)`` offsets.  ``gts[b]`` is ``(labels, boxes)`` with object
    labels counted from 0 and boxes in centre form.
    """
    B, D, C = conf.shape
    if loc.shape != (B, D, 4):
        raise ValueError(f"loc shape {loc.shape} does not match conf {conf.shape}")
    if len(assignments) != B or len(gts) != B:
        raise ValueError("need one assignment and one ground-truth set per image")
    defaults = np.asarray(defaults, dtype=np.float64)
    bg_loss = -log_softmax(conf.data.reshape(B * D, C))[:, BACKGROUND].reshape(B, D)

    conf_rows, conf_targets, loc_rows, loc_targets = [], [], [], []
    n_neg = 0
    for b, (assign, (labels, boxes)) in enumerate(zip(assignments, gts)):
        pos = assign.matched >= 0
        pos_idx = np.flatnonzero(pos)
        if len(pos_idx) == 0:
            continue
        labels = np.asarray(labels, dtype=np.int64)
        gt_idx = assign.matched[pos_idx]
        neg_idx = mine_hard_negatives(bg_loss[b], pos, np.floor(neg_pos_ratio * len(pos_idx)))
        n_neg += len(neg_idx)
        conf_rows.append(b * D + pos_idx)
        conf_targets.append(labels[gt_idx] + 1)
        conf_rows.append(b * D + neg_idx)
        conf_targets.append(np.full(len(neg_idx), BACKGROUND))
        loc_rows.append(b * D + pos_idx)
        loc_targets.append(encode_offsets(defaults[pos_idx], np.asarray(boxes, dtype=np.float64)[gt_idx]))

    n = sum(len(r) for r in loc_rows)
    if n == 0:
        zero = tensor_sum(conf) * 0.0 + tensor_sum(loc) * 0.0
        return zero, LossReport(0.0, 0.0, 0.0, 0, 0)

    conf_flat = reshape(conf, (B * D, C))
    loc_flat = reshape(loc, (B * D, 4))
    l_conf = softmax_cross_entropy(take_rows(conf_flat, np.concatenate(conf_rows)),
                                   np.concatenate(conf_targets), reduction="sum")
    l_loc = smooth_l1(take_rows(loc_flat, np.concatenate(loc_rows)), np.concatenate(loc_targets))
    total = (l_conf + l_loc * float(alpha)) * (1.0 / n)
    report = LossReport(float(total.data), float(l_conf.data), float(l_loc.data), n, n_neg)
    return total, report


def detection_loss(preds: Sequence[Tensor], assignments: Sequence[MatchAssignment],
                   gts: Sequence[tuple[np.ndarray, np.ndarray]], defaults: np.ndarray, num_classes: int,
                   alpha: float = 1.0, neg_pos_ratio: float = 3.0) -> tuple[Tensor, LossReport]:
    """``(L_conf + alpha * L_loc) / N`` straight from the per-tap head outputs.

    ``num_classes`` counts background.  With no matched boxes the loss is an
    exact zero that still back-propagates (zero) gradients.
    """
    conf, loc = flatten_predictions(preds, num_classes)
    return multibox_loss(conf, loc, assignments, gts, defaults, alpha=alpha, neg_pos_ratio=neg_pos_ratio)
