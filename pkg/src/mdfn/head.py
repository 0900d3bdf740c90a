"""Multi-box prediction layers: one 3x3 conv with k(c+4) filters per tap."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ConvParams, Tensor, ShapeError, concat, narrow, reshape, transpose


def head_channels(boxes_per_cell: int, num_classes: int) -> int:
    """``k * (c + 4)``; ``num_classes`` includes background."""
    return boxes_per_cell * (num_classes + 4)


def build_heads(tap_channels: Sequence[int], boxes_per_cell: int, num_classes: int,
                rng: np.random.Generator) -> list[ConvParams]:
    out = head_channels(boxes_per_cell, num_classes)
    return [ConvParams.init(c, out, 3, rng, name=f"head{i}") for i, c in enumerate(tap_channels)]


def predict(taps: Sequence[Tensor], heads: Sequence[ConvParams]) -> list[Tensor]:
    """Apply each tap's head; outputs are ``(B, k*(c+4), m, n)``."""
    if len(taps) != len(heads):
        raise ShapeError(f"{len(taps)} taps but {len(heads)} heads")
    return [h(t) for t, h in zip(taps, heads)]


def flatten_predictions(preds: Sequence[Tensor], num_classes: int) -> tuple[Tensor, Tensor]:
    """Regroup head outputs into ``conf (B, D, c)`` and ``loc (B, D, 4)``.

    Box order matches :func:`mdfn.boxes.generate_default_boxes`: tap, row,
    column, then the k boxes of the cell.  Within a cell the channels of box
    ``a`` are ``a*(c+4) .. a*(c+4)+c+3``: class logits first, offsets last.
    """
    per_box = num_classes + 4
    flat = []
    for p in preds:
        B, ch, m, n = p.shape
        if ch % per_box:
            raise ShapeError(f"head output has {ch} channels, not a multiple of c+4={per_box}")
        t = transpose(p, (0, 2, 3, 1))
        flat.append(reshape(t, (B, m * n * (ch // per_box), per_box)))
    allp = concat(flat, axis=1)
    return narrow(allp, 2, 0, num_classes), narrow(allp, 2, num_classes, per_box)
