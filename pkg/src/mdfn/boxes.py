"""Default boxes, Jaccard matching and offset coding.

Boxes live in normalised image coordinates.  Array helpers use centre form
``(cx, cy, w, h)`` in the last axis unless a name says ``corners``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_RATIOS = (1.0, 2.0, 3.0, 1.0 / 2.0, 1.0 / 3.0)
NEGATIVE = -1


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"degenerate box: w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


def to_corners(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 2:] / 2.0
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def to_center(corners: np.ndarray) -> np.ndarray:
    corners = np.asarray(corners, dtype=np.float64)
    return np.concatenate([(corners[..., :2] + corners[..., 2:]) / 2.0, corners[..., 2:] - corners[..., :2]], axis=-1)


def iou(a: Box, b: Box) -> float:
    """Jaccard overlap of two boxes; 0 for disjoint boxes."""
    ax1, ay1, ax2, ay2 = a.corners
    bx1, by1, bx2, by2 = b.corners
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix_corners(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of corner-form arrays, shape (len(a), len(b))."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lo = np.maximum(a[:, None, :2], b[None, :, :2])
    hi = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(hi - lo, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return iou_matrix_corners(to_corners(a), to_corners(b))


# ---------------------------------------------------------------------------
# default boxes
# ---------------------------------------------------------------------------

@dataclass
class DefaultBoxGrid:
    tap_shapes: list[tuple[int, int]]
    scales: list[float]
    ratios: tuple[float, ...]
    per_tap: list[np.ndarray]

    @property
    def boxes_per_cell(self) -> int:
        return len(self.ratios) + 1

    @property
    def boxes(self) -> np.ndarray:
        return np.concatenate(self.per_tap, axis=0)

    def __len__(self) -> int:
        return sum(len(b) for b in self.per_tap)

    def tap_slices(self) -> list[slice]:
        out, start = [], 0
        for b in self.per_tap:
            out.append(slice(start, start + len(b)))
            start += len(b)
        return out


def tap_scales(n_taps: int, s_min: float, s_max: float) -> list[float]:
    """Linearly spaced scales plus one extrapolated step for the last extra box."""
    if n_taps == 1:
        return [s_min, s_max]
    step = (s_max - s_min) / (n_taps - 1)
    return [s_min + step * k for k in range(n_taps + 1)]


def generate_default_boxes(tap_shapes: Sequence[tuple[int, int]], s_min: float = 0.2, s_max: float = 0.9,
                           ratios: Sequence[float] = DEFAULT_RATIOS) -> DefaultBoxGrid:
    """Default boxes for each tap, ordered tap -> row -> column -> box.

    Per cell: one box per aspect ratio at the tap scale ``s_k``, then an extra
    square box at ``sqrt(s_k * s_{k+1})``.  Boxes are clipped to the image.
    """
    ratios = tuple(float(r) for r in ratios)
    if not ratios:
        raise ValueError("at least one aspect ratio is required")
    if any(r <= 0 for r in ratios):
        raise ValueError(f"aspect ratios must be positive: {ratios}")
    tap_shapes = [(int(m), int(n)) for m, n in tap_shapes]
    scales = tap_scales(len(tap_shapes), s_min, s_max)
    per_tap = []
    for k, (m, n) in enumerate(tap_shapes):
        s, s_next = scales[k], scales[k + 1]
        shapes = [(s * np.sqrt(r), s / np.sqrt(r)) for r in ratios]
        extra = np.sqrt(s * s_next)
        shapes.append((extra, extra))
        wh = np.array(shapes)
        cy, cx = np.meshgrid((np.arange(m) + 0.5) / m, (np.arange(n) + 0.5) / n, indexing="ij")
        centres = np.stack([cx.ravel(), cy.ravel()], axis=1)
        boxes = np.concatenate([np.repeat(centres, len(wh), axis=0), np.tile(wh, (m * n, 1))], axis=1)
        corners = np.clip(to_corners(boxes), 0.0, 1.0)
        per_tap.append(to_center(corners))
    return DefaultBoxGrid(tap_shapes, scales[: len(tap_shapes)], ratios, per_tap)


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------

@dataclass
class MatchAssignment:
    """Per default box: matched ground-truth index (or ``NEGATIVE``), IoU, and whether it was forced."""

    matched: np.ndarray
    iou: np.ndarray
    forced: np.ndarray

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.matched >= 0)

    @property
    def n_matched(self) -> int:
        return int((self.matched >= 0).sum())


def match(defaults: np.ndarray, gts: np.ndarray, threshold: float = 0.5) -> MatchAssignment:
    """Assign default boxes (centre form) to ground truths.

    1. Every default whose best IoU exceeds ``threshold`` takes its best GT
       (ties: lowest GT index).
    2. Each GT, in index order, then claims its highest-IoU default among those
       not already claimed by an earlier GT (ties: lowest default index), so no
       GT is left without a match.
    """
    defaults = np.asarray(defaults, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    D = len(defaults)
    matched = np.full(D, NEGATIVE, dtype=np.int64)
    best = np.zeros(D)
    forced = np.zeros(D, dtype=bool)
    if len(gts) == 0:
        return MatchAssignment(matched, best, forced)
    if len(gts) > D:
        raise ValueError(f"{len(gts)} ground truths cannot each claim one of {D} default boxes")
    ious = iou_matrix(defaults, gts)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(D), best_gt]
    hit = best_iou > threshold
    matched[hit] = best_gt[hit]
    best[hit] = best_iou[hit]
    for g in range(len(gts)):
        col = np.where(forced, -np.inf, ious[:, g])
        d = int(col.argmax())
        matched[d] = g
        best[d] = ious[d, g]
        forced[d] = True
    return MatchAssignment(matched, best, forced)


# ---------------------------------------------------------------------------
# offset coding
# ---------------------------------------------------------------------------

def encode_offsets(defaults: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Centre-size log encoding: ``(dcx/w_d, dcy/h_d, ln(w_g/w_d), ln(h_g/h_d))``."""
    defaults = np.asarray(defaults, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if np.any(gts[..., 2:] <= 0):
        raise ValueError("ground-truth boxes must have positive width and height")
    if np.any(defaults[..., 2:] <= 0):
        raise ValueError("default boxes must have positive width and height")
    return np.concatenate([(gts[..., :2] - defaults[..., :2]) / defaults[..., 2:],
                           np.log(gts[..., 2:] / defaults[..., 2:])], axis=-1)


def decode_offsets(defaults: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_offsets`; no clipping here."""
    defaults = np.asarray(defaults, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    return np.concatenate([defaults[..., :2] + offsets[..., :2] * defaults[..., 2:],
                           defaults[..., 2:] * np.exp(offsets[..., 2:])], axis=-1)
