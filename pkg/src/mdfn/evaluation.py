"""Post-processing (score floor, per-class NMS) and average precision across IoU thresholds."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np

from .boxes import Box, decode_offsets, iou_matrix, iou_matrix_corners, to_center, to_corners
from .data import OCCLUDED_ABOVE, SMALL_AREA, Annotation
from .tensor import log_softmax

DEFAULT_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(7))
NMS_IOU = 0.45
SCORE_FLOOR = 0.01
TOP_K = 200
STRATA = ("all", "small", "occluded", "regular")


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float
    image_id: int = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.class_id < 0:
            raise ValueError("class_id counts object classes from 0; background is not a detection")

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "class_id": self.class_id, "score": self.score,
                "box": [self.box.cx, self.box.cy, self.box.w, self.box.h]}

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        return cls(Box(*d["box"]), int(d["class_id"]), float(d["score"]), int(d.get("image_id", 0)))


# ---------------------------------------------------------------------------
# NMS
# ---------------------------------------------------------------------------

def nms_indices(corners: np.ndarray, scores: np.ndarray, iou_threshold: float = NMS_IOU) -> np.ndarray:
    """Greedy suppression on corner-form boxes; returns kept indices, best first.

    Equal scores keep input order.
    """
    order = np.argsort(-np.asarray(scores), kind="stable")
    corners = np.asarray(corners, dtype=np.float64)
    keep = []
    alive = np.ones(len(order), dtype=bool)
    ious = iou_matrix_corners(corners[order], corners[order])
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(order[i])
        alive[i + 1:] &= ious[i, i + 1:] <= iou_threshold
    return np.asarray(keep, dtype=np.int64)


def nms(dets: Sequence[Detection], iou_threshold: float = NMS_IOU) -> list[Detection]:
    """Per-class greedy NMS over a list of detections (one image)."""
    dets = list(dets)
    kept: list[Detection] = []
    for c in sorted({d.class_id for d in dets}):
        group = [d for d in dets if d.class_id == c]
        corners = np.array([d.box.corners for d in group])
        scores = np.array([d.score for d in group])
        kept.extend(group[i] for i in nms_indices(corners, scores, iou_threshold))
    kept.sort(key=lambda d: -d.score)
    return kept


# ---------------------------------------------------------------------------
# average precision
# ---------------------------------------------------------------------------

def precision_envelope_area(tp: np.ndarray, n_gt: int, eleven_point: bool = False) -> float:
    """Area under the interpolated precision/recall curve of a ranked TP/FP sequence."""
    tp = np.asarray(tp, dtype=np.float64)
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    if eleven_point:
        return float(np.mean([precision[recall >= r].max(initial=0.0) for r in np.linspace(0, 1, 11)]))
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def match_detections(det_boxes: np.ndarray, gt_boxes: np.ndarray, iou_thr: float,
                     gt_ignore: np.ndarray | None = None) -> np.ndarray:
    """Greedy assignment for score-ranked detections of one image and class.

    Each detection takes the highest-IoU still-unmatched GT with IoU >= thr
    (ties: lowest GT index).  Returns per detection 1 (TP), 0 (FP) or -1
    (matched an ignored GT and so counts as neither).  Ignored GTs are only
    considered when no regular GT qualifies.
    """
    n_det = len(det_boxes)
    out = np.zeros(n_det, dtype=np.int64)
    if n_det == 0 or len(gt_boxes) == 0:
        return out
    ignore = np.zeros(len(gt_boxes), dtype=bool) if gt_ignore is None else np.asarray(gt_ignore, dtype=bool)
    ious = iou_matrix(np.asarray(det_boxes), np.asarray(gt_boxes))
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for d in range(n_det):
        for pool, verdict in ((~ignore, 1), (ignore, -1)):
            cand = np.where(pool & ~taken & (ious[d] >= iou_thr), ious[d], -1.0)
            g = int(np.argmax(cand))
            if cand[g] >= 0.0:
                taken[g] = True
                out[d] = verdict
                break
    return out


def _class_ap(dets_by_image: dict, gts_by_image: dict, iou_thr: float, eleven_point: bool) -> float:
    """AP of one class given ``image -> (boxes, scores)`` and ``image -> (boxes, ignore)``."""
    n_gt = sum(int((~ig).sum()) for _, ig in gts_by_image.values())
    n_det = sum(len(s) for _, s in dets_by_image.values())
    if n_gt == 0:
        return 1.0 if n_det == 0 else 0.0
    records = []  # (score, image order, rank in image, verdict)
    for order, (img, (boxes, scores)) in enumerate(sorted(dets_by_image.items())):
        rank = np.argsort(-scores, kind="stable")
        gt_boxes, ignore = gts_by_image.get(img, (np.zeros((0, 4)), np.zeros(0, dtype=bool)))
        verdicts = match_detections(boxes[rank], gt_boxes, iou_thr, ignore)
        records.extend((-scores[r], order, i, v) for i, (r, v) in enumerate(zip(rank, verdicts)))
    records.sort(key=lambda t: t[:3])
    tp = np.array([v for *_, v in records if v >= 0], dtype=np.float64)
    return precision_envelope_area(tp, n_gt, eleven_point)


def average_precision(dets: Sequence[Detection], gts: Sequence[tuple[int, Box]] | Sequence[Annotation],
                      iou_thr: float, eleven_point: bool = False) -> float:
    """AP of one class.

    ``dets`` and ``gts`` must already be restricted to that class.  ``gts`` is
    either ``(image_id, Box)`` pairs or annotations.  Empty GT and empty
    detections gives 1.0; detections without any GT give 0.0.
    """
    gt_map: dict[int, list] = {}
    for g in gts:
        if isinstance(g, Annotation):
            gt_map.setdefault(g.image_id, []).extend(o.box.as_array() for o in g.objects)
        else:
            img, box = g
            gt_map.setdefault(int(img), []).append(box.as_array())
    gts_by_image = {k: (np.array(v).reshape(-1, 4), np.zeros(len(v), dtype=bool)) for k, v in gt_map.items()}
    det_map: dict[int, list] = {}
    for d in dets:
        det_map.setdefault(d.image_id, []).append(d)
    dets_by_image = {k: (np.array([d.box.as_array() for d in v]), np.array([d.score for d in v]))
                     for k, v in det_map.items()}
    return _class_ap(dets_by_image, gts_by_image, iou_thr, eleven_point)


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------

def _thr_key(t: float) -> str:
    return f"{t:.2f}"


@dataclass
class ApResult:
    """``per_class[name][thr]`` and ``mAP[thr]``, thresholds keyed as ``"0.50"``."""

    per_class: dict[str, dict[str, float]]
    mAP: dict[str, float]
    stratum: str = "all"
    counts: dict[str, int] = field(default_factory=dict)

    def at(self, thr: float) -> float:
        return self.mAP[_thr_key(thr)]

    def to_dict(self) -> dict:
        d = {name: dict(v) for name, v in self.per_class.items()}
        d["mAP"] = dict(self.mAP)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ApResult":
        d = dict(d)
        m = d.pop("mAP")
        return cls({k: dict(v) for k, v in d.items()}, dict(m))


def stratum_of(obj) -> str:
    """Occluded wins over small; everything else is regular."""
    if obj.occluded_fraction > OCCLUDED_ABOVE:
        return "occluded"
    if obj.area < SMALL_AREA:
        return "small"
    return "regular"


def compute_ap(detections: Sequence[Sequence[Detection]], annotations: Sequence[Annotation],
               class_names: Sequence[str], iou_thresholds: Iterable[float] = DEFAULT_IOU_THRESHOLDS,
               stratum: str = "all", eleven_point: bool = False) -> ApResult:
    """AP per class and threshold from per-image detection lists.

    With ``stratum`` other than ``"all"``, GTs outside the stratum are ignored:
    detections landing on them count neither way.
    """
    if stratum not in STRATA:
        raise ValueError(f"unknown stratum {stratum!r}; choose from {STRATA}")
    if len(detections) != len(annotations):
        raise ValueError("need one detection list per annotation")
    thresholds = [float(t) for t in iou_thresholds]
    per_class: dict[str, dict[str, float]] = {name: {} for name in class_names}
    counts = {name: 0 for name in class_names}
    for c, name in enumerate(class_names):
        gts_by_image, dets_by_image = {}, {}
        for dets, ann in zip(detections, annotations):
            objs = [o for o in ann.objects if o.class_id == c]
            boxes = np.array([o.box.as_array() for o in objs]).reshape(-1, 4)
            ignore = np.array([stratum != "all" and stratum_of(o) != stratum for o in objs], dtype=bool)
            gts_by_image[ann.image_id] = (boxes, ignore)
            counts[name] += int((~ignore).sum())
            mine = [d for d in dets if d.class_id == c]
            if mine:
                dets_by_image[ann.image_id] = (np.array([d.box.as_array() for d in mine]),
                                               np.array([d.score for d in mine]))
        for t in thresholds:
            per_class[name][_thr_key(t)] = _class_ap(dets_by_image, gts_by_image, t, eleven_point)
    m_ap = {_thr_key(t): float(np.mean([per_class[n][_thr_key(t)] for n in class_names])) for t in thresholds}
    return ApResult(per_class, m_ap, stratum, counts)


# ---------------------------------------------------------------------------
# detectors
# ---------------------------------------------------------------------------

class Detector(Protocol):
    def detect(self, images: np.ndarray, image_ids: Sequence[int]) -> list[list[Detection]]: ...


def postprocess(conf_logits: np.ndarray, loc: np.ndarray, defaults: np.ndarray, image_id: int = 0,
                score_floor: float = SCORE_FLOOR, nms_iou: float = NMS_IOU, top_k: int = TOP_K
                ) -> list[Detection]:
    """Softmax, decode, clip to the image, per-class NMS, keep the ``top_k`` best.

    ``conf_logits`` is ``(D, C)`` with background at column 0.
    """
    probs = np.exp(log_softmax(conf_logits))
    corners = np.clip(to_corners(decode_offsets(defaults, loc)), 0.0, 1.0)
    valid = (corners[:, 2] - corners[:, 0] > 1e-6) & (corners[:, 3] - corners[:, 1] > 1e-6)
    out: list[tuple[float, int, int]] = []
    for c in range(1, probs.shape[1]):
        idx = np.flatnonzero((probs[:, c] > score_floor) & valid)
        if len(idx) == 0:
            continue
        # bound the O(n^2) NMS; lower-ranked boxes would fall outside top_k anyway
        idx = idx[np.argsort(-probs[idx, c], kind="stable")[: 4 * top_k]]
        keep = nms_indices(corners[idx], probs[idx, c], nms_iou)
        out.extend((float(probs[idx[k], c]), c, int(idx[k])) for k in keep)
    out.sort(key=lambda t: (-t[0], t[1], t[2]))
    centres = to_center(corners)
    return [Detection(Box(*centres[i]), c - 1, s, image_id) for s, c, i in out[:top_k]]


class ModelDetector:
    """Runs a network forward pass and post-processes each image."""

    def __init__(self, model, batch_size: int = 16, score_floor: float = SCORE_FLOOR,
                 nms_iou: float = NMS_IOU, top_k: int = TOP_K):
        self.model = model
        self.batch_size = batch_size
        self.score_floor = score_floor
        self.nms_iou = nms_iou
        self.top_k = top_k

    def raw(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        from .head import flatten_predictions

        _, preds = self.model(images)
        conf, loc = flatten_predictions(preds, self.model.num_classes)
        return conf.data, loc.data

    def detect(self, images: np.ndarray, image_ids: Sequence[int]) -> list[list[Detection]]:
        results = []
        for s in range(0, len(images), self.batch_size):
            conf, loc = self.raw(images[s:s + self.batch_size])
            for b in range(conf.shape[0]):
                results.append(postprocess(conf[b], loc[b], self.model.defaults.boxes, int(image_ids[s + b]),
                                           self.score_floor, self.nms_iou, self.top_k))
        return results


class OracleDetector:
    """Emits the ground truth, optionally with seeded centre/size jitter.

    Jitter is relative to box size; scores fall with the jitter drawn so the
    least-disturbed boxes rank first.
    """

    def __init__(self, annotations: Sequence[Annotation], jitter: float = 0.0, seed: int = 0):
        self.annotations = {a.image_id: a for a in annotations}
        self.jitter = float(jitter)
        self.seed = seed

    def detect(self, images, image_ids: Sequence[int]) -> list[list[Detection]]:
        out = []
        for img_id in image_ids:
            ann = self.annotations[int(img_id)]
            rng = np.random.default_rng([self.seed, int(img_id)])
            dets = []
            for o in ann.objects:
                b = o.box
                if self.jitter > 0:
                    e = rng.normal(0.0, self.jitter, size=4)
                    x1, y1, x2, y2 = Box(b.cx + e[0] * b.w, b.cy + e[1] * b.h,
                                         b.w * np.exp(e[2]), b.h * np.exp(e[3])).corners
                    x1, y1, x2, y2 = max(x1, 0.0), max(y1, 0.0), min(x2, 1.0), min(y2, 1.0)
                    if x2 - x1 <= 1e-6 or y2 - y1 <= 1e-6:
                        continue
                    b = Box.from_corners(x1, y1, x2, y2)
                    score = float(np.exp(-np.abs(e).sum()))
                else:
                    score = 1.0
                dets.append(Detection(b, o.class_id, score, int(img_id)))
            out.append(dets)
        return out


class BackgroundDetector:
    """Always predicts background: never emits a detection."""

    def detect(self, images, image_ids: Sequence[int]) -> list[list[Detection]]:
        return [[] for _ in image_ids]


def run_detector(detector, dataset, batch_size: int = 16) -> tuple[list[list[Detection]], list[Annotation]]:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    all_dets, anns = [], []
    for s in range(0, len(dataset), batch_size):
        items = [dataset[i] for i in range(s, min(s + batch_size, len(dataset)))]
        images = np.stack([img for img, _ in items])
        ids = [a.image_id for _, a in items]
        all_dets.extend(detector.detect(images, ids))
        anns.extend(a for _, a in items)
    return all_dets, anns


def evaluate(detector, dataset, iou_thresholds: Iterable[float] = DEFAULT_IOU_THRESHOLDS,
             class_names: Sequence[str] | None = None, strata: Sequence[str] = ("all",),
             eleven_point: bool = False) -> dict[str, ApResult]:
    """Full pipeline: detect every image, then AP per class per threshold, per stratum.

    ``detector`` is anything with ``detect(images, image_ids)``; a bare model
    is wrapped in :class:`ModelDetector`.
    """
    if not hasattr(detector, "detect"):
        detector = ModelDetector(detector)
    if class_names is None:
        spec = getattr(dataset, "spec", None)
        class_names = list(spec.classes) if spec is not None else ["rect", "disc", "triangle"]
    dets, anns = run_detector(detector, dataset)
    thresholds = list(iou_thresholds)
    return {s: compute_ap(dets, anns, class_names, thresholds, stratum=s, eleven_point=eleven_point)
            for s in strata}


class InjectedDetector:
    """Replays precomputed detections, grouped by ``image_id``."""

    def __init__(self, detections: Iterable[Detection]):
        self.by_image: dict[int, list[Detection]] = {}
        for d in detections:
            self.by_image.setdefault(d.image_id, []).append(d)

    def detect(self, images, image_ids: Sequence[int]) -> list[list[Detection]]:
        return [list(self.by_image.get(int(i), [])) for i in image_ids]


def load_detections(path) -> list[Detection]:
    """Detections from a JSON file: a list, or an object with a ``detections`` list."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if isinstance(raw, dict):
        raw = raw["detections"]
    return [Detection.from_dict(d) for d in raw]
