"""Seeded synthetic detection scenes: rectangles, discs and triangles.

A scene is a pure function of ``(SceneSpec, index)``.  Objects are painted in
order, so later objects occlude earlier ones; each annotation carries the
exact fraction of the object's pixels hidden by later objects.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .boxes import Box

CLASSES = ("rect", "disc", "triangle")
SMALL_AREA = 0.05
OCCLUDED_ABOVE = 0.30

_SMALL_RANGE = (0.015, 0.04)
_LARGE_RANGE = (0.07, 0.22)
_FILL = {"rect": 1.0, "disc": np.pi / 4, "triangle": 0.5}
_MAX_ATTEMPTS = 60
_MAX_SCENE_RETRIES = 50


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    image_size: tuple[int, int] = (64, 64)
    classes: tuple[str, ...] = CLASSES
    objects_per_image: tuple[int, int] = (1, 4)
    small_fraction: float = 0.3
    occlusion_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.objects_per_image
        if lo < 1 or hi < lo:
            raise ValueError(f"bad objects_per_image range {self.objects_per_image}")
        if not 0.0 <= self.small_fraction <= 1.0 or not 0.0 <= self.occlusion_fraction <= 1.0:
            raise ValueError("fractions must lie in [0, 1]")
        if self.occlusion_fraction > 0 and hi < 2:
            raise ValueError("occlusion needs at least two objects per image")
        if self.occluder_probability() > 1.0:
            raise ValueError(f"occlusion_fraction {self.occlusion_fraction} unreachable with "
                             f"objects_per_image {self.objects_per_image}")
        unknown = set(self.classes) - set(CLASSES)
        if unknown:
            raise ValueError(f"unknown shape classes {sorted(unknown)}")

    def occluder_probability(self) -> float:
        """Per-object chance of being occluded, so the dataset-level fraction comes out right.

        Only objects with a successor can be occluded; the expected share of
        such objects is E[n-1]/E[n].
        """
        lo, hi = self.objects_per_image
        mean_n = (lo + hi) / 2.0
        if self.occlusion_fraction == 0:
            return 0.0
        return self.occlusion_fraction * mean_n / (mean_n - 1.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["classes"] = list(self.classes)
        d["objects_per_image"] = list(self.objects_per_image)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        for k in ("image_size", "classes", "objects_per_image"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class ObjectAnnotation:
    class_id: int
    box: Box
    occluded_fraction: float

    @property
    def area(self) -> float:
        return self.box.area

    def to_dict(self) -> dict:
        return {"class_id": self.class_id, "box": [self.box.cx, self.box.cy, self.box.w, self.box.h],
                "occluded_fraction": self.occluded_fraction}

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectAnnotation":
        return cls(int(d["class_id"]), Box(*d["box"]), float(d["occluded_fraction"]))


@dataclass
class Annotation:
    image_id: int
    objects: list[ObjectAnnotation] = field(default_factory=list)

    @property
    def labels(self) -> np.ndarray:
        return np.array([o.class_id for o in self.objects], dtype=np.int64)

    @property
    def boxes(self) -> np.ndarray:
        """Centre-form ``(G, 4)`` array."""
        if not self.objects:
            return np.zeros((0, 4))
        return np.array([o.box.as_array() for o in self.objects])

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "objects": [o.to_dict() for o in self.objects]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Annotation":
        return cls(int(d["image_id"]), [ObjectAnnotation.from_dict(o) for o in d["objects"]])


@dataclass
class ShapeInstance:
    """One shape to paint: pixel-space centre and extent, class and colour."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float
    color: tuple[float, float, float]


def shape_mask(shape: ShapeInstance, kind: str, height: int, width: int) -> np.ndarray:
    """Boolean raster of a shape, sampled at pixel centres."""
    yy, xx = np.mgrid[0:height, 0:width]
    px, py = xx + 0.5, yy + 0.5
    dx, dy = px - shape.cx, py - shape.cy
    hw, hh = shape.w / 2.0, shape.h / 2.0
    if kind == "rect":
        return (np.abs(dx) <= hw) & (np.abs(dy) <= hh)
    if kind == "disc":
        return (dx / hw) ** 2 + (dy / hh) ** 2 <= 1.0
    if kind == "triangle":
        # apex at top centre, base along the bottom edge
        t = (dy + hh) / shape.h
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= hw * t)
    raise ValueError(f"unknown shape {kind!r}")


def _background(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Low-frequency noise plus a linear gradient, per channel, in roughly [0.25, 0.75]."""
    yy, xx = np.mgrid[0:height, 0:width] / np.array([[[height]], [[width]]])
    img = np.empty((3, height, width))
    for c in range(3):
        coarse = rng.uniform(-1, 1, size=(4, 4))
        ys = np.linspace(0, 3, height)
        xs = np.linspace(0, 3, width)
        y0 = np.minimum(ys.astype(int), 2)
        x0 = np.minimum(xs.astype(int), 2)
        fy = (ys - y0)[:, None]
        fx = (xs - x0)[None, :]
        c00 = coarse[y0][:, x0]
        c01 = coarse[y0][:, x0 + 1]
        c10 = coarse[y0 + 1][:, x0]
        c11 = coarse[y0 + 1][:, x0 + 1]
        noise = (c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx + c10 * fy * (1 - fx) + c11 * fy * fx)
        gx, gy = rng.uniform(-0.15, 0.15, size=2)
        img[c] = 0.5 + 0.1 * noise + gx * (xx - 0.5) + gy * (yy - 0.5)
    return np.clip(img, 0.0, 1.0)


def render_scene(shapes: Sequence[ShapeInstance], image_size: tuple[int, int], image_id: int = 0,
                 classes: Sequence[str] = CLASSES, background: np.ndarray | None = None
                 ) -> tuple[np.ndarray, Annotation]:
    """Paint shapes in order and annotate them.

    Boxes tightly bound each shape's full raster (hidden parts included);
    ``occluded_fraction`` is the share of that raster covered by later shapes.
    """
    H, W = image_size
    img = np.full((3, H, W), 0.5) if background is None else background.copy()
    masks = [shape_mask(s, classes[s.class_id], H, W) for s in shapes]
    for s, m in zip(shapes, masks):
        img[:, m] = np.asarray(s.color)[:, None]
    objects = []
    covered = np.zeros((H, W), dtype=bool)
    occl = [0.0] * len(shapes)
    for i in range(len(shapes) - 1, -1, -1):
        m = masks[i]
        n = m.sum()
        if n == 0:
            raise GenerationError(f"shape {i} does not cover any pixel")
        occl[i] = float((m & covered).sum() / n)
        covered |= m
    for s, m, f in zip(shapes, masks, occl):
        rows = np.flatnonzero(m.any(axis=1))
        cols = np.flatnonzero(m.any(axis=0))
        box = Box.from_corners(cols[0] / W, rows[0] / H, (cols[-1] + 1) / W, (rows[-1] + 1) / H)
        objects.append(ObjectAnnotation(s.class_id, box, f))
    return img, Annotation(image_id, objects)


def _color(rng: np.random.Generator) -> tuple[float, float, float]:
    # saturated colours stand out against the mid-grey backgrounds
    c = rng.uniform(0.0, 0.25, size=3)
    hi = rng.choice(3, size=rng.integers(1, 3), replace=False)
    c[hi] = rng.uniform(0.8, 1.0, size=len(hi))
    return tuple(float(v) for v in c)


def _draw_extent(rng: np.random.Generator, area_range: tuple[float, float], H: int, W: int
                 ) -> tuple[float, float]:
    area = rng.uniform(*area_range) * H * W
    aspect = rng.uniform(0.6, 1.6)
    return float(np.sqrt(area * aspect)), float(np.sqrt(area / aspect))


@dataclass
class _SceneFlags:
    small: np.ndarray
    occluded: np.ndarray
    classes: np.ndarray


def _draw_flags(spec: SceneSpec, rng: np.random.Generator, n: int) -> _SceneFlags:
    small = rng.random(n) < spec.small_fraction
    occluded = rng.random(n) < spec.occluder_probability()
    occluded[-1] = False
    classes = rng.integers(0, len(spec.classes), size=n)
    # a small occluder cannot hide 30% of a large target, so within each
    # chain of occluder/target pairs the small objects go first
    start = 0
    for i in range(n):
        if not occluded[i]:
            small[start:i + 1] = np.sort(small[start:i + 1])[::-1]
            start = i + 1
    return _SceneFlags(small, occluded, classes)


def _plan_scene(spec: SceneSpec, rng: np.random.Generator, flags: _SceneFlags) -> list[ShapeInstance] | None:
    """Place shapes honouring the drawn flags; None if some shape cannot be placed."""
    H, W = spec.image_size
    small, occluded, classes = flags.small, flags.occluded, flags.classes
    shapes: list[ShapeInstance] = []
    for i in range(len(classes)):
        lo, hi = _SMALL_RANGE if small[i] else _LARGE_RANGE
        if i > 0 and occluded[i - 1]:
            # enough filled pixels to hide a good share of the target
            tgt = shapes[i - 1]
            need = (0.5 * _FILL[spec.classes[tgt.class_id]] * tgt.w * tgt.h
                    / (_FILL[spec.classes[classes[i]]] * H * W))
            lo = min(max(lo, need), lo + 0.8 * (hi - lo))
        area_range = (lo, hi)
        for _ in range(_MAX_ATTEMPTS):
            w, h = _draw_extent(rng, area_range, H, W)
            if classes[i] == 1:
                w = h = float(np.sqrt(w * h))
            if i > 0 and occluded[i - 1]:
                tgt = shapes[i - 1]
                ang = rng.uniform(0, 2 * np.pi)
                reach = 0.5 * (np.sqrt(tgt.w * tgt.h) + np.sqrt(w * h))
                dist = rng.uniform(0.0, 0.8) * reach
                cx, cy = tgt.cx + dist * np.cos(ang), tgt.cy + dist * np.sin(ang)
            else:
                cx = rng.uniform(w / 2 + 1, W - w / 2 - 1)
                cy = rng.uniform(h / 2 + 1, H - h / 2 - 1)
            if cx - w / 2 < 0 or cx + w / 2 > W or cy - h / 2 < 0 or cy + h / 2 > H:
                continue
            cand = ShapeInstance(int(classes[i]), cx, cy, w, h, _color(rng))
            if _acceptable(shapes + [cand], occluded, spec):
                shapes.append(cand)
                break
        else:
            return None
    return shapes


def _acceptable(shapes: list[ShapeInstance], occluded: np.ndarray, spec: SceneSpec) -> bool:
    H, W = spec.image_size
    masks = [shape_mask(s, spec.classes[s.class_id], H, W) for s in shapes]
    last = len(shapes) - 1
    if masks[last].sum() < 9:
        return False
    rows = np.flatnonzero(masks[last].any(axis=1))
    cols = np.flatnonzero(masks[last].any(axis=0))
    area = (rows[-1] - rows[0] + 1) * (cols[-1] - cols[0] + 1) / (H * W)
    intended_small = (shapes[last].w * shapes[last].h) / (H * W) < SMALL_AREA
    if (area < SMALL_AREA) != intended_small:
        return False
    for i in range(last):
        hidden = (masks[i] & masks[last]).sum()
        before = np.zeros((H, W), dtype=bool)
        for j in range(i + 1, last):
            before |= masks[j]
        frac_after = ((before | masks[last]) & masks[i]).sum() / masks[i].sum()
        if occluded[i] and i == last - 1:
            if not OCCLUDED_ABOVE + 0.05 < frac_after < 0.8:
                return False
        elif not occluded[i] and frac_after > OCCLUDED_ABOVE - 0.1:
            return False
        elif occluded[i] and hidden and frac_after >= 0.9:
            return False
    return True


def generate(spec: SceneSpec, index: int) -> tuple[np.ndarray, Annotation]:
    """Deterministic scene number ``index``: ``(image (3, H, W) in [0, 1], annotation)``.

    Object count, size classes and occlusion flags are drawn once; only the
    geometry is re-drawn when a layout cannot be packed, so the dataset
    fractions are not biased towards easy scenes.
    """
    rng = np.random.default_rng([spec.seed, index])
    H, W = spec.image_size
    lo, hi = spec.objects_per_image
    n = int(rng.integers(lo, hi + 1))
    background = _background(rng, H, W)
    flags = _draw_flags(spec, rng, n)
    for _ in range(_MAX_SCENE_RETRIES):
        shapes = _plan_scene(spec, rng, flags)
        if shapes is not None:
            return render_scene(shapes, (H, W), image_id=index, classes=spec.classes, background=background)
    raise GenerationError(f"could not pack scene {index} after {_MAX_SCENE_RETRIES} layouts")


def hflip(image: np.ndarray, annotation: Annotation) -> tuple[np.ndarray, Annotation]:
    flipped = image[:, :, ::-1].copy()
    objs = [ObjectAnnotation(o.class_id, Box(1.0 - o.box.cx, o.box.cy, o.box.w, o.box.h), o.occluded_fraction)
            for o in annotation.objects]
    return flipped, Annotation(annotation.image_id, objs)


def augment(image: np.ndarray, annotation: Annotation, rng: np.random.Generator,
            p_flip: float = 0.5) -> tuple[np.ndarray, Annotation]:
    """Horizontal flip with probability ``p_flip``; otherwise returned unchanged."""
    if rng.random() < p_flip:
        return hflip(image, annotation)
    return image, annotation


class SyntheticDataset:
    """``count`` scenes starting at ``offset``, generated lazily and cached."""

    def __init__(self, spec: SceneSpec, count: int, offset: int = 0):
        self.spec = spec
        self.count = int(count)
        self.offset = int(offset)
        self._cache: dict[int, tuple[np.ndarray, Annotation]] = {}

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i: int) -> tuple[np.ndarray, Annotation]:
        if not 0 <= i < self.count:
            raise IndexError(i)
        if i not in self._cache:
            self._cache[i] = generate(self.spec, self.offset + i)
        return self._cache[i]

    def __iter__(self) -> Iterator[tuple[np.ndarray, Annotation]]:
        for i in range(self.count):
            yield self[i]


class ImageDataset:
    """In-memory list of ``(image, annotation)`` pairs, e.g. loaded from disk."""

    def __init__(self, items: Sequence[tuple[np.ndarray, Annotation]], spec: SceneSpec | None = None):
        self.items = list(items)
        self.spec = spec

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, i: int):
        return self.items[i]

    def __iter__(self):
        return iter(self.items)


CLASS_COLORS = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))


def box_pixels(box: Box, height: int, width: int) -> tuple[int, int, int, int]:
    """Inclusive pixel bounds ``(x1, y1, x2, y2)`` of the pixels a box covers."""
    x1, y1, x2, y2 = box.corners
    px1 = min(max(int(np.floor(x1 * width)), 0), width - 1)
    py1 = min(max(int(np.floor(y1 * height)), 0), height - 1)
    px2 = min(max(int(np.ceil(x2 * width)) - 1, px1), width - 1)
    py2 = min(max(int(np.ceil(y2 * height)) - 1, py1), height - 1)
    return px1, py1, px2, py2


def draw_boxes(image: np.ndarray, boxes: Sequence[tuple[int, Box]]) -> np.ndarray:
    """Copy of ``image`` with a 1-px rectangle per ``(class_id, box)`` in the class colour."""
    out = image.copy()
    _, H, W = image.shape
    for class_id, box in boxes:
        x1, y1, x2, y2 = box_pixels(box, H, W)
        color = np.asarray(CLASS_COLORS[class_id % len(CLASS_COLORS)])[:, None]
        out[:, y1, x1:x2 + 1] = color
        out[:, y2, x1:x2 + 1] = color
        out[:, y1:y2 + 1, x1] = color
        out[:, y1:y2 + 1, x2] = color
    return out


# ---------------------------------------------------------------------------
# disk formats
# ---------------------------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6, 8 bits per channel; ``image`` is (3, H, W) in [0, 1]."""
    _, H, W = image.shape
    px = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary P6 PPM")
    W, H, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported")
    data = raw[pos + 1 : pos + 1 + W * H * 3]
    if len(data) != W * H * 3:
        raise ValueError(f"{path}: truncated pixel data")
    px = np.frombuffer(data, dtype=np.uint8).reshape(H, W, 3)
    return px.transpose(2, 0, 1).astype(np.float64) / 255.0


def export_dataset(out_dir, spec: SceneSpec, count: int, offset: int = 0) -> Path:
    """Write ``images/NNNNNN.ppm``, ``annotations.jsonl`` and ``manifest.json``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(count):
        img, ann = generate(spec, offset + i)
        write_ppm(out / "images" / f"{offset + i:06d}.ppm", img)
        lines.append(ann.to_json())
    (out / "annotations.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    manifest = {"format": "mdfn-synthetic", "count": count, "offset": offset, "spec": spec.to_dict(),
                "classes": list(spec.classes)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def load_dataset(root) -> ImageDataset:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    spec = SceneSpec.from_dict(manifest["spec"])
    items = []
    with open(root / "annotations.jsonl", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                ann = Annotation.from_dict(json.loads(line))
                items.append((read_ppm(root / "images" / f"{ann.image_id:06d}.ppm"), ann))
    return ImageDataset(items, spec)


def dataset_statistics(annotations: Sequence[Annotation]) -> dict:
    objs = [o for a in annotations for o in a.objects]
    n = len(objs)
    return {
        "images": len(annotations),
        "objects": n,
        "small_fraction": sum(o.area < SMALL_AREA for o in objs) / max(n, 1),
        "occlusion_fraction": sum(o.occluded_fraction > OCCLUDED_ABOVE for o in objs) / max(n, 1),
        "per_class": {c: sum(o.class_id == i for o in objs) for i, c in enumerate(CLASSES)},
    }
