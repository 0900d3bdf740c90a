"""Training loop: step schedule, checkpoints with resumable RNG state, JSON-lines log."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .boxes import match
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Annotation, SceneSpec, SyntheticDataset, hflip, load_dataset
from .loss import detection_loss
from .network import MDFN, NetworkSpec, build
from .optim import SGD, grad_norm
from .tensor import backward


class TrainingDiverged(FloatingPointError):
    """Non-finite loss; carries the iteration, learning rate and gradient norm."""

    def __init__(self, iteration: int, lr: float, gnorm: float, loss: float):
        super().__init__(f"non-finite loss {loss} at iteration {iteration} (lr={lr:g}, grad-norm={gnorm:g})")
        self.iteration = iteration
        self.lr = lr
        self.grad_norm = gnorm


@dataclass
class RunConfig:
    """Everything a run depends on; a run is reproducible from this plus ``seed``."""

    variant: str = "mdfn-i2"
    seed: int = 42
    image_size: int = 64
    train_count: int = 64
    train_offset: int = 0
    dataset_path: str | None = None
    scene: dict = field(default_factory=dict)
    iterations: int = 2000
    batch_size: int = 8
    lr: float = 0.01
    warmup_iterations: int = 100
    milestones: tuple[int, ...] = (1400, 1800)
    gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    alpha: float = 1.0
    neg_pos_ratio: float = 3.0
    match_threshold: float = 0.5
    flip: bool = False
    checkpoint_every: int = 500
    out_dir: str = "runs/default"
    network: dict = field(default_factory=dict)
    eval_count: int = 256
    eval_offset: int = 1_000_000
    iou_thresholds: tuple[float, ...] = (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8)
    final_eval: bool = True

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        self.iou_thresholds = tuple(float(t) for t in self.iou_thresholds)
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        d["iou_thresholds"] = list(self.iou_thresholds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def scene_spec(self) -> SceneSpec:
        d = {"image_size": (self.image_size, self.image_size), "seed": self.seed}
        d.update(self.scene)
        return SceneSpec.from_dict(d)

    def network_spec(self) -> NetworkSpec:
        d = {"variant": self.variant, "image_size": self.image_size, "seed": self.seed}
        d.update(self.network)
        return NetworkSpec.from_dict(d)


def learning_rate(cfg: RunConfig, iteration: int) -> float:
    """Linear warm-up, then constant with a ``gamma`` decay at each milestone.

    ``iteration`` counts from 0.
    """
    lr = cfg.lr * cfg.gamma ** sum(iteration >= m for m in cfg.milestones)
    if cfg.warmup_iterations and iteration < cfg.warmup_iterations:
        lr *= (iteration + 1) / cfg.warmup_iterations
    return lr


def held_out_set(cfg: RunConfig) -> SyntheticDataset:
    """Evaluation scenes drawn from the same generator at disjoint indices."""
    return SyntheticDataset(cfg.scene_spec(), cfg.eval_count, cfg.eval_offset)


def training_set(cfg: RunConfig):
    if cfg.dataset_path:
        return load_dataset(cfg.dataset_path)
    return SyntheticDataset(cfg.scene_spec(), cfg.train_count, cfg.train_offset)


def _targets(ann: Annotation) -> tuple[np.ndarray, np.ndarray]:
    return ann.labels, ann.boxes


class Trainer:
    """Owns model, optimizer, data and the single RNG driving batch order and augmentation."""

    def __init__(self, cfg: RunConfig, dataset=None, log: Callable[[dict], None] | None = None):
        self.cfg = cfg
        self.dataset = training_set(cfg) if dataset is None else dataset
        if len(self.dataset) == 0:
            raise ValueError("training set is empty")
        self.model: MDFN = build(cfg.network_spec())
        self.opt = SGD(self.model.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.iteration = 0
        self.log = log
        self._items: list = [None] * len(self.dataset)
        self._defaults = self.model.defaults.boxes

    def _item(self, i: int, flipped: bool):
        if self._items[i] is None:
            img, ann = self.dataset[i]
            variants = {}
            for f in (False, True) if self.cfg.flip else (False,):
                im, an = hflip(img, ann) if f else (img, ann)
                variants[f] = (im, _targets(an), match(self._defaults, an.boxes, self.cfg.match_threshold))
            self._items[i] = variants
        return self._items[i][flipped]

    def sample_batch(self):
        idx = self.rng.integers(0, len(self.dataset), size=self.cfg.batch_size)
        flips = self.rng.random(self.cfg.batch_size) < 0.5 if self.cfg.flip else np.zeros(len(idx), bool)
        items = [self._item(int(i), bool(f)) for i, f in zip(idx, flips)]
        images = np.stack([it[0] for it in items])
        return images, [it[1] for it in items], [it[2] for it in items]

    def step(self) -> dict:
        cfg = self.cfg
        lr = learning_rate(cfg, self.iteration)
        self.opt.learning_rate = lr
        images, gts, assigns = self.sample_batch()
        self.opt.zero_grad()
        _, preds = self.model(images)
        loss, report = detection_loss(preds, assigns, gts, self._defaults, self.model.num_classes,
                                      cfg.alpha, cfg.neg_pos_ratio)
        backward(loss)
        gnorm = grad_norm(self.opt.params)
        if not math.isfinite(report.total) or not math.isfinite(gnorm):
            raise TrainingDiverged(self.iteration, lr, gnorm, report.total)
        self.opt.step()
        record = {"iteration": self.iteration, "lr": lr, "grad_norm": gnorm, **report.to_dict()}
        self.iteration += 1
        if self.log is not None:
            self.log(record)
        return record

    def run(self, until: int | None = None, checkpoint_dir=None) -> list[dict]:
        until = self.cfg.iterations if until is None else until
        records = []
        while self.iteration < until:
            records.append(self.step())
            if (checkpoint_dir is not None and self.cfg.checkpoint_every
                    and self.iteration % self.cfg.checkpoint_every == 0):
                self.save(Path(checkpoint_dir) / f"checkpoint_{self.iteration:06d}.ckpt")
        return records

    # -- checkpoints -------------------------------------------------------

    def save(self, path) -> Path:
        arrays = {f"param/{k}": v for k, v in self.model.state_dict().items()}
        names = list(self.model.named_parameters())
        arrays.update({f"velocity/{k}": v for k, v in zip(names, self.opt.velocity)})
        meta = {"kind": "training", "iteration": self.iteration, "config": self.cfg.to_dict(),
                "network": self.model.spec.to_dict(), "rng_state": self.rng.bit_generator.state}
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path, arrays, meta)
        return path

    @classmethod
    def resume(cls, path, dataset=None, log=None, cfg: RunConfig | None = None) -> "Trainer":
        arrays, meta = load_checkpoint(path)
        cfg = RunConfig.from_dict(meta["config"]) if cfg is None else cfg
        tr = cls(cfg, dataset=dataset, log=log)
        tr.load_arrays(arrays)
        names = list(tr.model.named_parameters())
        tr.opt.load_velocity([arrays[f"velocity/{k}"] for k in names])
        tr.rng.bit_generator.state = meta["rng_state"]
        tr.iteration = int(meta["iteration"])
        return tr

    def load_arrays(self, arrays: dict) -> None:
        self.model.load_state_dict({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})


def load_model(path, variant: str | None = None) -> MDFN:
    """Rebuild a network from a checkpoint; ``variant`` (if given) must match."""
    arrays, meta = load_checkpoint(path)
    spec = NetworkSpec.from_dict(meta["network"])
    if variant is not None:
        from .network import normalize_variant

        if normalize_variant(variant) != spec.variant:
            raise ValueError(f"checkpoint holds variant {spec.variant}, not {normalize_variant(variant)}")
    model = build(spec)
    model.load_state_dict({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    return model


def train(cfg: RunConfig, out_dir=None, resume_from=None, dataset=None,
          progress: Callable[[dict], None] | None = None) -> Trainer:
    """Run to ``cfg.iterations``; writes ``train_log.jsonl``, periodic and final checkpoints."""
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    mode = "a" if resume_from else "w"
    with open(log_path, mode, encoding="utf-8") as fh:
        def log(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if progress is not None:
                progress(rec)

        if resume_from:
            tr = Trainer.resume(resume_from, dataset=dataset, log=log)
        else:
            tr = Trainer(cfg, dataset=dataset, log=log)
        (out / "config.json").write_text(json.dumps(tr.cfg.to_dict(), indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
        tr.run(checkpoint_dir=out)
    tr.save(out / "final.ckpt")
    if tr.cfg.final_eval:
        summary = final_summary(tr)
        (out / "eval_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                               encoding="utf-8")
    return tr


def final_summary(tr: Trainer) -> dict:
    """mAP per IoU threshold on the training set and on the held-out set."""
    from .evaluation import evaluate

    cfg = tr.cfg
    names = list(tr.dataset.spec.classes) if getattr(tr.dataset, "spec", None) else None
    train_res = evaluate(tr.model, tr.dataset, cfg.iou_thresholds, names)["all"]
    out = {"iteration": tr.iteration, "variant": tr.model.spec.variant, "train": train_res.to_dict()}
    if cfg.eval_count > 0:
        held = held_out_set(cfg)
        out["held_out"] = evaluate(tr.model, held, cfg.iou_thresholds, list(held.spec.classes))["all"].to_dict()
    return out
