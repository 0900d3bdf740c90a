"""Command-line entry point: ``mdfn {dataset,train,eval,infer,report}``.

Every verb reads an optional JSON run config (``--config``); explicit flags
override the file. Failures print one line ``error: <Kind>: <message>`` to
stderr and exit with status 1 (2 for usage errors).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .data import box_pixels, draw_boxes, export_dataset, load_dataset, read_ppm, write_ppm
from .evaluation import (STRATA, BackgroundDetector, InjectedDetector, ModelDetector, OracleDetector,
                         evaluate, load_detections)
from .network import normalize_variant
from .report import format_report, parameter_report
from .train import RunConfig, held_out_set, load_model, train

VARIANT_CHOICES = ("mdfn-i1", "mdfn-i2", "baseline")


class CliError(Exception):
    """A user-facing failure with a short machine-readable kind."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"error: usage: {message}\n")


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _config(args) -> RunConfig:
    d = {}
    if args.config:
        try:
            d = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise CliError("config", f"config file {args.config} not found") from None
        except json.JSONDecodeError as e:
            raise CliError("config", f"{args.config} is not valid JSON: {e}") from None
        if not isinstance(d, dict):
            raise CliError("config", f"{args.config} must hold a JSON object")
    if args.seed is not None:
        d["seed"] = args.seed
    if getattr(args, "variant", None):
        d["variant"] = args.variant
    if getattr(args, "out", None):
        d["out_dir"] = args.out
    try:
        return RunConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise CliError("config", str(e)) from None


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise CliError("output-exists", f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------

def cmd_dataset(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.out_dir)
    _prepare_out(out, args.force)
    count = cfg.train_count if args.count is None else args.count
    offset = cfg.train_offset if args.offset is None else args.offset
    export_dataset(out, cfg.scene_spec(), count, offset)
    print(f"wrote {count} images to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.iterations is not None:
        cfg.iterations = args.iterations
    out = Path(cfg.out_dir)
    if not args.resume:
        _prepare_out(out, args.force)
    dataset = None
    if args.dataset:
        dataset = load_dataset(args.dataset)
        cfg.dataset_path = str(args.dataset)
    every = max(1, cfg.iterations // 10)

    def progress(rec):
        if rec["iteration"] % every == 0 or rec["iteration"] == cfg.iterations - 1:
            print(f"iter {rec['iteration']:>6}  lr {rec['lr']:.2e}  loss {rec['total']:.4f}  "
                  f"matched {rec['n_matched']}", flush=True)

    tr = train(cfg, out, resume_from=args.resume, dataset=dataset, progress=progress)
    print(f"final checkpoint {out / 'final.ckpt'} at iteration {tr.iteration}")
    summary = out / "eval_summary.json"
    if summary.exists():
        s = json.loads(summary.read_text(encoding="utf-8"))
        print("train mAP  " + _map_line(s["train"]["mAP"]))
        if "held_out" in s:
            print("held-out   " + _map_line(s["held_out"]["mAP"]))
    return 0


def _map_line(m: dict) -> str:
    return "  ".join(f"@{k} {v:.3f}" for k, v in sorted(m.items()))


def _load_checked(path, variant):
    if path is None:
        raise CliError("usage", "--checkpoint is required unless a detections source is given")
    try:
        return load_model(path, variant)
    except FileNotFoundError:
        raise CliError("checkpoint", f"checkpoint {path} not found") from None
    except ValueError as e:
        kind = "variant-mismatch" if "variant" in str(e) else "checkpoint"
        raise CliError(kind, str(e)) from None


def cmd_eval(args) -> int:
    cfg = _config(args)
    if args.count is not None:
        cfg.eval_count = args.count
    dataset = load_dataset(args.dataset) if args.dataset else held_out_set(cfg)
    if args.oracle:
        detector = OracleDetector([a for _, a in dataset], jitter=args.jitter, seed=cfg.seed)
    elif args.detections:
        detector = InjectedDetector(load_detections(args.detections))
    elif args.background:
        detector = BackgroundDetector()
    else:
        detector = ModelDetector(_load_checked(args.checkpoint, args.variant))
    strata = ["all"] + [s for s in (args.strata or []) if s != "all"]
    results = evaluate(detector, dataset, cfg.iou_thresholds, list(dataset.spec.classes), strata)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "ap_result.json", results["all"].to_dict())
    _dump(out / "strata.json", {s: {"counts": r.counts, "objects": sum(r.counts.values()), "result": r.to_dict()}
                                for s, r in results.items()})
    for s, r in results.items():
        print(f"{s:<9} n={sum(r.counts.values()):<6} " + _map_line(r.mAP))
    return 0


def cmd_infer(args) -> int:
    if not args.image:
        raise CliError("usage", "--image is required")
    try:
        image = read_ppm(args.image)
    except FileNotFoundError:
        raise CliError("image", f"image {args.image} not found") from None
    except ValueError as e:
        raise CliError("image", str(e)) from None
    if args.detections:
        dets = load_detections(args.detections)
    elif args.background:
        dets = BackgroundDetector().detect(image[None], [0])[0]
    else:
        model = _load_checked(args.checkpoint, args.variant)
        if image.shape[1:] != (model.spec.image_size, model.spec.image_size):
            raise CliError("image", f"image is {image.shape[2]}x{image.shape[1]}, network expects "
                                    f"{model.spec.image_size}x{model.spec.image_size}")
        dets = ModelDetector(model).detect(image[None], [0])[0]
    dets = [d for d in dets if d.score >= args.min_score]
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    _, H, W = image.shape
    records = []
    for d in dets:
        rec = d.to_dict()
        rec["pixels"] = list(box_pixels(d.box, H, W))
        records.append(rec)
    _dump(out / "detections.json", {"image": str(args.image), "detections": records})
    write_ppm(out / "render.ppm", draw_boxes(image, [(d.class_id, d.box) for d in dets]))
    print(f"{len(dets)} detections -> {out / 'detections.json'}, {out / 'render.ppm'}")
    return 0


def cmd_report(args) -> int:
    rep = parameter_report(args.variant or "mdfn-i2")
    print(format_report(rep))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _dump(out / "report.json", rep)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--checkpoint", help="model checkpoint")
    common.add_argument("--variant", type=normalize_variant, metavar="{" + ",".join(VARIANT_CHOICES) + "}")
    common.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")

    p = _Parser(prog="mdfn", description="Multi-scale detector toolkit on synthetic shapes.")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    d = sub.add_parser("dataset", parents=[common], help="render a synthetic dataset to disk")
    d.add_argument("--count", type=int, help="number of images (default: config train_count)")
    d.add_argument("--offset", type=int, help="first scene index")
    d.set_defaults(func=cmd_dataset)

    t = sub.add_parser("train", parents=[common], help="train a network")
    t.add_argument("--dataset", help="dataset directory written by 'mdfn dataset'")
    t.add_argument("--iterations", type=int)
    t.add_argument("--resume", help="continue from a training checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="AP over IoU thresholds")
    e.add_argument("--dataset", help="dataset directory (default: synthetic held-out set)")
    e.add_argument("--count", type=int, help="held-out images (default: config eval_count)")
    e.add_argument("--strata", nargs="*", choices=STRATA, help="extra strata to report")
    src = e.add_mutually_exclusive_group()
    src.add_argument("--oracle", action="store_true", help="score the ground truth itself")
    src.add_argument("--detections", help="score detections from a JSON file")
    src.add_argument("--background", action="store_true", help="detector that never fires")
    e.add_argument("--jitter", type=float, default=0.0, help="oracle box jitter")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", parents=[common], help="detect on one PPM image and render boxes")
    i.add_argument("--image", help="binary P6 PPM")
    i.add_argument("--min-score", type=float, default=0.0)
    isrc = i.add_mutually_exclusive_group()
    isrc.add_argument("--detections", help="render detections from a JSON file")
    isrc.add_argument("--background", action="store_true", help="detector that never fires")
    i.set_defaults(func=cmd_infer)

    r = sub.add_parser("report", parents=[common], help="parameter and mult-add tables")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        msg = f"error: {e.kind}: {e}"
    except Exception as e:  # report, don't dump a traceback
        msg = f"error: {type(e).__name__}: {e}"
    print(" ".join(msg.split()), file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
