"""Command-line entry point: ``simco generate|train|count|sweep|eval``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import cluster as cl
from . import viz
from .count import PipelineConfig, describe, detect, eval_dataset, run_pipeline
from .embed import (EmbeddingNet, TrainConfig, load_model, loss_curve_csv, oracle_features, save_model,
                    train_on_features)
from .imageio import read_image, write_png
from .shapegen import GeneratorConfig, generate_dataset, read_manifest

logger = logging.getLogger("simco")


class CLIError(Exception):
    pass


@dataclass
class RunConfig:
    dataset: Optional[str] = None
    model: Optional[str] = None
    out: Optional[str] = None
    seed: int = 0
    figures: bool = True
    generator: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    pipeline: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"dataset": self.dataset, "model": self.model, "out": self.out, "seed": self.seed,
                "figures": self.figures, "generator": self.generator, "train": self.train,
                "pipeline": self.pipeline}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise CLIError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise CLIError(f"config file not found: {p}")
        try:
            d = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise CLIError(f"{p}: invalid JSON: {exc}") from exc
        return cls.from_dict(d)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


def _run_config(args) -> RunConfig:
    rc = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    for key in ("dataset", "model", "out", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            setattr(rc, key, val)
    if getattr(args, "no_figures", False):
        rc.figures = False
    return rc


def _pipeline_config(rc: RunConfig, args) -> PipelineConfig:
    d = dict(rc.pipeline)
    if getattr(args, "detector", None):
        d["detector"] = args.detector
    if getattr(args, "mode", None):
        d["mode"] = args.mode
    try:
        return PipelineConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise CLIError(f"bad pipeline config: {exc}") from exc


def _out_dir(rc: RunConfig) -> Path:
    if not rc.out:
        raise CLIError("no output directory given (--out)")
    out = Path(rc.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".simco_write_test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CLIError(f"cannot write to output directory {out}: {exc.strerror or exc}") from exc
    return out


def _require_file(path, what: str) -> Path:
    if not path:
        raise CLIError(f"no {what} given")
    p = Path(path)
    if not p.is_file():
        raise CLIError(f"{what} not found: {p}")
    return p


def _load_dataset(rc: RunConfig):
    if not rc.dataset:
        raise CLIError("no dataset directory given (--dataset)")
    mpath = _require_file(Path(rc.dataset) / "manifest.json", "dataset manifest")
    return read_manifest(mpath)


# --------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    rc = _run_config(args)
    try:
        gcfg = GeneratorConfig.from_dict(rc.generator)
    except (TypeError, ValueError) as exc:
        raise CLIError(f"bad generator config: {exc}") from exc
    out = _out_dir(rc)
    manifest = generate_dataset(gcfg, rc.seed, out)
    print(f"wrote {len(manifest.records)} images and {out / 'manifest.json'}")
    return 0


def cmd_train(args) -> int:
    rc = _run_config(args)
    manifest = _load_dataset(rc)
    tdict = dict(rc.train)
    tdict.setdefault("seed", rc.seed)
    if args.seed is not None:
        tdict["seed"] = args.seed
    if args.epochs is not None:
        tdict["epochs"] = args.epochs
    try:
        tcfg = TrainConfig.from_dict(tdict)
    except (TypeError, ValueError) as exc:
        raise CLIError(f"bad train config: {exc}") from exc
    out = _out_dir(rc)
    feats = oracle_features(manifest, rc.dataset, "train", tcfg.patch)
    if not feats:
        raise CLIError("dataset has an empty train split")
    net = EmbeddingNet.init(feats[0].features.shape[1], tcfg.hidden, seed=tcfg.seed)
    net, curve = train_on_features(net, feats, tcfg)
    save_model(out / "model.json", net, tcfg.alpha, tcfg.to_dict())
    (out / "loss.csv").write_text(loss_curve_csv(curve))
    if rc.figures and curve:
        viz.plot_loss_curve(curve, out / "loss.png")
    print(f"wrote {out / 'model.json'} and {out / 'loss.csv'}")
    return 0


def _load_image(rc: RunConfig, args):
    """(raster, record or None, image id) from --image or --dataset/--image-id."""
    if getattr(args, "image_id", None):
        manifest = _load_dataset(rc)
        ids = [r.id for r in manifest.records]
        if args.image_id not in ids:
            raise CLIError(f"image id {args.image_id} not in {rc.dataset}/manifest.json")
        i = ids.index(args.image_id)
        path = _require_file(Path(rc.dataset) / manifest.files[i], "image")
        return read_image(path), manifest.records[i], args.image_id
    path = _require_file(args.image, "image (--image)")
    return read_image(path), None, path.stem


def _load_seed_boxes(path, image_id: str):
    p = _require_file(path, "seeds file")
    try:
        items = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CLIError(f"{p}: invalid JSON: {exc}") from exc
    boxes = [tuple(int(v) for v in s["bbox"]) for s in items if s.get("image_id", image_id) == image_id]
    if not boxes:
        raise CLIError(f"{p}: no seeds for image {image_id}")
    return boxes


def cmd_count(args) -> int:
    rc = _run_config(args)
    cfg = _pipeline_config(rc, args)
    net, _ = load_model(_require_file(rc.model, "model file (--model)"))
    raster, record, image_id = _load_image(rc, args)
    if cfg.detector == "oracle" and record is None:
        raise CLIError("the oracle detector needs --dataset and --image-id")
    seeds = None
    if cfg.mode == "seeded":
        if not args.seeds:
            raise CLIError("seeded mode needs --seeds")
        seeds = _load_seed_boxes(args.seeds, image_id)
    out = _out_dir(rc)
    try:
        report = run_pipeline(raster, net, cfg, record, seeds, image_id)
    except cl.SeedsNotSeparable as exc:
        raise CLIError(f"{image_id}: {exc}") from exc
    except ValueError as exc:
        raise CLIError(f"{image_id}: {exc}") from exc
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1) + "\n")
    write_png(out / "overlay.png", viz.report_overlay(raster, report))
    print(json.dumps({"image_id": image_id, "total": report.total,
                      "counts": [c.count for c in report.clusters]}))
    return 0


def cmd_sweep(args) -> int:
    rc = _run_config(args)
    cfg = _pipeline_config(rc, args)
    net, _ = load_model(_require_file(rc.model, "model file (--model)"))
    raster, record, image_id = _load_image(rc, args)
    if cfg.detector == "oracle" and record is None:
        raise CLIError("the oracle detector needs --dataset and --image-id")
    out = _out_dir(rc)
    dets = detect(raster, record, cfg)
    if not dets:
        raise CLIError(f"{image_id}: no detections to cluster")
    Y = describe(raster, dets, net, cfg.patch)
    if args.preferences:
        try:
            prefs = [float(v) for v in args.preferences.split(",")]
        except ValueError as exc:
            raise CLIError(f"bad --preferences: {exc}") from exc
    else:
        prefs = [float(p) for p in cl.preference_grid(Y, args.grid)]
    results = cl.preference_sweep(Y, prefs, cfg.ap)
    for i, res in enumerate(results):
        write_png(out / f"sweep_{i:03d}.png", viz.result_overlay(raster, dets, res))
    payload = {"image_id": image_id, "detections": [d.to_dict(image_id) for d in dets],
               "results": [r.to_dict() for r in results]}
    (out / "sweep.json").write_text(json.dumps(payload, indent=1) + "\n")
    if rc.figures:
        viz.plot_sweep(prefs, results, out / "sweep.png")
    print(f"wrote {len(results)} overlays to {out}")
    return 0


def cmd_eval(args) -> int:
    rc = _run_config(args)
    cfg = _pipeline_config(rc, args)
    manifest = _load_dataset(rc)
    net, _ = load_model(_require_file(rc.model, "model file (--model)"))
    if not manifest.split_indices(args.split):
        raise CLIError(f"split {args.split!r} of {rc.dataset} is empty")
    out = _out_dir(rc)
    summary = eval_dataset(manifest, rc.dataset, net, cfg, args.split, args.limit)
    (out / "metrics.csv").write_text(summary.to_csv())
    (out / "summary.json").write_text(json.dumps(summary.summary(), indent=1) + "\n")
    if summary.errors:
        (out / "errors.jsonl").write_text("".join(json.dumps({"image_id": i, "error": e}) + "\n"
                                                  for i, e in summary.errors))
    if rc.figures:
        viz.plot_eval(summary.rows, out / "eval.png", f"MAE {summary.mae:.3f}  NMAE {summary.nmae:.3f}")
    print(json.dumps(summary.summary()))
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="simco", description="Similarity-based multi-class object counting")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="run config JSON")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="random seed (u64)")
        p.add_argument("--no-figures", action="store_true", help="skip matplotlib figures")

    def pipeline_flags(p):
        p.add_argument("--dataset", help="dataset directory holding manifest.json")
        p.add_argument("--model", help="model JSON file")
        p.add_argument("--detector", choices=["oracle", "blob"])
        p.add_argument("--mode", choices=["seeded", "unsupervised"])

    p = sub.add_parser("generate", help="generate a synthetic shape dataset")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the embedding on a dataset's train split")
    common(p)
    p.add_argument("--dataset", help="dataset directory holding manifest.json")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("count", cmd_count, "count objects in one image"),
                                 ("sweep", cmd_sweep, "cluster one image over a preference grid")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        pipeline_flags(p)
        p.add_argument("--image", help="raster file (PPM or PNG)")
        p.add_argument("--image-id", help="image id inside --dataset (needed by the oracle detector)")
        if name == "count":
            p.add_argument("--seeds", help="JSON list of {image_id, bbox} seed boxes")
        else:
            p.add_argument("--preferences", help="comma-separated preference values")
            p.add_argument("--grid", type=int, default=8, help="grid size when --preferences is omitted")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="evaluate MAE/NMAE on a dataset split")
    common(p)
    pipeline_flags(p)
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int, help="evaluate only the first N images of the split")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        status = args.func(args)
    except CLIError as exc:
        print(f"simco {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"simco {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return status


if __name__ == "__main__":
    sys.exit(main())
