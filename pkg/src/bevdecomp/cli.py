"""Command line interface: ``bevdecomp {synth,train,eval,ablate,infer,plot}``.

Outputs go under ``$BEVDECOMP_HOME`` (default ``./bevdecomp-runs``) unless
``--out`` is given. Exit codes: 0 success, 1 usage or configuration error,
2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_mod
from .config import ConfigError, ExperimentConfig, load, load_recipe, paper_scale

logger = logging.getLogger("bevdecomp")

HOME_ENV = "BEVDECOMP_HOME"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def output_root() -> Path:
    return Path(os.environ.get(HOME_ENV, "bevdecomp-runs"))


def _config(args) -> ExperimentConfig:
    cfg = load(args.config) if getattr(args, "config", None) else (
        paper_scale() if getattr(args, "paper_scale", False) else ExperimentConfig())
    if getattr(args, "recipe", None):
        cfg = cfg.replace(recipe=load_recipe(args.recipe).to_dict())
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    for flag in ("cst", "td", "cwt"):
        if getattr(args, f"ablate_{flag}", False):
            over[f"ablation__{flag}"] = False
            if flag == "td":
                over["ablation__ft"] = False
    return cfg.replace(**over) if over else cfg


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, {"wall_clock_s": round(time.perf_counter() - t0, 3)}


# -- synth ---------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .dataset import build_dataset
    cfg = _config(args)
    n = args.n if args.n is not None else cfg.data.n
    seed = args.seed if args.seed is not None else cfg.data.seed
    out = Path(args.out) if args.out else output_root() / "datasets" / f"synth-n{n}-s{seed}"
    manifest, timing = _timed(lambda: build_dataset(
        cfg.recipe, cfg.camera_model, cfg.gspec, n, seed, out, cfg.pspec,
        overwrite=args.overwrite))
    if manifest.get("up_to_date"):
        print(f"{out}: up to date (dataset {manifest['dataset_key']})")
    else:
        print(f"{out}: wrote {n} scenes (dataset {manifest['dataset_key']})")
        logger.info("synthesis took %.1f s", timing["wall_clock_s"])
    return EXIT_OK


# -- train ---------------------------------------------------------------------

def _run_dir(args, stage: str, cfg: ExperimentConfig) -> Path:
    if args.out:
        return Path(args.out)
    return output_root() / "runs" / f"{stage}-{cfg.hash()}"


def cmd_train(args) -> int:
    from .alignment import train_joint, train_stage2, train_stage3_finetune
    from .autoencoder import train_stage1
    from .dataset import load_manifest
    from .manifest import RunManifest

    cfg = _config(args)
    stage = args.stage
    if args.ablate_td and stage != "ae":
        raise UsageError("--ablate-td replaces the staged pipeline; use it with 'train ae'")
    if stage in ("align", "finetune") and not args.from_ckpt:
        raise UsageError(f"train {stage} requires --from <checkpoint>")
    if stage == "ae" and args.from_ckpt:
        raise UsageError("train ae does not take --from")
    if args.epochs is not None:
        cfg = cfg.replace(**{f"train__{s}__epochs": args.epochs
                             for s in ("ae", "align", "finetune", "joint")})
    data_manifest = load_manifest(args.data)
    tag = "joint" if args.ablate_td else stage
    run_dir = _run_dir(args, tag, cfg)
    ckpt_path = run_dir / f"{tag}.pt"
    resume = ckpt_mod.load(args.resume, tag, cfg, args.allow_config_mismatch) \
        if args.resume else None
    parent = None
    if args.from_ckpt:
        parent = ckpt_mod.load(args.from_ckpt)
        ckpt_mod.check_parent(stage, parent)
    common = dict(val=args.data, resume=resume, checkpoint_path=ckpt_path,
                  snapshot_dir=run_dir)
    if tag == "joint":
        fn = lambda: train_joint(args.data, cfg, **common)  # noqa: E731
    elif stage == "ae":
        fn = lambda: train_stage1(args.data, cfg, **common)  # noqa: E731
    elif stage == "align":
        fn = lambda: train_stage2(args.data, parent, cfg,  # noqa: E731
                                  allow_mismatch=args.allow_config_mismatch, **common)
    else:
        fn = lambda: train_stage3_finetune(args.data, parent, cfg,  # noqa: E731
                                           allow_mismatch=args.allow_config_mismatch,
                                           **common)
    result, timing = _timed(fn)
    hist = result.history
    man = RunManifest(
        command=f"train {tag}", config_hash=cfg.hash(),
        lineage=list(result.lineage) + [result.checkpoint_id],
        inputs={"dataset": data_manifest["dataset_key"],
                "from": parent.checkpoint_id if parent else None},
        artifacts=[ckpt_path.name],
        metrics={"epochs": result.epoch, "lr": result.extra.get("lr"),
                 "final_train_loss": hist["train_loss"][-1] if hist.get("train_loss") else None,
                 "final_val_loss": hist["val_loss"][-1] if hist.get("val_loss") else None})
    result.extra["manifest_id"] = man.manifest_id
    result.save(ckpt_path)
    man.write(run_dir, timing)
    print(f"{ckpt_path}: stage {result.stage} checkpoint {result.checkpoint_id} "
          f"(manifest {man.manifest_id})")
    return EXIT_OK


# -- eval / plot -----------------------------------------------------------------

def _write_report(report, run_dir: Path, man):
    from .evaluation import plot_class_bars, plot_distance
    report.manifest_id = man.manifest_id
    (run_dir / "report.json").write_text(report.to_json())
    plot_class_bars(report, run_dir / "class_iou.png", man.manifest_id)
    plot_distance(report, run_dir / "distance.png", man.manifest_id)


def cmd_eval(args) -> int:
    from .dataset import load_manifest
    from .evaluation import evaluate_checkpoint
    from .manifest import RunManifest

    ckpt = ckpt_mod.load(args.ckpt, ckpt_mod.INFERABLE)
    data_manifest = load_manifest(args.data)
    use_vis = not args.no_visibility_mask
    report, timing = _timed(lambda: evaluate_checkpoint(ckpt, args.data, args.split,
                                                        use_visibility=use_vis,
                                                        limit=args.limit))
    run_dir = Path(args.out) if args.out else (
        output_root() / "eval" / f"{ckpt.checkpoint_id}-{args.split}"
        f"{'' if use_vis else '-novis'}")
    run_dir.mkdir(parents=True, exist_ok=True)
    man = RunManifest(
        command="eval", config_hash=ckpt.config_hash,
        lineage=list(ckpt.lineage) + [ckpt.checkpoint_id],
        inputs={"dataset": data_manifest["dataset_key"], "split": args.split,
                "visibility_mask": use_vis, "limit": args.limit},
        artifacts=["report.json", "class_iou.png", "distance.png"],
        metrics={"mean_iou": report.mean_iou, "strata": report.strata})
    _write_report(report, run_dir, man)
    man.write(run_dir, timing)
    print(f"{run_dir}: mIoU {report.mean_iou:.4f} over {report.samples} samples"
          f"{'' if use_vis else ' (visibility mask disabled)'}")
    return EXIT_OK


def cmd_plot(args) -> int:
    from .evaluation import plot_class_bars, plot_distance
    from .metrics import EvalReport
    path = Path(args.report)
    report = EvalReport.from_dict(json.loads(path.read_text()))
    out = Path(args.out) if args.out else path.parent
    a = plot_class_bars(report, out / "class_iou.png", report.manifest_id)
    b = plot_distance(report, out / "distance.png", report.manifest_id)
    print(f"wrote {a} and {b}")
    return EXIT_OK


# -- ablate ----------------------------------------------------------------------

def cmd_ablate(args) -> int:
    from .ablation import DEFAULT_GROUPS, run_ablation
    from .dataset import load_manifest, load_split
    from .manifest import RunManifest

    cfg = _config(args)
    groups = args.groups.split(",") if args.groups else list(DEFAULT_GROUPS)
    seeds = [int(s) for s in args.seeds.split(",")]
    data_manifest = load_manifest(args.data)
    train = load_split(args.data, "train", args.limit)
    val = load_split(args.data, "val")
    result, timing = _timed(lambda: run_ablation(cfg, train, val, groups, seeds))
    run_dir = Path(args.out) if args.out else output_root() / "ablate" / cfg.hash()
    man = RunManifest(
        command="ablate", config_hash=cfg.hash(), inputs={
            "dataset": data_manifest["dataset_key"], "groups": groups, "seeds": seeds,
            "limit": args.limit},
        artifacts=["ablation.md", "ablation.json"],
        metrics={g: result.row(g) for g in groups})
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "ablation.md").write_text(result.table())
    payload = result.to_dict()
    payload["manifest_id"] = man.manifest_id
    (run_dir / "ablation.json").write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    man.write(run_dir, timing)
    print(result.table(), end="")
    return EXIT_OK


# -- infer -----------------------------------------------------------------------

def _inputs(path: Path):
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
        if not files:
            raise FileNotFoundError(f"no images in {path}")
        return files
    if not path.exists():
        raise FileNotFoundError(f"{path} does not exist")
    return [path]


def cmd_infer(args) -> int:
    from PIL import Image

    from .alignment import Predictor
    from .dataset import read_sample
    from .evaluation import plot_sample

    ckpt = ckpt_mod.load(args.ckpt, ckpt_mod.INFERABLE)
    predictor = Predictor(ckpt)
    cam = predictor.cfg.camera
    out = Path(args.out) if args.out else output_root() / "infer" / ckpt.checkpoint_id
    manifest_id = ckpt.extra.get("manifest_id")
    for path in _inputs(Path(args.input)):
        img = np.asarray(Image.open(path).convert("RGB"))
        if img.shape[:2] != (cam.image_height, cam.image_width):
            img = np.asarray(Image.open(path).convert("RGB").resize(
                (cam.image_width, cam.image_height), Image.BILINEAR))
        pred = predictor.predict(img.transpose(2, 0, 1)[None])[0]
        gt = vis = None
        if path.with_suffix(".bits").exists() and path.with_suffix(".json").exists():
            _, gt, vis, _ = read_sample(path.parent, path.stem)
        target = out / f"{path.stem}.png"
        plot_sample(img.transpose(2, 0, 1), pred, target, gt, vis, manifest_id)
        print(f"{target}{'' if gt is not None else ' (no ground truth)'}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bevdecomp", description="Task-decomposed monocular BEV segmentation "
                "on a procedural synthetic benchmark.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_args(sp):
        sp.add_argument("--config", help="experiment config (YAML)")
        sp.add_argument("--paper-scale", action="store_true",
                        help="paper-scale geometry profile (shape checks only)")

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    config_args(s)
    s.add_argument("--n", type=int, help="number of scenes (default: config data.n)")
    s.add_argument("--seed", type=int, help="dataset seed (default: config data.seed)")
    s.add_argument("--recipe", help="scene recipe file (YAML) overriding the config's")
    s.add_argument("--out", help="dataset directory")
    s.add_argument("--overwrite", action="store_true")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one stage")
    t.add_argument("stage", choices=("ae", "align", "finetune"))
    config_args(t)
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--from", dest="from_ckpt", help="parent checkpoint")
    t.add_argument("--resume", help="resume this stage from a checkpoint")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int, help="override epochs for every stage")
    t.add_argument("--ablate-td", action="store_true",
                   help="train the end-to-end baseline instead of the staged pipeline")
    t.add_argument("--ablate-cst", action="store_true", help="train on Cartesian targets")
    t.add_argument("--ablate-cwt", action="store_true", help="drop the column transformer")
    t.add_argument("--allow-config-mismatch", action="store_true")
    t.add_argument("--out", help="run directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val", choices=("train", "val"))
    e.add_argument("--limit", type=int)
    e.add_argument("--no-visibility-mask", action="store_true")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run component ablation groups")
    config_args(a)
    a.add_argument("--data", required=True)
    a.add_argument("--groups", help="comma-separated groups (default I,III,V,VI,VII)")
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--limit", type=int, help="use only the first N training scenes")
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    i = sub.add_parser("infer", help="render predictions for images")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--input", required=True, help="image file or directory")
    i.add_argument("--out")
    i.set_defaults(func=cmd_infer)

    pl = sub.add_parser("plot", help="re-render figures from a report")
    pl.add_argument("--report", required=True)
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"bevdecomp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        if args.verbose:
            logger.exception("command failed")
        print(f"bevdecomp: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
