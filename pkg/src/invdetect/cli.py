"""``invdetect`` command-line entry point.

Exit codes: 0 success, 2 usage or config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import tempfile
from pathlib import Path

from . import backbone as bb
from . import config as C
from .corruption import parse_corruption
from .detector import DetectorTrainingError, load_detector, save_detector, train_detector
from .evaluation import EvaluationError, evaluate
from .likelihood import LikelihoodError, math_report
from .manifest import ManifestError, read_manifest, write_manifest
from .metrics import MetricError
from .pipeline import DataError, extract_features, read_features, write_features
from . import workflow as W

log = logging.getLogger("invdetect")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class RunDir:
    """Stage outputs in a sibling temp dir and rename into place on success."""

    def __init__(self, out):
        self.final = Path(out)
        if self.final.exists() and any(self.final.iterdir()):
            raise UsageError(f"output directory {self.final} exists and is not empty")
        self.final.parent.mkdir(parents=True, exist_ok=True)
        self.path = Path(tempfile.mkdtemp(prefix=f".{self.final.name}.", dir=self.final.parent))

    def commit(self):
        if self.final.exists():
            self.final.rmdir()
        self.path.replace(self.final)

    def abort(self):
        shutil.rmtree(self.path, ignore_errors=True)


def _need_file(p, what) -> Path:
    if p is None:
        raise UsageError(f"--{what} is required")
    p = Path(p)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _write_run_meta(run: Path, cfg: dict, args, inputs: dict):
    meta_cfg = dict(cfg)
    C.dump(meta_cfg, run / "config.json")
    (run / "inputs.json").write_text(json.dumps(
        {"command": args.command, "hashes": W.input_hashes(inputs),
         "names": {k: (Path(v).name if v else None) for k, v in inputs.items()}},
        indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands

def cmd_make_data(args, cfg, run: Path):
    D = cfg["data"]
    splits = {"train": args.n_train if args.n_train is not None else D["backbone_train"],
              "val": args.n_val or 0, "test": args.n_test or 0}
    m = W.make_reals(run, cfg["seed"], args.prefix, {k: v for k, v in splits.items() if v}, D["image_size"])
    return {"records": len(m)}


def cmd_train_backbone(args, cfg, run: Path):
    man = read_manifest(_need_file(args.manifest, "manifest"))
    bcfg = C.backbone_config(cfg, args.which)
    if bcfg.ae_epochs == bcfg.den_epochs == bcfg.cls_epochs == 0:
        log.warning("all epoch counts are zero: writing the initialised, untrained bundle")
    bundle, skipped = W.train_backbone(man, bcfg, cfg["seed"])
    digest = bb.save_bundle(bundle, run / "backbone.zip")
    (run / "train_log.json").write_text(json.dumps(
        {"log": bundle.meta.get("log"), "skipped": skipped}, indent=1) + "\n")
    return {"content_hash": digest, "skipped": len(skipped)}


def cmd_gen_fakes(args, cfg, run: Path):
    bundle = bb.load_bundle(_need_file(args.bundle, "bundle"))
    labels = [int(v) for v in args.labels.split(",")] if args.labels else None
    if labels is not None and len(labels) != args.count:
        labels = [labels[i % len(labels)] for i in range(args.count)]
    recs = W.generate_fakes(bundle, cfg["ddim"]["K"], run, args.count, args.split, cfg["seed"],
                            prefix=args.prefix, labels=labels, start=args.start)
    write_manifest(run / "fragment.jsonl", recs)
    return {"records": len(recs), "generator": bundle.config.name}


def cmd_extract_features(args, cfg, run: Path):
    man = read_manifest(_need_file(args.manifest, "manifest"), args.root)
    bundle = bb.load_bundle(_need_file(args.bundle, "bundle"))
    ctx = W.make_context(bundle, cfg, args.cache, args.workers)
    recs = list(man.filter(split=args.split)) if args.split else list(man)
    aug = C.augment_config(cfg) if args.augment else None
    corr = parse_corruption(args.corruption) if args.corruption else None
    fs = extract_features(man, ctx, recs, augment_cfg=aug, seed=cfg["seed"], corruption=corr)
    write_features(run / "features", fs)
    stats = {"records": len(fs), "skipped": len(fs.skipped), "manifest_records": len(recs)}
    if ctx.cache:
        stats["cache"] = ctx.cache.stats()
    log.info("extracted %d records, %d skipped, cache %s", len(fs), len(fs.skipped), stats.get("cache"))
    return stats


def cmd_train_detector(args, cfg, run: Path):
    tr = read_features(_need_file(Path(args.train).with_suffix(".json"), "train").with_suffix(""))
    va = read_features(_need_file(Path(args.val).with_suffix(".json"), "val").with_suffix(""))
    det = train_detector(tr, va, args.mode, C.detector_config(cfg), seed=cfg["seed"])
    digest = save_detector(det, run / "detector.zip")
    return {"content_hash": digest, "val_auroc": det.val_auroc, "selected_epoch": det.selected_epoch}


def cmd_evaluate(args, cfg, run: Path):
    man = read_manifest(_need_file(args.manifest, "manifest"), args.root)
    bundle = bb.load_bundle(_need_file(args.bundle, "bundle"))
    det = load_detector(_need_file(args.detector, "detector"))
    ctx = W.make_context(bundle, cfg, args.cache, args.workers)
    corr = parse_corruption(args.corruption) if args.corruption else None
    rep = evaluate(man, det, ctx, run, corruption=corr, seed=cfg["seed"], generator=args.generator,
                   figures=cfg["eval"]["figures"])
    return {"metrics": rep["metrics"], "counts": rep["counts"]}


def cmd_verify_math(args, cfg, run: Path):
    rep = math_report(cfg["seed"], cfg["math"]["dim"], cfg["math"]["n_trials"])
    (run / "math_report.json").write_text(json.dumps(rep, indent=1, sort_keys=True) + "\n")
    return {"slopes": rep["slopes"]["slopes"],
            "first_order_pass": {k: v["pass_fraction"] for k, v in rep["first_order"].items()}}


def cmd_quickstart(args, cfg, run: Path):
    s = W.quickstart(run, cfg, workers=args.workers, cache_root=args.cache)
    return {"auroc": s["auroc"], "core_signal": s["core_signal"]}


COMMANDS = {
    "make-data": cmd_make_data, "train-backbone": cmd_train_backbone, "gen-fakes": cmd_gen_fakes,
    "extract-features": cmd_extract_features, "train-detector": cmd_train_detector,
    "evaluate": cmd_evaluate, "verify-math": cmd_verify_math, "quickstart": cmd_quickstart,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON config layered over the defaults")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", required=True, help="run directory to create")
    common.add_argument("--workers", type=int, default=1, help="feature-extraction worker processes")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, repeatable")
    common.add_argument("--cache", help="feature cache directory (default: $INVDETECT_CACHE, or none)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="invdetect", description="Synthetic-image detection from DDIM inversion features.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-data", parents=[common], help="render a labeled toy corpus of real images")
    s.add_argument("--prefix", default="real")
    s.add_argument("--n-train", type=int)
    s.add_argument("--n-val", type=int)
    s.add_argument("--n-test", type=int)

    s = sub.add_parser("train-backbone", parents=[common], help="train autoencoder, conditioner and denoiser")
    s.add_argument("--manifest")
    s.add_argument("--which", choices=("a", "b"), default="a", help="config section backbone_a or backbone_b")

    s = sub.add_parser("gen-fakes", parents=[common], help="sample fake images from a trained backbone")
    s.add_argument("--bundle")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--labels", help="comma-separated class ids, cycled to --count")
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.add_argument("--prefix")
    s.add_argument("--start", type=int, default=0, help="index of the first image; ids and seeds continue from here")

    s = sub.add_parser("extract-features", parents=[common], help="invert images into 9-channel feature stacks")
    s.add_argument("--manifest")
    s.add_argument("--root", help="manifest root (default: the manifest's directory)")
    s.add_argument("--bundle")
    s.add_argument("--split", choices=("train", "val", "test"))
    s.add_argument("--augment", action="store_true", help="apply train-time augmentation")
    s.add_argument("--corruption", help="kind:severity, e.g. jpeg:75")

    s = sub.add_parser("train-detector", parents=[common], help="train a detector on extracted features")
    s.add_argument("--train", required=True, help="feature file stem (without .bin/.json)")
    s.add_argument("--val", required=True)
    s.add_argument("--mode", choices=("rgb", "residual", "full"), default="full")

    s = sub.add_parser("evaluate", parents=[common], help="score the test split and write metrics, curves and figures")
    s.add_argument("--manifest")
    s.add_argument("--root")
    s.add_argument("--bundle")
    s.add_argument("--detector")
    s.add_argument("--corruption")
    s.add_argument("--generator", help="keep only fakes from this generator (reals always kept)")

    sub.add_parser("verify-math", parents=[common], help="numerical checks of the likelihood approximation")
    sub.add_parser("quickstart", parents=[common], help="end-to-end recipe on the toy setup")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = None
    try:
        cfg = C.load_config(args.config, args.overrides, args.seed)
        run = RunDir(args.out)
        inputs = {k: getattr(args, k, None) for k in ("manifest", "bundle", "detector", "train", "val", "config")}
        for k in ("train", "val"):
            if inputs[k]:
                inputs[k] = str(Path(inputs[k]).with_suffix(".bin"))
        _write_run_meta(run.path, cfg, args, inputs)
        result = COMMANDS[args.command](args, cfg, run.path)
        (run.path / "result.json").write_text(json.dumps(result, indent=1, sort_keys=True, default=str) + "\n")
        run.commit()
        print(json.dumps(result, sort_keys=True, default=str))
        return EXIT_OK
    except (UsageError, C.ConfigError) as e:
        code, msg = EXIT_USAGE, str(e)
    except (DataError, ManifestError, EvaluationError, MetricError, FileNotFoundError, bb.CheckpointError,
            bb.UntrainedBundleError) as e:
        code, msg = EXIT_DATA, str(e)
    except (bb.TrainingError, DetectorTrainingError, LikelihoodError, FloatingPointError) as e:
        code, msg = EXIT_NUMERIC, str(e)
    except ValueError as e:
        code, msg = EXIT_USAGE, str(e)
    if run is not None:
        run.abort()
    print(f"invdetect {args.command}: error: {msg}", file=sys.stderr)
    return code


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
