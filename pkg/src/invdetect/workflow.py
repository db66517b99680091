"""Run stages shared by the CLI subcommands and the end-to-end quickstart recipe."""

from __future__ import annotations

import json
import logging
import os
import shutil
import time
from pathlib import Path

import numpy as np
from PIL import Image

from . import backbone as bb
from . import config as C
from .corruption import parse_corruption
from .detector import save_detector, train_detector
from .evaluation import PAPER_CONTEXT, evaluate
from .manifest import DatasetManifest, Record, read_manifest, write_manifest
from .pipeline import CACHE_ENV, FeatureCache, PipelineContext, extract_features, load_image, preprocess, write_features
from .seeding import file_sha256, substream_seed
from .toydata import write_corpus
from . import imageops

log = logging.getLogger(__name__)

FAKE_CHUNK = 100


class Timer:
    def __init__(self):
        self.laps = {}

    def lap(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t = time.perf_counter()
                log.info("%s ...", name)

            def __exit__(self, *exc):
                timer.laps[name] = round(time.perf_counter() - self.t, 2)
                log.info("%s done in %.1fs", name, timer.laps[name])
        return _Ctx()


def rebase(records, prefix: str) -> list[Record]:
    out = []
    for r in records:
        d = r.to_json()
        d["path"] = f"{prefix.rstrip('/')}/{r.path}"
        out.append(Record(**d))
    return out


def make_reals(root, seed: int, prefix: str, splits: dict, size: int = 32) -> DatasetManifest:
    """Render a labeled real corpus into ``root`` with ``root/manifest.jsonl``."""
    recs = write_corpus(root, seed, splits, prefix=prefix, size=size, manifest_name="manifest.jsonl")
    return DatasetManifest(recs, Path(root))


def load_labeled_images(manifest: DatasetManifest, records=None, size: int = 32):
    """(images, class labels) for records that carry a class label; unreadable files are skipped."""
    records = list(manifest) if records is None else list(records)
    xs, ys, skipped = [], [], []
    for r in records:
        if r.class_label is None:
            skipped.append((r.id, "no class label"))
            continue
        try:
            xs.append(preprocess(load_image(manifest.resolve(r)), size))
        except Exception as e:  # noqa: BLE001  (reported, run continues)
            skipped.append((r.id, str(e)))
            continue
        ys.append(r.class_label)
    X = np.stack(xs) if xs else np.zeros((0, 3, size, size), np.float32)
    return X, np.array(ys, dtype=np.int64), skipped


def train_backbone(manifest: DatasetManifest, bcfg: bb.BackboneConfig, seed: int, split: str = "train"):
    recs = list(manifest.filter(split=split, label="real"))
    X, y, skipped = load_labeled_images(manifest, recs, bcfg.image_size)
    if len(X) == 0:
        raise bb.TrainingError(f"no usable labeled real images in split {split!r}")
    bundle = bb.train_toy_ldm(X, y, bcfg, seed)
    return bundle, skipped


def generate_fakes(bundle: bb.BackboneBundle, K: int, root, count: int, split: str, seed: int,
                   prefix: str | None = None, labels=None, start: int = 0) -> list[Record]:
    """Sample ``count`` images to lossless PNG under ``root/images``; returns manifest records.

    Image ``i`` uses class ``labels[i]`` (default ``i mod n_classes``) and a seed
    derived from ``(seed, prefix, start + i)``; sampling runs in fixed chunks.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    prefix = prefix or f"fake-{bundle.config.name}"
    sched = bundle.config.schedule_obj(K)
    if labels is None:
        labels = [(start + i) % bundle.config.n_classes for i in range(count)]
    labels = [int(v) for v in labels]
    if len(labels) != count:
        raise ValueError("need one label per image")
    recs = []
    for c0 in range(0, count, FAKE_CHUNK):
        idx = list(range(c0, min(count, c0 + FAKE_CHUNK)))
        seeds = [substream_seed(seed, f"fakes/{prefix}", start + i) for i in idx]
        imgs = bb.sample_fakes([labels[i] for i in idx], bundle, sched, seeds)
        for i, img in zip(idx, imgs):
            rid = f"{prefix}-{start + i:05d}"
            rel = f"images/{rid}.png"
            Image.fromarray(imageops.to_uint8_hwc(img)).save(root / rel, format="PNG", optimize=False)
            recs.append(Record(id=rid, path=rel, label="fake", generator=bundle.config.name,
                               split=split, class_label=labels[i]))
    return recs


def make_context(bundle, cfg: dict, cache_root=None, workers: int = 1) -> PipelineContext:
    cache = FeatureCache.from_env(cache_root)
    return PipelineContext(bundle, bundle.config.schedule_obj(cfg["ddim"]["K"]),
                           standardize_noise=cfg["pipeline"]["standardize_noise"],
                           chunk_size=cfg["pipeline"]["chunk_size"], cache=cache, workers=workers)


def core_signal(fs) -> dict:
    """Mean |x - D(z0_hat)| per label from a clean feature set."""
    res = np.abs(fs.features[:, 0:3] - fs.features[:, 6:9]).mean(axis=(1, 2, 3))
    out = {}
    for name, y in (("real", 0), ("fake", 1)):
        r = res[fs.labels == y]
        out[name] = {"n": int(len(r)), "mean_residual": float(r.mean()) if len(r) else None}
    return out


def quickstart(out, cfg: dict, workers: int = 1, cache_root=None) -> dict:
    """Whole recipe: data, two backbones, fakes, features, three detectors, evaluation grid."""
    out = Path(out)
    seed = cfg["seed"]
    D, F = cfg["data"], cfg["fakes"]
    size = D["image_size"]
    timer = Timer()
    with timer.lap("data"):
        mA = make_reals(out / "data/real-A", substream_seed(seed, "data/A"), "realA", {"train": D["backbone_train"]}, size)
        mB = make_reals(out / "data/real-B", substream_seed(seed, "data/B"), "realB", {"train": D["backbone_train"]}, size)
        mD = make_reals(out / "data/real-D", substream_seed(seed, "data/D"), "realD",
                        {"train": D["detector_train"], "val": D["detector_val"], "test": D["detector_test"]}, size)
    bundles = {}
    for which, m in (("a", mA), ("b", mB)):
        bcfg = C.backbone_config(cfg, which)
        with timer.lap(f"backbone-{which}"):
            bundle, _ = train_backbone(m, bcfg, substream_seed(seed, f"backbone/{which}"))
        bb.save_bundle(bundle, out / f"backbones/{bcfg.name}.zip")
        bundles[which] = bundle
    A, B = bundles["a"], bundles["b"]
    K = cfg["ddim"]["K"]
    with timer.lap("fakes"):
        fA, n = [], 0
        for split, count in (("train", F["train"]), ("val", F["val"]), ("test", F["test"])):
            fA += generate_fakes(A, K, out / "fakes/A", count, split, seed, prefix="fakeA", start=n)
            n += count
        fB = generate_fakes(B, K, out / "fakes/B", F["test_b"], "test", seed, prefix="fakeB")
    records = (rebase(mD.records, "data/real-D") + rebase(fA, "fakes/A") + rebase(fB, "fakes/B"))
    write_manifest(out / "manifests/detector.jsonl", records)
    man = DatasetManifest(records, out)

    private_cache = cache_root is None and not os.environ.get(CACHE_ENV)
    ctx = make_context(A, cfg, out / "cache" if private_cache else cache_root, workers)
    aug = C.augment_config(cfg)
    with timer.lap("features"):
        tr = extract_features(man, ctx, list(man.filter(split="train")), augment_cfg=aug, seed=seed)
        va = extract_features(man, ctx, list(man.filter(split="val")), seed=seed)
        teA = extract_features(man, ctx, [r for r in man.filter(split="test") if r.generator != B.config.name],
                               seed=seed)
    write_features(out / "features/train", tr)
    write_features(out / "features/val", va)

    dcfg = C.detector_config(cfg)
    dets = {}
    for mode in ("rgb", "residual", "full"):
        with timer.lap(f"detector-{mode}"):
            dets[mode] = train_detector(tr, va, mode, dcfg, seed=substream_seed(seed, "detector"))
        save_detector(dets[mode], out / f"detectors/{mode}.zip")

    results = {m: {} for m in dets}
    corruptions = [parse_corruption(c) for c in cfg["eval"]["corruptions"]]
    figs = cfg["eval"]["figures"]
    with timer.lap("evaluate"):
        for mode, det in dets.items():
            for tag, gen in (("clean-B", B.config.name), ("clean-A", A.config.name)):
                rep = evaluate(man, det, ctx, out / f"eval/{mode}/{tag}", seed=seed, generator=gen, figures=figs)
                results[mode][tag] = rep["metrics"]
            for cs in corruptions:
                rep = evaluate(man, det, ctx, out / f"eval/{mode}/B-{cs.tag}", corruption=cs, seed=seed,
                               generator=B.config.name, figures=figs)
                results[mode][f"B-{cs.tag}"] = rep["metrics"]

    summary = {
        "seed": seed,
        "core_signal": {"generator": A.config.name, **core_signal(teA)},
        "auroc": {m: {k: v["auroc"] for k, v in r.items()} for m, r in results.items()},
        "metrics": results,
        "val_auroc": {m: d.val_auroc for m, d in dets.items()},
        "selected_epoch": {m: d.selected_epoch for m, d in dets.items()},
        "backbone_fingerprints": {A.config.name: A.fingerprint(), B.config.name: B.fingerprint()},
        "paper_context": PAPER_CONTEXT,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    timing = {"laps": timer.laps, "cache": ctx.cache.stats() if ctx.cache else None}
    (out / "timing.json").write_text(json.dumps(timing, indent=1, sort_keys=True) + "\n")
    if private_cache:
        shutil.rmtree(out / "cache", ignore_errors=True)
    return summary


def input_hashes(paths: dict) -> dict:
    return {k: (file_sha256(p) if p and Path(p).is_file() else None) for k, p in paths.items()}


def open_manifest(path, root=None) -> DatasetManifest:
    return read_manifest(path, root)
