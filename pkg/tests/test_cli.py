import json
import time

import pytest
import yaml

from invdetect.cli import main
from invdetect.manifest import read_manifest, write_manifest
from invdetect.workflow import rebase
from conftest import TINY


def run(capsys, *argv):
    rc = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return rc, out, err


@pytest.fixture(scope="module")
def cfg_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    p.write_text(yaml.safe_dump(TINY))
    return p


@pytest.fixture(scope="module")
def pipeline_dirs(tmp_path_factory, cfg_file):
    """make-data → train-backbone → gen-fakes (train and test), plus a merged manifest."""
    root = tmp_path_factory.mktemp("cli")
    c = ["--config", cfg_file]
    assert main([str(a) for a in ["make-data", *c, "--out", root / "d", "--n-train", 64, "--n-val", 8,
                                  "--n-test", 8]]) == 0
    assert main([str(a) for a in ["train-backbone", *c, "--out", root / "b",
                                  "--manifest", root / "d/manifest.jsonl"]]) == 0
    assert main([str(a) for a in ["gen-fakes", *c, "--out", root / "ft", "--bundle", root / "b/backbone.zip",
                                  "--count", 8, "--split", "test"]]) == 0
    assert main([str(a) for a in ["gen-fakes", *c, "--out", root / "fr", "--bundle", root / "b/backbone.zip",
                                  "--count", 24, "--start", 100, "--split", "train"]]) == 0
    recs = []
    for d, f in (("d", "manifest.jsonl"), ("ft", "fragment.jsonl"), ("fr", "fragment.jsonl")):
        recs += rebase(read_manifest(root / d / f).records, d)
    for r in recs:  # last 8 train fakes and the real val split form the validation set
        if r.path.startswith("fr") and int(r.id[-3:]) >= 116:
            r.split = "val"
    write_manifest(root / "all.jsonl", recs)
    return root


class TestUsage:
    def test_missing_manifest_exit2(self, capsys, tmp_path):
        rc, _, err = run(capsys, "train-backbone", "--out", tmp_path / "o", "--manifest", tmp_path / "nope.jsonl")
        assert rc == 2 and "nope.jsonl" in err
        assert not (tmp_path / "o").exists()

    def test_unknown_override(self, capsys, tmp_path):
        rc, _, err = run(capsys, "verify-math", "--out", tmp_path / "o", "--set", "detector.colour=3")
        assert rc == 2 and "colour" in err

    def test_bad_args(self, capsys, tmp_path):
        assert run(capsys, "frobnicate", "--out", tmp_path)[0] == 2
        assert run(capsys, "gen-fakes", "--out", tmp_path / "x")[0] == 2  # --count missing

    def test_refuses_nonempty_out(self, capsys, tmp_path):
        (tmp_path / "o").mkdir()
        (tmp_path / "o" / "keep.txt").write_text("x")
        rc, _, err = run(capsys, "verify-math", "--out", tmp_path / "o", "--set", "math.n_trials=2")
        assert rc == 2 and "not empty" in err
        assert (tmp_path / "o" / "keep.txt").read_text() == "x"

    def test_corrupt_checkpoint_exit3(self, capsys, tmp_path, cfg_file):
        bad = tmp_path / "b.zip"
        bad.write_bytes(b"junk")
        rc, _, err = run(capsys, "gen-fakes", "--config", cfg_file, "--out", tmp_path / "o", "--bundle", bad,
                         "--count", 1)
        assert rc == 3 and "b.zip" in err


class TestCommands:
    def test_run_dir_metadata(self, pipeline_dirs):
        b = pipeline_dirs / "b"
        cfg = json.loads((b / "config.json").read_text())
        assert cfg["seed"] == 0 and cfg["ddim"]["K"] == 5
        inputs = json.loads((b / "inputs.json").read_text())
        assert inputs["hashes"]["manifest"] and inputs["command"] == "train-backbone"
        assert (b / "train_log.json").is_file()
        assert not list(pipeline_dirs.glob(".b.*"))  # staging dir renamed away

    def test_backbone_rerun_same_hash(self, capsys, pipeline_dirs, tmp_path):
        # the resolved config in the run directory reproduces the run
        rc, out, _ = run(capsys, "train-backbone", "--config", pipeline_dirs / "b/config.json",
                         "--out", tmp_path / "b2", "--manifest", pipeline_dirs / "d/manifest.jsonl")
        first = json.loads((pipeline_dirs / "b/result.json").read_text())
        assert rc == 0 and json.loads(out)["content_hash"] == first["content_hash"]
        assert (tmp_path / "b2/backbone.zip").read_bytes() == (pipeline_dirs / "b/backbone.zip").read_bytes()

    def test_zero_epochs_warns(self, capsys, caplog, pipeline_dirs, tmp_path, cfg_file):
        rc, _, err = run(capsys, "train-backbone", "--config", cfg_file, "--out", tmp_path / "b0",
                         "--manifest", pipeline_dirs / "d/manifest.jsonl", "--set", "backbone_a.ae_epochs=0",
                         "--set", "backbone_a.den_epochs=0", "--set", "backbone_a.cls_epochs=0")
        assert rc == 0 and "zero" in caplog.text
        # an untrained bundle cannot sample: data error
        rc, _, err = run(capsys, "gen-fakes", "--config", cfg_file, "--out", tmp_path / "g",
                         "--bundle", tmp_path / "b0/backbone.zip", "--count", 2)
        assert rc == 3 and "train" in err

    def test_gen_fakes_zero_and_rerun(self, capsys, pipeline_dirs, tmp_path, cfg_file):
        rc, out, _ = run(capsys, "gen-fakes", "--config", cfg_file, "--out", tmp_path / "z",
                         "--bundle", pipeline_dirs / "b/backbone.zip", "--count", 0)
        assert rc == 0 and (tmp_path / "z/fragment.jsonl").read_text() == ""
        rc, _, _ = run(capsys, "gen-fakes", "--config", cfg_file, "--out", tmp_path / "again",
                       "--bundle", pipeline_dirs / "b/backbone.zip", "--count", 8, "--split", "test")
        assert rc == 0
        for p in sorted((pipeline_dirs / "ft/images").glob("*.png")):
            assert (tmp_path / "again/images" / p.name).read_bytes() == p.read_bytes()
        frag = read_manifest(pipeline_dirs / "ft/fragment.jsonl")
        assert {r.generator for r in frag} == {"generator-A"} and len(frag) == 8

    def test_extract_cache_and_skip(self, capsys, pipeline_dirs, tmp_path, cfg_file):
        args = ["extract-features", "--config", cfg_file, "--manifest", pipeline_dirs / "all.jsonl",
                "--bundle", pipeline_dirs / "b/backbone.zip", "--split", "train", "--augment",
                "--cache", tmp_path / "cache"]
        rc, out, _ = run(capsys, *args, "--out", tmp_path / "x1")
        first = json.loads(out)
        assert rc == 0 and first["cache"] == {"hits": 0, "misses": 2}
        rc, out, _ = run(capsys, *args, "--out", tmp_path / "x2")
        assert rc == 0 and json.loads(out)["cache"]["misses"] == 0
        assert (tmp_path / "x1/features.bin").read_bytes() == (tmp_path / "x2/features.bin").read_bytes()

        victim = read_manifest(pipeline_dirs / "all.jsonl").filter(split="train").records[5]
        img = pipeline_dirs / victim.path
        saved = img.read_bytes()
        try:
            img.write_bytes(b"\x89PNG\r\n\x1a\n broken")
            rc, out, _ = run(capsys, *args, "--out", tmp_path / "x3")
        finally:
            img.write_bytes(saved)
        res = json.loads(out)
        assert rc == 0 and res["skipped"] == 1
        assert res["records"] == res["manifest_records"] - res["skipped"]
        side = json.loads((tmp_path / "x3/features.json").read_text())
        assert side["skipped"][0]["id"] == victim.id

    def test_train_and_evaluate(self, capsys, pipeline_dirs, tmp_path, cfg_file):
        c = ["--config", cfg_file]
        m, b = pipeline_dirs / "all.jsonl", pipeline_dirs / "b/backbone.zip"
        for split, extra in (("train", ["--augment"]), ("val", [])):
            assert run(capsys, "extract-features", *c, "--out", tmp_path / split, "--manifest", m,
                       "--bundle", b, "--split", split, *extra)[0] == 0
        rc, out, _ = run(capsys, "train-detector", *c, "--out", tmp_path / "det", "--train",
                         tmp_path / "train/features", "--val", tmp_path / "val/features", "--mode", "full")
        assert rc == 0 and "val_auroc" in json.loads(out)
        rc, out, _ = run(capsys, "evaluate", *c, "--out", tmp_path / "ev", "--manifest", m, "--bundle", b,
                         "--detector", tmp_path / "det/detector.zip", "--corruption", "jpeg:75")
        assert rc == 0
        for f in ("roc.csv", "pr.csv", "det.csv", "report.json", "roc.png", "config.json", "inputs.json"):
            assert (tmp_path / "ev" / f).is_file(), f
        rep = json.loads((tmp_path / "ev/report.json").read_text())
        assert rep["counts"]["scored"] == 16 and rep["fingerprint"]["corruption"]["kind"] == "jpeg"

    def test_train_detector_missing_features(self, capsys, tmp_path, cfg_file):
        rc, _, err = run(capsys, "train-detector", "--config", cfg_file, "--out", tmp_path / "d",
                         "--train", tmp_path / "none", "--val", tmp_path / "none")
        assert rc == 2 and "none" in err


def test_verify_math_default(capsys, tmp_path):
    rc, out, _ = run(capsys, "verify-math", "--out", tmp_path / "m")
    assert rc == 0
    rep = json.loads((tmp_path / "m/math_report.json").read_text())
    assert set(rep["derivation"]["stages"]) == {"truncation", "hutchinson", "single_sample", "taylor"}
    assert rep["derivation"]["n_trials"] == 100


def test_quickstart_tiny(capsys, tmp_path, cfg_file):
    rc, out, _ = run(capsys, "quickstart", "--config", cfg_file, "--out", tmp_path / "q", "--seed", 3)
    assert rc == 0
    s = json.loads((tmp_path / "q/summary.json").read_text())
    assert s["seed"] == 3 and set(s["auroc"]) == {"rgb", "residual", "full"}
    assert set(s["auroc"]["full"]) == {"clean-B", "clean-A", "B-jpeg-75"}
    assert (tmp_path / "q/eval/full/clean-B/roc.png").is_file()
    assert not (tmp_path / "q/cache").exists()


@pytest.mark.slow
def test_gen_fakes_200_reference_timing(capsys, tmp_path, trained_a):
    t = time.perf_counter()
    rc, out, _ = run(capsys, "gen-fakes", "--out", tmp_path / "g", "--bundle",
                     trained_a[2] / "backbones/generator-A.zip", "--count", 200)
    assert rc == 0 and json.loads(out)["records"] == 200
    assert time.perf_counter() - t < 300
