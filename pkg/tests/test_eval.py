import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from invdetect import backbone as bb
from invdetect import imageops, metrics as M
from invdetect.corruption import DEFAULT_GRID, CorruptionSpec, corrupt, parse_corruption
from invdetect.detector import DetectorConfig, score_manifest, train_detector
from invdetect.evaluation import PAPER_CONTEXT, EvaluationError, evaluate, fid, kid, vae_features
from invdetect.manifest import DatasetManifest, ManifestError, Record, read_manifest, write_manifest
from invdetect.pipeline import PipelineContext, extract_features, preprocess
from invdetect.toydata import render


def toy(seed, c=0):
    return preprocess(render(c, np.random.default_rng(seed)))


# ---------------------------------------------------------------- manifests

class TestManifest:
    def test_roundtrip_and_separators(self, tmp_path):
        recs = [Record("a", "x\\a.png", "real", split="test"), Record("b", "x/b.png", "fake", "g", "test")]
        write_manifest(tmp_path / "m.jsonl", recs)
        m = read_manifest(tmp_path / "m.jsonl")
        assert [r.path for r in m] == ["x/a.png", "x/b.png"]
        assert m.root == tmp_path
        assert len(m.filter(label="fake")) == 1

    def test_duplicate_ids(self):
        with pytest.raises(ManifestError, match="duplicate"):
            DatasetManifest([Record("a", "p", "real"), Record("a", "q", "fake")])

    def test_pair_ids(self):
        DatasetManifest([Record("a", "p", "real", pair_id="1"), Record("b", "q", "fake", pair_id="1")])
        with pytest.raises(ManifestError, match="pair"):
            DatasetManifest([Record("a", "p", "real", pair_id="1"), Record("b", "q", "real", pair_id="1")])
        with pytest.raises(ManifestError, match="pair"):
            DatasetManifest([Record("a", "p", "real", pair_id="1")])

    @pytest.mark.parametrize("kw", [dict(label="maybe"), dict(split="dev"), dict(path="/abs.png")])
    def test_bad_record(self, kw):
        with pytest.raises(ManifestError):
            Record(**{"id": "a", "path": "p", "label": "real", **kw})

    def test_bad_lines(self, tmp_path):
        p = tmp_path / "m.jsonl"
        p.write_text('{"id": "a", "path": "p", "label": "real", "colour": 3}\n')
        with pytest.raises(ManifestError, match=":1"):
            read_manifest(p)
        p.write_text("{nope\n")
        with pytest.raises(ManifestError):
            read_manifest(p)


# ---------------------------------------------------------------- FID / KID

class TestDistances:
    def test_identical_sets(self):
        a = np.random.default_rng(0).standard_normal((300, 4))
        assert fid(a, a) == pytest.approx(0, abs=1e-9)
        assert abs(kid(a, a)) < 1e-6

    def test_gaussian_shift(self):
        rng = np.random.default_rng(1)
        m = np.array([1.0, -2.0, 0.5])
        a = rng.standard_normal((40000, 3))
        b = rng.standard_normal((40000, 3)) + m
        assert fid(a, b) == pytest.approx(m @ m, rel=0.02)

    def test_scaled_covariance_closed_form(self):
        # N(0, I) vs N(0, 4I) in R^d: FID = d * (1 + 4 - 2*2) = d
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal((50000, 2)), 2 * rng.standard_normal((50000, 2))
        assert fid(a, b) == pytest.approx(2.0, rel=0.03)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10**6))
    def test_fid_symmetric_nonneg(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((30, 3))
        b = rng.standard_normal((25, 3)) * rng.uniform(0.5, 2) + rng.standard_normal(3)
        f1, f2 = fid(a, b), fid(b, a)
        assert f1 >= 0 and f1 == pytest.approx(f2, rel=1e-6, abs=1e-9)

    def test_kid_unbiased_on_same_distribution(self):
        rng = np.random.default_rng(3)
        ks = np.array([kid(rng.standard_normal((50, 4)), rng.standard_normal((50, 4))) for _ in range(200)])
        assert (ks < 0).any()  # unbiased estimator: negative values occur
        assert abs(ks.mean()) < 3 * ks.std() / np.sqrt(len(ks))

    def test_kid_matches_pairwise_oracle(self):
        rng = np.random.default_rng(4)
        r, f = rng.standard_normal((7, 3)), rng.standard_normal((9, 3)) + 0.3
        m, d = 7, 3
        k = lambda x, y: (x @ y / d + 1) ** 3
        tot = 0.0
        for i in range(m):
            for j in range(m):
                if i != j:
                    tot += k(r[i], r[j]) + k(f[i], f[j]) - 2 * k(r[i], f[j])
        assert kid(r, f) == pytest.approx(tot / (m * (m - 1)), rel=1e-12)

    def test_errors_and_clamp(self):
        with pytest.raises(ValueError):
            fid(np.zeros((3, 4)), np.zeros((10, 4)))
        with pytest.raises(ValueError):
            kid(np.zeros((1, 2)), np.zeros((5, 2)))
        # rank-deficient covariances go through the clamp path without failing
        a = np.random.default_rng(0).standard_normal((10, 1)) @ np.ones((1, 3))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            assert math.isfinite(fid(a, a + 1))

    def test_default_extractor(self):
        b = bb.init_bundle(bb.BackboneConfig(), 0)
        X = np.stack([toy(s, s % 8) for s in range(5)])
        assert vae_features(X, b).shape == (5, 4)


# ---------------------------------------------------------------- corruptions

class TestCorrupt:
    def test_identities(self):
        x = toy(0)
        rng = np.random.default_rng(0)
        np.testing.assert_array_equal(corrupt(x, CorruptionSpec("noise", 0.0), rng), x)
        np.testing.assert_array_equal(corrupt(x, CorruptionSpec("crop", 1.0), rng), x)

    def test_jpeg_not_idempotent_composition(self):
        x = toy(1, 3)
        rng = np.random.default_rng(0)
        twice = corrupt(corrupt(x, CorruptionSpec("jpeg", 30), rng), CorruptionSpec("jpeg", 90), rng)
        once = corrupt(x, CorruptionSpec("jpeg", 90), rng)
        assert imageops.to_uint8_hwc(twice).tobytes() != imageops.to_uint8_hwc(once).tobytes()

    @pytest.mark.parametrize("kind,sev", DEFAULT_GRID)
    def test_grid_deterministic_in_range(self, kind, sev):
        x = toy(2, 5)
        spec = CorruptionSpec(kind, sev)
        a = corrupt(x, spec, np.random.default_rng(7))
        b = corrupt(x, spec, np.random.default_rng(7))
        assert np.array_equal(a, b) and a.shape == x.shape
        assert a.min() >= -1 and a.max() <= 1
        assert not np.array_equal(a, x)

    def test_severity_monotone_blur(self):
        x = toy(3, 2)
        e = [np.abs(corrupt(x, CorruptionSpec("blur", s), None) - x).mean() for s in (0.5, 1, 2)]
        assert e[0] < e[1] < e[2]

    @pytest.mark.parametrize("bad", [("smudge", 1), ("jpeg", 0), ("crop", 1.5), ("noise", -0.1)])
    def test_validation(self, bad):
        with pytest.raises(ValueError):
            CorruptionSpec(*bad)

    def test_parse(self):
        s = parse_corruption("jpeg:75")
        assert s == CorruptionSpec("jpeg", 75.0) and s.tag == "jpeg-75"
        assert parse_corruption("noise:0.05").tag == "noise-0.05"
        with pytest.raises(ValueError):
            parse_corruption("jpeg")


# ---------------------------------------------------------------- evaluate()

@pytest.fixture(scope="module")
def eval_setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("evalset")
    (root / "img").mkdir()
    recs = []
    for i in range(24):
        fake = i % 2 == 1
        a = render(i % 8, np.random.default_rng(i))
        if fake:
            a = (a.astype(int) // 2 + 64).astype(np.uint8)  # low-contrast "generator"
        Image.fromarray(a).save(root / f"img/{i:02d}.png")
        split = "train" if i < 16 else "test"
        recs.append(Record(f"r{i:02d}", f"img/{i:02d}.png", "fake" if fake else "real",
                           "g" if fake else "unknown", split, class_label=i % 8))
    man = DatasetManifest(recs, root)
    X = np.stack([toy(s, s % 8) for s in range(32)])
    cfg = bb.BackboneConfig(ae_width=16, den_width=16, den_blocks=1, cls_width=8,
                            ae_epochs=1, den_epochs=1, cls_epochs=1)
    bundle = bb.train_toy_ldm(X, np.arange(32) % 8, cfg, seed=0)
    ctx = PipelineContext(bundle, bundle.config.schedule_obj(4), chunk_size=8)
    tr = extract_features(man, ctx, list(man.filter(split="train")))
    det = train_detector(tr, tr, "full", DetectorConfig(width=8, blocks=2, epochs=3))
    return man, det, ctx


class TestEvaluate:
    def test_no_test_records(self, eval_setup, tmp_path):
        man, det, ctx = eval_setup
        with pytest.raises(EvaluationError):
            evaluate(man.filter(split="train"), det, ctx, tmp_path / "out")
        assert not (tmp_path / "out" / "report.json").exists()

    def test_report_consistency(self, eval_setup, tmp_path):
        man, det, ctx = eval_setup
        rep = evaluate(man, det, ctx, tmp_path, seed=0)
        s = score_manifest(man, det, ctx, records=list(man.filter(split="test")))
        assert rep["metrics"]["auroc"] == pytest.approx(M.auroc(s), abs=1e-12)
        on_disk = json.loads((tmp_path / "report.json").read_text())
        assert on_disk["metrics"] == rep["metrics"]
        assert on_disk["counts"] == {"scored": 8, "fake": 4, "real": 4, "omitted": 0}
        for f in ("roc.csv", "pr.csv", "det.csv", "scores.jsonl", "roc.png", "pr.png", "det.png", "scores_hist.png"):
            assert (tmp_path / f).is_file(), f
        back = M.read_scores(tmp_path / "scores.jsonl")
        assert M.auroc(back) == M.auroc(s)
        roc = M.read_curve_csv(tmp_path / "roc.csv")
        assert M.trapezoid_area(roc[:, 1], roc[:, 2]) == pytest.approx(rep["metrics"]["auroc"], abs=1e-8)
        assert on_disk["schema_version"] == 1
        assert on_disk["fingerprint"]["extractor_version"]
        assert on_disk["paper_context"] == PAPER_CONTEXT

    def test_missing_file_omitted(self, eval_setup, tmp_path):
        man, det, ctx = eval_setup
        recs = list(man) + [Record("ghost", "img/missing.png", "real", split="test")]
        rep = evaluate(DatasetManifest(recs, man.root), det, ctx, tmp_path, figures=False)
        assert rep["counts"]["omitted"] == 1 and rep["omissions"][0]["id"] == "ghost"
        assert not (tmp_path / "roc.png").exists()

    def test_corrupted_run(self, eval_setup, tmp_path):
        man, det, ctx = eval_setup
        rep = evaluate(man, det, ctx, tmp_path, corruption=CorruptionSpec("jpeg", 75), seed=1, figures=False)
        assert rep["fingerprint"]["corruption"] == {"kind": "jpeg", "severity": 75}
        assert all(math.isfinite(v) for v in rep["metrics"].values())

    def test_rerun_identical(self, eval_setup, tmp_path):
        man, det, ctx = eval_setup
        evaluate(man, det, ctx, tmp_path / "a", figures=False)
        evaluate(man, det, ctx, tmp_path / "b", figures=False)
        for f in ("report.json", "roc.csv", "scores.jsonl"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_paper_context_marked_non_reproducible():
    assert "not reproducible" in PAPER_CONTEXT["status"]
    vals = {e["value"] for e in PAPER_CONTEXT["entries"]}
    assert {0.807, 0.360, 93.6, 126.1} <= vals
