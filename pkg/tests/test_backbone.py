import json
import zipfile

import numpy as np
import pytest

from invdetect import backbone as bb
from invdetect import ddim
from invdetect.pipeline import load_image, preprocess
from invdetect.toydata import render
from invdetect.seeding import substream

SMALL = bb.BackboneConfig(ae_width=16, den_width=16, den_blocks=1, cls_width=8,
                          ae_epochs=1, den_epochs=2, cls_epochs=1)


def toy_images(n, seed=0, n_classes=8):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % n_classes
    return np.stack([preprocess(render(int(c), rng)) for c in y]), y


@pytest.fixture(scope="module")
def untrained():
    return bb.init_bundle(bb.BackboneConfig(), seed=0)


@pytest.fixture(scope="module")
def small_trained():
    X, y = toy_images(64)
    return bb.train_toy_ldm(X, y, SMALL, seed=3), X, y


# ---------------------------------------------------------------- untrained contracts

class TestUntrained:
    def test_zero_image_zero_latent(self, untrained):
        z = bb.vae_encode(np.zeros((3, 32, 32), np.float32), untrained)
        np.testing.assert_array_equal(z, 0)

    def test_shapes(self, untrained):
        x = bb.vae_decode(np.zeros((4, 8, 8), np.float32), untrained)
        assert x.shape == (1, 3, 32, 32)
        assert untrained.latent_shape == (4, 8, 8)
        assert bb.vae_encode(np.zeros((5, 3, 32, 32), np.float32), untrained).shape == (5, 4, 8, 8)

    def test_decode_clamps(self, untrained):
        z = 100 * np.random.default_rng(0).standard_normal((3, 4, 8, 8)).astype(np.float32)
        x = untrained.decode(z)
        assert x.min() >= -1 and x.max() <= 1

    def test_encode_deterministic(self, untrained):
        x = toy_images(4)[0]
        assert np.array_equal(untrained.encode(x), untrained.encode(x))

    def test_shape_errors(self, untrained):
        with pytest.raises(ValueError):
            untrained.encode(np.zeros((3, 16, 16), np.float32))
        with pytest.raises(ValueError):
            untrained.decode(np.zeros((3, 8, 8), np.float32))
        with pytest.raises(ValueError):
            untrained.eps(np.zeros((4, 8, 8), np.float32), 1001, np.zeros(16, np.float32))
        with pytest.raises(ValueError):
            untrained.eps(np.zeros((2, 4, 8, 8), np.float32), 5, np.zeros((3, 16), np.float32))

    def test_zero_init_eps_reduces_to_closed_form(self, untrained):
        sched = untrained.config.schedule_obj(10)
        z0 = np.random.default_rng(1).standard_normal((4, 8, 8)).astype(np.float32)
        c = untrained.embed_labels([2])[0]
        e = bb.denoiser_eps(z0, 500, c, untrained)
        np.testing.assert_array_equal(e, 0)
        zT = ddim.invert(z0, c, bb.eps_fn(untrained), sched)
        ab = sched.alpha_bar[-1]
        np.testing.assert_allclose(zT, np.sqrt(ab) * z0, atol=1e-6)

    def test_sampling_untrained_raises(self, untrained):
        with pytest.raises(bb.UntrainedBundleError):
            bb.sample_fake(0, untrained, untrained.config.schedule_obj(5), seed=0)

    def test_embedding_deterministic(self, untrained):
        x = toy_images(3)[0]
        a, b = bb.conditioner_embed(x[0], untrained), bb.conditioner_embed(x[0], untrained)
        assert a.label == b.label
        np.testing.assert_array_equal(a.embedding, b.embedding)
        np.testing.assert_array_equal(a.embedding, untrained.embed_labels([a.label])[0])
        assert a.embedding.shape == (untrained.cond_dim,)


# ---------------------------------------------------------------- small training runs

class TestTraining:
    def test_seeded_determinism(self, small_trained):
        b1, X, y = small_trained
        b2 = bb.train_toy_ldm(X, y, SMALL, seed=3)
        assert b1.fingerprint() == b2.fingerprint()

    def test_different_seed_differs(self, small_trained):
        b1, X, y = small_trained
        assert bb.train_toy_ldm(X, y, SMALL, seed=4).fingerprint() != b1.fingerprint()

    def test_zero_epochs_returns_init(self):
        X, y = toy_images(16)
        cfg = bb.with_config(SMALL, ae_epochs=0, den_epochs=0, cls_epochs=0)
        b = bb.train_toy_ldm(X, y, cfg, seed=5)
        ref = bb.init_bundle(cfg, seed=5)
        a, r = b.state_arrays(), ref.state_arrays()
        assert a.keys() == r.keys()
        assert all(np.array_equal(a[k], r[k]) for k in a)
        assert not b.trained

    def test_empty_dataset(self):
        with pytest.raises(bb.TrainingError):
            bb.train_toy_ldm(np.zeros((0, 3, 32, 32), np.float32), np.zeros(0, int), SMALL, seed=0)

    def test_nonfinite_loss_aborts(self):
        X, y = toy_images(16)
        X[0, 0, 0, 0] = np.nan
        with pytest.raises(bb.TrainingError, match="non-finite"):
            bb.train_toy_ldm(X, y, SMALL, seed=0)

    def test_checkpoint_roundtrip(self, small_trained, tmp_path):
        b, X, _ = small_trained
        h = bb.save_bundle(b, tmp_path / "b.zip")
        h2 = bb.save_bundle(bb.load_bundle(tmp_path / "b.zip"), tmp_path / "b2.zip")
        assert h == h2
        assert (tmp_path / "b.zip").read_bytes() == (tmp_path / "b2.zip").read_bytes()
        r = bb.load_bundle(tmp_path / "b.zip")
        assert r.fingerprint() == b.fingerprint()
        np.testing.assert_array_equal(r.encode(X[:4]), b.encode(X[:4]))

    def test_checkpoint_tamper_detected(self, small_trained, tmp_path):
        b, _, _ = small_trained
        p = tmp_path / "b.zip"
        bb.save_bundle(b, p)
        with zipfile.ZipFile(p) as zf:
            items = {n: zf.read(n) for n in zf.namelist()}
        head = json.loads(items["manifest.json"])
        head["latent_scale"] = 2.0
        items["manifest.json"] = json.dumps(head).encode()
        with zipfile.ZipFile(p, "w") as zf:
            for n, d in items.items():
                zf.writestr(n, d)
        with pytest.raises(bb.CheckpointError, match="hash"):
            bb.load_bundle(p)

    def test_sample_seeding(self, small_trained):
        b = small_trained[0]
        sched = b.config.schedule_obj(5)
        a1, a2 = bb.sample_fake(1, b, sched, 11), bb.sample_fake(1, b, sched, 11)
        assert np.array_equal(a1, a2)
        assert np.linalg.norm(a1 - bb.sample_fake(1, b, sched, 12)) > 0

    def test_batch_sampling_matches_seeds(self, small_trained):
        b = small_trained[0]
        sched = b.config.schedule_obj(5)
        batch = bb.sample_fakes([0, 3], b, sched, [7, 8])
        assert batch.shape == (2, 3, 32, 32)
        assert np.abs(batch[1] - bb.sample_fake(3, b, sched, 8)).max() < 1e-5


# ---------------------------------------------------------------- trained generator A (default config)

def _held_out_reals(manifest, size=32):
    recs = [r for r in manifest.filter(split="test", label="real")]
    X = np.stack([preprocess(load_image(manifest.resolve(r)), size) for r in recs])
    return X, np.array([r.class_label for r in recs])


def _fakes(manifest, gen="generator-A", split="test"):
    recs = [r for r in manifest.filter(split=split, label="fake") if r.generator == gen]
    X = np.stack([preprocess(load_image(manifest.resolve(r))) for r in recs])
    return X, np.array([r.class_label for r in recs])


@pytest.fixture(scope="module")
def per_class_errors(trained_a):
    """Pixel reconstruction error of 48 A-fakes under every class embedding, shape (classes, n)."""
    b, man, _ = trained_a
    X, y = _fakes(man)
    X, y = X[:48], y[:48]
    sched = b.config.schedule_obj(50)
    f = bb.eps_fn(b)
    z0 = b.encode(X)
    err = []
    for k in range(b.config.n_classes):
        c = b.embed_labels([k] * len(X))
        xr = b.decode(ddim.reconstruct(ddim.invert(z0, c, f, sched), c, f, sched))
        err.append(np.abs(xr - X).mean(axis=(1, 2, 3)))
    return np.stack(err), y


@pytest.mark.slow
class TestTrainedA:
    def test_denoiser_loss_decreases(self, trained_a):
        log = trained_a[0].meta["log"]
        assert log["den"][-1] < log["den"][0]
        assert log["ae"][-1] < log["ae"][0]

    def test_reconstruction_error(self, trained_a):
        b, man, _ = trained_a
        X, _ = _held_out_reals(man)
        rec = b.decode(b.encode(X))
        rel = np.linalg.norm(rec - X) / np.linalg.norm(X)
        assert rel < 0.15

    def test_decode_zero_flat(self, trained_a):
        b, man, _ = trained_a
        X, _ = _held_out_reals(man)
        flat = b.decode(np.zeros(b.latent_shape, np.float32))[0]
        assert flat.std() < X.std(axis=(1, 2, 3)).mean()

    def test_label_accuracy(self, trained_a):
        b, man, _ = trained_a
        X, y = _held_out_reals(man)
        assert (b.predict_labels(X) == y).mean() > 0.8

    def test_conditioning_sensitivity(self, trained_a):
        b = trained_a[0]
        z = substream(0, "test/z").standard_normal((16,) + b.latent_shape).astype(np.float32)
        e0 = b.eps(z, 400, b.embed_labels([0] * 16))
        e1 = b.eps(z, 400, b.embed_labels([1] * 16))
        assert np.all(np.linalg.norm((e0 - e1).reshape(16, -1), axis=1) > 0)

    def test_other_embedding_changes_reconstruction(self, trained_a):
        b, man, _ = trained_a
        X, _ = _held_out_reals(man)
        X = X[:64]
        sched = b.config.schedule_obj(50)
        pred, c = b.condition(X)
        alt = b.embed_labels((pred + 1) % b.config.n_classes)
        z0 = b.encode(X)
        f = bb.eps_fn(b)
        r_pred = ddim.reconstruct(ddim.invert(z0, c, f, sched), c, f, sched)
        r_alt = ddim.reconstruct(ddim.invert(z0, alt, f, sched), alt, f, sched)
        diff = np.linalg.norm((r_pred - r_alt).reshape(len(X), -1), axis=1)
        assert (diff > 0).mean() >= 0.9

    def test_own_embedding_lower_error_on_average(self, per_class_errors):
        err, y = per_class_errors
        own = err[y, np.arange(len(y))]
        others = (err.sum(0) - own) / (len(err) - 1)
        assert np.mean(own - others) < 0

    # Invert-then-reconstruct tends to the identity for any embedding as the
    # step count grows, so the per-sample argmin only sees discretization error.
    # Measured: 0.125 of fakes (chance) at K=50, 0.17 at K=200.
    @pytest.mark.xfail(strict=True, reason="per-sample argmin over embeddings is near chance on the toy backbone")
    def test_class_fake_prefers_own_embedding(self, per_class_errors):
        err, y = per_class_errors
        assert (np.argmin(err, axis=0) == y).mean() > 0.5

    def test_fakes_reconstruct_better_than_reals(self, trained_a):
        summary = json.loads((trained_a[2] / "summary.json").read_text())
        cs = summary["core_signal"]
        assert cs["fake"]["n"] >= 200 and cs["real"]["n"] >= 200
        assert cs["fake"]["mean_residual"] < cs["real"]["mean_residual"]
