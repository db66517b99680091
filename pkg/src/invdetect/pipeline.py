"""Image → inversion feature stack.

For each image: condition on the (augmented) image, encode, DDIM-invert to a
noise latent, reconstruct, and decode both latents. The detector input is the
9-channel stack ``(x, D(z_T_hat), D(z_0_hat))``.

Feature extraction runs in fixed chunks of manifest order. CPU convolution
results can shift in the last bits with batch composition, so chunking is part
of the determinism contract and the chunk is the cache unit.
"""

from __future__ import annotations

import io
import json
import logging
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
import multiprocessing as mp
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from . import ddim, imageops
from .backbone import LatentBackbone, eps_fn
from .corruption import CorruptionSpec, corrupt
from .manifest import DatasetManifest, Record
from .seeding import canonical_json, sha256_bytes, substream_seed

log = logging.getLogger(__name__)

FEATURE_VERSION = 1
CHANNEL_ORDER = ("x.r", "x.g", "x.b", "noise.r", "noise.g", "noise.b", "recon.r", "recon.g", "recon.b")
CACHE_ENV = "INVDETECT_CACHE"


class DataError(RuntimeError):
    """An input image could not be read or decoded."""


# ---------------------------------------------------------------- preprocessing

def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            return _to_array(im)
    except (OSError, UnidentifiedImageError, ValueError) as e:
        raise DataError(f"{path}: {e}") from e


def _to_array(im: Image.Image) -> np.ndarray:
    if im.mode in ("RGBA", "LA", "P", "PA"):
        im = im.convert("RGBA" if im.mode in ("RGBA", "P", "PA") else "LA")
    if im.mode == "I;16":
        im = im.point(lambda v: v / 256).convert("L")
    return np.asarray(im)


def preprocess(raw, size: int = 32) -> np.ndarray:
    """Decoded pixel buffer → float32 ``(3, size, size)`` in [-1, 1].

    Accepts a PIL image or a uint8 array of shape (H, W) or (H, W, 1..4).
    Grayscale is replicated; alpha is dropped. Shortest side is resized to
    ``size`` (bicubic), then centre-cropped to a square.
    """
    a = _to_array(raw) if isinstance(raw, Image.Image) else np.asarray(raw)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3 or a.shape[0] < 1 or a.shape[1] < 1 or not 1 <= a.shape[2] <= 4:
        raise DataError(f"unsupported image buffer of shape {a.shape}")
    if a.dtype != np.uint8:
        raise DataError(f"expected uint8 pixels, got {a.dtype}")
    ch = a.shape[2]
    if ch in (1, 2):
        a = np.repeat(a[..., :1], 3, axis=2)
    elif ch == 4:
        a = a[..., :3]
    h, w = a.shape[:2]
    if (h, w) != (size, size):
        s = size / min(h, w)
        nh, nw = max(size, round(h * s)), max(size, round(w * s))
        a = np.asarray(Image.fromarray(np.ascontiguousarray(a)).resize((nw, nh), Image.BICUBIC))
        top, left = (nh - size) // 2, (nw - size) // 2
        a = a[top:top + size, left:left + size]
    return imageops.from_uint8_hwc(a)


# ---------------------------------------------------------------- augmentation

AUG_ORDER = ("flip", "crop", "jitter", "grayscale", "cutout", "noise", "blur", "jpeg", "rotate")


@dataclass(frozen=True)
class AugmentConfig:
    """Train-time augmentation. Transforms run in :data:`AUG_ORDER`."""

    p_flip: float = 0.5
    p_crop: float = 0.5
    crop_min_area: float = 0.5
    p_jitter: float = 0.5
    jitter_strength: float = 0.2
    p_grayscale: float = 0.1
    p_cutout: float = 0.1
    cutout_frac: float = 0.25
    p_noise: float = 0.1
    noise_sigma: tuple = (0.0, 0.02)
    p_blur: float = 0.1
    blur_sigma: tuple = (0.3, 1.0)
    p_jpeg: float = 0.1
    jpeg_quality: tuple = (70, 95)
    p_rotate: float = 0.1
    rotate_degrees: float = 10.0

    def __post_init__(self):
        for name in AUG_ORDER:
            p = getattr(self, f"p_{name}")
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"p_{name}={p} is not a probability")
        if not 0.5 <= self.crop_min_area <= 1.0:
            raise ValueError("crop_min_area must be in [0.5, 1]: crops keep at least half the area")
        if not 0.0 <= self.cutout_frac <= 1.0:
            raise ValueError("cutout_frac must be in [0, 1]")
        for name in ("noise_sigma", "blur_sigma", "jpeg_quality"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} must be an ordered nonnegative range")
        if not 1 <= self.jpeg_quality[0] <= self.jpeg_quality[1] <= 100:
            raise ValueError("jpeg_quality must lie in [1, 100]")

    @classmethod
    def off(cls) -> "AugmentConfig":
        return cls(**{f"p_{n}": 0.0 for n in AUG_ORDER})

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def augment(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32).copy()
    _, H, W = x.shape
    for name in AUG_ORDER:
        if rng.random() >= getattr(cfg, f"p_{name}"):
            continue
        if name == "flip":
            x = x[:, :, ::-1].copy()
        elif name == "crop":
            area = rng.uniform(cfg.crop_min_area, 1.0)
            h = min(H, max(1, int(round(H * np.sqrt(area)))))
            w = min(W, max(1, int(round(W * np.sqrt(area)))))
            top, left = rng.integers(0, H - h + 1), rng.integers(0, W - w + 1)
            x = imageops.crop_resize(x, top, left, h, w)
        elif name == "jitter":
            s = cfg.jitter_strength
            b, c, sat = rng.uniform(1 - s, 1 + s, 3)
            u = (x + 1) / 2 * b
            u = (u - u.mean()) * c + u.mean()
            g = imageops.grayscale(u)
            u = g + (u - g) * sat
            x = np.clip(u * 2 - 1, -1, 1).astype(np.float32)
        elif name == "grayscale":
            x = imageops.grayscale(x)
        elif name == "cutout":
            side = int(round(cfg.cutout_frac * min(H, W)))
            if side > 0:
                top, left = rng.integers(0, H - side + 1), rng.integers(0, W - side + 1)
                x[:, top:top + side, left:left + side] = 0.0
        elif name == "noise":
            x = imageops.add_noise(x, rng.uniform(*cfg.noise_sigma), rng)
        elif name == "blur":
            x = imageops.blur(x, rng.uniform(*cfg.blur_sigma))
        elif name == "jpeg":
            x = imageops.jpeg(x, int(rng.integers(cfg.jpeg_quality[0], cfg.jpeg_quality[1] + 1)))
        elif name == "rotate":
            x = imageops.rotate(x, rng.uniform(-cfg.rotate_degrees, cfg.rotate_degrees))
    return np.clip(x, -1.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------- triplets

@dataclass
class FeatureTriplet:
    original: np.ndarray
    noise_image: np.ndarray
    recon_image: np.ndarray

    def __post_init__(self):
        shapes = {self.original.shape[-2:], self.noise_image.shape[-2:], self.recon_image.shape[-2:]}
        if len(shapes) != 1:
            raise ValueError(f"triplet parts disagree on H×W: {shapes}")

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.original, self.noise_image, self.recon_image], axis=-3)

    @classmethod
    def from_stacked(cls, a: np.ndarray) -> "FeatureTriplet":
        c = a.shape[-3] // 3
        return cls(a[..., :c, :, :], a[..., c:2 * c, :, :], a[..., 2 * c:, :, :])


def build_feature_batch(x_aug: np.ndarray, bundle: LatentBackbone, sched: ddim.NoiseSchedule,
                        standardize_noise: bool = False) -> np.ndarray:
    """Stacked ``(N, 9, H, W)`` features for a batch of already-augmented images."""
    x_aug = np.ascontiguousarray(x_aug, dtype=np.float32)
    _, c = bundle.condition(x_aug)  # conditioning sees the augmented pixels
    z0 = bundle.encode(x_aug)
    f = eps_fn(bundle)
    zT = ddim.invert(z0, c, f, sched)
    z0_hat = ddim.reconstruct(zT, c, f, sched)
    zT_dec = zT
    if standardize_noise:
        mu = zT.mean(axis=(-2, -1), keepdims=True)
        sd = zT.std(axis=(-2, -1), keepdims=True)
        zT_dec = ((zT - mu) / np.where(sd > 0, sd, 1)).astype(np.float32)
    return FeatureTriplet(x_aug, bundle.decode(zT_dec), bundle.decode(z0_hat)).stacked()


def build_feature_triplet(x_augmented: np.ndarray, bundle: LatentBackbone, sched: ddim.NoiseSchedule,
                          standardize_noise: bool = False) -> FeatureTriplet:
    return FeatureTriplet.from_stacked(
        build_feature_batch(np.asarray(x_augmented)[None], bundle, sched, standardize_noise)[0])


def compute_residual(x: np.ndarray, triplet: FeatureTriplet) -> np.ndarray:
    if np.shape(x) != np.shape(triplet.recon_image):
        raise ValueError(f"shape mismatch: {np.shape(x)} vs {np.shape(triplet.recon_image)}")
    return np.abs(np.asarray(x, np.float32) - triplet.recon_image)


# ---------------------------------------------------------------- feature sets & files

@dataclass
class FeatureSet:
    ids: list
    features: np.ndarray  # (N, 9, H, W) float32
    labels: np.ndarray  # (N,) int, 1 = fake
    generators: list
    aug_seeds: list  # int or None per record
    bundle_hash: str
    skipped: list = field(default_factory=list)  # (id, reason)

    def __len__(self):
        return len(self.ids)

    def subset(self, mask) -> "FeatureSet":
        idx = np.flatnonzero(mask)
        return FeatureSet([self.ids[i] for i in idx], self.features[idx], self.labels[idx],
                          [self.generators[i] for i in idx], [self.aug_seeds[i] for i in idx],
                          self.bundle_hash, list(self.skipped))

    def __add__(self, other: "FeatureSet") -> "FeatureSet":
        return FeatureSet(self.ids + other.ids, np.concatenate([self.features, other.features]),
                          np.concatenate([self.labels, other.labels]),
                          self.generators + other.generators, self.aug_seeds + other.aug_seeds,
                          self.bundle_hash if self.bundle_hash == other.bundle_hash else "mixed",
                          self.skipped + other.skipped)


def write_features(stem, fs: FeatureSet) -> tuple[Path, Path]:
    """Flat little-endian float32 ``<stem>.bin`` plus a ``<stem>.json`` sidecar."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(fs.features, dtype="<f4")
    header = {
        "version": FEATURE_VERSION, "dtype": "float32-le", "shape": list(arr.shape),
        "channel_order": list(CHANNEL_ORDER), "bundle_hash": fs.bundle_hash,
        "records": [{"id": i, "label": int(y), "generator": g, "aug_seed": s}
                    for i, y, g, s in zip(fs.ids, fs.labels, fs.generators, fs.aug_seeds)],
        "skipped": [{"id": i, "reason": r} for i, r in fs.skipped],
    }
    bin_path, json_path = stem.with_suffix(".bin"), stem.with_suffix(".json")
    _atomic_write(bin_path, arr.tobytes())
    _atomic_write(json_path, json.dumps(header, indent=1, sort_keys=True).encode())
    return bin_path, json_path


def read_features(stem) -> FeatureSet:
    stem = Path(stem)
    header = json.loads(stem.with_suffix(".json").read_text())
    if header.get("version") != FEATURE_VERSION:
        raise DataError(f"{stem}: unsupported feature file version {header.get('version')}")
    if tuple(header["channel_order"]) != CHANNEL_ORDER:
        raise DataError(f"{stem}: unexpected channel order {header['channel_order']}")
    arr = np.fromfile(stem.with_suffix(".bin"), dtype="<f4")
    arr = arr.reshape(header["shape"]).astype(np.float32)
    recs = header["records"]
    return FeatureSet([r["id"] for r in recs], arr, np.array([r["label"] for r in recs], dtype=int),
                      [r["generator"] for r in recs], [r["aug_seed"] for r in recs],
                      header["bundle_hash"], [(s["id"], s["reason"]) for s in header["skipped"]])


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


class FeatureCache:
    """Content-addressed store of feature chunks; writes are atomic renames."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.hits = 0
        self.misses = 0

    @classmethod
    def from_env(cls, default=None) -> "FeatureCache | None":
        root = os.environ.get(CACHE_ENV) or default
        return cls(root) if root else None

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.npy"

    def get(self, key: str) -> np.ndarray | None:
        p = self._path(key)
        if p.exists():
            try:
                arr = np.load(p, allow_pickle=False)
            except (OSError, ValueError):
                log.warning("unreadable cache entry %s; recomputing", p.name)
            else:
                self.hits += 1
                return arr
        self.misses += 1
        return None

    def put(self, key: str, arr: np.ndarray) -> None:
        p = self._path(key)
        p.parent.mkdir(parents=True, exist_ok=True)
        buf = io.BytesIO()
        np.save(buf, np.ascontiguousarray(arr, dtype=np.float32), allow_pickle=False)
        _atomic_write(p, buf.getvalue())

    def stats(self) -> dict:
        return {"hits": self.hits, "misses": self.misses}


# ---------------------------------------------------------------- extraction

@dataclass
class PipelineContext:
    bundle: LatentBackbone
    sched: ddim.NoiseSchedule
    standardize_noise: bool = False
    chunk_size: int = 50
    cache: FeatureCache | None = None
    workers: int = 1

    @property
    def image_size(self) -> int:
        return int(self.bundle.pixel_shape[-1])

    def key_base(self) -> dict:
        return {"version": FEATURE_VERSION, "bundle": self.bundle.fingerprint(),
                "schedule": sha256_bytes(canonical_json(self.sched.to_dict())),
                "K": self.sched.K, "standardize_noise": self.standardize_noise,
                "chunk_size": self.chunk_size}


def aug_seed_for(seed: int, record_id: str) -> int:
    return substream_seed(seed, f"augment/{record_id}")


def load_input(rec_path, size: int, corruption: CorruptionSpec | None, corruption_seed: int | None):
    """Read one file, optionally degrade it at native resolution, and preprocess."""
    raw = load_image(rec_path)
    if corruption is not None:
        native = preprocess(raw, size=min(raw.shape[0], raw.shape[1]))
        deg = corrupt(native, corruption, np.random.default_rng(corruption_seed))
        raw = imageops.to_uint8_hwc(deg)
    return preprocess(raw, size)


_WORKER_CTX: PipelineContext | None = None


def _init_worker(ctx):
    global _WORKER_CTX
    _WORKER_CTX = ctx
    torch.set_num_threads(1)


def _worker_compute(x):
    ctx = _WORKER_CTX
    return build_feature_batch(x, ctx.bundle, ctx.sched, ctx.standardize_noise)


def extract_features(manifest: DatasetManifest, ctx: PipelineContext, records: list[Record] | None = None,
                     augment_cfg: AugmentConfig | None = None, seed: int = 0,
                     corruption: CorruptionSpec | None = None) -> FeatureSet:
    """Features for ``records`` (default: the whole manifest), in the given order.

    Unreadable files are skipped and listed in ``FeatureSet.skipped``. With
    ``augment_cfg`` each record gets one augmentation drawn from a per-record
    stream derived from ``(seed, record id)``.
    """
    records = list(manifest) if records is None else list(records)
    size = ctx.image_size
    base = ctx.key_base()
    aug = augment_cfg if augment_cfg is not None and augment_cfg != AugmentConfig.off() else None
    base["augment"] = aug.to_dict() if aug else None
    base["corruption"] = corruption.to_dict() if corruption else None
    base["seed"] = int(seed) if (aug or corruption) else None

    ids, gens, labels, seeds, skipped = [], [], [], [], []
    jobs = []  # (key, x) per chunk
    for start in range(0, len(records), ctx.chunk_size):
        chunk = records[start:start + ctx.chunk_size]
        xs, members = [], []
        for rec in chunk:
            path = manifest.resolve(rec)
            try:
                img_hash = sha256_bytes(path.read_bytes())
                cseed = substream_seed(seed, f"corrupt/{rec.id}") if corruption else None
                x = load_input(path, size, corruption, cseed)
            except (OSError, DataError) as e:
                log.warning("skipping %s: %s", rec.id, e)
                skipped.append((rec.id, str(e)))
                continue
            a_seed = None
            if aug:
                a_seed = aug_seed_for(seed, rec.id)
                x = augment(x, aug, np.random.default_rng(a_seed))
            xs.append(x)
            members.append([img_hash, a_seed])
            ids.append(rec.id); gens.append(rec.generator); labels.append(rec.y); seeds.append(a_seed)
        if xs:
            key = sha256_bytes(canonical_json({**base, "members": members}))
            jobs.append((key, np.stack(xs)))

    results = [None] * len(jobs)
    todo = []
    for j, (key, x) in enumerate(jobs):
        hit = ctx.cache.get(key) if ctx.cache else None
        if hit is not None and hit.shape[0] == len(x):
            results[j] = hit
        else:
            todo.append(j)
    if todo:
        if ctx.workers > 1 and len(todo) > 1:
            with ProcessPoolExecutor(ctx.workers, mp_context=mp.get_context("fork"),
                                     initializer=_init_worker, initargs=(ctx,)) as pool:
                outs = list(pool.map(_worker_compute, [jobs[j][1] for j in todo]))
        else:
            outs = [build_feature_batch(jobs[j][1], ctx.bundle, ctx.sched, ctx.standardize_noise)
                    for j in todo]
        for j, out in zip(todo, outs):
            results[j] = out
            if ctx.cache:
                ctx.cache.put(jobs[j][0], out)
    shape = (0, 9, size, size)
    feats = np.concatenate(results) if results else np.zeros(shape, np.float32)
    return FeatureSet(ids, feats.astype(np.float32, copy=False), np.array(labels, dtype=int),
                      gens, seeds, ctx.bundle.fingerprint(), skipped)
