"""Desk-scale latent diffusion backbone.

A small deterministic autoencoder (encoder/decoder), a class-conditional noise
predictor over the latent grid, and a conditioner (image classifier plus a
learned embedding table) that stands in for a captioner + text embedder.

Anything implementing :class:`LatentBackbone` can be used by the inversion
pipeline, which is how an out-of-process Stable Diffusion bridge would plug in.
"""

from __future__ import annotations

import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import ddim
from .seeding import canonical_json, hash_arrays, sha256_bytes, substream, torch_generator

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class UntrainedBundleError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ConditionerOutput:
    label: int
    embedding: np.ndarray


@runtime_checkable
class LatentBackbone(Protocol):
    """What the inversion pipeline needs from a latent diffusion model.

    Arrays are float32 numpy with a leading batch axis: images ``(N, *pixel_shape)``
    in [-1, 1], latents ``(N, *latent_shape)``, conditioning ``(N, cond_dim)``.
    """

    pixel_shape: tuple
    latent_shape: tuple
    cond_dim: int

    def encode(self, x: np.ndarray) -> np.ndarray: ...

    def decode(self, z: np.ndarray) -> np.ndarray: ...

    def eps(self, z: np.ndarray, t: int, c: np.ndarray) -> np.ndarray: ...

    def condition(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (labels or caption ids, conditioning vectors) for a batch."""
        ...

    def fingerprint(self) -> str: ...


@dataclass
class BackboneConfig:
    name: str = "generator-A"
    image_size: int = 32
    image_channels: int = 3
    latent_channels: int = 4
    n_classes: int = 8
    cond_dim: int = 16
    ae_width: int = 64
    den_width: int = 48
    den_blocks: int = 3
    cls_width: int = 16
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    schedule: str = "scaled_linear"
    ae_epochs: int = 30
    den_epochs: int = 60
    cls_epochs: int = 25
    batch_size: int = 64
    ae_batch_size: int = 32
    lr: float = 3e-3
    den_lr: float = 2e-3

    @property
    def latent_size(self) -> int:
        return self.image_size // 4

    def schedule_obj(self, K: int = 50) -> ddim.NoiseSchedule:
        return ddim.build_schedule(self.T, self.beta_start, self.beta_end, self.schedule, K)


# ---------------------------------------------------------------- networks

def _zero_bias(m: nn.Module):
    for mod in m.modules():
        if isinstance(mod, (nn.Conv2d, nn.Linear)) and mod.bias is not None:
            nn.init.zeros_(mod.bias)


class Encoder(nn.Module):
    """Space-to-depth by 4, then convolutions on the latent grid."""

    def __init__(self, cin, width, zch):
        super().__init__()
        self.net = nn.Sequential(
            nn.PixelUnshuffle(4),
            nn.Conv2d(16 * cin, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, zch, 1),
        )
        _zero_bias(self)

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    """Convolutions on the latent grid, depth-to-space by 4, and a light full-res refinement."""

    def __init__(self, zch, width, cout):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(zch, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, 16 * cout, 1),
            nn.PixelShuffle(4),
        )
        self.refine = nn.Sequential(
            nn.Conv2d(cout, 8, 3, padding=1), nn.SiLU(), nn.Conv2d(8, cout, 3, padding=1))
        _zero_bias(self)

    def forward(self, z):
        x = self.net(z)
        return x + self.refine(x)


def timestep_embedding(t: torch.Tensor, dim: int, T: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = (t.float() * (1000.0 / T))[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, width, emb_dim):
        super().__init__()
        self.n1 = nn.GroupNorm(8, width)
        self.c1 = nn.Conv2d(width, width, 3, padding=1)
        self.film = nn.Linear(emb_dim, 2 * width)
        self.n2 = nn.GroupNorm(8, width)
        self.c2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, h, emb):
        scale, shift = self.film(emb)[:, :, None, None].chunk(2, dim=1)
        r = self.c1(F.silu(self.n1(h)))
        r = self.n2(r) * (1 + scale) + shift
        r = self.c2(F.silu(r))
        return h + r


class Denoiser(nn.Module):
    """Noise predictor eps(z_t, t, c) over the latent grid; output layer starts at zero."""

    def __init__(self, zch, width, cond_dim, T, blocks=3):
        super().__init__()
        self.T = T
        emb = 4 * width
        self.t_mlp = nn.Sequential(nn.Linear(width, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.c_proj = nn.Linear(cond_dim, emb)
        self.inp = nn.Conv2d(zch, width, 3, padding=1)
        self.blocks = nn.ModuleList([ResBlock(width, emb) for _ in range(blocks)])
        self.out_norm = nn.GroupNorm(8, width)
        self.out = nn.Conv2d(width, zch, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.width = width

    def forward(self, z, t, c):
        emb = self.t_mlp(timestep_embedding(t, self.width, self.T)) + self.c_proj(c)
        emb = F.silu(emb)
        h = self.inp(z)
        for b in self.blocks:
            h = b(h, emb)
        return self.out(F.silu(self.out_norm(h)))


class LabelClassifier(nn.Module):
    def __init__(self, cin, width, n_classes, image_size=32):
        super().__init__()
        w = width
        self.net = nn.Sequential(
            nn.Conv2d(cin, w, 3, padding=1), nn.BatchNorm2d(w), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(w, 2 * w, 3, padding=1), nn.BatchNorm2d(2 * w), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(2 * w, 4 * w, 3, padding=1), nn.BatchNorm2d(4 * w), nn.ReLU(), nn.MaxPool2d(2),
            nn.Flatten(), nn.Linear(4 * w * (image_size // 8) ** 2, n_classes),
        )

    def forward(self, x):
        return self.net(x)


# ---------------------------------------------------------------- bundle

@dataclass
class BackboneBundle:
    config: BackboneConfig
    encoder: Encoder
    decoder: Decoder
    denoiser: Denoiser
    classifier: LabelClassifier
    embedding: nn.Embedding
    latent_scale: float = 1.0
    latent_shift: tuple = (0.0, 0.0, 0.0, 0.0)
    trained: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def pixel_shape(self):
        c = self.config
        return (c.image_channels, c.image_size, c.image_size)

    @property
    def latent_shape(self):
        c = self.config
        return (c.latent_channels, c.latent_size, c.latent_size)

    @property
    def cond_dim(self):
        return self.config.cond_dim

    # -- LatentBackbone -------------------------------------------------
    @torch.no_grad()
    def encode(self, x: np.ndarray) -> np.ndarray:
        x = _batched(x, self.pixel_shape, "image")
        z = (self.encoder(torch.from_numpy(x)) - self._shift()) * self.latent_scale
        return z.numpy().astype(np.float32)

    @torch.no_grad()
    def decode(self, z: np.ndarray) -> np.ndarray:
        z = _batched(z, self.latent_shape, "latent")
        x = self.decoder(torch.from_numpy(z) / self.latent_scale + self._shift())
        return x.clamp(-1.0, 1.0).numpy().astype(np.float32)

    def _shift(self) -> torch.Tensor:
        return torch.tensor(self.latent_shift, dtype=torch.float32)[None, :, None, None]

    @torch.no_grad()
    def eps(self, z: np.ndarray, t: int, c: np.ndarray) -> np.ndarray:
        single = np.ndim(z) == len(self.latent_shape)
        zb = _batched(z, self.latent_shape, "latent")
        cb = np.asarray(c, dtype=np.float32).reshape(-1, self.cond_dim)
        if cb.shape[0] == 1 and zb.shape[0] > 1:
            cb = np.repeat(cb, zb.shape[0], axis=0)
        if cb.shape[0] != zb.shape[0]:
            raise ValueError(f"conditioning batch {cb.shape[0]} != latent batch {zb.shape[0]}")
        if not 0 <= int(t) <= self.config.T:
            raise ValueError(f"timestep {t} outside 0..{self.config.T}")
        tt = torch.full((zb.shape[0],), int(t), dtype=torch.long)
        out = self.denoiser(torch.from_numpy(zb), tt, torch.from_numpy(cb)).numpy()
        return out[0] if single else out

    @torch.no_grad()
    def predict_labels(self, x: np.ndarray) -> np.ndarray:
        x = _batched(x, self.pixel_shape, "image")
        return self.classifier(torch.from_numpy(x)).argmax(dim=1).numpy()

    @torch.no_grad()
    def embed_labels(self, labels) -> np.ndarray:
        idx = torch.as_tensor(np.asarray(labels, dtype=np.int64).reshape(-1))
        return self.embedding(idx).numpy().astype(np.float32)

    def condition(self, x: np.ndarray):
        labels = self.predict_labels(x)
        return labels, self.embed_labels(labels)

    def state_arrays(self) -> dict:
        out = {}
        for prefix, mod in self.modules().items():
            for k, v in mod.state_dict().items():
                out[f"{prefix}.{k}"] = v.detach().cpu().numpy().copy()
        return out

    def modules(self) -> dict:
        return {"encoder": self.encoder, "decoder": self.decoder, "denoiser": self.denoiser,
                "classifier": self.classifier, "embedding": self.embedding}

    def fingerprint(self) -> str:
        return sha256_bytes(hash_arrays(self.state_arrays()).encode(),
                            canonical_json(self._header_core()))

    def _header_core(self) -> dict:
        return {"config": asdict(self.config), "latent_scale": float(self.latent_scale),
                "latent_shift": [float(v) for v in self.latent_shift],
                "trained": self.trained, "meta": self.meta}

    def eval(self):
        for m in self.modules().values():
            m.eval()
        return self


def _batched(a, shape, what) -> np.ndarray:
    a = np.asarray(a, dtype=np.float32)
    if a.shape == tuple(shape):
        a = a[None]
    if a.shape[1:] != tuple(shape):
        raise ValueError(f"{what} shape {a.shape} does not match declared {tuple(shape)}")
    return np.ascontiguousarray(a)


def init_bundle(config: BackboneConfig, seed: int) -> BackboneBundle:
    torch.manual_seed(int(substream(seed, "backbone/init").integers(2**62)))
    c = config
    bundle = BackboneBundle(
        config=c,
        encoder=Encoder(c.image_channels, c.ae_width, c.latent_channels),
        decoder=Decoder(c.latent_channels, c.ae_width, c.image_channels),
        denoiser=Denoiser(c.latent_channels, c.den_width, c.cond_dim, c.T, c.den_blocks),
        classifier=LabelClassifier(c.image_channels, c.cls_width, c.n_classes, c.image_size),
        embedding=nn.Embedding(c.n_classes, c.cond_dim),
        latent_shift=(0.0,) * c.latent_channels,
        meta={"seed": int(seed)},
    )
    return bundle.eval()


# module-level operations -------------------------------------------------

def vae_encode(x, bundle: LatentBackbone) -> np.ndarray:
    return bundle.encode(x)


def vae_decode(z, bundle: LatentBackbone) -> np.ndarray:
    return bundle.decode(z)


def denoiser_eps(z_t, t, c, bundle: LatentBackbone) -> np.ndarray:
    return bundle.eps(z_t, t, c)


def eps_fn(bundle: LatentBackbone) -> ddim.EpsFn:
    """Adapt a backbone's noise predictor to the ``eps_fn(z, t, c)`` signature."""
    return lambda z, t, c: bundle.eps(z, t, c)


def conditioner_embed(x, bundle: LatentBackbone) -> ConditionerOutput:
    """Predict a label for one (already augmented) image and return its embedding."""
    labels, emb = bundle.condition(np.asarray(x, dtype=np.float32)[None])
    return ConditionerOutput(int(labels[0]), emb[0])


# ---------------------------------------------------------------- training

def _check_finite(loss: torch.Tensor, phase: str, epoch: int, step: int):
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite {phase} loss at epoch {epoch}, step {step}: {loss.item()}")


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def train_toy_ldm(images: np.ndarray, labels: np.ndarray, config: BackboneConfig, seed: int,
                  data_hash: str | None = None, progress=None) -> BackboneBundle:
    """Train the autoencoder, label classifier and denoiser in sequence.

    Args:
        images: float32 ``(N, C, H, W)`` in [-1, 1].
        labels: int ``(N,)`` class ids in ``0..n_classes-1``.
        config: sizes, schedule and epoch counts. Zero epochs everywhere returns
            the initialised bundle untouched.
        seed: root seed; training is bitwise reproducible for a given seed.

    Returns:
        The trained bundle. ``bundle.meta["log"]`` holds per-epoch mean losses.
    """
    images = np.ascontiguousarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise TrainingError("empty training set")
    if images.shape[1:] != (config.image_channels, config.image_size, config.image_size):
        raise TrainingError(f"image shape {images.shape[1:]} does not match config")
    torch.use_deterministic_algorithms(True)
    bundle = init_bundle(config, seed)
    bundle.meta.update({"data_hash": data_hash or hash_arrays({"x": images, "y": labels}),
                        "n_train": int(len(images)),
                        "epochs": [config.ae_epochs, config.cls_epochs, config.den_epochs]})
    train_log = {"ae": [], "cls": [], "den": []}
    bundle.meta["log"] = train_log
    if config.ae_epochs == 0 and config.den_epochs == 0 and config.cls_epochs == 0:
        return bundle

    X = torch.from_numpy(images)
    Y = torch.from_numpy(labels)
    bs = config.batch_size

    # phase 1: autoencoder
    ae_params = list(bundle.encoder.parameters()) + list(bundle.decoder.parameters())
    opt = torch.optim.Adam(ae_params, lr=config.lr)
    ae_sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=max(1, config.ae_epochs * math.ceil(len(X) / config.ae_batch_size)))
    rng = substream(seed, "backbone/ae")
    bundle.encoder.train(); bundle.decoder.train()
    for ep in range(config.ae_epochs):
        tot = 0.0
        for step, idx in enumerate(_batches(len(X), config.ae_batch_size, rng)):
            xb = X[idx]
            z = bundle.encoder(xb)
            rec = bundle.decoder(z)
            loss = F.mse_loss(rec, xb) + 1e-4 * z.pow(2).mean()
            _check_finite(loss, "autoencoder", ep, step)
            opt.zero_grad(); loss.backward(); opt.step(); ae_sched.step()
            tot += loss.item() * len(idx)
        train_log["ae"].append(tot / len(X))
        if progress:
            progress("ae", ep, train_log["ae"][-1])
    bundle.encoder.eval(); bundle.decoder.eval()

    with torch.no_grad():
        Z = torch.cat([bundle.encoder(X[i:i + 256]) for i in range(0, len(X), 256)])
    if config.ae_epochs > 0:
        mu = Z.mean(dim=(0, 2, 3))
        std = float((Z - mu[None, :, None, None]).std())
        bundle.latent_shift = tuple(float(v) for v in mu)
        bundle.latent_scale = 1.0 / std if std > 0 else 1.0
    Z = (Z - bundle._shift()) * bundle.latent_scale

    # phase 2: label classifier (sees lightly jittered copies so it tolerates augmentation)
    opt = torch.optim.Adam(bundle.classifier.parameters(), lr=config.lr)
    rng = substream(seed, "backbone/cls")
    gen = torch_generator(seed, "backbone/cls-jitter")
    bundle.classifier.train()
    for ep in range(config.cls_epochs):
        tot = 0.0
        for step, idx in enumerate(_batches(len(X), bs, rng)):
            xb = _light_jitter(X[idx], gen)
            loss = F.cross_entropy(bundle.classifier(xb), Y[idx])
            _check_finite(loss, "classifier", ep, step)
            opt.zero_grad(); loss.backward(); opt.step()
            tot += loss.item() * len(idx)
        train_log["cls"].append(tot / len(X))
        if progress:
            progress("cls", ep, train_log["cls"][-1])
    bundle.classifier.eval()

    # phase 3: denoiser + embedding table on frozen latents
    sched = config.schedule_obj(K=1)
    ab = torch.from_numpy(sched.alpha_bar.astype(np.float32))
    params = list(bundle.denoiser.parameters()) + list(bundle.embedding.parameters())
    opt = torch.optim.Adam(params, lr=config.den_lr)
    steps_per_epoch = math.ceil(len(Z) / bs)
    sched_lr = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=max(1, config.den_epochs * steps_per_epoch))
    rng = substream(seed, "backbone/den")
    gen = torch_generator(seed, "backbone/den-noise")
    bundle.denoiser.train(); bundle.embedding.train()
    for ep in range(config.den_epochs):
        tot = 0.0
        for step, idx in enumerate(_batches(len(Z), bs, rng)):
            z0 = Z[idx]
            t = torch.randint(1, config.T + 1, (len(idx),), generator=gen)
            noise = torch.randn(z0.shape, generator=gen)
            a = ab[t][:, None, None, None]
            zt = a.sqrt() * z0 + (1 - a).sqrt() * noise
            c = bundle.embedding(Y[idx])
            loss = F.mse_loss(bundle.denoiser(zt, t, c), noise)
            _check_finite(loss, "denoiser", ep, step)
            opt.zero_grad(); loss.backward(); opt.step(); sched_lr.step()
            tot += loss.item() * len(idx)
        train_log["den"].append(tot / len(Z))
        if progress:
            progress("den", ep, train_log["den"][-1])
    bundle.eval()
    bundle.trained = config.den_epochs > 0
    return bundle


def _light_jitter(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    n = x.shape[0]
    flip = torch.rand(n, generator=gen) < 0.5
    x = torch.where(flip[:, None, None, None], x.flip(3), x)
    gain = 1 + 0.2 * (torch.rand(n, 1, 1, 1, generator=gen) - 0.5)
    gray = torch.rand(n, generator=gen) < 0.2
    x = torch.where(gray[:, None, None, None], x.mean(1, keepdim=True).expand_as(x), x)
    return (x * gain).clamp(-1, 1)


# ---------------------------------------------------------------- sampling

def sample_latent_noise(shape, seed: int) -> np.ndarray:
    return substream(seed, "sample/z_T").standard_normal(shape).astype(np.float32)


def sample_fakes(labels, bundle: BackboneBundle, sched: ddim.NoiseSchedule, seeds) -> np.ndarray:
    """Deterministic DDIM samples for a batch; image ``i`` depends only on ``seeds[i]``."""
    if not bundle.trained:
        raise UntrainedBundleError("bundle has no trained denoiser; train it before sampling")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    seeds = list(seeds)
    if len(seeds) != len(labels):
        raise ValueError("need one seed per label")
    if len(labels) == 0:
        return np.zeros((0,) + bundle.pixel_shape, np.float32)
    zT = np.stack([sample_latent_noise(bundle.latent_shape, s) for s in seeds])
    c = bundle.embed_labels(labels)
    z0 = ddim.reconstruct(zT, c, eps_fn(bundle), sched)
    return bundle.decode(z0)


def sample_fake(c_label: int, bundle: BackboneBundle, sched: ddim.NoiseSchedule, seed: int) -> np.ndarray:
    return sample_fakes([c_label], bundle, sched, [seed])[0]


# ---------------------------------------------------------------- checkpoint io

_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def write_archive(path, header: dict, arrays: dict) -> str:
    """Write a byte-reproducible archive of named arrays plus a JSON header.

    The header gains ``content_hash`` covering both arrays and header.
    """
    path = Path(path)
    header = dict(header)
    header["arrays"] = {k: {"shape": list(v.shape), "dtype": str(v.dtype)} for k, v in sorted(arrays.items())}
    header.pop("content_hash", None)
    digest = sha256_bytes(hash_arrays(arrays).encode(), canonical_json(header))
    header["content_hash"] = digest
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _zip_write(zf, "manifest.json", json.dumps(header, sort_keys=True, indent=1).encode())
        for k in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[k]), allow_pickle=False)
            _zip_write(zf, f"arrays/{k}.npy", buf.getvalue())
    tmp.replace(path)
    return digest


def read_archive(path) -> tuple[dict, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("manifest.json"))
            arrays = {}
            for k in header["arrays"]:
                arrays[k] = np.lib.format.read_array(io.BytesIO(zf.read(f"arrays/{k}.npy")),
                                                     allow_pickle=False)
    except (zipfile.BadZipFile, KeyError) as e:
        raise CheckpointError(f"{path}: malformed archive ({e})") from e
    stored = header.pop("content_hash", None)
    digest = sha256_bytes(hash_arrays(arrays).encode(), canonical_json(header))
    if stored != digest:
        raise CheckpointError(f"{path}: content hash mismatch (stored {stored}, computed {digest})")
    header["content_hash"] = stored
    return header, arrays


def save_bundle(bundle: BackboneBundle, path) -> str:
    header = {"kind": "backbone", "version": CHECKPOINT_VERSION,
              "pixel_shape": list(bundle.pixel_shape), "latent_shape": list(bundle.latent_shape),
              "T": bundle.config.T, "cond_dim": bundle.cond_dim, "fingerprint": bundle.fingerprint(),
              **bundle._header_core()}
    return write_archive(path, header, bundle.state_arrays())


def load_bundle(path) -> BackboneBundle:
    header, arrays = read_archive(path)
    if header.get("kind") != "backbone":
        raise CheckpointError(f"{path}: not a backbone checkpoint")
    cfg = BackboneConfig(**header["config"])
    bundle = init_bundle(cfg, header["meta"].get("seed", 0))
    for prefix, mod in bundle.modules().items():
        sd = {k[len(prefix) + 1:]: torch.from_numpy(v.copy()) for k, v in arrays.items()
              if k.startswith(prefix + ".")}
        mod.load_state_dict(sd)
    bundle.latent_scale = header["latent_scale"]
    bundle.latent_shift = tuple(header["latent_shift"])
    bundle.trained = header["trained"]
    bundle.meta = header["meta"]
    return bundle.eval()


def with_config(config: BackboneConfig, **overrides) -> BackboneConfig:
    return replace(config, **overrides)
