"""Binary real/fake classifier over inversion features.

Every mode consumes the 9-channel stack from :mod:`invdetect.pipeline` and
reads only what it needs: ``rgb`` the image, ``residual`` the absolute
reconstruction error, ``full`` all nine channels.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import read_archive, write_archive, CheckpointError
from .metrics import ScoreSet, auroc
from .pipeline import FeatureSet
from .seeding import hash_arrays, sha256_bytes, canonical_json, substream

log = logging.getLogger(__name__)

MODES = {"rgb": 3, "residual": 3, "full": 9}
DETECTOR_VERSION = 1


class DetectorTrainingError(RuntimeError):
    pass


def select_inputs(features, mode: str) -> torch.Tensor:
    """Mode input from a 9-channel stack, or pass through an already mode-shaped input."""
    if mode not in MODES:
        raise ValueError(f"unknown detector mode {mode!r}; expected one of {sorted(MODES)}")
    f = torch.as_tensor(np.ascontiguousarray(features, dtype=np.float32))
    if f.ndim == 3:
        f = f[None]
    if f.ndim != 4:
        raise ValueError(f"features must be (N, C, H, W); got shape {tuple(f.shape)}")
    c = f.shape[1]
    if c == MODES[mode] and c != 9:
        return f
    if c != 9:
        raise ValueError(f"mode {mode} expects 9-channel stacks or {MODES[mode]}-channel inputs, got {c}")
    if mode == "rgb":
        return f[:, 0:3]
    if mode == "residual":
        return (f[:, 0:3] - f[:, 6:9]).abs()
    return f


@dataclass
class DetectorConfig:
    width: int = 16
    blocks: int = 4
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    epochs: int = 25
    batch_size: int = 64
    predict_batch: int = 256
    input_norm: str = "whiten"  # "whiten" (ZCA over channels, fitted on training inputs) or "none"
    whiten_eps: float = 1e-4

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.input_norm not in ("whiten", "none"):
            raise ValueError(f"input_norm must be 'whiten' or 'none', got {self.input_norm!r}")
        if self.epochs < 1 or self.blocks < 1 or self.width < 1:
            raise ValueError("epochs, blocks and width must be positive")


class _Block(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.c1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.b1 = nn.BatchNorm2d(cout)
        self.c2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.b2 = nn.BatchNorm2d(cout)
        self.skip = (nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))
                     if stride != 1 or cin != cout else nn.Identity())

    def forward(self, x):
        h = F.relu(self.b1(self.c1(x)))
        return F.relu(self.b2(self.c2(h)) + self.skip(x))


class ChannelWhitening(nn.Module):
    """Fixed per-pixel affine map ``W (x - mean)`` across channels; identity until fitted."""

    def __init__(self, c: int):
        super().__init__()
        self.register_buffer("mean", torch.zeros(c))
        self.register_buffer("W", torch.eye(c))

    @torch.no_grad()
    def fit(self, x: torch.Tensor, eps: float) -> None:
        c = x.shape[1]
        flat = x.transpose(0, 1).reshape(c, -1).double()
        mu = flat.mean(dim=1)
        cov = torch.cov(flat)
        w, V = torch.linalg.eigh(cov)
        W = V @ torch.diag(1 / torch.sqrt(w.clamp_min(0) + eps)) @ V.T
        self.mean.copy_(mu.float())
        self.W.copy_(W.float())

    def forward(self, x):
        return torch.einsum("ij,njhw->nihw", self.W, x - self.mean[None, :, None, None])


class DetectorNet(nn.Module):
    """Channel whitening, then a small residual CNN: stem, ``blocks`` residual blocks,
    global average pool, linear head."""

    def __init__(self, cin: int, width: int = 32, blocks: int = 4):
        super().__init__()
        self.norm = ChannelWhitening(cin)
        self.stem = nn.Sequential(nn.Conv2d(cin, width, 3, 1, 1, bias=False), nn.BatchNorm2d(width), nn.ReLU())
        layers, w = [], width
        for i in range(blocks):
            down = i in (1, 2)
            layers.append(_Block(w, w * 2 if down else w, 2 if down else 1))
            w = w * 2 if down else w
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(w, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x):
        return self.head(self.body(self.stem(self.norm(x))).mean(dim=(2, 3))).squeeze(1)


@dataclass
class DetectorBundle:
    net: DetectorNet
    mode: str
    config: DetectorConfig
    fingerprint: dict = field(default_factory=dict)
    val_auroc: float | None = None
    selected_epoch: int | None = None
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        cin = self.net.stem[0].in_channels
        if cin != MODES[self.mode]:
            raise ValueError(f"mode {self.mode} needs {MODES[self.mode]} input channels, network has {cin}")

    @property
    def in_channels(self) -> int:
        return MODES[self.mode]

    def content_hash(self) -> str:
        arrays = {k: v.detach().numpy() for k, v in self.net.state_dict().items()}
        return sha256_bytes(hash_arrays(arrays).encode(), canonical_json(self._header()))

    def _header(self) -> dict:
        return {"mode": self.mode, "config": asdict(self.config), "fingerprint": self.fingerprint,
                "val_auroc": self.val_auroc, "selected_epoch": self.selected_epoch,
                "history": self.history}


def init_detector(mode: str, config: DetectorConfig, seed: int) -> DetectorBundle:
    torch.manual_seed(int(substream(seed, f"detector/init/{mode}").integers(2**62)))
    net = DetectorNet(MODES[mode], config.width, config.blocks).eval()
    return DetectorBundle(net, mode, config, fingerprint={"seed": int(seed)})


@torch.no_grad()
def predict_logits(features, det: DetectorBundle) -> np.ndarray:
    """Logits for a batch, computed in fixed-size chunks of the given order."""
    det.net.eval()
    x = select_inputs(features, det.mode)
    bs = det.config.predict_batch
    out = [det.net(x[i:i + bs]) for i in range(0, len(x), bs)]
    return (torch.cat(out) if out else torch.zeros(0)).numpy().astype(np.float32)


def predict_logit(features, det: DetectorBundle) -> float:
    return float(predict_logits(np.asarray(features)[None], det)[0])


def sigmoid(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    return np.where(z >= 0, 1 / (1 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1 + np.exp(-np.abs(z))))


def bce_loss(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy on logits (fake = 1)."""
    return F.binary_cross_entropy_with_logits(logits, y.to(logits.dtype))


def select_checkpoint(val_scores) -> int:
    """Index of the best validation score; ties go to the earliest epoch."""
    scores = list(val_scores)
    if not scores:
        raise ValueError("no validation scores")
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return best


def _balanced_batches(y: np.ndarray, batch_size: int, rng: np.random.Generator):
    """One epoch of half-real/half-fake batches; the minority class is cycled."""
    pos, neg = np.flatnonzero(y == 1), np.flatnonzero(y == 0)
    half = max(1, batch_size // 2)
    n_batches = math.ceil(max(len(pos), len(neg)) / half)
    def stream(idx):
        need = n_batches * half
        reps = [rng.permutation(idx) for _ in range(math.ceil(need / len(idx)))]
        return np.concatenate(reps)[:need]
    p, n = stream(pos), stream(neg)
    for b in range(n_batches):
        yield np.concatenate([p[b * half:(b + 1) * half], n[b * half:(b + 1) * half]])


def _check_labels(y, what):
    y = np.asarray(y)
    if len(y) == 0 or y.min() == y.max():
        raise ValueError(f"{what} split must contain both real and fake examples "
                         f"(got {int((y == 0).sum())} real, {int((y == 1).sum())} fake)")


def train_detector(train: FeatureSet, val: FeatureSet, mode: str, config: DetectorConfig | None = None,
                   seed: int = 0, val_score_fn: Callable | None = None, progress=None) -> DetectorBundle:
    """Adam on mean BCE with balanced batches; keeps the epoch with best validation AUROC.

    ``val_score_fn(epoch, bundle) -> float`` replaces the validation AUROC when given.
    """
    config = config or DetectorConfig()
    _check_labels(train.labels, "training")
    _check_labels(val.labels, "validation")
    torch.use_deterministic_algorithms(True)
    det = init_detector(mode, config, seed)
    det.fingerprint.update({"train_hash": hash_arrays({"x": train.features, "y": train.labels}),
                            "val_hash": hash_arrays({"x": val.features, "y": val.labels}),
                            "n_train": len(train), "n_val": len(val), "bundle_hash": train.bundle_hash})
    X = select_inputs(train.features, mode)
    if config.input_norm == "whiten":
        det.net.norm.fit(X, config.whiten_eps)
    Y = torch.as_tensor(train.labels, dtype=torch.float32)
    opt = torch.optim.Adam(det.net.parameters(), lr=config.lr, betas=config.betas,
                           weight_decay=config.weight_decay)
    rng = substream(seed, f"detector/batches/{mode}")
    states, val_scores = [], []
    for ep in range(config.epochs):
        det.net.train()
        tot, n = 0.0, 0
        for step, idx in enumerate(_balanced_batches(train.labels, config.batch_size, rng)):
            loss = bce_loss(det.net(X[idx]), Y[idx])
            if not torch.isfinite(loss):
                raise DetectorTrainingError(f"{mode}: non-finite loss at epoch {ep}, step {step}")
            opt.zero_grad(); loss.backward(); opt.step()
            tot += loss.item() * len(idx); n += len(idx)
        det.net.eval()
        if val_score_fn is not None:
            v = float(val_score_fn(ep, det))
        else:
            v = auroc(ScoreSet.from_arrays(val.labels, predict_logits(val.features, det)))
        val_scores.append(v)
        states.append(copy.deepcopy(det.net.state_dict()))
        det.history.append({"epoch": ep, "train_loss": tot / n, "val_auroc": v})
        if progress:
            progress(mode, ep, tot / n, v)
    best = select_checkpoint(val_scores)
    det.net.load_state_dict(states[best])
    det.net.eval()
    det.val_auroc, det.selected_epoch = val_scores[best], best
    return det


def score_features(fs: FeatureSet, det: DetectorBundle) -> ScoreSet:
    if len(fs) == 0:
        log.warning("scoring an empty feature set")
        return ScoreSet()
    scores = sigmoid(predict_logits(fs.features, det))
    return ScoreSet.from_arrays(fs.labels, scores, ids=fs.ids, generators=fs.generators)


def score_manifest(manifest, det: DetectorBundle, ctx, records=None, corruption=None, seed: int = 0) -> ScoreSet:
    """Clean (or corrupted) features for each record, scored. Unreadable files land in ``.omitted``."""
    from .pipeline import extract_features
    recs = list(manifest) if records is None else list(records)
    if not recs:
        log.warning("empty manifest: nothing to score")
        return ScoreSet()
    fs = extract_features(manifest, ctx, records=recs, corruption=corruption, seed=seed)
    out = score_features(fs, det)
    out.omitted = list(fs.skipped)
    return out


def save_detector(det: DetectorBundle, path) -> str:
    arrays = {k: v.detach().numpy().copy() for k, v in det.net.state_dict().items()}
    header = {"kind": "detector", "version": DETECTOR_VERSION, **det._header()}
    return write_archive(path, header, arrays)


def load_detector(path) -> DetectorBundle:
    header, arrays = read_archive(path)
    if header.get("kind") != "detector":
        raise CheckpointError(f"{path}: not a detector checkpoint")
    cfg = DetectorConfig(**header["config"])
    net = DetectorNet(MODES[header["mode"]], cfg.width, cfg.blocks)
    net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    return DetectorBundle(net.eval(), header["mode"], cfg, header["fingerprint"], header["val_auroc"],
                          header["selected_epoch"], header["history"])
