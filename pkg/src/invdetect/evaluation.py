"""Detector evaluation: metric reports, curve files, figures, FID/KID."""

from __future__ import annotations

import json
import logging
import warnings
from pathlib import Path

import numpy as np

from . import metrics as M
from .corruption import CorruptionSpec, corrupt  # noqa: F401  (re-exported)
from .detector import DetectorBundle, score_manifest
from .manifest import DatasetManifest

log = logging.getLogger(__name__)

REPORT_SCHEMA = 1
EXTRACTOR_VERSION = "toy-vae-meanpool-1"

# Published numbers kept as context only. They come from full-scale models and
# web data, are not reproducible here, and no test compares against them.
PAPER_CONTEXT = {
    "tag": "[PAPER]",
    "status": "context only; not reproducible at desk scale; never compared with computed values",
    "entries": [
        {"table": "Table 3", "what": "detector AUROC, method Ours, SD+LAION training, Imagen eval", "value": 0.807},
        {"table": "Table 2", "what": "FPR@0.8 recall, UFD on DALL-E 3 fakes vs LAION reals, SD+LAION training",
         "value": 0.360},
        {"table": "Table 2", "what": "FID, DALL-E 3 fakes vs reverse-image-search reals", "value": 93.6},
        {"table": "Table 2", "what": "FID, DALL-E 3 fakes vs LAION reals", "value": 126.1},
    ],
}


class EvaluationError(RuntimeError):
    pass


# ---------------------------------------------------------------- distribution distances

def _check_feats(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} features must be 2-D (n, dim)")
    return a


def _psd_sqrt(S: np.ndarray) -> np.ndarray:
    S = (S + S.T) / 2
    w, V = np.linalg.eigh(S)
    if w.min() < 0:
        if w.min() < -1e-8 * max(1.0, w.max()):
            warnings.warn(f"covariance not PSD (min eigenvalue {w.min():.3g}); clamping at 0", RuntimeWarning)
        w = np.clip(w, 0, None)
    return (V * np.sqrt(w)) @ V.T


def fid(real_feats, fake_feats) -> float:
    """Fréchet distance between Gaussian fits of two feature sets.

    The matrix square root is taken in the symmetric form
    ``(S_r^½ S_f S_r^½)^½``, which has the same trace as ``(S_r S_f)^½``.
    """
    r, f = _check_feats(real_feats, "real"), _check_feats(fake_feats, "fake")
    if r.shape[1] != f.shape[1]:
        raise ValueError("feature dimensions differ")
    d = r.shape[1]
    if min(len(r), len(f)) < d + 1:
        raise ValueError(f"need at least dim+1={d + 1} samples per set (got {len(r)}, {len(f)})")
    mu_r, mu_f = r.mean(0), f.mean(0)
    S_r, S_f = np.cov(r, rowvar=False).reshape(d, d), np.cov(f, rowvar=False).reshape(d, d)
    root_r = _psd_sqrt(S_r)
    cross = _psd_sqrt(root_r @ S_f @ root_r)
    val = float(np.sum((mu_r - mu_f) ** 2) + np.trace(S_r) + np.trace(S_f) - 2 * np.trace(cross))
    return max(val, 0.0)


def kid(real_feats, fake_feats) -> float:
    """Unbiased squared MMD with kernel (x·y/d + 1)^3 over the first m = min(n_r, n_f) rows of each set."""
    r, f = _check_feats(real_feats, "real"), _check_feats(fake_feats, "fake")
    if r.shape[1] != f.shape[1]:
        raise ValueError("feature dimensions differ")
    m = min(len(r), len(f))
    if m < 2:
        raise ValueError("KID needs at least 2 samples per set")
    r, f = r[:m], f[:m]
    d = r.shape[1]
    k = lambda a, b: (a @ b.T / d + 1) ** 3
    krr, kff, krf = k(r, r), k(f, f), k(r, f)
    off = m * (m - 1)
    return float((krr.sum() - np.trace(krr)) / off + (kff.sum() - np.trace(kff)) / off
                 - 2 * (krf.sum() - np.trace(krf)) / off)


def vae_features(images: np.ndarray, bundle) -> np.ndarray:
    """Default extractor: toy-encoder latents averaged over space → (n, latent_channels)."""
    z = bundle.encode(np.asarray(images, dtype=np.float32))
    return z.mean(axis=(2, 3)).astype(np.float64)


# ---------------------------------------------------------------- reports

def _fmt_float(v):
    return None if v is None else float(f"{v:.12g}")


def render_figures(out_dir, scores: M.ScoreSet, title: str = "") -> list[str]:
    """ROC, PR and DET plots plus a score histogram, written as PNG files."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    out_dir = Path(out_dir)
    written = []
    specs = [("roc", M.roc_points(scores), "false positive rate", "true positive rate"),
             ("pr", M.pr_points(scores), "recall", "precision"),
             ("det", M.det_points(scores), "false positive rate", "false negative rate")]
    meta = {"Software": "invdetect"}
    for name, pts, xl, yl in specs:
        fig, ax = plt.subplots(figsize=(4, 4), dpi=100)
        ax.plot(pts[:, 1], pts[:, 2], lw=1.5, drawstyle="steps-post" if name == "pr" else "default")
        if name == "roc":
            ax.plot([0, 1], [0, 1], ls=":", c="grey", lw=1)
        ax.set_xlim(0, 1); ax.set_ylim(0, 1.02)
        ax.set_xlabel(xl); ax.set_ylabel(yl)
        ax.set_title(f"{name.upper()} {title}".strip(), fontsize=9)
        fig.tight_layout()
        p = out_dir / f"{name}.png"
        fig.savefig(p, metadata=meta)
        plt.close(fig)
        written.append(p.name)
    fig, ax = plt.subplots(figsize=(4, 3), dpi=100)
    y, s = scores.labels, scores.scores
    bins = np.linspace(0, 1, 26)
    ax.hist(s[y == 0], bins=bins, alpha=0.6, label="real")
    ax.hist(s[y == 1], bins=bins, alpha=0.6, label="fake")
    ax.set_xlabel("score"); ax.legend(fontsize=8)
    fig.tight_layout()
    p = out_dir / "scores_hist.png"
    fig.savefig(p, metadata=meta)
    plt.close(fig)
    written.append(p.name)
    return written


def write_report(out_dir, scores: M.ScoreSet, fingerprint: dict, extra: dict | None = None,
                 figures: bool = True) -> dict:
    """Metrics, curve CSVs, scores JSONL and (optionally) figures for one ScoreSet."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_fake = int(scores.labels.sum()) if len(scores) else 0
    report = {
        "schema_version": REPORT_SCHEMA,
        "counts": {"scored": len(scores), "fake": n_fake, "real": len(scores) - n_fake,
                   "omitted": len(scores.omitted)},
        "omissions": [{"id": i, "reason": r} for i, r in scores.omitted],
        "fingerprint": fingerprint,
        "paper_context": PAPER_CONTEXT,
    }
    if extra:
        report.update(extra)
    m = M.all_metrics(scores)
    report["metrics"] = {k: _fmt_float(v) for k, v in m.items()}
    for kind, fn in (("roc", M.roc_points), ("pr", M.pr_points), ("det", M.det_points)):
        M.write_curve_csv(out_dir / f"{kind}.csv", fn(scores), kind)
    M.write_scores(out_dir / "scores.jsonl", scores)
    if figures:
        report["figures"] = render_figures(out_dir, scores, fingerprint.get("mode", ""))
    (out_dir / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return report


def evaluate(manifest: DatasetManifest, det: DetectorBundle, ctx, out_dir, corruption: CorruptionSpec | None = None,
             seed: int = 0, split: str = "test", generator: str | None = None, figures: bool = True) -> dict:
    """Score the test split (optionally degraded) and write a full report into ``out_dir``."""
    recs = [r for r in manifest.filter(split=split)
            if generator is None or r.label == "real" or r.generator == generator]
    if not recs:
        raise EvaluationError(f"manifest has no records in split {split!r}; nothing to evaluate")
    scores = score_manifest(manifest, det, ctx, records=recs, corruption=corruption, seed=seed)
    if len(scores) == 0:
        raise EvaluationError("every record failed to load")
    fp = {"mode": det.mode, "detector_hash": det.content_hash(), "backbone_hash": ctx.bundle.fingerprint(),
          "K": ctx.sched.K, "split": split, "generator_filter": generator, "seed": seed,
          "corruption": corruption.to_dict() if corruption else None,
          "standardize_noise": ctx.standardize_noise, "chunk_size": ctx.chunk_size,
          "extractor_version": EXTRACTOR_VERSION}
    return write_report(out_dir, scores, fp, figures=figures)
