"""Test-time image degradations for robustness evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import imageops

# per-kind accepted severity ranges (inclusive)
SEVERITY_RANGE = {"noise": (0.0, 1.0), "blur": (0.0, 10.0), "jpeg": (1, 100), "crop": (0.05, 1.0)}
DEFAULT_GRID = (("noise", 0.01), ("noise", 0.05), ("blur", 1.0), ("blur", 2.0),
                ("jpeg", 75), ("jpeg", 30), ("crop", 0.9), ("crop", 0.75))


@dataclass(frozen=True)
class CorruptionSpec:
    """One degradation. Severity is sigma in [0, 1] intensity units for noise,
    Gaussian sigma in pixels for blur, quality for jpeg, retained side fraction for crop."""

    kind: str
    severity: float

    def __post_init__(self):
        if self.kind not in SEVERITY_RANGE:
            raise ValueError(f"unknown corruption kind {self.kind!r}; expected one of {sorted(SEVERITY_RANGE)}")
        lo, hi = SEVERITY_RANGE[self.kind]
        if not lo <= self.severity <= hi:
            raise ValueError(f"{self.kind} severity {self.severity} outside [{lo}, {hi}]")

    @property
    def tag(self) -> str:
        sev = int(self.severity) if self.kind == "jpeg" else self.severity
        return f"{self.kind}-{sev:g}"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "severity": self.severity}


def parse_corruption(text: str) -> CorruptionSpec:
    """Parse ``kind:severity`` (e.g. ``jpeg:75``)."""
    kind, _, sev = text.partition(":")
    if not sev:
        raise ValueError(f"corruption must look like kind:severity, got {text!r}")
    return CorruptionSpec(kind.strip(), float(sev))


def corrupt(x: np.ndarray, spec: CorruptionSpec, rng: np.random.Generator) -> np.ndarray:
    """Apply exactly one degradation; output stays in [-1, 1]."""
    x = np.asarray(x, dtype=np.float32)
    if spec.kind == "noise":
        out = imageops.add_noise(x, spec.severity, rng)
    elif spec.kind == "blur":
        out = imageops.blur(x, spec.severity)
    elif spec.kind == "jpeg":
        out = imageops.jpeg(x, int(spec.severity))
    elif spec.kind == "crop":
        out = imageops.center_crop_fraction(x, spec.severity)
    else:  # unreachable: CorruptionSpec validates kind
        raise ValueError(spec.kind)
    return np.clip(out, -1.0, 1.0).astype(np.float32)
