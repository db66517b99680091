"""Deterministic DDIM inversion and reconstruction over an abstract noise predictor.

All step arithmetic is carried out in float32; the cumulative schedule product
is computed in float64 and cast. Functions accept any array type that supports
elementwise ``+``, ``-``, ``*`` and ``/`` with numpy float32 scalars, so a
batch axis in front of the latent shape is fine as long as the noise
predictor handles it too.

An ``EpsFn`` is any callable ``eps_fn(z_t, t, c) -> array`` returning an array
shaped like ``z_t``. It must be deterministic. Implementations must be
thread-safe if the caller shares one across workers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

EpsFn = Callable[[np.ndarray, int, np.ndarray], np.ndarray]

SCHEDULE_KINDS = ("linear", "scaled_linear")


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative noise scaling ``alpha_bar[0..T]`` plus the K-step traversal."""

    T: int
    alpha_bar: np.ndarray  # float64, length T + 1
    step_indices: tuple

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if self.T < 1:
            raise ScheduleError("T must be positive")
        if ab.shape != (self.T + 1,):
            raise ScheduleError(f"alpha_bar must have length T+1={self.T + 1}, got {ab.shape}")
        if ab[0] != 1.0:
            raise ScheduleError("alpha_bar[0] must be exactly 1")
        if not np.all(np.isfinite(ab)) or np.any(ab <= 0) or np.any(ab > 1):
            raise ScheduleError("alpha_bar must lie in (0, 1]")
        if np.any(np.diff(ab) >= 0):
            raise ScheduleError("alpha_bar must be strictly decreasing")
        idx = tuple(int(i) for i in self.step_indices)
        if len(idx) < 2 or idx[0] != 0 or idx[-1] != self.T:
            raise ScheduleError("step_indices must start at 0 and end at T")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ScheduleError("step_indices must be strictly increasing")
        object.__setattr__(self, "alpha_bar", ab)
        object.__setattr__(self, "step_indices", idx)

    @property
    def K(self) -> int:
        return len(self.step_indices) - 1

    def coef(self, t: int) -> tuple[np.float32, np.float32]:
        """Return ``(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))`` as float32."""
        ab = self.alpha_bar[t]
        return np.float32(np.sqrt(ab)), np.float32(np.sqrt(1.0 - ab))

    def with_steps(self, K: int) -> "NoiseSchedule":
        return NoiseSchedule(self.T, self.alpha_bar, even_step_indices(self.T, K))

    def to_dict(self) -> dict:
        return {"T": self.T, "K": self.K, "alpha_bar_T": float(self.alpha_bar[-1])}


def even_step_indices(T: int, K: int) -> tuple:
    """K+1 evenly spaced indices in 0..T, endpoints included, rounded down."""
    if K < 1 or K > T:
        raise ScheduleError(f"need 1 <= K <= T, got K={K}, T={T}")
    return tuple((i * T) // K for i in range(K + 1))


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                   kind: str = "scaled_linear", K: int = 50) -> NoiseSchedule:
    """Build a DDIM schedule from a linear or scaled-linear beta ramp.

    ``scaled_linear`` interpolates linearly in sqrt(beta) space and squares.
    """
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ScheduleError("T must be a positive integer")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "scaled_linear":
        betas = np.linspace(beta_start ** 0.5, beta_end ** 0.5, T, dtype=np.float64) ** 2
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    if np.any(np.diff(betas) < 0):
        raise ScheduleError("betas must be non-decreasing")
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(int(T), alpha_bar, even_step_indices(int(T), K))


def predict_clean(z_t, t: int, eps, sched: NoiseSchedule):
    """Current estimate of the clean latent from a noisy latent and predicted noise."""
    if np.shape(z_t) != np.shape(eps):
        raise ValueError(f"shape mismatch: z_t {np.shape(z_t)} vs eps {np.shape(eps)}")
    if sched.alpha_bar[t] <= 0:
        raise ValueError(f"alpha_bar[{t}] must be positive")
    a, s = sched.coef(t)
    return (z_t - s * eps) / a


def _check_pair(sched: NoiseSchedule, t_from: int, t_to: int):
    idx = sched.step_indices
    if t_from not in idx or t_to not in idx:
        raise ValueError(f"timesteps ({t_from}, {t_to}) must both be in step_indices")


def _step(z_t, t_from, t_to, eps_fn, c, sched):
    e = eps_fn(z_t, t_from, c)
    if np.shape(e) != np.shape(z_t):
        raise ValueError(f"eps_fn returned shape {np.shape(e)}, expected {np.shape(z_t)}")
    f = predict_clean(z_t, t_from, e, sched)
    a, s = sched.coef(t_to)
    return a * f + s * e


def ddim_forward_step(z_t, t_from: int, t_to: int, eps_fn: EpsFn, c, sched: NoiseSchedule):
    """One inversion step toward noise; the noise is predicted at ``t_from``."""
    if t_to <= t_from:
        raise ValueError(f"forward step needs t_to > t_from, got {t_from} -> {t_to}")
    _check_pair(sched, t_from, t_to)
    return _step(z_t, t_from, t_to, eps_fn, c, sched)


def ddim_reverse_step(z_t, t_from: int, t_to: int, eps_fn: EpsFn, c, sched: NoiseSchedule):
    """One deterministic denoising step toward ``t_to < t_from``."""
    if t_to >= t_from:
        raise ValueError(f"reverse step needs t_to < t_from, got {t_from} -> {t_to}")
    _check_pair(sched, t_from, t_to)
    return _step(z_t, t_from, t_to, eps_fn, c, sched)


def invert(z_0, c, eps_fn: EpsFn, sched: NoiseSchedule, trajectory: list | None = None):
    """Map a clean latent to its DDIM noise map by folding forward steps 0 -> T."""
    z = z_0
    idx: Sequence[int] = sched.step_indices
    for t_from, t_to in zip(idx[:-1], idx[1:]):
        z = ddim_forward_step(z, t_from, t_to, eps_fn, c, sched)
        if trajectory is not None:
            trajectory.append(z)
    return z


def reconstruct(z_T, c, eps_fn: EpsFn, sched: NoiseSchedule, trajectory: list | None = None):
    """Denoise a noise map back to a clean latent by folding reverse steps T -> 0."""
    z = z_T
    idx = sched.step_indices[::-1]
    for t_from, t_to in zip(idx[:-1], idx[1:]):
        z = ddim_reverse_step(z, t_from, t_to, eps_fn, c, sched)
        if trajectory is not None:
            trajectory.append(z)
    return z


# Names matching the F / R mapping used elsewhere in the package.
invert_F = invert
reconstruct_R = reconstruct
