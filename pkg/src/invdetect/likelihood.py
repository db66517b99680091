"""Numerical checks of the first-order log-likelihood estimate built from
an image, its inversion and its reconstruction.

The chain being checked, for a flow ``f`` (noise → data) at ``z = f^-1(x)``:

    log det J                     exact
    ≈ Tr(J - I)                   series truncation
    ≈ mean_v <v, (J - I) v>       Hutchinson, finite probes
    ≈ <δ, (J - I) δ> / |δ|²       single isotropic sample
    ≈ <δ, f(z+δ) - f(z) - δ>/|δ|² first-order Taylor

Everything here is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

STAGES = ("truncation", "hutchinson", "single_sample", "taylor")
REPORT_VERSION = 1


class LikelihoodError(ValueError):
    pass


def std_normal_logpdf(z) -> float:
    z = np.asarray(z, dtype=np.float64).ravel()
    return float(-0.5 * z.size * math.log(2 * math.pi) - 0.5 * z @ z)


@dataclass
class FlowMap:
    """Bijection R^d → R^d given by explicit forward and inverse evaluators."""

    forward: Callable
    inverse: Callable
    dim: int
    check_points: int = 4
    check_tol: float = 1e-6

    def __post_init__(self):
        if self.dim <= 0:
            raise LikelihoodError("dim must be positive")
        rng = np.random.default_rng(0)
        for _ in range(self.check_points):
            x = rng.standard_normal(self.dim)
            err = np.max(np.abs(self(self.inv(x)) - x))
            if not err <= self.check_tol:
                raise LikelihoodError(f"forward(inverse(x)) differs from x by {err:.3g}")

    def __call__(self, z):
        return np.asarray(self.forward(np.asarray(z, dtype=np.float64)), dtype=np.float64)

    def inv(self, x):
        return np.asarray(self.inverse(np.asarray(x, dtype=np.float64)), dtype=np.float64)

    def inverted(self) -> "FlowMap":
        return FlowMap(self.inverse, self.forward, self.dim, self.check_points, self.check_tol)


def affine_flow(A, b=None) -> FlowMap:
    A = np.asarray(A, dtype=np.float64)
    b = np.zeros(A.shape[0]) if b is None else np.asarray(b, dtype=np.float64)
    lu_inv = np.linalg.inv(A)
    return FlowMap(lambda z: A @ z + b, lambda x: lu_inv @ (x - b), A.shape[0])


# ---------------------------------------------------------------- estimators

def hutchinson_trace(apply_A: Callable, d: int, n_probes: int, rng: np.random.Generator,
                     vectorized: bool = False, chunk: int = 8192) -> float:
    """Mean of <v, A v> over ``n_probes`` standard-normal probes.

    With ``vectorized`` the evaluator is called on ``(d, k)`` blocks of probe columns.
    """
    if d <= 0:
        raise LikelihoodError("d must be positive")
    if n_probes < 1:
        raise LikelihoodError("need at least one probe")
    total = 0.0
    done = 0
    while done < n_probes:
        k = min(chunk, n_probes - done)
        V = rng.standard_normal((d, k))
        if vectorized:
            AV = np.asarray(apply_A(V), dtype=np.float64)
        else:
            AV = np.stack([np.asarray(apply_A(V[:, j]), dtype=np.float64) for j in range(k)], axis=1)
        total += math.fsum(np.einsum("ij,ij->j", V, AV))
        done += k
    return total / n_probes


def numeric_jacobian(flow: FlowMap, x, fd_step: float = 1e-4) -> np.ndarray:
    if fd_step <= 0:
        raise LikelihoodError("fd_step must be positive")
    x = np.asarray(x, dtype=np.float64)
    d = flow.dim
    if d > 32:
        raise LikelihoodError(f"dense Jacobian capped at d=32 (got {d})")
    J = np.empty((d, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = fd_step
        J[:, i] = (flow(x + e) - flow(x - e)) / (2 * fd_step)
    return J


def numeric_jacobian_logdet(flow: FlowMap, x, fd_step: float = 1e-4) -> float:
    """log |det J_f(x)| from a central-difference Jacobian."""
    sign, logabs = np.linalg.slogdet(numeric_jacobian(flow, x, fd_step))
    if sign == 0 or logabs < math.log(1e-12):
        raise LikelihoodError("Jacobian is numerically singular (|det| < 1e-12)")
    return float(logabs)


def change_of_variables_logprob(flow: FlowMap, x, base_logpdf: Callable = std_normal_logpdf,
                                fd_step: float = 1e-4) -> float:
    """log p(x) = log p_z(f^-1(x)) + log |det J_{f^-1}(x)|."""
    return base_logpdf(flow.inv(x)) + numeric_jacobian_logdet(flow.inverted(), x, fd_step)


def first_order_logprob(z_0, z_hat_0, z_T, delta, base_logpdf: Callable = std_normal_logpdf) -> float:
    """log p_z(z_T) - <δ, ẑ_0 - z_0> / |δ|², with proportionality constant 1 and offset 0."""
    z_0, z_hat_0, delta = (np.asarray(v, dtype=np.float64).ravel() for v in (z_0, z_hat_0, delta))
    nn = float(delta @ delta)
    if not nn > 0:
        raise LikelihoodError("delta must be nonzero")
    return base_logpdf(z_T) - float(delta @ (z_hat_0 - z_0)) / nn


def calibrated_first_order_logprob(z_0, z_hat_0, z_T, delta, base_logpdf: Callable = std_normal_logpdf) -> float:
    """Affine rescaling of :func:`first_order_logprob` whose δ-expectation matches
    log p_z(z_T) - Tr(J - I): restores the additive ``d`` dropped with Tr(J) and
    the factor ``d`` lost by normalising with |δ|² rather than the per-axis variance."""
    base = base_logpdf(z_T)
    d = np.asarray(z_0).size
    lit = first_order_logprob(z_0, z_hat_0, z_T, delta, base_logpdf)
    return base + d * (lit - base) + d


# ---------------------------------------------------------------- random near-identity flows

def near_identity_affine(dim: int, eps: float, rng: np.random.Generator):
    """Affine flow with J = I + eps*M, M standard normal. Returns (flow, M)."""
    M = rng.standard_normal((dim, dim))
    b = rng.standard_normal(dim)
    return affine_flow(np.eye(dim) + eps * M, b), M


@dataclass
class TanhFlow:
    """f(z) = z + eps * (M tanh(z) + b) with |M|_2 = 1, so f is invertible for eps < 1."""

    M: np.ndarray
    b: np.ndarray
    eps: float

    def g(self, z):
        return self.M @ np.tanh(z) + self.b

    def __call__(self, z):
        return z + self.eps * self.g(z)

    def jac_minus_identity(self, z) -> np.ndarray:
        return self.eps * self.M * (1 - np.tanh(z) ** 2)[None, :]

    def inverse(self, x, tol=1e-14, max_iter=500):
        z = np.array(x, dtype=np.float64)
        for _ in range(max_iter):
            nz = x - self.eps * self.g(z)
            if np.max(np.abs(nz - z)) <= tol * (1 + np.max(np.abs(z))):
                return nz
            z = nz
        raise LikelihoodError(f"fixed-point inverse did not converge at eps={self.eps}")


def _random_tanh_flow(dim, eps, rng) -> TanhFlow:
    M = rng.standard_normal((dim, dim))
    M /= np.linalg.norm(M, 2)
    return TanhFlow(M, rng.standard_normal(dim), float(eps))


def _trial_stages(flow: TanhFlow, z, v_probes, delta) -> dict:
    d = z.size
    A = flow.jac_minus_identity(z)
    J = np.eye(d) + A
    sign, v0 = np.linalg.slogdet(J)
    if sign <= 0:
        raise LikelihoodError("flow Jacobian lost orientation")
    v1 = float(np.trace(A))
    v2 = float(np.einsum("ij,ij->j", v_probes, A @ v_probes).mean())
    nn = float(delta @ delta)
    v3 = float(delta @ (A @ delta)) / nn
    # f(z+δ) - f(z) - δ, formed without cancellation so eps = 0 gives exactly 0
    v4 = flow.eps * float(delta @ (flow.g(z + delta) - flow.g(z))) / nn
    vals = [float(v0), v1, v2, v3, v4]
    return {"values": vals, "errors": [abs(vals[k + 1] - vals[k]) for k in range(4)],
            "end_to_end": abs(v4 - vals[0])}


def verify_derivation(dim: int = 4, epsilon_scale: float = 1e-2, n_trials: int = 100, seed: int = 0,
                      n_probes: int = 64, delta_scale: float = 1e-2) -> dict:
    """Per-stage errors of the approximation chain on random near-identity tanh flows.

    Random draws depend only on ``seed``, so reports at different
    ``epsilon_scale`` use the same flows, points, probes and perturbations.
    """
    if not 1 <= dim <= 8:
        raise LikelihoodError("dim must be in 1..8")
    ss = np.random.SeedSequence(seed)
    trial_seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(n_trials)]
    errs = {s: [] for s in STAGES}
    e2e = []
    failures = []
    for ts in trial_seeds:
        rng = np.random.default_rng(ts)
        flow = _random_tanh_flow(dim, epsilon_scale, rng)
        z = rng.standard_normal(dim)
        probes = rng.standard_normal((dim, n_probes))
        delta = rng.standard_normal(dim) * delta_scale
        try:
            out = _trial_stages(flow, z, probes, delta)
        except LikelihoodError as e:
            failures.append({"seed": ts, "error": str(e)})
            continue
        for s, e in zip(STAGES, out["errors"]):
            errs[s].append(e)
        e2e.append(out["end_to_end"])
    def summary(v):
        return {"mean": float(np.mean(v)) if v else None, "max": float(np.max(v)) if v else None}
    return {
        "version": REPORT_VERSION,
        "dim": dim, "epsilon_scale": float(epsilon_scale), "n_trials": n_trials,
        "n_probes": n_probes, "delta_scale": delta_scale, "seed": seed, "trial_seeds": trial_seeds,
        "stages": {s: summary(errs[s]) for s in STAGES},
        "end_to_end": summary(e2e),
        "failed_trials": failures,
    }


def loglog_slope(xs, ys) -> float:
    x, y = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    return float(np.polyfit(x, y, 1)[0])


def stage_slopes(dim: int = 4, scales=(1e-3, 2e-3, 4e-3, 8e-3, 1.6e-2), n_trials: int = 100,
                 seed: int = 0) -> dict:
    """Fitted log-log slope of each stage's mean error against epsilon_scale."""
    reports = [verify_derivation(dim, s, n_trials, seed) for s in scales]
    means = {st: [r["stages"][st]["mean"] for r in reports] for st in STAGES}
    return {"scales": list(scales), "mean_errors": means,
            "slopes": {st: loglog_slope(scales, means[st]) for st in STAGES}}


def first_order_agreement(dim: int, eps: float, n_trials: int = 100, n_deltas: int = 100,
                          seed: int = 0, delta_scale: float = 1e-2, calibrated: bool = False) -> dict:
    """Compare the δ-averaged first-order estimate with the exact change-of-variables value.

    Each trial draws an affine flow with J = I + eps*M, a data point and
    ``n_deltas`` isotropic δ. A trial passes when the absolute error is within
    ``eps² · d · |M|_F² · 10``.
    """
    est_fn = calibrated_first_order_logprob if calibrated else first_order_logprob
    rows = []
    for ts in np.random.SeedSequence(seed).spawn(n_trials):
        rng = np.random.default_rng(ts)
        flow, M = near_identity_affine(dim, eps, rng)
        x0 = flow(rng.standard_normal(dim))
        exact = change_of_variables_logprob(flow, x0)
        zT = flow.inv(x0)
        ests = []
        for _ in range(n_deltas):
            delta = rng.standard_normal(dim) * delta_scale
            ests.append(est_fn(x0, flow(zT + delta), zT, delta))
        err = abs(math.fsum(ests) / n_deltas - exact)
        slack = eps ** 2 * dim * float(np.sum(M ** 2)) * 10
        rows.append({"error": err, "slack": slack, "ok": err <= slack})
    return {"dim": dim, "eps": eps, "calibrated": calibrated, "n_trials": n_trials,
            "pass_fraction": sum(r["ok"] for r in rows) / n_trials,
            "median_error": float(np.median([r["error"] for r in rows])),
            "median_slack": float(np.median([r["slack"] for r in rows]))}


def math_report(seed: int = 0, dim: int = 4, n_trials: int = 100) -> dict:
    """Everything the verify-math command writes."""
    return {
        "version": REPORT_VERSION,
        "derivation": verify_derivation(dim, 1e-2, n_trials, seed),
        "slopes": stage_slopes(dim, n_trials=n_trials, seed=seed),
        "first_order": {"literal": first_order_agreement(dim, 1e-2, n_trials, seed=seed),
                        "calibrated": first_order_agreement(dim, 1e-2, n_trials, seed=seed, calibrated=True)},
    }
