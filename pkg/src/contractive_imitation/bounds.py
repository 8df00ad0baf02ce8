"""Out-of-sample certificates for trained policies.

A policy that contracts at rate gamma with constant alpha admits a closed
form bound on the rollout loss from any initial state inside the
multi-focal ellipse spanned by the demonstration starts: a convex
combination of the training residuals plus a decay-weighted tail that
shrinks with gamma and grows with the region size R. alpha is estimated
by Monte Carlo over rollout pairs and inflated for safety margin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .bijection import BijectionStack
from .losses import EPS_DIST, lambda_weights
from .ren import RenMatrices
from .rollout import Projection, SolverConfig, rollout_batch

ALPHA_SAFETY = 1.2
MIN_PAIR_DISTANCE = 1e-8


class BoundError(Exception):
    pass


def fermat_radius(foci: np.ndarray) -> float:
    """Smallest possible sum of distances to the foci (Weiszfeld iteration)."""
    foci = np.atleast_2d(np.asarray(foci, dtype=np.float64))
    if foci.shape[0] == 1:
        return 0.0
    y = foci.mean(axis=0)
    for _ in range(200):
        d = np.maximum(np.linalg.norm(foci - y, axis=1), 1e-12)
        y_next = (foci / d[:, None]).sum(axis=0) / (1.0 / d).sum()
        if np.linalg.norm(y_next - y) < 1e-13:
            y = y_next
            break
        y = y_next
    return float(np.linalg.norm(foci - y, axis=1).sum())


@dataclass
class EllipseRegion:
    """Points whose summed distance to the foci stays within R."""

    foci: np.ndarray
    R: float

    def __post_init__(self):
        self.foci = np.atleast_2d(np.asarray(self.foci, dtype=np.float64))
        if self.foci.shape[0] < 1 or not np.all(np.isfinite(self.foci)):
            raise BoundError("region needs at least one finite focus")
        if not np.isfinite(self.R) or self.R < 0:
            raise BoundError(f"region scale must be non-negative, got {self.R}")
        if self.R < fermat_radius(self.foci) - 1e-9:
            raise BoundError("region is empty: R below the minimal distance sum")

    def distance_sum(self, y0) -> float:
        y0 = np.asarray(y0, dtype=np.float64)
        return float(np.linalg.norm(self.foci - y0[None, :], axis=1).sum())


def in_region(region: EllipseRegion, y0) -> tuple[bool, float]:
    """Membership and slack (distance sum minus R; non-positive inside)."""
    slack = region.distance_sum(y0) - region.R
    return slack <= 0.0, slack


def region_from_samples(foci, samples) -> EllipseRegion:
    """Tightest region containing every sample: R is the largest distance sum."""
    foci = np.atleast_2d(np.asarray(foci, dtype=np.float64))
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    R = max(float(np.linalg.norm(foci - s[None, :], axis=1).sum()) for s in samples)
    return EllipseRegion(foci=foci, R=R)


@dataclass
class SamplerSpec:
    """How to draw evaluation initial states."""

    count: int
    mode: str = "hypersphere"
    radius_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("hypersphere", "region-uniform"):
            raise BoundError(f"unknown sampler mode: {self.mode}")
        if self.count < 1:
            raise BoundError("sampler count must be at least 1")
        if self.radius_scale < 0:
            raise BoundError("radius_scale must be non-negative")


def sample_region_uniform(region: EllipseRegion, count: int,
                          rng: np.random.Generator) -> np.ndarray:
    """Uniform draws from the region, by rejection from an enclosing box."""
    if count < 1:
        raise BoundError("count must be at least 1")
    dim = region.foci.shape[1]
    center = region.foci[0]
    out = np.empty((count, dim))
    have = 0
    attempts = 0
    limit = 200 * count * max(dim, 1)
    while have < count:
        if attempts >= limit:
            raise BoundError("rejection sampling stalled; region too thin")
        attempts += 1
        y = center + rng.uniform(-region.R, region.R, size=dim)
        if in_region(region, y)[0]:
            out[have] = y
            have += 1
    return out


@dataclass
class BoundInputs:
    """Everything the closed-form certificate needs."""

    alpha: float
    gamma: float
    H: int
    M: int
    R: float
    per_demo_mse: np.ndarray

    def __post_init__(self):
        self.per_demo_mse = np.asarray(self.per_demo_mse, dtype=np.float64)
        if self.alpha <= 0 or self.gamma <= 0:
            raise BoundError("alpha and gamma must be positive")
        if self.H < 1 or self.M < 1:
            raise BoundError("H and M must be at least 1")
        if not np.isfinite(self.R) or self.R < 0:
            raise BoundError("R must be finite and non-negative")
        if self.per_demo_mse.shape != (self.M,):
            raise BoundError(
                f"per_demo_mse must have length M = {self.M}, got {self.per_demo_mse.shape}")
        if np.any(self.per_demo_mse < 0) or not np.all(np.isfinite(self.per_demo_mse)):
            raise BoundError("per_demo_mse must be finite and non-negative")


def term_two(alpha: float, R: float, gamma: float, H: int, M: int) -> float:
    """Decay-weighted tail of the certificate.

    Closed form alpha^2 R^2 (e^{-2 gamma} - 1) / (H M (e^{-2 gamma / H} - 1)),
    evaluated as the underlying finite geometric series when the denominator
    degenerates.
    """
    if gamma <= 0:
        raise BoundError("gamma must be positive")
    if H < 1 or M < 1:
        raise BoundError("H and M must be at least 1")
    scale = alpha ** 2 * R ** 2 / (H * M)
    r = np.exp(-2.0 * gamma / H)
    if abs(r - 1.0) < 1e-12:
        return float(scale * sum(np.exp(-2.0 * gamma * i / H) for i in range(H)))
    return float(scale * (np.exp(-2.0 * gamma) - 1.0) / (r - 1.0))


def worst_case_bound(y0, demo_inits, bi: BoundInputs,
                     eps_dist: float = EPS_DIST) -> float:
    """Certified loss bound for one initial state inside the region."""
    region = EllipseRegion(foci=demo_inits, R=bi.R)
    member, slack = in_region(region, y0)
    if not member:
        raise BoundError(
            f"initial state lies outside the certified region (slack {slack:.3e}); "
            "the bound only covers states whose distance sum stays within R")
    lam = lambda_weights(np.asarray(y0, dtype=np.float64), region.foci, eps_dist)
    first = float(lam.weights @ bi.per_demo_mse)
    return first + term_two(bi.alpha, bi.R, bi.gamma, bi.H, bi.M)


def true_loss_bound(bi: BoundInputs) -> float:
    """Distribution-free bound: worst training residual plus the tail term."""
    return float(np.max(bi.per_demo_mse)) + term_two(bi.alpha, bi.R, bi.gamma, bi.H, bi.M)


def estimate_alpha(mats: RenMatrices, proj: Projection, stack: BijectionStack,
                   samples, cfg: SolverConfig) -> float:
    """Monte Carlo overshoot constant: the largest growth of pairwise rollout
    distance relative to exponential decay at the certified rate."""
    Y0 = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if Y0.shape[0] < 2:
        raise BoundError("estimate_alpha needs at least 2 sampled initial states")
    Y = rollout_batch(mats, proj, stack, Y0, cfg)
    growth = np.exp(mats.gamma_value * np.arange(cfg.horizon) * cfg.stride)
    best = -np.inf
    found = False
    for i in range(Y0.shape[0] - 1):
        d = np.linalg.norm(Y[i + 1:] - Y[i], axis=2)  # (pairs, H)
        d0 = d[:, 0]
        ok = d0 >= MIN_PAIR_DISTANCE
        if np.any(ok):
            found = True
            best = max(best, float(np.max(d[ok] * growth[None, :] / d0[ok, None])))
    if not found:
        raise BoundError("all sampled initial-state pairs coincide; cannot estimate alpha")
    return best


def alpha_diagnostic(mats: RenMatrices, proj: Projection, stack: BijectionStack,
                     samples) -> float:
    """Loose analytic overshoot from composed worst-case factors.

    Reported for context only; the Monte Carlo estimate is the value used
    in certificates because this product is far from tight.
    """
    Y = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if Y.shape[0] < 2:
        raise BoundError("alpha_diagnostic needs at least 2 samples")
    evals = np.linalg.eigvalsh(mats.P.data)
    metric_distortion = float(np.sqrt(evals[-1] / evals[0]))
    sv = np.linalg.svd(proj.matrix.value, compute_uv=False)
    with ad.no_grad():
        U = stack.inverse(ad.Tensor(Y)).data
    lip_fwd = -np.inf
    lip_inv = -np.inf
    for i in range(Y.shape[0] - 1):
        dy = np.linalg.norm(Y[i + 1:] - Y[i], axis=1)
        du = np.linalg.norm(U[i + 1:] - U[i], axis=1)
        ok = (dy > 0) & (du > 0)
        if np.any(ok):
            lip_fwd = max(lip_fwd, float(np.max(dy[ok] / du[ok])))
            lip_inv = max(lip_inv, float(np.max(du[ok] / dy[ok])))
    if not np.isfinite(lip_fwd):
        raise BoundError("alpha_diagnostic needs distinct samples")
    return lip_fwd * lip_inv * metric_distortion * float(sv.max() / sv.min())
