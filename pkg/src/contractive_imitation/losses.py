"""Trajectory discrepancies and the training losses built from them.

Discrepancies: time-aligned mean squared error and soft dynamic time
warping (a smoothed-min dynamic program, differentiable everywhere).
Rollouts are compared against every demonstration at once through convex
weights that fall off with the squared distance between initial states.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import rollout as ro
from .autodiff import Tensor

EPS_DIST = 1e-9


class LossError(Exception):
    pass


@dataclass
class Metric:
    """Which discrepancy to use; beta smooths the soft-DTW min operator."""

    kind: str = "mse"
    beta: float = 0.1

    def __post_init__(self):
        if self.kind not in ("mse", "soft_dtw"):
            raise LossError(f"unknown metric kind: {self.kind}")
        if self.beta <= 0:
            raise LossError("beta must be positive")


@dataclass
class WeightVector:
    """Convex weights over demonstrations."""

    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 1 or self.weights.size < 1:
            raise LossError("weights must be a non-empty vector")
        if not np.all(np.isfinite(self.weights)):
            raise LossError("weights must be finite")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise LossError("weights must be non-negative and sum to 1")

    def __len__(self) -> int:
        return self.weights.size


def _states(traj) -> Tensor:
    if isinstance(traj, ro.Trajectory):
        return Tensor(traj.states)
    t = ad.as_tensor(traj)
    if t.data.ndim != 2 or t.data.shape[0] < 1:
        raise LossError(f"trajectory must be a (H, N_y) array, got shape {t.data.shape}")
    return t


def mse(a, b) -> Tensor:
    """Time-aligned mean squared error, (1/H) sum of squared step distances."""
    A, B = _states(a), _states(b)
    if A.data.shape != B.data.shape:
        raise LossError(f"mse needs equal shapes, got {A.data.shape} and {B.data.shape}")
    H = A.data.shape[0]
    return ad.mul(ad.vsum(ad.square(ad.sub(A, B))), 1.0 / H)


def _softmin(cells: list[Tensor], beta: float) -> Tensor:
    if len(cells) == 1:
        return cells[0]
    v = ad.concat([ad.reshape(c, (1,)) for c in cells], axis=0)
    return ad.mul(ad.logsumexp(ad.mul(v, -1.0 / beta)), -beta)


def soft_dtw(a, b, beta: float = 0.1) -> Tensor:
    """Soft dynamic time warping over the squared-Euclidean cost grid."""
    if beta <= 0:
        raise LossError("beta must be positive")
    A, B = _states(a), _states(b)
    ha, hb = A.data.shape[0], B.data.shape[0]
    rows_a = [ad.reshape(r, (-1,)) for r in ad.split(A, [1] * ha, axis=0)]
    rows_b = [ad.reshape(r, (-1,)) for r in ad.split(B, [1] * hb, axis=0)]

    def cost(i, j):
        return ad.vsum(ad.square(ad.sub(rows_a[i], rows_b[j])))

    prev: list[Tensor] = []
    for i in range(ha):
        cur: list[Tensor] = []
        for j in range(hb):
            c = cost(i, j)
            if i == 0 and j == 0:
                cur.append(c)
                continue
            options = []
            if i > 0:
                options.append(prev[j])
            if j > 0:
                options.append(cur[j - 1])
            if i > 0 and j > 0:
                options.append(prev[j - 1])
            cur.append(ad.add(c, _softmin(options, beta)))
        prev = cur
    return prev[-1]


def dtw_classic(a, b) -> float:
    """Hard-min dynamic time warping; reference value, not differentiable."""
    A = _states(a).data
    B = _states(b).data
    ha, hb = A.shape[0], B.shape[0]
    diff = A[:, None, :] - B[None, :, :]
    cost = np.sum(diff * diff, axis=2)
    acc = np.full((ha, hb), np.inf)
    acc[0, 0] = cost[0, 0]
    for i in range(ha):
        for j in range(hb):
            if i == 0 and j == 0:
                continue
            best = np.inf
            if i > 0:
                best = min(best, acc[i - 1, j])
            if j > 0:
                best = min(best, acc[i, j - 1])
            if i > 0 and j > 0:
                best = min(best, acc[i - 1, j - 1])
            acc[i, j] = cost[i, j] + best
    return float(acc[-1, -1])


def lambda_weights(y0_hat, inits, eps_dist: float = EPS_DIST) -> WeightVector:
    """Convex weights, each inversely proportional to the (floored) squared
    distance between the query initial state and a demonstration's."""
    if eps_dist <= 0:
        raise LossError("eps_dist must be positive")
    y0_hat = np.asarray(y0_hat, dtype=np.float64)
    inits = np.atleast_2d(np.asarray(inits, dtype=np.float64))
    if inits.shape[0] < 1:
        raise LossError("lambda_weights needs at least one demonstration")
    d2 = np.sum((inits - y0_hat[None, :]) ** 2, axis=1)
    inv = 1.0 / np.maximum(d2, eps_dist)
    return WeightVector(weights=inv / inv.sum())


def _discrepancy(roll_states: Tensor, demo, metric: Metric) -> Tensor:
    if metric.kind == "mse":
        return mse(roll_states, demo)
    return soft_dtw(roll_states, demo, metric.beta)


def weighted_loss(roll, demos, metric: Metric | None = None,
                  eps_dist: float = EPS_DIST) -> Tensor:
    """Convex combination of discrepancies against every demonstration,
    weighted by the rollout's initial state."""
    metric = metric or Metric()
    S = _states(roll)
    demo_states = [_states(d) for d in demos]
    if not demo_states:
        raise LossError("weighted_loss needs at least one demonstration")
    inits = np.stack([d.data[0] for d in demo_states])
    lam = lambda_weights(S.data[0], inits, eps_dist)
    total = None
    for w, d in zip(lam.weights, demo_states):
        term = ad.mul(_discrepancy(S, d, metric), float(w))
        total = term if total is None else ad.add(total, term)
    return total


def rollout_rows_to_trajectories(flat: Tensor, horizon: int, count: int) -> list[Tensor]:
    """Undo rollout_flat's row ordering: returns `count` tensors of (horizon, N_y)."""
    if flat.data.shape[0] != horizon * count:
        raise LossError(
            f"expected {horizon * count} rows, got {flat.data.shape[0]}")
    chunks = ad.split(flat, [count] * horizon, axis=0)
    out = []
    for b in range(count):
        rows = [ad.split(chunk, [1] * count, axis=0)[b] for chunk in chunks]
        out.append(ad.concat(rows, axis=0))
    return out


def empirical_loss(mats, proj, stack, demos, cfg: ro.SolverConfig,
                   metric: Metric | None = None) -> Tensor:
    """Mean discrepancy between each demonstration and the rollout started
    from that demonstration's own initial state."""
    metric = metric or Metric()
    demo_states = [_states(d).data for d in demos]
    if not demo_states:
        raise LossError("empirical_loss needs at least one demonstration")
    M = len(demo_states)
    H = cfg.horizon
    for d in demo_states:
        if metric.kind == "mse" and d.shape[0] != H:
            raise LossError(
                f"mse needs demonstrations of length {H}, got {d.shape[0]}; resample first")
    Y0 = np.stack([d[0] for d in demo_states])
    flat = ro.rollout_flat(mats, proj, stack, Y0, cfg)
    if metric.kind == "mse":
        # row t*M + m of the target matches rollout_flat's ordering
        target = np.concatenate(
            [np.stack([d[t] for d in demo_states]) for t in range(H)], axis=0)
        return ad.mul(ad.vsum(ad.square(ad.sub(flat, Tensor(target)))), 1.0 / (M * H))
    rolls = rollout_rows_to_trajectories(flat, H, M)
    total = None
    for r, d in zip(rolls, demo_states):
        term = soft_dtw(r, d, metric.beta)
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, 1.0 / M)


def augmented_loss(empirical, gamma, mu: float, c: float, gamma0: float) -> Tensor:
    """Training loss with the contraction-rate penalty mu * (1/(gamma-gamma0)^2 - c)
    subtracted from the empirical loss."""
    g = ad.as_tensor(gamma)
    if float(g.data) <= gamma0:
        raise LossError(
            f"contraction rate {float(g.data)} must exceed gamma0 = {gamma0}")
    emp = ad.as_tensor(empirical)
    if mu == 0.0:
        return emp
    h = ad.reciprocal(ad.square(ad.sub(g, gamma0)))
    return ad.sub(emp, ad.mul(ad.sub(h, c), mu))
