"""Policy rollouts: encode an initial observation into latent space,
integrate the contractive dynamics with a fixed-step solver, decode every
stored state through the output map.

Integration happens on the differentiation tape, so gradients follow the
unrolled steps exactly (discrete adjoint). Untracked inputs fall through
to plain numpy automatically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import ren
from .autodiff import Parameter, Tensor
from .bijection import BijectionStack


class RolloutError(Exception):
    pass


@dataclass
class Projection:
    """Linear read-out from latent space, observation = matrix @ z.

    The latent dimension must be at least the observation dimension so the
    row-rank pseudoinverse gives an exact right inverse at encode time.
    """

    matrix: Parameter

    def __post_init__(self):
        shape = self.matrix.value.shape
        if len(shape) != 2:
            raise RolloutError(f"projection must be a matrix, got shape {shape}")
        if shape[1] < shape[0]:
            raise RolloutError(
                f"latent dimension {shape[1]} smaller than observation dimension {shape[0]}")

    @property
    def n_y(self) -> int:
        return self.matrix.value.shape[0]

    @property
    def n_z(self) -> int:
        return self.matrix.value.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.matrix]


def random_projection(n_y: int, n_z: int, rng: np.random.Generator,
                      noise: float = 0.05, prefix: str = "proj") -> Projection:
    """Identity block plus noise; full row rank with probability one."""
    value = np.hstack([np.eye(n_y), np.zeros((n_y, n_z - n_y))])
    value += noise * rng.normal(size=(n_y, n_z))
    return Projection(matrix=Parameter(f"{prefix}.matrix", value))


@dataclass
class SolverConfig:
    """Fixed-step integration plan.

    horizon is the number of stored states; substeps integration steps of
    size dt are taken between consecutive stored states.
    """

    method: str = "rk4"
    dt: float = 0.1
    horizon: int = 10
    substeps: int = 1

    def __post_init__(self):
        if self.method not in ("euler", "rk4"):
            raise RolloutError(f"unknown solver method: {self.method}")
        if self.dt <= 0:
            raise RolloutError("dt must be positive")
        if self.horizon < 1:
            raise RolloutError("horizon must be at least 1")
        if self.substeps < 1:
            raise RolloutError("substeps must be at least 1")

    @classmethod
    def for_duration(cls, horizon: int, method: str = "rk4",
                     substeps: int = 1, duration: float = 1.0) -> "SolverConfig":
        """Spread `duration` time units over horizon stored states."""
        if horizon < 1:
            raise RolloutError("horizon must be at least 1")
        if duration <= 0:
            raise RolloutError("duration must be positive")
        intervals = max(horizon - 1, 1)
        return cls(method=method, dt=duration / (intervals * substeps),
                   horizon=horizon, substeps=substeps)

    @property
    def stride(self) -> float:
        """Time between stored states."""
        return self.dt * self.substeps


@dataclass
class Trajectory:
    """Stored rollout: states[k] is the observation at time k * dt."""

    states: np.ndarray
    dt: float

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 2 or self.states.shape[0] < 1:
            raise RolloutError(f"trajectory states must be (H, N_y), got {self.states.shape}")
        if not np.all(np.isfinite(self.states)):
            raise RolloutError("trajectory contains non-finite states")
        if self.dt <= 0:
            raise RolloutError("trajectory dt must be positive")

    @property
    def horizon(self) -> int:
        return self.states.shape[0]

    def times(self) -> np.ndarray:
        return np.arange(self.horizon) * self.dt


def _gram_inverse(proj: Projection) -> Tensor:
    Pm = ad.as_tensor(proj.matrix)
    gram = ad.matmul(Pm, ad.transpose(Pm))
    cond = np.linalg.cond(gram.data)
    if not np.isfinite(cond) or cond > 1e12:
        raise RolloutError(
            f"projection rows are numerically dependent (condition {cond:.3e})")
    return ad.inv(gram)


def encode_initial_batch(proj: Projection, stack: BijectionStack, Y0) -> Tensor:
    """Least-squares latent embedding of a (B, N_y) batch of observations."""
    Y0 = ad.as_tensor(Y0)
    if Y0.data.ndim != 2 or Y0.data.shape[1] != proj.n_y:
        raise ad.ShapeMismatch("encode_initial", Y0.data.shape, (proj.n_y,))
    U = stack.inverse(Y0)
    gram_inv = _gram_inverse(proj)
    return ad.matmul(ad.matmul(U, gram_inv), ad.as_tensor(proj.matrix))


def encode_initial(proj: Projection, stack: BijectionStack, y0) -> Tensor:
    y0 = ad.as_tensor(y0)
    if y0.data.ndim != 1:
        raise ad.ShapeMismatch("encode_initial", y0.data.shape, (proj.n_y,))
    Z0 = encode_initial_batch(proj, stack, ad.reshape(y0, (1, -1)))
    return ad.reshape(Z0, (proj.n_z,))


def decode_states(proj: Projection, stack: BijectionStack, Z) -> Tensor:
    """Map latent rows through the projection and the output stack."""
    Z = ad.as_tensor(Z)
    return stack.forward(ad.matmul(Z, ad.transpose(ad.as_tensor(proj.matrix))))


def _step(mats: ren.RenMatrices, Z: Tensor, dt: float, method: str) -> Tensor:
    if method == "euler":
        return ad.add(Z, ad.mul(ren.latent_derivative_batch(mats, Z), dt))
    k1 = ren.latent_derivative_batch(mats, Z)
    k2 = ren.latent_derivative_batch(mats, ad.add(Z, ad.mul(k1, dt / 2.0)))
    k3 = ren.latent_derivative_batch(mats, ad.add(Z, ad.mul(k2, dt / 2.0)))
    k4 = ren.latent_derivative_batch(mats, ad.add(Z, ad.mul(k3, dt)))
    incr = ad.add(ad.add(k1, ad.mul(ad.add(k2, k3), 2.0)), k4)
    return ad.add(Z, ad.mul(incr, dt / 6.0))


def integrate_batch(mats: ren.RenMatrices, Z0, cfg: SolverConfig) -> list[Tensor]:
    """Latent trajectories for a (B, n) batch; returns horizon tensors of (B, n)."""
    Z = ad.as_tensor(Z0)
    if Z.data.ndim != 2 or Z.data.shape[1] != mats.n:
        raise ad.ShapeMismatch("integrate", Z.data.shape, (mats.n,))
    if not np.all(np.isfinite(Z.data)):
        raise RolloutError("integrate: non-finite initial state")
    stored = [Z]
    for k in range(cfg.horizon - 1):
        for _ in range(cfg.substeps):
            Z = _step(mats, Z, cfg.dt, cfg.method)
        if not np.all(np.isfinite(Z.data)):
            raise RolloutError(f"integrate: non-finite state at step {k + 1}")
        stored.append(Z)
    return stored


def integrate(mats: ren.RenMatrices, z0, cfg: SolverConfig) -> Tensor:
    """Latent trajectory (horizon, n) from a single initial state."""
    z0 = ad.as_tensor(z0)
    if z0.data.ndim != 1:
        raise ad.ShapeMismatch("integrate", z0.data.shape, (mats.n,))
    stored = integrate_batch(mats, ad.reshape(z0, (1, -1)), cfg)
    return ad.concat(stored, axis=0)


def rollout(mats: ren.RenMatrices, proj: Projection, stack: BijectionStack,
            y0, cfg: SolverConfig) -> Trajectory:
    """Full policy rollout from one observation; inference only, no tape."""
    with ad.no_grad():
        z0 = encode_initial(proj, stack, np.asarray(y0, dtype=np.float64))
        Z = integrate(mats, z0, cfg)
        Y = decode_states(proj, stack, Z)
    return Trajectory(states=Y.data, dt=cfg.stride)


def rollout_flat(mats: ren.RenMatrices, proj: Projection, stack: BijectionStack,
                 Y0, cfg: SolverConfig) -> Tensor:
    """Tracked rollouts from (B, N_y) initial observations.

    Returns an (H*B, N_y) tensor whose row t*B + b is trajectory b at step t,
    suitable for loss evaluation on the tape.
    """
    Z0 = encode_initial_batch(proj, stack, Y0)
    stored = integrate_batch(mats, Z0, cfg)
    return decode_states(proj, stack, ad.concat(stored, axis=0))


def rollout_batch(mats: ren.RenMatrices, proj: Projection, stack: BijectionStack,
                  Y0, cfg: SolverConfig) -> np.ndarray:
    """Rollouts from (B, N_y) initial observations, returned as (B, H, N_y)."""
    Y0 = np.asarray(Y0, dtype=np.float64)
    with ad.no_grad():
        Y = rollout_flat(mats, proj, stack, Y0, cfg)
    B = Y0.shape[0]
    return Y.data.reshape(cfg.horizon, B, proj.n_y).transpose(1, 0, 2)
