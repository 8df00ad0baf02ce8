"""Recurrent equilibrium network with contraction built into the parameterization.

The latent dynamics are dz/dt = A z + B1 w with the implicit layer
w = tanh(C1 z + D11 w). `assemble` maps unconstrained free parameters to
matrices for which the contraction certificate

    M = [[-A'P - PA - 2*gamma*P,  -C1'Lam - P B1],
         [-Lam C1 - B1'P,          2*Lam - Lam D11 - D11'Lam]]

equals X'X + eps*I by algebraic identity, so M is positive definite with
margin eps for every parameter value and the flow contracts at rate gamma
in the metric V(dz) = dz' P dz.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


class RenError(Exception):
    pass


class ImplicitSolveError(RenError):
    def __init__(self, residual: float, iterations: int):
        self.residual = residual
        self.iterations = iterations
        super().__init__(
            f"implicit layer failed to converge: residual {residual:.3e} "
            f"after {iterations} iterations (tolerance 1e-10)")


@dataclass
class RenParams:
    """Unconstrained free parameters of the contractive system.

    X feeds the certificate matrix X'X + eps*I, X_P the metric
    X_P'X_P + eps_P*I, lambda_log the diagonal multiplier, S_A/S_D the
    skew-symmetric parts of A and D11, and B1 is free.
    """

    n: int
    q: int
    X: Parameter
    X_P: Parameter
    lambda_log: Parameter
    S_A: Parameter
    S_D: Parameter
    B1: Parameter
    eps: float = 1e-2
    eps_P: float = 1.0

    def __post_init__(self):
        if self.n < 1 or self.q < 1:
            raise RenError(f"dimensions must be positive, got n={self.n}, q={self.q}")
        if self.eps <= 0 or self.eps_P <= 0:
            raise RenError("eps and eps_P must be positive")

    def parameters(self) -> list[Parameter]:
        return [self.X, self.X_P, self.lambda_log, self.S_A, self.S_D, self.B1]


def random_ren_params(n: int, q: int, rng: np.random.Generator,
                      eps: float = 1e-2, eps_P: float = 1.0,
                      std_scale: float = 0.2, prefix: str = "ren") -> RenParams:
    """Gaussian free parameters with std std_scale/sqrt(fan_in), lambda_log zero."""
    def mat(name, rows, cols, fan_in):
        return Parameter(f"{prefix}.{name}", rng.normal(size=(rows, cols)) * (std_scale / np.sqrt(fan_in)))

    return RenParams(
        n=n, q=q,
        X=mat("X", n + q, n + q, n + q),
        X_P=mat("X_P", n, n, n),
        lambda_log=Parameter(f"{prefix}.lambda_log", np.zeros(q)),
        S_A=mat("S_A", n, n, n),
        S_D=mat("S_D", q, q, q),
        B1=mat("B1", n, q, q),
        eps=eps, eps_P=eps_P,
    )


@dataclass
class ContractionRateSpec:
    """Fixed rate, or gamma_min + softplus(gamma_raw) when learnable."""

    mode: str = "fixed"
    value: float = 1.0
    gamma_min: float = 0.5
    gamma_raw: Parameter | None = None

    def __post_init__(self):
        if self.mode not in ("fixed", "learnable"):
            raise RenError(f"unknown contraction rate mode: {self.mode}")
        if self.mode == "fixed" and self.value <= 0:
            raise RenError("fixed contraction rate must be positive")
        if self.mode == "learnable":
            if self.gamma_min <= 0:
                raise RenError("gamma_min must be positive")
            if self.gamma_raw is None:
                raise RenError("learnable mode requires a gamma_raw parameter")

    def effective(self) -> Tensor:
        if self.mode == "fixed":
            return Tensor(np.asarray(self.value))
        return ad.add(ad.softplus(self.gamma_raw.as_tensor()), self.gamma_min)

    def parameters(self) -> list[Parameter]:
        return [self.gamma_raw] if self.mode == "learnable" else []


@dataclass
class RenMatrices:
    """Assembled system matrices. Tensors are tracked when built under a tape."""

    A: Tensor
    B1: Tensor
    C1: Tensor
    D11: Tensor
    P: Tensor
    lam: Tensor  # diagonal of Lambda
    gamma: Tensor

    _np: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.A.data.shape[0]

    @property
    def q(self) -> int:
        return self.D11.data.shape[0]

    @property
    def gamma_value(self) -> float:
        return float(self.gamma.data)

    def numpy_view(self) -> dict:
        """Plain-array copies for untracked fast paths."""
        if not self._np:
            self._np = {
                "A": self.A.data, "B1": self.B1.data, "C1": self.C1.data,
                "D11": self.D11.data, "P": self.P.data, "lam": self.lam.data,
                "gamma": float(self.gamma.data),
            }
        return self._np


def skew(S: Tensor) -> Tensor:
    return ad.mul(ad.sub(S, ad.transpose(S)), 0.5)


def assemble(params: RenParams, gamma) -> RenMatrices:
    """Build contractive system matrices from free parameters at rate gamma.

    gamma may be a float or a scalar Tensor (learnable rate).
    """
    g = ad.as_tensor(gamma)
    if float(g.data) <= 0:
        raise RenError(f"contraction rate must be positive, got {float(g.data)}")
    n, q = params.n, params.q

    X = ad.as_tensor(params.X)
    H = ad.add(ad.matmul(ad.transpose(X), X), Tensor(params.eps * np.eye(n + q)))
    top, bottom = ad.split(H, [n, q], axis=0)
    H11, H12 = ad.split(top, [n, q], axis=1)
    _, H22 = ad.split(bottom, [n, q], axis=1)

    X_P = ad.as_tensor(params.X_P)
    P = ad.add(ad.matmul(ad.transpose(X_P), X_P), Tensor(params.eps_P * np.eye(n)))
    P_inv = ad.inv(P)

    lam = ad.exp(ad.as_tensor(params.lambda_log))
    lam_inv = ad.reciprocal(lam)
    Lam = ad.diag(lam)
    Lam_inv = ad.diag(lam_inv)

    B1 = ad.as_tensor(params.B1)

    two_gamma_P = ad.mul(P, ad.mul(g, 2.0))
    A = ad.matmul(P_inv, ad.add(ad.mul(ad.add(H11, two_gamma_P), -0.5),
                                skew(ad.as_tensor(params.S_A))))
    D11 = ad.matmul(Lam_inv, ad.add(ad.sub(Lam, ad.mul(H22, 0.5)),
                                    skew(ad.as_tensor(params.S_D))))
    C1 = ad.mul(ad.matmul(Lam_inv, ad.add(ad.transpose(H12),
                                          ad.matmul(ad.transpose(B1), P))), -1.0)

    mats = RenMatrices(A=A, B1=B1, C1=C1, D11=D11, P=P, lam=lam, gamma=g)
    for name, t in (("A", A), ("C1", C1), ("D11", D11), ("P", P)):
        if not np.all(np.isfinite(t.data)):
            raise RenError(f"assemble produced non-finite {name}")
    return mats


def lmi_matrix(mats: RenMatrices) -> np.ndarray:
    """Reconstruct the contraction certificate from the assembled matrices."""
    v = mats.numpy_view()
    A, B1, C1, D11, P = v["A"], v["B1"], v["C1"], v["D11"], v["P"]
    Lam = np.diag(v["lam"])
    g = v["gamma"]
    upper_left = -A.T @ P - P @ A - 2.0 * g * P
    upper_right = -C1.T @ Lam - P @ B1
    lower_right = 2.0 * Lam - Lam @ D11 - D11.T @ Lam
    return np.block([[upper_left, upper_right], [upper_right.T, lower_right]])


def certificate_margin(mats: RenMatrices) -> float:
    return float(np.linalg.eigvalsh(lmi_matrix(mats)).min())


_PICARD_DAMPING = 0.8
_PICARD_ITERS = 60
_MAX_ITERS = 200
_TOL = 1e-10


def _solve_equilibrium(view: dict, zc: np.ndarray,
                       w0: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, float]:
    """Solve w = tanh(zc + w @ D11') rowwise for a (B, q) batch.

    Damped Picard warm-up, then Newton on the v-space residual
    F(v) = v - zc - tanh(v) @ D11'. Returns (v, w, worst residual).
    """
    D11 = view["D11"]
    D11T = D11.T
    q = D11.shape[0]
    w = np.zeros_like(zc) if w0 is None else w0.copy()
    it = 0
    r = np.inf
    for _ in range(_PICARD_ITERS):
        it += 1
        t = np.tanh(zc + w @ D11T)
        r = float(np.abs(t - w).max())
        w = (1.0 - _PICARD_DAMPING) * w + _PICARD_DAMPING * t
        if r <= 1e-13:
            break

    v = zc + w @ D11T
    eye = np.eye(q)
    while it < _MAX_ITERS:
        w = np.tanh(v)
        F = v - zc - w @ D11T
        r = float(np.abs(F).max())
        if r <= 1e-13:
            break
        it += 1
        s = 1.0 - w * w
        J = eye[None, :, :] - D11[None, :, :] * s[:, None, :]
        try:
            dv = np.linalg.solve(J, F[..., None])[..., 0]
        except np.linalg.LinAlgError:
            raise ImplicitSolveError(r, it)
        v = v - dv

    w = np.tanh(v)
    final = float(np.abs(w - np.tanh(zc + w @ D11T)).max())
    if final > _TOL:
        raise ImplicitSolveError(final, it)
    return v, w, final


def _tracked_equilibrium(mats: RenMatrices, zc_rows: list[Tensor],
                         v_star: np.ndarray) -> list[Tensor]:
    """Re-express the converged equilibrium so gradients are exact.

    At the solution v* of v = zc + D11 tanh(v), the implicit derivative is
    dv = (I - D11 S)^-1 (dzc + dD11 tanh(v*)) with S = diag(tanh'(v*)).
    Writing v as inv(I - D11 S) @ (zc + D11 (w* - S v*)) reproduces both the
    value and that derivative using ordinary tape ops.
    """
    D11 = mats.D11
    q = v_star.shape[1]
    eye = Tensor(np.eye(q))
    out = []
    for b, zc in enumerate(zc_rows):
        vb = v_star[b]
        wb = np.tanh(vb)
        sb = 1.0 - wb * wb
        B = ad.sub(eye, ad.matmul(D11, Tensor(np.diag(sb))))
        rhs = ad.add(zc, ad.matmul(D11, Tensor(wb - sb * vb)))
        v = ad.matmul(ad.inv(B), rhs)
        w = ad.add(Tensor(wb), ad.mul(Tensor(sb), ad.sub(v, Tensor(vb))))
        out.append(w)
    return out


def latent_derivative_batch(mats: RenMatrices, Z: Tensor) -> Tensor:
    """dz/dt for a (B, n) batch of latent states."""
    if Z.data.ndim != 2 or Z.data.shape[1] != mats.n:
        raise ad.ShapeMismatch("latent_derivative", Z.data.shape, (mats.n,))
    if not np.all(np.isfinite(Z.data)):
        raise RenError("latent_derivative: non-finite latent state")
    view = mats.numpy_view()
    tracked = Z.tracked or any(
        t.tracked for t in (mats.A, mats.B1, mats.C1, mats.D11))
    if tracked:
        zc = ad.matmul(Z, ad.transpose(mats.C1))
        v_star, _, _ = _solve_equilibrium(view, zc.data)
        rows = ad.split(zc, [1] * Z.data.shape[0], axis=0)
        rows = [ad.reshape(r, (mats.q,)) for r in rows]
        w_rows = _tracked_equilibrium(mats, rows, v_star)
        W = ad.stack_rows(w_rows)
        return ad.add(ad.matmul(Z, ad.transpose(mats.A)),
                      ad.matmul(W, ad.transpose(mats.B1)))
    zc = Z.data @ view["C1"].T
    _, w, _ = _solve_equilibrium(view, zc)
    return Tensor(Z.data @ view["A"].T + w @ view["B1"].T)


def latent_derivative(mats: RenMatrices, z) -> Tensor:
    """dz/dt for one latent state vector."""
    z = ad.as_tensor(z)
    if z.data.ndim != 1:
        raise ad.ShapeMismatch("latent_derivative", z.data.shape, (mats.n,))
    dZ = latent_derivative_batch(mats, ad.reshape(z, (1, -1)))
    return ad.reshape(dZ, (mats.n,))


def implicit_residual(mats: RenMatrices, z: np.ndarray) -> float:
    """Residual norm of the solved implicit layer at state z (diagnostic)."""
    view = mats.numpy_view()
    zc = np.atleast_2d(z) @ view["C1"].T
    _, w, _ = _solve_equilibrium(view, zc)
    return float(np.linalg.norm(w - np.tanh(zc + w @ view["D11"].T)))


def contraction_metric_energy(mats: RenMatrices, dz) -> Tensor:
    """Quadratic metric energy dz' P dz."""
    dz = ad.as_tensor(dz)
    return ad.matmul(ad.matmul(dz, mats.P), dz)
