"""Shared test utilities that need the library (FD checks over Parameters)."""

import numpy as np

from contractive_imitation.autodiff import Tensor, backward, no_grad, record
from contractive_imitation.ren import RenMatrices


def direct_mats(A, B1, C1, D11, P=None, lam=None, gamma=1.0):
    """Hand-built system matrices for trivial cases; bypasses the parameterization."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    D11 = np.atleast_2d(np.asarray(D11, dtype=float))
    n, q = A.shape[0], D11.shape[0]
    return RenMatrices(
        A=Tensor(A),
        B1=Tensor(np.asarray(B1, dtype=float).reshape(n, q)),
        C1=Tensor(np.asarray(C1, dtype=float).reshape(q, n)),
        D11=Tensor(D11),
        P=Tensor(np.eye(n) if P is None else np.asarray(P, dtype=float)),
        lam=Tensor(np.ones(q) if lam is None else np.asarray(lam, dtype=float)),
        gamma=Tensor(np.asarray(gamma)),
    )


def fd_param_grads(loss_fn, params, step=1e-5):
    """Backprop and central-difference gradients, per parameter name.

    loss_fn must rebuild its computation from the current parameter values
    on each call and return a scalar Tensor. Returns {name: (analytic, numeric)}.
    """
    for p in params:
        p.zero_grad()
    with record():
        loss = loss_fn()
        backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}

    out = {}
    with no_grad():
        for p in params:
            numeric = np.zeros_like(p.value)
            flat = p.value.reshape(-1)
            nflat = numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = float(loss_fn().data)
                flat[i] = orig - step
                fm = float(loss_fn().data)
                flat[i] = orig
                nflat[i] = (fp - fm) / (2.0 * step)
            out[p.name] = (analytic[p.name], numeric)
    return out


def rk4_numpy(f, z0, dt, steps):
    """Plain RK4 on numpy arrays; independent of the library integrator."""
    z = np.array(z0, dtype=np.float64)
    out = [z.copy()]
    for _ in range(steps):
        k1 = f(z)
        k2 = f(z + 0.5 * dt * k1)
        k3 = f(z + 0.5 * dt * k2)
        k4 = f(z + dt * k3)
        z = z + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        out.append(z.copy())
    return np.array(out)
