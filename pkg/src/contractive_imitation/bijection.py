"""Invertible output map built from affine coupling layers.

Each layer freezes one half of the coordinates and applies an affine map
to the other half whose scale and shift are functions of the frozen half,
so the inverse is available in closed form. Scales are squashed through
s_clamp * tanh(.) to keep both directions numerically well conditioned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


class BijectionError(Exception):
    pass


@dataclass
class Mlp:
    """Fully connected perceptron; tanh on hidden layers, linear output."""

    weights: list[Parameter]
    biases: list[Parameter]

    def apply(self, X: Tensor) -> Tensor:
        h = X
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.add_rowvec(ad.matmul(h, ad.as_tensor(W)), ad.as_tensor(b))
            if i != last:
                h = ad.tanh(h)
        return h

    def parameters(self) -> list[Parameter]:
        return list(self.weights) + list(self.biases)


def random_mlp(sizes: list[int], rng: np.random.Generator, prefix: str,
               final_std: float = 0.0, hidden_scale: float = 1.0) -> Mlp:
    """Hidden weights ~ N(0, hidden_scale/sqrt(fan_in)); the output layer
    defaults to zero."""
    weights, biases = [], []
    last = len(sizes) - 2
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        std = final_std if i == last else hidden_scale / np.sqrt(fan_in)
        weights.append(Parameter(f"{prefix}.W{i}", rng.normal(size=(fan_in, fan_out)) * std))
        biases.append(Parameter(f"{prefix}.b{i}", np.zeros(fan_out)))
    return Mlp(weights=weights, biases=biases)


@dataclass
class CouplingLayer:
    """One affine coupling step on vectors of length dim.

    parity 0 freezes the leading ceil(dim/2) coordinates, parity 1 the
    trailing ones, so stacking alternating parities touches every entry.
    """

    dim: int
    parity: int
    s_net: Mlp
    t_net: Mlp
    s_clamp: float = 5.0

    def __post_init__(self):
        if self.dim < 2:
            raise BijectionError(f"coupling layer needs dim >= 2, got {self.dim}")
        if self.parity not in (0, 1):
            raise BijectionError(f"parity must be 0 or 1, got {self.parity}")
        if self.s_clamp <= 0:
            raise BijectionError("s_clamp must be positive")

    @property
    def keep_size(self) -> int:
        return (self.dim + 1) // 2

    def _split(self, Y: Tensor) -> tuple[Tensor, Tensor]:
        k, m = self.keep_size, self.dim - self.keep_size
        if self.parity == 0:
            keep, move = ad.split(Y, [k, m], axis=1)
        else:
            move, keep = ad.split(Y, [m, k], axis=1)
        return keep, move

    def _join(self, keep: Tensor, move: Tensor) -> Tensor:
        parts = [keep, move] if self.parity == 0 else [move, keep]
        return ad.concat(parts, axis=1)

    def _scale_shift(self, keep: Tensor) -> tuple[Tensor, Tensor]:
        s = ad.mul(ad.tanh(self.s_net.apply(keep)), self.s_clamp)
        t = self.t_net.apply(keep)
        return s, t

    def forward(self, Y: Tensor) -> Tensor:
        keep, move = self._split(Y)
        s, t = self._scale_shift(keep)
        moved = ad.add(ad.mul(move, ad.exp(s)), t)
        return self._join(keep, moved)

    def inverse(self, Y: Tensor) -> Tensor:
        keep, moved = self._split(Y)
        s, t = self._scale_shift(keep)
        move = ad.mul(ad.sub(moved, t), ad.exp(ad.mul(s, -1.0)))
        return self._join(keep, move)

    def parameters(self) -> list[Parameter]:
        return self.s_net.parameters() + self.t_net.parameters()


@dataclass
class BijectionStack:
    """Composition of coupling layers; an empty stack is the identity map."""

    dim: int
    layers: list[CouplingLayer] = field(default_factory=list)

    def __post_init__(self):
        if self.dim < 1:
            raise BijectionError(f"dim must be positive, got {self.dim}")
        for i, layer in enumerate(self.layers):
            if layer.dim != self.dim:
                raise BijectionError(
                    f"layer {i} has dim {layer.dim}, stack has dim {self.dim}")
            if layer.parity != i % 2:
                raise BijectionError(f"layer {i} breaks parity alternation")

    def _as_matrix(self, y) -> tuple[Tensor, bool]:
        t = ad.as_tensor(y)
        if not np.all(np.isfinite(t.data)):
            raise BijectionError("bijection input contains non-finite values")
        if t.data.ndim == 1:
            if t.data.shape[0] != self.dim:
                raise ad.ShapeMismatch("bijection", t.data.shape, (self.dim,))
            return ad.reshape(t, (1, self.dim)), True
        if t.data.ndim != 2 or t.data.shape[1] != self.dim:
            raise ad.ShapeMismatch("bijection", t.data.shape, (self.dim,))
        return t, False

    def forward(self, y) -> Tensor:
        Y, single = self._as_matrix(y)
        for layer in self.layers:
            Y = layer.forward(Y)
        return ad.reshape(Y, (self.dim,)) if single else Y

    def inverse(self, y) -> Tensor:
        Y, single = self._as_matrix(y)
        for layer in reversed(self.layers):
            Y = layer.inverse(Y)
        return ad.reshape(Y, (self.dim,)) if single else Y

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for layer in self.layers:
            out.extend(layer.parameters())
        return out


def random_coupling_stack(dim: int, n_layers: int, rng: np.random.Generator,
                          width: int = 32, s_clamp: float = 5.0,
                          final_std: float = 0.0, hidden_scale: float = 1.0,
                          prefix: str = "outmap") -> BijectionStack:
    """Alternating-parity stack; final_std = 0 makes it the identity at init."""
    if n_layers > 0 and dim < 2:
        raise BijectionError("coupling layers need dim >= 2")
    layers = []
    for i in range(n_layers):
        k = (dim + 1) // 2
        m = dim - k
        sizes = [k, width, width, m]
        layers.append(CouplingLayer(
            dim=dim, parity=i % 2,
            s_net=random_mlp(sizes, rng, f"{prefix}.{i}.s",
                             final_std=final_std, hidden_scale=hidden_scale),
            t_net=random_mlp(sizes, rng, f"{prefix}.{i}.t",
                             final_std=final_std, hidden_scale=hidden_scale),
            s_clamp=s_clamp,
        ))
    return BijectionStack(dim=dim, layers=layers)


def lipschitz_estimate(stack: BijectionStack, samples) -> float:
    """Largest pairwise expansion ratio ||g(a)-g(b)|| / ||a-b|| over the samples."""
    Y = np.asarray(samples, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[0] < 2:
        raise BijectionError("lipschitz_estimate needs at least 2 samples")
    with ad.no_grad():
        G = stack.forward(Tensor(Y)).data
    best = -np.inf
    found = False
    for i in range(Y.shape[0]):
        din = np.linalg.norm(Y[i + 1:] - Y[i], axis=1)
        dout = np.linalg.norm(G[i + 1:] - G[i], axis=1)
        ok = din > 0.0
        if np.any(ok):
            found = True
            best = max(best, float(np.max(dout[ok] / din[ok])))
    if not found:
        raise BijectionError("lipschitz_estimate needs at least 2 distinct samples")
    return best
