"""Reverse-mode automatic differentiation over dense float64 arrays.

A global tape records operations while a `record()` context is active.
Values are plain numpy arrays wrapped in `Tensor`; gradients flow back
into `Parameter` leaves on `backward()`. The tape is rebuilt per training
step, so there is no graph reuse machinery.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class AutodiffError(Exception):
    pass


class ShapeMismatch(AutodiffError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")


class SingularMatrixError(AutodiffError):
    def __init__(self, op: str, cond: float):
        self.op = op
        self.cond = cond
        super().__init__(f"{op}: matrix numerically singular (condition estimate {cond:.3e})")


class NonFiniteGradient(AutodiffError):
    def __init__(self, op: str):
        self.op = op
        super().__init__(f"backward: non-finite gradient produced at op '{op}'")


class _Node:
    __slots__ = ("op", "parents", "pullbacks", "param")

    def __init__(self, op, parents, pullbacks, param=None):
        self.op = op
        self.parents = parents
        self.pullbacks = pullbacks
        self.param = param


class Tape:
    """Append-only op record; backward walks it in reverse insertion order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: dict[int, int] = {}

    def _add(self, node: _Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, param: "Parameter") -> int:
        nid = self._leaves.get(id(param))
        if nid is None:
            nid = self._add(_Node("leaf", (), (), param=param))
            self._leaves[id(param)] = nid
        return nid


_TAPE: Tape | None = None


@contextmanager
def record():
    """Activate a fresh tape; restores the previous one on exit."""
    global _TAPE
    prev = _TAPE
    _TAPE = Tape()
    try:
        yield _TAPE
    finally:
        _TAPE = prev


@contextmanager
def no_grad():
    global _TAPE
    prev = _TAPE
    _TAPE = None
    try:
        yield
    finally:
        _TAPE = prev


class Tensor:
    """Dense float64 array, optionally tracked on the active tape."""

    __slots__ = ("data", "node", "tape")

    def __init__(self, data, node: int | None = None, tape: Tape | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node = node
        self.tape = tape

    @staticmethod
    def from_array(data) -> "Tensor":
        """Construct from external input; rejects NaN/Inf."""
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise AutodiffError("Tensor.from_array: non-finite values in input")
        return Tensor(arr.copy())

    @property
    def shape(self):
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.node is not None and self.tape is _TAPE and _TAPE is not None

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, tracked={self.tracked})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Parameter:
    """Named trainable array with a gradient accumulator of the same shape."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(self.value)):
            raise AutodiffError(f"Parameter {name}: non-finite initial value")
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0

    def as_tensor(self) -> Tensor:
        if _TAPE is None:
            return Tensor(self.value)
        return Tensor(self.value, node=_TAPE.leaf(self), tape=_TAPE)

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.shape})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Parameter):
        return x.as_tensor()
    return Tensor(np.asarray(x, dtype=np.float64))


def _result(op: str, out: np.ndarray, deps: Sequence[tuple[Tensor, Callable]]) -> Tensor:
    """Wrap an op output, recording a node when any dependency is tracked."""
    t = _TAPE
    if t is None:
        return Tensor(out)
    parents = []
    pullbacks = []
    for dep, pb in deps:
        if dep.node is not None and dep.tape is t:
            parents.append(dep.node)
            pullbacks.append(pb)
    if not parents:
        return Tensor(out)
    nid = t._add(_Node(op, tuple(parents), tuple(pullbacks)))
    return Tensor(out, node=nid, tape=t)


def _binary_shapes(op: str, a: Tensor, b: Tensor):
    # scalar-tensor broadcasting only
    if a.data.shape != b.data.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ShapeMismatch(op, a.data.shape, b.data.shape)


def _reduce_like(g: np.ndarray, ref: np.ndarray) -> np.ndarray:
    if ref.ndim == 0 and g.ndim != 0:
        return np.sum(g)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    out = a.data + b.data
    return _result("add", out, [
        (a, lambda g, ra=a.data: _reduce_like(g, ra)),
        (b, lambda g, rb=b.data: _reduce_like(g, rb)),
    ])


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    out = a.data - b.data
    return _result("sub", out, [
        (a, lambda g, ra=a.data: _reduce_like(g, ra)),
        (b, lambda g, rb=b.data: _reduce_like(-g, rb)),
    ])


def mul(a, b) -> Tensor:
    """Elementwise product; either side may be a scalar."""
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    out = a.data * b.data
    ad, bd = a.data, b.data
    return _result("mul", out, [
        (a, lambda g: _reduce_like(g * bd, ad)),
        (b, lambda g: _reduce_like(g * ad, bd)),
    ])


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0 or ad.ndim > 2 or bd.ndim > 2:
        raise ShapeMismatch("matmul", ad.shape, bd.shape)
    if ad.shape[-1] != (bd.shape[0] if bd.ndim >= 1 else None):
        raise ShapeMismatch("matmul", ad.shape, bd.shape)
    out = ad @ bd

    def pull_a(g):
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd
        if ad.ndim == 1:  # (k,) @ (k,n) -> (n,)
            return bd @ g
        if bd.ndim == 1:  # (m,k) @ (k,) -> (m,)
            return np.outer(g, bd)
        return g @ bd.T

    def pull_b(g):
        if ad.ndim == 1 and bd.ndim == 1:
            return g * ad
        if ad.ndim == 1:
            return np.outer(ad, g)
        if bd.ndim == 1:
            return ad.T @ g
        return ad.T @ g

    return _result("matmul", out, [(a, pull_a), (b, pull_b)])


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatch("transpose", a.data.shape)
    return _result("transpose", a.data.T.copy(), [(a, lambda g: g.T)])


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result("tanh", out, [(a, lambda g: g * (1.0 - out * out))])


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result("exp", out, [(a, lambda g: g * out)])


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise AutodiffError("log: non-positive input")
    ad = a.data
    return _result("log", np.log(ad), [(a, lambda g: g / ad)])


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _result("square", ad * ad, [(a, lambda g: 2.0 * ad * g)])


def vsum(a) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape
    return _result("sum", np.sum(a.data), [(a, lambda g: np.full(shape, g))])


def mean(a) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape
    n = a.data.size
    return _result("mean", np.mean(a.data), [(a, lambda g: np.full(shape, g / n))])


def norm2(a) -> Tensor:
    """Euclidean norm of the flattened input; gradient is zero at the origin."""
    a = as_tensor(a)
    ad = a.data
    out = float(np.sqrt(np.sum(ad * ad)))

    def pull(g):
        if out == 0.0:
            return np.zeros_like(ad)
        return (g / out) * ad

    return _result("norm2", np.asarray(out), [(a, pull)])


def logsumexp(a) -> Tensor:
    """log(sum(exp(v))) over a vector, max-shifted for stability."""
    a = as_tensor(a)
    v = a.data
    if v.ndim != 1 or v.size == 0:
        raise ShapeMismatch("logsumexp", v.shape)
    m = np.max(v)
    shifted = np.exp(v - m)
    s = np.sum(shifted)
    out = m + np.log(s)
    soft = shifted / s
    return _result("logsumexp", np.asarray(out), [(a, lambda g: g * soft)])


def softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad)
    sig = np.where(ad >= 0, 1.0 / (1.0 + np.exp(-np.abs(ad))),
                   np.exp(-np.abs(ad)) / (1.0 + np.exp(-np.abs(ad))))
    return _result("softplus", out, [(a, lambda g: g * sig)])


def inv(a) -> Tensor:
    """Square-matrix inverse by LU; gradient uses d(A^-1) = -A^-1 dA A^-1."""
    a = as_tensor(a)
    ad = a.data
    if ad.ndim != 2 or ad.shape[0] != ad.shape[1]:
        raise ShapeMismatch("inv", ad.shape)
    try:
        out = np.linalg.inv(ad)
    except np.linalg.LinAlgError:
        raise SingularMatrixError("inv", float(np.linalg.cond(ad)))
    if not np.all(np.isfinite(out)):
        raise SingularMatrixError("inv", float(np.linalg.cond(ad)))
    return _result("inv", out, [(a, lambda g: -out.T @ g @ out.T)])


def concat(parts: Iterable, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise AutodiffError("concat: empty input")
    datas = [p.data for p in parts]
    out = np.concatenate(datas, axis=axis)
    deps = []
    offset = 0
    for p, d in zip(parts, datas):
        size = d.shape[axis]
        lo = offset

        def pull(g, lo=lo, size=size):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, lo + size)
            return g[tuple(sl)]

        deps.append((p, pull))
        offset += size
    return _result("concat", out, deps)


def split(a, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    a = as_tensor(a)
    ad = a.data
    if sum(sizes) != ad.shape[axis]:
        raise ShapeMismatch("split", ad.shape, (sum(sizes),))
    outs = []
    offset = 0
    full_shape = ad.shape
    for size in sizes:
        sl = [slice(None)] * ad.ndim
        sl[axis] = slice(offset, offset + size)
        piece = ad[tuple(sl)].copy()
        lo = offset

        def pull(g, lo=lo, size=size):
            buf = np.zeros(full_shape)
            psl = [slice(None)] * buf.ndim
            psl[axis] = slice(lo, lo + size)
            buf[tuple(psl)] = g
            return buf

        outs.append(_result("split", piece, [(a, pull)]))
        offset += size
    return outs


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    out = a.data.reshape(shape)
    return _result("reshape", out, [(a, lambda g: g.reshape(old))])


def add_rowvec(m, v) -> Tensor:
    """Add a vector to every row of a matrix."""
    m, v = as_tensor(m), as_tensor(v)
    if m.data.ndim != 2 or v.data.ndim != 1 or m.data.shape[1] != v.data.shape[0]:
        raise ShapeMismatch("add_rowvec", m.data.shape, v.data.shape)
    out = m.data + v.data[None, :]
    return _result("add_rowvec", out, [
        (m, lambda g: g),
        (v, lambda g: g.sum(axis=0)),
    ])


def diag(v) -> Tensor:
    v = as_tensor(v)
    if v.data.ndim != 1:
        raise ShapeMismatch("diag", v.data.shape)
    return _result("diag", np.diag(v.data), [(v, lambda g: np.diagonal(g).copy())])


def clip_min(a, floor: float) -> Tensor:
    """max(x, floor) elementwise; gradient passes only where x > floor."""
    a = as_tensor(a)
    ad = a.data
    mask = ad > floor
    out = np.where(mask, ad, floor)
    return _result("clip_min", out, [(a, lambda g: g * mask)])


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    if np.any(ad == 0.0):
        raise AutodiffError("reciprocal: zero input")
    out = 1.0 / ad
    return _result("reciprocal", out, [(a, lambda g: -g * out * out)])


def stack_rows(vectors: Sequence) -> Tensor:
    """Stack 1-D tensors of equal length into a matrix, one per row."""
    rows = [reshape(as_tensor(v), (1, -1)) for v in vectors]
    return concat(rows, axis=0)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable Parameter's grad.

    A constant (untracked) scalar is a no-op: nothing is reachable.
    """
    if not isinstance(loss, Tensor):
        raise AutodiffError("backward: loss must be a Tensor")
    if loss.data.ndim != 0:
        raise AutodiffError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if loss.node is None or loss.tape is not _TAPE or _TAPE is None:
        return
    tape = _TAPE
    grads: list[np.ndarray | None] = [None] * (loss.node + 1)
    grads[loss.node] = np.ones(())
    for i in range(loss.node, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = tape.nodes[i]
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(node.op)
        if node.param is not None:
            node.param.grad += g
            continue
        for pid, pb in zip(node.parents, node.pullbacks):
            contrib = pb(g)
            if grads[pid] is None:
                grads[pid] = np.array(contrib, dtype=np.float64)
            else:
                grads[pid] = grads[pid] + contrib
        grads[i] = None


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per component is |analytic - numeric| / max(|analytic|, 1e-8).
    """
    if step <= 0:
        raise AutodiffError("grad_check: step must be positive")
    p = Parameter("grad_check_x", np.array(x.data, copy=True))
    with record():
        out = f(p.as_tensor())
        if out.data.ndim != 0:
            raise AutodiffError("grad_check: f must be scalar-valued")
        backward(out)
    analytic = p.grad.copy()
    numeric = np.zeros_like(analytic)
    base = p.value
    flat = base.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(Tensor(base)).data)
            flat[i] = orig - step
            fm = float(f(Tensor(base)).data)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * step)
    denom = np.maximum(np.abs(analytic), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def global_grad_norm(params: Iterable[Parameter]) -> float:
    total = 0.0
    for p in params:
        total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))
