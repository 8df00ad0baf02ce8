"""Demonstration datasets: CSV storage, normalization, resampling, synthesis,
and out-of-sample initial-state sampling.

A dataset is a list of state-only trajectories that share a final target
state. The single CSV layout is `demo_id,t,y0,...,y{N_y-1}` with rows grouped
by demo and ordered by time within each demo.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass

import numpy as np

from .bounds import SamplerSpec

TARGET_AGREEMENT = 1e-6
NORMALIZED_TARGET_TOL = 1e-9


class DataError(Exception):
    pass


@dataclass
class Dataset:
    """Expert demonstrations with a common target state."""

    demos: list[np.ndarray]
    target: np.ndarray
    name: str = "dataset"
    units: str = "raw"

    def __post_init__(self):
        if self.units not in ("raw", "normalized"):
            raise DataError(f"unknown units: {self.units}")
        if not self.demos:
            raise DataError("dataset needs at least one demonstration")
        self.demos = [np.atleast_2d(np.asarray(d, dtype=np.float64)) for d in self.demos]
        n_y = self.demos[0].shape[1]
        if n_y < 1:
            raise DataError("states need at least one dimension")
        for i, d in enumerate(self.demos):
            if d.ndim != 2 or d.shape[1] != n_y:
                raise DataError(f"demo {i} has shape {d.shape}, expected (*, {n_y})")
            if not np.all(np.isfinite(d)):
                raise DataError(f"demo {i} contains non-finite states")
        self.target = np.asarray(self.target, dtype=np.float64).reshape(n_y)
        if not np.all(np.isfinite(self.target)):
            raise DataError("target must be finite")

    @property
    def M(self) -> int:
        return len(self.demos)

    @property
    def n_y(self) -> int:
        return self.demos[0].shape[1]

    def initial_states(self) -> np.ndarray:
        return np.stack([d[0] for d in self.demos])

    def lengths(self) -> list[int]:
        return [d.shape[0] for d in self.demos]


@dataclass
class NormalizationSpec:
    """Affine map taking raw states to the unit box with the target at the
    origin: normalized = (raw + shift) / scale."""

    shift: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        self.shift = np.asarray(self.shift, dtype=np.float64).ravel()
        self.scale = np.asarray(self.scale, dtype=np.float64).ravel()
        if self.shift.shape != self.scale.shape:
            raise DataError("shift and scale must have the same length")
        if not (np.all(np.isfinite(self.shift)) and np.all(np.isfinite(self.scale))):
            raise DataError("normalization entries must be finite")
        if np.any(self.scale <= 0):
            raise DataError("scale factors must be positive")

    def apply(self, states: np.ndarray) -> np.ndarray:
        return (np.asarray(states, dtype=np.float64) + self.shift) / self.scale

    def invert(self, states: np.ndarray) -> np.ndarray:
        return np.asarray(states, dtype=np.float64) * self.scale - self.shift


def _float(text: str, path: str, lineno: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataError(f"{path}:{lineno}: cannot parse '{text}' as a number") from None


def load_csv(path: str) -> Dataset:
    """Read a dataset from a single CSV file.

    Errors carry the 1-based line number. Demos whose final states disagree
    beyond 1e-6 load with a warning; normalize() is where that becomes fatal.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines:
        raise DataError(f"{path}:1: empty file")
    header = lines[0].split(",")
    n_y = len(header) - 2
    expected = ["demo_id", "t"] + [f"y{i}" for i in range(n_y)]
    if n_y < 1 or header != expected:
        raise DataError(f"{path}:1: header must be demo_id,t,y0,...; got '{lines[0]}'")
    groups: dict[str, list[np.ndarray]] = {}
    order: list[str] = []
    last_t: dict[str, float] = {}
    current = None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != n_y + 2:
            raise DataError(f"{path}:{lineno}: expected {n_y + 2} columns, got {len(cells)}")
        demo_id = cells[0].strip()
        t = _float(cells[1], path, lineno)
        if demo_id not in groups:
            groups[demo_id] = []
            order.append(demo_id)
        elif demo_id != current:
            raise DataError(f"{path}:{lineno}: demo '{demo_id}' is not contiguous")
        else:
            if t <= last_t[demo_id]:
                raise DataError(f"{path}:{lineno}: t must increase within a demo")
        current = demo_id
        last_t[demo_id] = t
        groups[demo_id].append(
            np.array([_float(c, path, lineno) for c in cells[2:]], dtype=np.float64))
    if not order:
        raise DataError(f"{path}:2: no data rows")
    demos = [np.stack(groups[k]) for k in order]
    finals = np.stack([d[-1] for d in demos])
    spread = np.max(np.abs(finals - finals[0]))
    if spread > TARGET_AGREEMENT:
        warnings.warn(
            f"{path}: demo final states disagree by {spread:.3e}; "
            "a common target is required for normalization")
    name = os.path.splitext(os.path.basename(path))[0]
    return Dataset(demos=demos, target=finals[0], name=name)


def save_csv(ds: Dataset, path: str, times: list[np.ndarray] | None = None) -> None:
    """Write the single-file CSV layout; floats in shortest round-trip form."""
    if times is not None and len(times) != ds.M:
        raise DataError("one time vector per demo required")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("demo_id,t," + ",".join(f"y{i}" for i in range(ds.n_y)) + "\n")
        for m, demo in enumerate(ds.demos):
            ts = np.arange(demo.shape[0], dtype=np.float64) if times is None else times[m]
            for t, row in zip(ts, demo):
                cells = [str(m), repr(float(t))] + [repr(float(v)) for v in row]
                fh.write(",".join(cells) + "\n")


def normalize(ds: Dataset) -> tuple[Dataset, NormalizationSpec]:
    """Shift the common target to the origin and scale each dimension into
    [-1, 1]. Fails when the demos do not actually share the target."""
    finals = np.stack([d[-1] for d in ds.demos])
    if np.max(np.abs(finals - ds.target)) > TARGET_AGREEMENT:
        raise DataError(
            "demos do not share a common final target; cannot normalize")
    shift = -ds.target
    centered = [d + shift for d in ds.demos]
    extent = np.max(np.abs(np.concatenate(centered, axis=0)), axis=0)
    scale = np.where(extent > 0, extent, 1.0)
    demos = [c / scale for c in centered]
    worst = max(float(np.max(np.abs(d[-1]))) for d in demos)
    if worst > NORMALIZED_TARGET_TOL:
        raise DataError(
            f"normalized final states stray {worst:.3e} from the origin; "
            "demos disagree too much on the target")
    out = Dataset(demos=demos, target=np.zeros(ds.n_y), name=ds.name,
                  units="normalized")
    return out, NormalizationSpec(shift=shift, scale=scale)


def denormalize(ds: Dataset, spec: NormalizationSpec) -> Dataset:
    demos = [spec.invert(d) for d in ds.demos]
    return Dataset(demos=demos, target=spec.invert(ds.target), name=ds.name,
                   units="raw")


def resample(ds: Dataset, H: int) -> Dataset:
    """Linearly interpolate every demo to exactly H points, equally spaced in
    index fraction; both endpoints are copied bit-exactly."""
    if H < 2:
        raise DataError(f"resample needs H >= 2, got {H}")
    demos = []
    for d in ds.demos:
        N = d.shape[0]
        x_new = np.arange(H, dtype=np.float64) * (N - 1) / (H - 1)
        x_old = np.arange(N, dtype=np.float64)
        cols = [np.interp(x_new, x_old, d[:, j]) for j in range(d.shape[1])]
        new = np.stack(cols, axis=1)
        new[0] = d[0]
        new[-1] = d[-1]
        demos.append(new)
    return Dataset(demos=demos, target=ds.target, name=ds.name, units=ds.units)


def _base_curve(kind: str, s: np.ndarray, n_y: int) -> np.ndarray:
    # s runs 0 -> 1; every dimension carries a (1 - s) factor so the curve
    # ends exactly at the origin
    rem = 1.0 - s
    cols = []
    for d in range(n_y):
        if kind == "line":
            cols.append(rem * (1.0 + 0.5 * d))
        elif kind == "sine":
            if d == 0:
                cols.append(rem)
            else:
                cols.append(rem * np.sin(np.pi * (d + 1) * rem))
        elif kind == "s_curve":
            if d == 0:
                cols.append(rem)
            else:
                cols.append(rem * np.tanh(6.0 * (rem - 0.5)))
        else:
            raise DataError(f"unknown curve kind: {kind}")
    return np.stack(cols, axis=1)


def synthesize(kind: str, M: int, H: int, n_y: int, noise_std: float,
               seed: int) -> Dataset:
    """Deterministic parametric demos ending at the origin; each demo's
    initial state is perturbed and the perturbation decays to zero along
    the curve."""
    if M < 1 or H < 2 or n_y < 1:
        raise DataError("synthesize needs M >= 1, H >= 2, n_y >= 1")
    if noise_std < 0:
        raise DataError("noise_std must be non-negative")
    rng = np.random.default_rng(seed)
    s = np.arange(H, dtype=np.float64) / (H - 1)
    base = _base_curve(kind, s, n_y)
    demos = []
    for _ in range(M):
        delta = rng.normal(0.0, 1.0, size=n_y) * noise_std
        demos.append(base + (1.0 - s)[:, None] * delta[None, :])
    return Dataset(demos=demos, target=np.zeros(n_y), name=f"{kind}-synthetic")


def sample_oos_inits(ds: Dataset, spec: SamplerSpec) -> np.ndarray:
    """Out-of-sample initial states: pick a demo uniformly, then draw a
    uniform point from the ball of radius radius_scale * |y0| around its
    initial state."""
    if spec.mode != "hypersphere":
        raise DataError("sample_oos_inits only draws hypersphere mode; "
                        "use sample_region_uniform for region-uniform")
    inits = ds.initial_states()
    norms = np.linalg.norm(inits, axis=1)
    if spec.radius_scale > 0 and np.all(norms == 0):
        raise DataError("all demo initial states sit at the origin; "
                        "the sampling radius is degenerate")
    rng = np.random.default_rng(spec.seed)
    out = np.empty((spec.count, ds.n_y))
    for i in range(spec.count):
        m = int(rng.integers(ds.M))
        radius = spec.radius_scale * norms[m]
        if radius == 0.0:
            out[i] = inits[m]
            continue
        direction = rng.normal(size=ds.n_y)
        direction /= np.linalg.norm(direction)
        # U^(1/n) radius profile gives the uniform ball measure
        r = radius * rng.uniform() ** (1.0 / ds.n_y)
        out[i] = inits[m] + r * direction
    return out
