"""End-to-end training: policy initialization, Adam steps on the weighted
rollout loss, optional contraction-rate learning, and text checkpoints.

One step rolls the policy out from every demonstration's initial state
(full batch), scores each rollout against all demos with inverse-distance
weights, averages, optionally adds the rate-learning term, backpropagates,
clips the global gradient norm, and applies Adam.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteGradient, Parameter, global_grad_norm
from .bijection import BijectionStack, random_coupling_stack
from .data import DataError, Dataset, NormalizationSpec, normalize, resample
from .losses import (
    EPS_DIST,
    Metric,
    augmented_loss,
    rollout_rows_to_trajectories,
    weighted_loss,
)
from .ren import (
    ContractionRateSpec,
    RenParams,
    assemble,
    certificate_margin,
    random_ren_params,
)
from .rollout import Projection, SolverConfig, random_projection, rollout_flat

CHECKPOINT_MAGIC = "cimit-checkpoint"
CHECKPOINT_VERSION = 1
GRAD_CLIP = 10.0
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
INIT_STD_SCALE = 0.2
PROJ_INIT_NOISE = 0.05


class TrainError(Exception):
    pass


@dataclass
class TrainConfig:
    """Model and optimization settings; defaults sized for small problems."""

    latent_dim: int = 32
    implicit_dim: int = 32
    coupling_layers: int = 4
    coupling_width: int = 32
    horizon: int = 30
    method: str = "rk4"
    substeps: int = 1
    metric: str = "mse"
    beta: float = 0.1
    lr: float = 0.01
    epochs: int = 1000
    seed: int = 0
    gamma_mode: str = "fixed"
    gamma: float = 1.0
    gamma_min: float = 0.5
    mu: float = 0.0
    c: float = 0.0
    gamma0: float = 0.0
    eps: float = 1e-2
    eps_P: float = 1.0
    eps_dist: float = EPS_DIST

    def __post_init__(self):
        if self.latent_dim < 1 or self.implicit_dim < 1:
            raise TrainError("latent_dim and implicit_dim must be at least 1")
        if self.coupling_layers < 0 or self.coupling_width < 1:
            raise TrainError("bad coupling net shape")
        if self.horizon < 2:
            raise TrainError("horizon must be at least 2")
        if self.metric not in ("mse", "soft_dtw"):
            raise TrainError(f"unknown metric: {self.metric}")
        if self.beta <= 0:
            raise TrainError("beta must be positive")
        # lr = 0 is allowed: a deliberate no-op run for diagnostics
        if self.lr < 0:
            raise TrainError("lr must be non-negative")
        if self.epochs < 0:
            raise TrainError("epochs must be non-negative")
        if self.gamma_mode not in ("fixed", "learnable"):
            raise TrainError(f"unknown gamma_mode: {self.gamma_mode}")
        if self.gamma_mode == "fixed" and self.gamma <= 0:
            raise TrainError("fixed gamma must be positive")
        if self.gamma_mode == "learnable":
            if self.gamma_min <= 0:
                raise TrainError("gamma_min must be positive")
            if self.gamma <= self.gamma_min:
                raise TrainError("initial gamma must exceed gamma_min")
            if self.mu < 0:
                raise TrainError("mu must be non-negative")
            if self.mu > 0 and self.gamma0 >= self.gamma_min:
                raise TrainError("gamma0 must stay below gamma_min")
        if self.eps <= 0 or self.eps_P <= 0 or self.eps_dist <= 0:
            raise TrainError("eps, eps_P, eps_dist must be positive")

    def solver(self) -> SolverConfig:
        return SolverConfig.for_duration(self.horizon, self.method, self.substeps)

    def metric_spec(self) -> Metric:
        return Metric(kind=self.metric, beta=self.beta)


@dataclass
class Policy:
    """All trainable pieces: latent dynamics, rate, projection, output map."""

    ren: RenParams
    rate: ContractionRateSpec
    proj: Projection
    stack: BijectionStack

    @property
    def n_y(self) -> int:
        return self.proj.n_y

    @property
    def n_z(self) -> int:
        return self.proj.n_z

    def parameters(self) -> list[Parameter]:
        return (self.ren.parameters() + self.rate.parameters()
                + self.proj.parameters() + self.stack.parameters())

    def matrices(self):
        return assemble(self.ren, self.rate.effective())

    def gamma_value(self) -> float:
        with ad.no_grad():
            return float(self.rate.effective().data)


def _inverse_softplus(y: float) -> float:
    if y <= 0:
        raise TrainError("softplus inverse needs a positive value")
    return float(y + np.log1p(-np.exp(-y)))


def init_policy(cfg: TrainConfig, n_y: int, seed: int | None = None,
                rng: np.random.Generator | None = None) -> Policy:
    """Fresh policy: Gaussian free matrices at std 0.2/sqrt(fan_in), identity
    output map, near-axis projection. Deterministic given the seed."""
    if n_y < 1:
        raise TrainError("n_y must be at least 1")
    if cfg.latent_dim < n_y:
        raise TrainError(
            f"latent_dim {cfg.latent_dim} must be at least the state dim {n_y}")
    if cfg.coupling_layers > 0 and n_y < 2:
        raise TrainError("coupling layers need at least 2 state dimensions")
    if rng is None:
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
    ren = random_ren_params(cfg.latent_dim, cfg.implicit_dim, rng,
                            eps=cfg.eps, eps_P=cfg.eps_P,
                            std_scale=INIT_STD_SCALE)
    if cfg.gamma_mode == "fixed":
        rate = ContractionRateSpec(mode="fixed", value=cfg.gamma)
    else:
        raw = _inverse_softplus(cfg.gamma - cfg.gamma_min)
        rate = ContractionRateSpec(
            mode="learnable", gamma_min=cfg.gamma_min,
            gamma_raw=Parameter("rate.gamma_raw", np.asarray(raw)))
    proj = random_projection(n_y, cfg.latent_dim, rng, noise=PROJ_INIT_NOISE)
    stack = random_coupling_stack(n_y, cfg.coupling_layers, rng,
                                  width=cfg.coupling_width, final_std=0.0,
                                  hidden_scale=INIT_STD_SCALE)
    return Policy(ren=ren, rate=rate, proj=proj, stack=stack)


@dataclass
class OptimizerState:
    """Adam accumulators keyed by parameter name."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def fresh(cls, params: list[Parameter]) -> "OptimizerState":
        return cls(m={p.name: np.zeros_like(p.value) for p in params},
                   v={p.name: np.zeros_like(p.value) for p in params})


def adam_update(params: list[Parameter], opt: OptimizerState, lr: float) -> None:
    opt.step += 1
    b1t = 1.0 - ADAM_BETA1 ** opt.step
    b2t = 1.0 - ADAM_BETA2 ** opt.step
    for p in params:
        m = opt.m[p.name]
        v = opt.v[p.name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * p.grad
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * p.grad * p.grad
        p.value -= lr * (m / b1t) / (np.sqrt(v / b2t) + ADAM_EPS)


def clip_gradients(params: list[Parameter], limit: float = GRAD_CLIP) -> float:
    """Scale all gradients down to the given global norm; returns the raw norm."""
    norm = global_grad_norm(params)
    if norm > limit:
        scale = limit / norm
        for p in params:
            p.grad *= scale
    return norm


def _training_loss(policy: Policy, demos: list[np.ndarray], cfg: TrainConfig):
    """Tracked loss over the full batch of dataset initial states."""
    Y0 = np.stack([d[0] for d in demos])
    mats = policy.matrices()
    flat = rollout_flat(mats, policy.proj, policy.stack, Y0, cfg.solver())
    trajs = rollout_rows_to_trajectories(flat, cfg.horizon, len(demos))
    metric = cfg.metric_spec()
    total = None
    for traj in trajs:
        term = weighted_loss(traj, demos, metric, cfg.eps_dist)
        total = term if total is None else ad.add(total, term)
    total = ad.mul(total, 1.0 / len(demos))
    if cfg.gamma_mode == "learnable" and cfg.mu > 0:
        total = augmented_loss(total, policy.rate.effective(),
                               cfg.mu, cfg.c, cfg.gamma0)
    return total


def train_step(policy: Policy, dataset: Dataset, cfg: TrainConfig,
               opt: OptimizerState) -> tuple[float, OptimizerState]:
    """One full-batch update. Returns the loss at the pre-update parameters."""
    if any(L != cfg.horizon for L in dataset.lengths()):
        raise TrainError(
            f"demos must have length {cfg.horizon}; resample the dataset first")
    params = policy.parameters()
    for p in params:
        p.zero_grad()
    with ad.record():
        loss = _training_loss(policy, dataset.demos, cfg)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainError(
                f"non-finite loss at step {opt.step}: {value}; "
                f"gamma={policy.gamma_value():.4g}")
        try:
            ad.backward(loss)
        except NonFiniteGradient as exc:
            raise TrainError(f"non-finite gradient at step {opt.step}: {exc}") from exc
    clip_gradients(params)
    adam_update(params, opt, cfg.lr)
    return value, opt


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    gamma: float
    cert_margin: float
    wall_time: float

    def line(self) -> str:
        return (f"epoch={self.epoch} loss={self.loss:.6e} gamma={self.gamma:.6f} "
                f"eig_min={self.cert_margin:.6e} wall={self.wall_time:.3f}")


@dataclass
class Checkpoint:
    """Complete training state; serializes to a text key/value document."""

    config: TrainConfig
    data_dim: int
    params: dict[str, np.ndarray]
    norm: NormalizationSpec
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    opt_step: int
    rng_state: tuple[int, int, int, int]
    epochs_run: int
    final_loss: float
    version: int = CHECKPOINT_VERSION


def _config_to_items(cfg: TrainConfig) -> list[tuple[str, str]]:
    out = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        out.append((f.name, repr(float(v)) if isinstance(v, float) else str(v)))
    return out


def _config_from_items(items: dict[str, str]) -> TrainConfig:
    kwargs = {}
    for f in dataclasses.fields(TrainConfig):
        raw = items[f.name]
        if f.type == "int":
            kwargs[f.name] = int(raw)
        elif f.type == "float":
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = raw
    return TrainConfig(**kwargs)


def _array_cells(arr: np.ndarray) -> str:
    flat = np.asarray(arr, dtype=np.float64).ravel()
    shape = arr.shape
    return " ".join([str(len(shape))] + [str(d) for d in shape]
                    + [repr(float(x)) for x in flat])


def _cells_to_array(cells: list[str]) -> np.ndarray:
    ndim = int(cells[0])
    shape = tuple(int(c) for c in cells[1:1 + ndim])
    vals = np.array([float(c) for c in cells[1 + ndim:]], dtype=np.float64)
    return vals.reshape(shape)


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    lines = [f"{CHECKPOINT_MAGIC} {ckpt.version}",
             f"data_dim {ckpt.data_dim}"]
    for k, v in _config_to_items(ckpt.config):
        lines.append(f"config {k} {v}")
    lines.append("norm shift " + _array_cells(ckpt.norm.shift))
    lines.append("norm scale " + _array_cells(ckpt.norm.scale))
    for name in ckpt.params:
        lines.append(f"param {name} " + _array_cells(ckpt.params[name]))
    for name in ckpt.opt_m:
        lines.append(f"opt_m {name} " + _array_cells(ckpt.opt_m[name]))
    for name in ckpt.opt_v:
        lines.append(f"opt_v {name} " + _array_cells(ckpt.opt_v[name]))
    lines.append(f"opt_step {ckpt.opt_step}")
    lines.append("rng " + " ".join(str(x) for x in ckpt.rng_state))
    lines.append(f"epochs_run {ckpt.epochs_run}")
    lines.append(f"final_loss {repr(float(ckpt.final_loss))}")
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise TrainError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise TrainError(f"cannot read checkpoint {path}: {exc}") from exc
    if not lines or not lines[0].startswith(CHECKPOINT_MAGIC):
        raise TrainError(f"{path} is not a checkpoint file")
    version = int(lines[0].split()[1])
    if version != CHECKPOINT_VERSION:
        raise TrainError(f"unsupported checkpoint version {version}")
    config_items: dict[str, str] = {}
    params: dict[str, np.ndarray] = {}
    opt_m: dict[str, np.ndarray] = {}
    opt_v: dict[str, np.ndarray] = {}
    norm_parts: dict[str, np.ndarray] = {}
    scalars: dict[str, str] = {}
    rng_state = None
    for line in lines[1:]:
        if not line.strip():
            continue
        cells = line.split(" ")
        kind = cells[0]
        if kind == "config":
            config_items[cells[1]] = cells[2]
        elif kind == "param":
            params[cells[1]] = _cells_to_array(cells[2:])
        elif kind == "opt_m":
            opt_m[cells[1]] = _cells_to_array(cells[2:])
        elif kind == "opt_v":
            opt_v[cells[1]] = _cells_to_array(cells[2:])
        elif kind == "norm":
            norm_parts[cells[1]] = _cells_to_array(cells[2:])
        elif kind == "rng":
            rng_state = tuple(int(c) for c in cells[1:])
        else:
            scalars[kind] = cells[1]
    try:
        return Checkpoint(
            config=_config_from_items(config_items),
            data_dim=int(scalars["data_dim"]),
            params=params,
            norm=NormalizationSpec(shift=norm_parts["shift"], scale=norm_parts["scale"]),
            opt_m=opt_m, opt_v=opt_v,
            opt_step=int(scalars["opt_step"]),
            rng_state=rng_state,
            epochs_run=int(scalars["epochs_run"]),
            final_loss=float(scalars["final_loss"]),
            version=version)
    except KeyError as exc:
        raise TrainError(f"{path}: missing checkpoint field {exc}") from exc


def policy_from_checkpoint(ckpt: Checkpoint) -> Policy:
    """Rebuild the policy structure and overwrite every parameter array."""
    policy = init_policy(ckpt.config, ckpt.data_dim)
    names = {p.name for p in policy.parameters()}
    if names != set(ckpt.params):
        missing = names ^ set(ckpt.params)
        raise TrainError(f"checkpoint parameters do not match the config: {sorted(missing)}")
    for p in policy.parameters():
        stored = ckpt.params[p.name]
        if stored.shape != p.value.shape:
            raise TrainError(
                f"checkpoint {p.name} has shape {stored.shape}, expected {p.value.shape}")
        p.value[...] = stored
    return policy


def _rng_state(rng: np.random.Generator) -> tuple[int, int, int, int]:
    s = rng.bit_generator.state
    return (s["state"]["state"], s["state"]["inc"],
            s["has_uint32"], s["uinteger"])


def _rng_from_state(state: tuple[int, int, int, int]) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": state[0], "inc": state[1]},
        "has_uint32": state[2], "uinteger": state[3]}
    return rng


def _prepare(dataset: Dataset, cfg: TrainConfig) -> tuple[Dataset, NormalizationSpec]:
    ds = dataset
    if any(L != cfg.horizon for L in ds.lengths()):
        ds = resample(ds, cfg.horizon)
    if ds.units == "raw":
        return normalize(ds)
    return ds, NormalizationSpec(shift=np.zeros(ds.n_y), scale=np.ones(ds.n_y))


def _snapshot(cfg: TrainConfig, n_y: int, policy: Policy, opt: OptimizerState,
              rng: np.random.Generator, norm: NormalizationSpec,
              epochs_run: int, loss: float) -> Checkpoint:
    return Checkpoint(
        config=cfg, data_dim=n_y,
        params={p.name: p.value.copy() for p in policy.parameters()},
        norm=norm,
        opt_m={k: v.copy() for k, v in opt.m.items()},
        opt_v={k: v.copy() for k, v in opt.v.items()},
        opt_step=opt.step,
        rng_state=_rng_state(rng),
        epochs_run=epochs_run,
        final_loss=loss)


def train(cfg: TrainConfig, dataset: Dataset, on_epoch=None,
          resume: Checkpoint | None = None,
          checkpoint_every: int = 0,
          checkpoint_path: str | None = None) -> Checkpoint:
    """Run the training loop and return the final state as a checkpoint.

    The dataset is resampled to the horizon and normalized here if needed;
    the normalization map is stored in the checkpoint. Deterministic given
    config and seed. With checkpoint_every > 0 the current state is also
    written to checkpoint_path every that many epochs.
    """
    if checkpoint_every < 0:
        raise TrainError("checkpoint_every must be non-negative")
    if checkpoint_every > 0 and checkpoint_path is None:
        raise TrainError("periodic checkpointing needs a path")
    ds, norm = _prepare(dataset, cfg)
    if resume is None:
        rng = np.random.default_rng(cfg.seed)
        policy = init_policy(cfg, ds.n_y, rng=rng)
        opt = OptimizerState.fresh(policy.parameters())
        start = 0
    else:
        same = dataclasses.asdict(resume.config)
        want = dataclasses.asdict(cfg)
        same.pop("epochs"), want.pop("epochs")
        if same != want:
            raise TrainError("resume config differs from checkpoint config")
        if resume.data_dim != ds.n_y:
            raise TrainError("resume checkpoint was trained on different state dims")
        policy = policy_from_checkpoint(resume)
        opt = OptimizerState(m={k: v.copy() for k, v in resume.opt_m.items()},
                             v={k: v.copy() for k, v in resume.opt_v.items()},
                             step=resume.opt_step)
        rng = _rng_from_state(resume.rng_state)
        start = resume.epochs_run
    loss = float("nan") if resume is None else resume.final_loss
    for epoch in range(start, cfg.epochs):
        t0 = time.perf_counter()
        loss, opt = train_step(policy, ds, cfg, opt)
        if on_epoch is not None:
            with ad.no_grad():
                margin = certificate_margin(assemble(policy.ren, policy.gamma_value()))
            on_epoch(EpochRecord(epoch=epoch, loss=loss,
                                 gamma=policy.gamma_value(),
                                 cert_margin=margin,
                                 wall_time=time.perf_counter() - t0))
        if checkpoint_every > 0 and (epoch + 1) % checkpoint_every == 0:
            save_checkpoint(_snapshot(cfg, ds.n_y, policy, opt, rng, norm,
                                      epoch + 1, loss), checkpoint_path)
    return _snapshot(cfg, ds.n_y, policy, opt, rng, norm, cfg.epochs, loss)
