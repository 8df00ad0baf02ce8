"""Command line surface: dataset generation, training, rollout export,
evaluation tables, bound certification, and self-verification.

Exit codes: 0 success, 1 validation error (bad flags, bad files, dimension
mismatches), 2 runtime error (training/rollout/certification failures, I/O
on write, failed verification checks).
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time

import numpy as np

from . import autodiff as ad
from .autodiff import AutodiffError, Tensor
from .bijection import BijectionError, random_coupling_stack
from .bounds import (ALPHA_SAFETY, BoundError, BoundInputs, SamplerSpec,
                     estimate_alpha, region_from_samples, term_two,
                     true_loss_bound, worst_case_bound)
from .data import (DataError, Dataset, NormalizationSpec, load_csv, normalize,
                   resample, sample_oos_inits, save_csv, synthesize)
from .losses import LossError, Metric, dtw_classic, lambda_weights, mse, soft_dtw, weighted_loss
from .ren import RenError, assemble, certificate_margin, random_ren_params
from .rollout import RolloutError, SolverConfig, integrate_batch, rollout_batch
from .train import (Checkpoint, TrainConfig, TrainError, _training_loss,
                    init_policy, load_checkpoint, policy_from_checkpoint,
                    save_checkpoint, train)

_FAILURES = (DataError, TrainError, BoundError, RolloutError, LossError,
             BijectionError, RenError, AutodiffError, OSError)


class CliError(Exception):
    """Failure with an associated process exit code."""

    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


def _load(fn, *args, **kwargs):
    """Run a setup/validation step; failures exit 1."""
    try:
        return fn(*args, **kwargs)
    except _FAILURES as exc:
        raise CliError(str(exc), code=1) from exc


def _run(fn, *args, **kwargs):
    """Run a computation/output step; failures exit 2."""
    try:
        return fn(*args, **kwargs)
    except _FAILURES as exc:
        raise CliError(str(exc), code=2) from exc


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; the contract reserves 2 for runtime."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# shared plumbing


def _load_policy(path: str):
    ckpt = _load(load_checkpoint, path)
    policy = _load(policy_from_checkpoint, ckpt)
    return ckpt, policy


def _normalized_view(ds: Dataset, spec: NormalizationSpec) -> Dataset:
    return Dataset(demos=[spec.apply(d) for d in ds.demos],
                   target=spec.apply(ds.target), name=ds.name,
                   units="normalized")


def _prepare_eval_data(ckpt: Checkpoint, path: str) -> Dataset:
    """Load a dataset and put it in the units/shape the policy was trained on."""
    ds = _load(load_csv, path)
    if ds.n_y != ckpt.data_dim:
        raise CliError(f"state dimension mismatch: checkpoint expects "
                       f"{ckpt.data_dim}, dataset has {ds.n_y}")
    if any(L != ckpt.config.horizon for L in ds.lengths()):
        ds = _load(resample, ds, ckpt.config.horizon)
    if ds.units == "raw":
        ds = _normalized_view(ds, ckpt.norm)
    return ds


def _weighted_metrics(Y: np.ndarray, ds: Dataset, cfg: TrainConfig):
    """Per-rollout weighted MSE and weighted soft-DTW against all demos."""
    demos = [Tensor(d) for d in ds.demos]
    m_mse = Metric(kind="mse")
    m_dtw = Metric(kind="soft_dtw", beta=cfg.beta)
    mses, dtws = [], []
    with ad.no_grad():
        for b in range(Y.shape[0]):
            roll = Tensor(Y[b])
            mses.append(float(weighted_loss(roll, demos, m_mse, cfg.eps_dist).data))
            dtws.append(float(weighted_loss(roll, demos, m_dtw, cfg.eps_dist).data))
    return np.array(mses), np.array(dtws)


def _stat_line(label: str, values: np.ndarray) -> str:
    return f"{label} {float(np.mean(values))!r} ± {float(np.std(values))!r}"


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _rollout_dataset(Y: np.ndarray, spec: NormalizationSpec, stride: float,
                     name: str) -> tuple[Dataset, list[np.ndarray]]:
    """Package policy rollouts (normalized units) as a raw-unit dataset."""
    demos = [spec.invert(Y[b]) for b in range(Y.shape[0])]
    target = spec.invert(np.zeros(Y.shape[2]))
    times = [np.arange(Y.shape[1], dtype=np.float64) * stride] * Y.shape[0]
    return Dataset(demos=demos, target=target, name=name), times


# ---------------------------------------------------------------------------
# figures (rendered next to the delimited outputs when --out is given)


def _plot_rollouts(path: str, ds_raw: Dataset, in_demos: list[np.ndarray],
                   oos_demos: list[np.ndarray]) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.0, 5.0))
    two_d = ds_raw.n_y >= 2

    def curves(demos, color, label, width, alpha=1.0):
        for i, d in enumerate(demos):
            if two_d:
                ax.plot(d[:, 0], d[:, 1], color=color, lw=width, alpha=alpha,
                        label=label if i == 0 else None)
            else:
                ax.plot(d[:, 0], color=color, lw=width, alpha=alpha,
                        label=label if i == 0 else None)

    curves(ds_raw.demos, "black", "expert", 1.8)
    curves(in_demos, "tab:blue", "in-sample rollout", 1.2)
    curves(oos_demos, "tab:orange", "out-of-sample rollout", 0.7, alpha=0.5)
    ax.set_title(ds_raw.name)
    ax.set_xlabel("y0" if two_d else "step")
    ax.set_ylabel("y1" if two_d else "y0")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_bounds(path: str, observed: np.ndarray, bounds: np.ndarray,
                 region_bound: float) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    order = np.argsort(bounds)
    x = np.arange(len(observed))
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(x, bounds[order], color="tab:red", lw=1.2, label="worst-case bound")
    ax.plot(x, observed[order], ".", color="tab:blue", ms=4, label="observed loss")
    ax.axhline(region_bound, color="tab:red", ls="--", lw=1.0, label="distribution-free bound")
    ax.set_xlabel("sample (sorted by bound)")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# train config merging


_CONFIG_FIELDS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _parse_config_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in _CONFIG_FIELDS:
                raise DataError(f"{path}:{lineno}: unknown config key: {key}")
            out[key] = value
    return out


def _coerce(name: str, raw: str):
    kind = _CONFIG_FIELDS[name]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise DataError(f"config value for {name} is not a {kind}: {raw!r}") from exc


def _merged_config(args) -> TrainConfig:
    """Defaults, then config-file entries, then explicit flags."""
    kwargs = {}
    if args.config is not None:
        for key, value in _load(_parse_config_file, args.config).items():
            kwargs[key] = _load(_coerce, key, value)
    for name in _CONFIG_FIELDS:
        flag = getattr(args, name, None)
        if flag is not None:
            kwargs[name] = flag
    return _load(TrainConfig, **kwargs)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--latent-dim", type=int, default=None)
    p.add_argument("--implicit-dim", type=int, default=None)
    p.add_argument("--coupling-layers", type=int, default=None)
    p.add_argument("--coupling-width", type=int, default=None)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--method", choices=("euler", "rk4"), default=None)
    p.add_argument("--substeps", type=int, default=None)
    p.add_argument("--metric", choices=("mse", "soft_dtw"), default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--gamma-mode", choices=("fixed", "learnable"), default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--gamma-min", type=float, default=None)
    p.add_argument("--mu", type=float, default=None)
    p.add_argument("--c", type=float, default=None)
    p.add_argument("--gamma0", type=float, default=None)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--eps-P", type=float, default=None)
    p.add_argument("--eps-dist", type=float, default=None)


# ---------------------------------------------------------------------------
# commands


def _cmd_gen_data(args) -> int:
    ds = _load(synthesize, args.kind, args.M, args.H, args.dim, args.noise, args.seed)
    _run(save_csv, ds, args.out)
    print(f"wrote {args.out}: kind={args.kind} M={args.M} H={args.H} "
          f"dim={args.dim} noise={args.noise!r} seed={args.seed}")
    return 0


def _cmd_train(args) -> int:
    ds = _load(load_csv, args.data)
    cfg = _merged_config(args)
    every = args.log_every

    def on_epoch(rec):
        if every > 0 and rec.epoch % every == 0:
            print(rec.line(), flush=True)

    ckpt = _run(train, cfg, ds, on_epoch=on_epoch,
                checkpoint_every=args.checkpoint_every,
                checkpoint_path=args.out)
    _run(save_checkpoint, ckpt, args.out)
    print(f"saved {args.out}: epochs={ckpt.epochs_run} "
          f"final_loss={ckpt.final_loss!r}")
    return 0


def _parse_y0(specs: list[str], dim: int) -> np.ndarray:
    rows = []
    for text in specs:
        try:
            row = [float(tok) for tok in text.split(",")]
        except ValueError as exc:
            raise CliError(f"could not parse --y0 value: {text!r}") from exc
        if len(row) != dim:
            raise CliError(f"--y0 needs {dim} comma-separated values, got {len(row)}")
        rows.append(row)
    out = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise CliError("--y0 values must be finite")
    return out


def _cmd_rollout(args) -> int:
    ckpt, policy = _load_policy(args.ckpt)
    if args.y0:
        inits = _parse_y0(args.y0, ckpt.data_dim)
    else:
        ds = _load(load_csv, args.from_data)
        if ds.n_y != ckpt.data_dim:
            raise CliError(f"state dimension mismatch: checkpoint expects "
                           f"{ckpt.data_dim}, dataset has {ds.n_y}")
        inits = ds.initial_states()
    solver = ckpt.config.solver()
    Y = _run(rollout_batch, policy.matrices(), policy.proj, policy.stack,
             ckpt.norm.apply(inits), solver)
    out_ds, times = _rollout_dataset(Y, ckpt.norm, solver.stride, "rollouts")
    _run(save_csv, out_ds, args.out, times)
    print(f"wrote {Y.shape[0]} rollouts of {Y.shape[1]} steps to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    ckpt, policy = _load_policy(args.ckpt)
    ds = _prepare_eval_data(ckpt, args.data)
    cfg = ckpt.config
    solver = cfg.solver()
    mats = policy.matrices()

    sampler = _load(SamplerSpec, count=args.samples, mode="hypersphere",
                    radius_scale=args.oos_radius_scale, seed=args.seed)
    oos_inits = _run(sample_oos_inits, ds, sampler)
    Y_in = _run(rollout_batch, mats, policy.proj, policy.stack,
                ds.initial_states(), solver)
    Y_oos = _run(rollout_batch, mats, policy.proj, policy.stack,
                 oos_inits, solver)
    in_mse, in_dtw = _run(_weighted_metrics, Y_in, ds, cfg)
    oos_mse, oos_dtw = _run(_weighted_metrics, Y_oos, ds, cfg)

    lines = [
        f"dataset {ds.name}",
        "units normalized",
        f"demos {ds.M}  horizon {cfg.horizon}  state_dim {ds.n_y}",
        f"gamma {policy.gamma_value()!r}",
        _stat_line("in_sample mse", in_mse),
        _stat_line("in_sample soft_dtw", in_dtw),
        _stat_line("oos mse", oos_mse),
        _stat_line("oos soft_dtw", oos_dtw),
        f"oos_samples {args.samples}  radius_scale {args.oos_radius_scale!r}  "
        f"seed {args.seed}",
    ]
    report = "\n".join(lines) + "\n"
    sys.stdout.write(report)

    if args.out:
        in_ds, in_times = _rollout_dataset(Y_in, ckpt.norm, solver.stride, "insample")
        oos_ds, oos_times = _rollout_dataset(Y_oos, ckpt.norm, solver.stride, "oos")
        _run(save_csv, in_ds, f"{args.out}_insample.csv", in_times)
        _run(save_csv, oos_ds, f"{args.out}_oos.csv", oos_times)
        _run(_write_text, f"{args.out}_report.txt", report)
        raw = _load(load_csv, args.data)
        if any(L != cfg.horizon for L in raw.lengths()):
            raw = resample(raw, cfg.horizon)
        _run(_plot_rollouts, f"{args.out}_rollouts.png", raw,
             in_ds.demos, oos_ds.demos)
    return 0


def _cmd_bound(args) -> int:
    calc = [args.alpha, args.R, args.gamma, args.H, args.M]
    if any(v is not None for v in calc):
        if any(v is None for v in calc):
            raise CliError("calculator mode needs all of --alpha --R --gamma --H --M")
        value = float(_load(term_two, args.alpha, args.R, args.gamma, args.H, args.M))
        print(f"term_two {value!r}")
        return 0
    if args.ckpt is None or args.data is None:
        raise CliError("bound needs --ckpt and --data (or the calculator flags)")

    ckpt, policy = _load_policy(args.ckpt)
    ds = _prepare_eval_data(ckpt, args.data)
    cfg = ckpt.config
    solver = cfg.solver()
    mats = policy.matrices()
    inits = ds.initial_states()

    sampler = _load(SamplerSpec, count=args.samples, mode="hypersphere",
                    radius_scale=args.oos_radius_scale, seed=args.seed)
    oos = _run(sample_oos_inits, ds, sampler)

    Y_in = _run(rollout_batch, mats, policy.proj, policy.stack, inits, solver)
    with ad.no_grad():
        per_demo = np.array([float(mse(Y_in[m], ds.demos[m]).data)
                             for m in range(ds.M)])
    region = _run(region_from_samples, inits, np.vstack([inits, oos]))
    alpha_hat = _run(estimate_alpha, mats, policy.proj, policy.stack,
                     np.vstack([inits, oos]), solver)
    bi = _run(BoundInputs, alpha=ALPHA_SAFETY * alpha_hat,
              gamma=mats.gamma_value, H=cfg.horizon, M=ds.M,
              R=region.R, per_demo_mse=per_demo)

    Y_oos = _run(rollout_batch, mats, policy.proj, policy.stack, oos, solver)
    observed, _ = _run(_weighted_metrics, Y_oos, ds, cfg)
    bounds = np.array([_run(worst_case_bound, oos[i], inits, bi,
                            cfg.eps_dist) for i in range(oos.shape[0])])
    region_bound = _run(true_loss_bound, bi)
    margins = bounds - observed
    violations = int(np.sum(margins < 0))

    lines = [
        f"dataset {ds.name}",
        "units normalized",
        f"demos {ds.M}  horizon {cfg.horizon}  state_dim {ds.n_y}",
        f"gamma {mats.gamma_value!r}",
        f"alpha_hat {alpha_hat!r}",
        f"alpha_safety {ALPHA_SAFETY!r}",
        f"alpha {bi.alpha!r}",
        f"R {region.R!r}",
        "per_demo_mse " + " ".join(repr(float(v)) for v in per_demo),
        f"term_two {term_two(bi.alpha, bi.R, bi.gamma, bi.H, bi.M)!r}",
        f"region_bound {region_bound!r}",
        f"observed_mean {float(np.mean(observed))!r}  "
        f"observed_max {float(np.max(observed))!r}",
        f"bound_min {float(np.min(bounds))!r}",
        f"margin_min {float(np.min(margins))!r}",
        f"violations {violations}",
        f"samples {args.samples}  radius_scale {args.oos_radius_scale!r}  "
        f"seed {args.seed}",
    ]
    lines += [f"sample {i} observed {float(observed[i])!r} "
              f"bound {float(bounds[i])!r} margin {float(margins[i])!r}"
              for i in range(oos.shape[0])]
    report = "\n".join(lines) + "\n"
    sys.stdout.write(report)

    if args.out:
        rows = ["sample_id,observed,bound,margin"]
        rows += [f"{i},{float(observed[i])!r},{float(bounds[i])!r},{float(margins[i])!r}"
                 for i in range(oos.shape[0])]
        _run(_write_text, f"{args.out}_bounds.csv", "\n".join(rows) + "\n")
        _run(_write_text, f"{args.out}_report.txt", report)
        _run(_plot_bounds, f"{args.out}_bounds.png", observed, bounds, region_bound)
    return 0


# ---------------------------------------------------------------------------
# verify: bundled self-checks


def _check_lmi(rng: np.random.Generator, break_lmi: bool):
    worst = np.inf
    for _ in range(30):
        n = int(rng.integers(2, 11))
        q = int(rng.integers(2, 11))
        gamma = float(rng.choice([0.5, 1.0, 5.0]))
        params = random_ren_params(n, q, rng)
        mats = assemble(params, gamma)
        if break_lmi:
            noisy = mats.A.data + rng.normal(size=(n, n))
            mats = dataclasses.replace(mats, A=Tensor(noisy), _np={})
        worst = min(worst, certificate_margin(mats) - params.eps)
    return worst >= -1e-9, f"min eigenvalue margin over eps {worst:.3e}"


def _check_bijection(rng: np.random.Generator):
    worst = 0.0
    for layers in (0, 2, 5):
        for dim in (2, 7):
            stack = random_coupling_stack(dim, layers, rng, width=8,
                                          final_std=0.1)
            Y = rng.normal(size=(100, dim))
            with ad.no_grad():
                back = stack.inverse(stack.forward(Tensor(Y))).data
                forth = stack.forward(stack.inverse(Tensor(Y))).data
            scale = np.linalg.norm(Y)
            worst = max(worst, np.linalg.norm(back - Y) / scale,
                        np.linalg.norm(forth - Y) / scale)
    return worst <= 1e-9, f"max round-trip relative error {worst:.3e}"


def _check_envelope(rng: np.random.Generator):
    worst = -np.inf
    for gamma in (0.5, 1.0, 2.0):
        params = random_ren_params(6, 4, rng)
        mats = assemble(params, gamma)
        solver = SolverConfig.for_duration(251, "rk4", substeps=1)
        Z0 = rng.normal(size=(6, 6))
        with ad.no_grad():
            stored = integrate_batch(mats, Z0, solver)
        states = np.stack([s.data for s in stored])
        P = mats.P.data
        t = np.arange(states.shape[0]) * solver.stride
        for p in range(3):
            dz = states[:, 2 * p] - states[:, 2 * p + 1]
            V = np.einsum("ti,ij,tj->t", dz, P, dz)
            ratio = V / (V[0] * np.exp(-2.0 * gamma * t))
            worst = max(worst, float(ratio.max()))
    return worst <= 1.01, f"max metric-energy ratio over the envelope {worst:.6f}"


def _check_gradients(seed: int):
    cfg = TrainConfig(latent_dim=3, implicit_dim=2, coupling_layers=2,
                      coupling_width=4, horizon=5, metric="soft_dtw",
                      beta=0.1, epochs=1, seed=seed)
    demos = normalize(synthesize("line", 2, 5, 2, 0.3, seed))[0].demos
    policy = init_policy(cfg, 2, seed=seed)

    def value() -> float:
        with ad.no_grad():
            return float(_training_loss(policy, demos, cfg).data)

    for p in policy.parameters():
        p.zero_grad()
    with ad.record():
        ad.backward(_training_loss(policy, demos, cfg))

    worst = 0.0
    step = 1e-5
    for p in policy.parameters():
        flat = p.value.reshape(-1)
        grad = p.grad.reshape(-1)
        for idx in sorted({0, flat.size // 2, flat.size - 1}):
            keep = flat[idx]
            flat[idx] = keep + step
            up = value()
            flat[idx] = keep - step
            down = value()
            flat[idx] = keep
            fd = (up - down) / (2.0 * step)
            denom = max(abs(fd), abs(grad[idx]), 1e-6)
            worst = max(worst, abs(fd - grad[idx]) / denom)
    return worst <= 2e-3, f"max gradient relative error vs finite differences {worst:.3e}"


def _dtw_brute(a: np.ndarray, b: np.ndarray) -> float:
    cost = np.array([[float(np.sum((ai - bj) ** 2)) for bj in b] for ai in a])

    def walk(i: int, j: int):
        if i == 0 and j == 0:
            yield cost[0, 0]
            return
        for pi, pj in ((i - 1, j), (i, j - 1), (i - 1, j - 1)):
            if pi >= 0 and pj >= 0:
                for rest in walk(pi, pj):
                    yield rest + cost[i, j]

    return min(walk(a.shape[0] - 1, b.shape[0] - 1))


def _check_dtw(rng: np.random.Generator):
    worst_gap = 0.0
    with ad.no_grad():
        for _ in range(10):
            a = rng.normal(size=(int(rng.integers(4, 9)), 2))
            b = rng.normal(size=(int(rng.integers(4, 9)), 2))
            soft = float(soft_dtw(a, b, beta=1e-3).data)
            classic = dtw_classic(a, b)
            worst_gap = max(worst_gap, abs(soft - classic) / classic)
    if worst_gap > 0.01:
        return False, f"soft-DTW vs classic relative gap {worst_gap:.3e}"
    for _ in range(5):
        a = rng.normal(size=(int(rng.integers(2, 6)), 2))
        b = rng.normal(size=(int(rng.integers(2, 6)), 2))
        if abs(dtw_classic(a, b) - _dtw_brute(a, b)) > 1e-9:
            return False, "classic DTW disagrees with exhaustive alignment"
    return True, f"soft vs classic gap {worst_gap:.3e}; brute force exact"


def _check_weights(rng: np.random.Generator):
    for _ in range(200):
        m = int(rng.integers(1, 7))
        x = rng.uniform(0.1, 10.0, size=m)
        harmonic = m / np.sum(1.0 / x)
        if harmonic > np.mean(x) + 1e-12:
            return False, "harmonic mean exceeded arithmetic mean"
        inits = rng.normal(size=(m, 3))
        w = lambda_weights(rng.normal(size=3), inits).weights
        if abs(w.sum() - 1.0) > 1e-12 or np.any(w < 0):
            return False, "weights are not a convex combination"
        J = rng.normal(size=(int(rng.integers(1, 5)), int(rng.integers(1, 5))))
        v = rng.normal(size=J.shape[1])
        smallest = np.linalg.eigvalsh(J.T @ J).min()
        if smallest * float(v @ v) > float((J @ v) @ (J @ v)) + 1e-9:
            return False, "smallest-singular-value bound violated"
    x = np.full(4, 3.7)
    if abs(4 / np.sum(1.0 / x) - np.mean(x)) > 1e-12:
        return False, "harmonic/arithmetic equality fails at constant vectors"
    return True, "weight and mean inequalities hold on 200 random draws"


def _cmd_verify(args) -> int:
    rng = np.random.default_rng(args.seed)
    checks = [
        ("lmi", lambda: _check_lmi(rng, args.break_lmi)),
        ("bijection", lambda: _check_bijection(rng)),
        ("contraction-envelope", lambda: _check_envelope(rng)),
        ("gradients", lambda: _check_gradients(args.seed)),
        ("dtw-oracle", lambda: _check_dtw(rng)),
        ("weight-machinery", lambda: _check_weights(rng)),
    ]
    failures = 0
    start = time.perf_counter()
    for name, fn in checks:
        ok, detail = _run(fn)
        print(f"{'PASS' if ok else 'FAIL'} {name}  {detail}", flush=True)
        failures += 0 if ok else 1
    elapsed = time.perf_counter() - start
    print(f"verify: {len(checks) - failures}/{len(checks)} checks passed "
          f"in {elapsed:.1f}s")
    return 2 if failures else 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cimit",
                     description="Contractive imitation policies with "
                                 "certified out-of-sample loss bounds.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-data", help="synthesize an expert dataset CSV")
    p.add_argument("--kind", choices=("line", "sine", "s_curve"), default="sine")
    p.add_argument("--M", type=int, default=3, help="number of demonstrations")
    p.add_argument("--H", type=int, default=30, help="steps per demonstration")
    p.add_argument("--dim", type=int, default=2, help="state dimension")
    p.add_argument("--noise", type=float, default=0.1,
                   help="initial-state perturbation scale")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="fit a policy and write a checkpoint")
    p.add_argument("--data", required=True, help="dataset CSV")
    p.add_argument("--config", default=None,
                   help="key=value file; explicit flags win")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log-every", type=int, default=1,
                   help="epochs between log lines; 0 silences the log")
    p.add_argument("--checkpoint-every", type=int, default=0,
                   help="also write the checkpoint every N epochs")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("rollout", help="run the policy and export trajectories")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--y0", action="append", metavar="V0,V1,...",
                       help="initial state (repeatable)")
    group.add_argument("--from-data", metavar="CSV",
                       help="use the dataset's initial states")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--seed", type=int, default=0,
                   help="accepted for uniformity; rollouts are deterministic")
    p.set_defaults(func=_cmd_rollout)

    p = sub.add_parser("eval", help="report in-sample and out-of-sample losses")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--oos-radius-scale", type=float, default=0.1)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None,
                   help="prefix for report, trajectory CSVs, and figure")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bound", help="certify out-of-sample losses")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--oos-radius-scale", type=float, default=0.1)
    p.add_argument("--alpha", type=float, default=None,
                   help="calculator mode: overshoot constant")
    p.add_argument("--R", type=float, default=None,
                   help="calculator mode: region size")
    p.add_argument("--gamma", type=float, default=None,
                   help="calculator mode: contraction rate")
    p.add_argument("--H", type=int, default=None,
                   help="calculator mode: horizon")
    p.add_argument("--M", type=int, default=None,
                   help="calculator mode: demo count")
    p.add_argument("--out", default=None,
                   help="prefix for report, bound CSV, and figure")
    p.set_defaults(func=_cmd_bound)

    p = sub.add_parser("verify", help="run the bundled self-checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--break-lmi", action="store_true",
                   help="negative control: perturb assembled dynamics")
    p.set_defaults(func=_cmd_verify)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"cimit: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
