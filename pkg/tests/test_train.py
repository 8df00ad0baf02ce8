"""Tests for policy init, Adam stepping, the train loop, and checkpoints."""

import dataclasses

import numpy as np
import pytest

from contractive_imitation import autodiff as ad
from contractive_imitation.autodiff import Parameter
from contractive_imitation.data import Dataset, synthesize
from contractive_imitation.ren import assemble, certificate_margin
from contractive_imitation.rollout import integrate, rollout_batch
from contractive_imitation.train import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    Checkpoint,
    OptimizerState,
    Policy,
    TrainConfig,
    TrainError,
    adam_update,
    clip_gradients,
    init_policy,
    load_checkpoint,
    policy_from_checkpoint,
    save_checkpoint,
    train,
    train_step,
)


def tiny_cfg(**over):
    base = dict(latent_dim=4, implicit_dim=3, coupling_layers=0, horizon=10,
                method="euler", lr=0.01, epochs=5, seed=0)
    base.update(over)
    return TrainConfig(**base)


def line_ds(M=1, H=10):
    return synthesize("line", M=M, H=H, n_y=2, noise_std=0.1 if M > 1 else 0.0, seed=0)


def test_config_validation():
    with pytest.raises(TrainError):
        tiny_cfg(horizon=1)
    with pytest.raises(TrainError):
        tiny_cfg(metric="l1")
    with pytest.raises(TrainError):
        tiny_cfg(lr=-0.1)
    with pytest.raises(TrainError):
        tiny_cfg(gamma_mode="adaptive")
    with pytest.raises(TrainError):
        tiny_cfg(gamma=-1.0)
    with pytest.raises(TrainError):
        tiny_cfg(gamma_mode="learnable", gamma=0.4, gamma_min=0.5)
    with pytest.raises(TrainError):
        tiny_cfg(gamma_mode="learnable", gamma=1.0, mu=0.1, gamma0=0.7)
    with pytest.raises(TrainError):
        tiny_cfg(eps=0.0)
    cfg = tiny_cfg(lr=0.0)  # deliberate no-op runs are allowed
    assert cfg.lr == 0.0


def test_init_policy_deterministic():
    cfg = tiny_cfg(coupling_layers=2, coupling_width=8)
    a = init_policy(cfg, n_y=2)
    b = init_policy(cfg, n_y=2)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert pa.name == pb.name
        assert np.array_equal(pa.value, pb.value)
    c = init_policy(cfg, n_y=2, seed=99)
    assert not np.array_equal(a.ren.X.value, c.ren.X.value)


def test_init_policy_structure():
    cfg = tiny_cfg(coupling_layers=2, coupling_width=8)
    p = init_policy(cfg, n_y=2)
    assert np.all(p.ren.lambda_log.value == 0.0)
    # identity output map at init: coupling final layers are zero
    x = np.random.default_rng(0).normal(size=(5, 2))
    with ad.no_grad():
        assert np.array_equal(p.stack.forward(ad.Tensor(x)).data, x)
    # projection sits near the axis-aligned embedding
    ref = np.hstack([np.eye(2), np.zeros((2, 2))])
    assert np.max(np.abs(p.proj.matrix.value - ref)) < 0.5
    with pytest.raises(TrainError):
        init_policy(tiny_cfg(latent_dim=1), n_y=2)
    with pytest.raises(TrainError):
        init_policy(tiny_cfg(coupling_layers=1), n_y=1)


def test_init_policy_scaled_gaussian():
    cfg = TrainConfig(latent_dim=40, implicit_dim=40, coupling_layers=0,
                      horizon=10, seed=3)
    p = init_policy(cfg, n_y=2)
    n, q = 40, 40
    X = p.ren.X.value
    expected = 0.2 / np.sqrt(n + q)
    assert X.std() == pytest.approx(expected, rel=0.15)


def test_init_passes_lmi():
    for seed in range(5):
        cfg = tiny_cfg(seed=seed, coupling_layers=2, coupling_width=8)
        p = init_policy(cfg, n_y=2)
        with ad.no_grad():
            margin = certificate_margin(p.matrices())
        assert margin >= cfg.eps - 1e-9


def test_learnable_rate_initial_value():
    cfg = tiny_cfg(gamma_mode="learnable", gamma=1.3, gamma_min=0.5)
    p = init_policy(cfg, n_y=2)
    assert p.gamma_value() == pytest.approx(1.3, abs=1e-12)


def test_zero_coupling_rollout_is_projected_latent_flow():
    # with an identity output map and noiseless projection, observations are
    # exactly the latent flow pushed through the projection
    cfg = tiny_cfg()
    p = init_policy(cfg, n_y=2)
    p.proj.matrix.value[...] = np.hstack([np.eye(2), np.zeros((2, 2))])
    y0 = np.array([[0.7, -0.4]])
    with ad.no_grad():
        mats = p.matrices()
        z0 = np.concatenate([y0[0], np.zeros(2)])
        Z = integrate(mats, ad.Tensor(z0), cfg.solver()).data
        Y = rollout_batch(mats, p.proj, p.stack, y0, cfg.solver())
    assert np.allclose(Y[0], Z @ p.proj.matrix.value.T, atol=1e-12)


def test_adam_oracle():
    p = Parameter("w", np.array([1.0, -2.0]))
    opt = OptimizerState.fresh([p])
    grads = [np.array([0.5, -1.0]), np.array([-0.25, 2.0]), np.array([1.5, 0.5])]
    m = np.zeros(2)
    v = np.zeros(2)
    ref = np.array([1.0, -2.0])
    for t, g in enumerate(grads, start=1):
        m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * g * g
        mhat = m / (1 - ADAM_BETA1 ** t)
        vhat = v / (1 - ADAM_BETA2 ** t)
        ref = ref - 0.1 * mhat / (np.sqrt(vhat) + ADAM_EPS)
        p.grad[...] = g
        adam_update([p], opt, lr=0.1)
    assert opt.step == 3
    assert np.allclose(p.value, ref, atol=1e-15)


def test_clip_gradients():
    p = Parameter("w", np.zeros(4))
    p.grad[...] = np.array([30.0, 40.0, 0.0, 0.0])
    raw = clip_gradients([p])
    assert raw == pytest.approx(50.0)
    assert np.linalg.norm(p.grad) == pytest.approx(10.0, rel=1e-12)
    q = Parameter("u", np.zeros(2))
    q.grad[...] = np.array([1.0, 2.0])
    before = q.grad.copy()
    clip_gradients([q])
    assert np.array_equal(q.grad, before)


def test_train_step_zero_lr_is_noop():
    cfg = tiny_cfg(lr=0.0)
    ds = line_ds()
    p = init_policy(cfg, n_y=2)
    before = {q.name: q.value.copy() for q in p.parameters()}
    opt = OptimizerState.fresh(p.parameters())
    l1, opt = train_step(p, ds, cfg, opt)
    l2, opt = train_step(p, ds, cfg, opt)
    assert l1 == l2
    assert opt.step == 2
    for q in p.parameters():
        assert np.array_equal(q.value, before[q.name])


def test_train_step_requires_resampled_demos():
    cfg = tiny_cfg(horizon=20)
    ds = line_ds(H=10)
    p = init_policy(cfg, n_y=2)
    with pytest.raises(TrainError, match="resample"):
        train_step(p, ds, cfg, OptimizerState.fresh(p.parameters()))


@pytest.mark.filterwarnings("ignore:overflow")
def test_train_step_non_finite_loss_diagnostics():
    # large enough that squared residuals overflow, small enough that the
    # initial-state weights stay finite
    cfg = tiny_cfg()
    huge = np.full((10, 2), 1e160)
    huge[-1] = 0.0
    ds = Dataset(demos=[huge], target=np.zeros(2), units="normalized")
    p = init_policy(cfg, n_y=2)
    with pytest.raises(TrainError, match="non-finite loss"):
        train_step(p, ds, cfg, OptimizerState.fresh(p.parameters()))


def test_loss_decreases_on_linear_demo():
    # median per-step change across 5 seeds is a strict decrease at every one
    # of the first 50 steps
    ds = line_ds()
    curves = []
    for seed in range(5):
        cfg = tiny_cfg(lr=0.002, epochs=50, seed=seed)
        recs = []
        train(cfg, ds, on_epoch=lambda r: recs.append(r))
        curves.append([r.loss for r in recs])
    diffs = np.diff(np.array(curves), axis=1)
    assert np.all(np.median(diffs, axis=0) < 0.0)


def test_lmi_holds_at_every_logged_epoch():
    cfg = tiny_cfg(epochs=20, lr=0.05, coupling_layers=2, coupling_width=8)
    recs = []
    train(cfg, line_ds(M=2), on_epoch=lambda r: recs.append(r))
    assert len(recs) == 20
    for r in recs:
        assert r.cert_margin >= cfg.eps - 1e-9
    line = recs[0].line()
    for token in ("epoch=", "loss=", "gamma=", "eig_min=", "wall="):
        assert token in line


def test_train_deterministic(tmp_path):
    cfg = tiny_cfg(epochs=5, coupling_layers=2, coupling_width=8)
    ds = line_ds(M=2)
    a = train(cfg, ds)
    b = train(cfg, ds)
    pa, pb = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, str(pa))
    save_checkpoint(b, str(pb))
    assert pa.read_bytes() == pb.read_bytes()


def test_checkpoint_round_trip(tmp_path):
    cfg = tiny_cfg(epochs=3, coupling_layers=2, coupling_width=8,
                   gamma_mode="learnable", gamma=1.2, gamma_min=0.5)
    ck = train(cfg, line_ds(M=2))
    p1 = tmp_path / "one.ckpt"
    save_checkpoint(ck, str(p1))
    loaded = load_checkpoint(str(p1))
    p2 = tmp_path / "two.ckpt"
    save_checkpoint(loaded, str(p2))
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.config == ck.config
    assert loaded.opt_step == ck.opt_step
    assert loaded.rng_state == ck.rng_state


def test_checkpoint_reproduces_rollout(tmp_path):
    cfg = tiny_cfg(epochs=3, coupling_layers=2, coupling_width=8)
    ck = train(cfg, line_ds(M=2))
    path = tmp_path / "p.ckpt"
    save_checkpoint(ck, str(path))
    pol_a = policy_from_checkpoint(ck)
    pol_b = policy_from_checkpoint(load_checkpoint(str(path)))
    y0 = np.array([[0.8, 0.3], [-0.2, 0.6]])
    with ad.no_grad():
        Ya = rollout_batch(pol_a.matrices(), pol_a.proj, pol_a.stack, y0, cfg.solver())
        Yb = rollout_batch(pol_b.matrices(), pol_b.proj, pol_b.stack, y0, cfg.solver())
    assert np.max(np.abs(Ya - Yb)) <= 1e-12


def test_resume_matches_uninterrupted(tmp_path):
    ds = line_ds(M=2)
    full_cfg = tiny_cfg(epochs=10, coupling_layers=2, coupling_width=8)
    full = train(full_cfg, ds)
    part = train(dataclasses.replace(full_cfg, epochs=6), ds)
    resumed = train(full_cfg, ds, resume=part)
    pa, pb = tmp_path / "full.ckpt", tmp_path / "resumed.ckpt"
    save_checkpoint(full, str(pa))
    save_checkpoint(resumed, str(pb))
    assert pa.read_bytes() == pb.read_bytes()


def test_resume_config_mismatch():
    ds = line_ds()
    part = train(tiny_cfg(epochs=2), ds)
    with pytest.raises(TrainError, match="config"):
        train(tiny_cfg(epochs=4, lr=0.123), ds, resume=part)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_text("not a checkpoint\n")
    with pytest.raises(TrainError):
        load_checkpoint(str(path))
    with pytest.raises(TrainError):
        load_checkpoint(str(tmp_path / "missing.ckpt"))


def test_policy_from_checkpoint_validates_names():
    cfg = tiny_cfg(epochs=1)
    ck = train(cfg, line_ds())
    bad = dataclasses.replace(ck, params={**ck.params, "ghost": np.zeros(2)})
    with pytest.raises(TrainError, match="ghost"):
        policy_from_checkpoint(bad)


def test_train_normalizes_and_stores_spec():
    demos = [np.array([[4.0, 2.0], [3.0, 2.0], [2.0, 2.0]]),
             np.array([[0.0, 4.0], [1.0, 3.0], [2.0, 2.0]])]
    ds = Dataset(demos=demos, target=np.array([2.0, 2.0]))
    cfg = tiny_cfg(epochs=1, horizon=10)
    ck = train(cfg, ds)
    assert np.array_equal(ck.norm.shift, np.array([-2.0, -2.0]))
    assert ck.data_dim == 2 and ck.epochs_run == 1
    # already-normalized input keeps the identity spec
    from contractive_imitation.data import normalize
    pre, _ = normalize(line_ds())
    ck2 = train(tiny_cfg(epochs=1), pre)
    assert np.all(ck2.norm.shift == 0.0) and np.all(ck2.norm.scale == 1.0)
