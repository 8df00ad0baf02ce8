"""Tests for encoding, integration, and full rollouts."""

import numpy as np
import pytest

import contractive_imitation.autodiff as ad
from contractive_imitation.autodiff import Parameter, Tensor
from contractive_imitation.bijection import BijectionStack, random_coupling_stack
from contractive_imitation.ren import assemble, random_ren_params
from contractive_imitation.rollout import (
    Projection,
    RolloutError,
    SolverConfig,
    Trajectory,
    decode_states,
    encode_initial,
    encode_initial_batch,
    integrate,
    integrate_batch,
    random_projection,
    rollout,
    rollout_batch,
)

from helpers import direct_mats, fd_param_grads
from oracles import svd_pinv


def canonical_projection(n_y, n_z):
    value = np.hstack([np.eye(n_y), np.zeros((n_y, n_z - n_y))])
    return Projection(matrix=Parameter("proj.matrix", value))


def decay_mats(n, rate=1.0):
    # C1 = 0 disables the implicit layer, leaving dz/dt = -rate * z
    return direct_mats(A=-rate * np.eye(n), B1=np.zeros((n, 1)),
                       C1=np.zeros((1, n)), D11=np.zeros((1, 1)))


def test_solver_config_validation():
    with pytest.raises(RolloutError):
        SolverConfig(method="leapfrog")
    with pytest.raises(RolloutError):
        SolverConfig(dt=0.0)
    with pytest.raises(RolloutError):
        SolverConfig(horizon=0)
    with pytest.raises(RolloutError):
        SolverConfig(substeps=0)
    cfg = SolverConfig.for_duration(horizon=11, substeps=2)
    assert cfg.dt == pytest.approx(1.0 / 20.0)
    assert cfg.stride == pytest.approx(0.1)
    assert SolverConfig.for_duration(horizon=1).horizon == 1


def test_trajectory_validation():
    with pytest.raises(RolloutError):
        Trajectory(states=np.zeros(5), dt=0.1)
    with pytest.raises(RolloutError):
        Trajectory(states=np.array([[0.0, np.nan]]), dt=0.1)
    with pytest.raises(RolloutError):
        Trajectory(states=np.zeros((3, 2)), dt=0.0)
    traj = Trajectory(states=np.zeros((4, 2)), dt=0.25)
    assert traj.horizon == 4
    assert np.allclose(traj.times(), [0.0, 0.25, 0.5, 0.75])


def test_projection_validation():
    with pytest.raises(RolloutError):
        Projection(matrix=Parameter("p", np.zeros(3)))
    with pytest.raises(RolloutError):
        Projection(matrix=Parameter("p", np.zeros((4, 2))))
    proj = random_projection(3, 7, np.random.default_rng(0))
    assert (proj.n_y, proj.n_z) == (3, 7)


def test_encode_canonical_embedding():
    proj = canonical_projection(3, 6)
    stack = BijectionStack(dim=3)
    y0 = np.array([0.4, -1.2, 2.0])
    z0 = encode_initial(proj, stack, y0).data
    assert np.allclose(z0, np.concatenate([y0, np.zeros(3)]), atol=1e-12)


def test_encode_matches_svd_pseudoinverse():
    rng = np.random.default_rng(1)
    P = rng.normal(size=(4, 8))
    proj = Projection(matrix=Parameter("proj.matrix", P))
    stack = random_coupling_stack(4, 2, rng, final_std=0.3)
    for _ in range(5):
        y0 = rng.normal(size=4)
        with ad.no_grad():
            u = stack.inverse(y0).data
        expected = svd_pinv(P) @ u
        assert np.allclose(encode_initial(proj, stack, y0).data, expected, atol=1e-8)


def test_encode_is_right_inverse_of_decode():
    rng = np.random.default_rng(2)
    for n_y, n_z in [(2, 2), (3, 6), (5, 11)]:
        proj = random_projection(n_y, n_z, rng, noise=0.3)
        stack = random_coupling_stack(n_y, 3, rng, final_std=0.3)
        for _ in range(5):
            y0 = rng.normal(size=n_y) * 2.0
            z0 = encode_initial(proj, stack, y0)
            back = decode_states(proj, stack, ad.reshape(z0, (1, -1))).data[0]
            assert np.allclose(back, y0, atol=1e-8)


def test_encode_rejects_dependent_rows():
    P = np.ones((3, 5))
    proj = Projection(matrix=Parameter("p", P))
    with pytest.raises(RolloutError):
        encode_initial(proj, BijectionStack(dim=3), np.zeros(3))


def test_euler_single_step():
    mats = decay_mats(1)
    cfg = SolverConfig(method="euler", dt=0.1, horizon=2)
    Z = integrate(mats, np.array([1.0]), cfg).data
    assert np.allclose(Z, [[1.0], [0.9]], atol=1e-15)


def test_rk4_matches_exponential():
    mats = decay_mats(1)
    cfg = SolverConfig(method="rk4", dt=0.1, horizon=11)
    Z = integrate(mats, np.array([1.0]), cfg).data
    assert abs(Z[-1, 0] - np.exp(-1.0)) <= 1e-6


def test_euler_error_halves_with_dt():
    mats = decay_mats(1)
    errs = []
    for dt, horizon in [(0.1, 11), (0.05, 21)]:
        cfg = SolverConfig(method="euler", dt=dt, horizon=horizon)
        Z = integrate(mats, np.array([1.0]), cfg).data
        errs.append(abs(Z[-1, 0] - np.exp(-1.0)))
    ratio = errs[0] / errs[1]
    assert 1.6 <= ratio <= 2.4


def test_rollout_linear_system_analytic():
    proj = canonical_projection(2, 4)
    stack = BijectionStack(dim=2)
    mats = decay_mats(4)
    cfg = SolverConfig.for_duration(horizon=11, method="rk4", substeps=2)
    y0 = np.array([1.5, -0.5])
    traj = rollout(mats, proj, stack, y0, cfg)
    assert traj.dt == pytest.approx(0.1)
    for k, t in enumerate(traj.times()):
        assert np.allclose(traj.states[k], y0 * np.exp(-t), atol=1e-6)


def test_rollout_starts_at_initial_observation():
    rng = np.random.default_rng(3)
    for seed in range(3):
        params = random_ren_params(5, 3, rng)
        mats = assemble(params, 1.0)
        proj = random_projection(3, 5, rng, noise=0.2)
        stack = random_coupling_stack(3, 2, rng, final_std=0.3)
        y0 = rng.normal(size=3)
        traj = rollout(mats, proj, stack, y0, SolverConfig.for_duration(horizon=8))
        assert np.allclose(traj.states[0], y0, atol=1e-8)


def test_rollout_constant_at_equilibrium():
    rng = np.random.default_rng(4)
    params = random_ren_params(4, 2, rng)
    mats = assemble(params, 1.0)
    proj = random_projection(2, 4, rng, noise=0.2)
    stack = random_coupling_stack(2, 2, rng, final_std=0.4)
    with ad.no_grad():
        y_eq = stack.forward(np.zeros(2)).data
    traj = rollout(mats, proj, stack, y_eq, SolverConfig.for_duration(horizon=12))
    assert np.all(np.linalg.norm(traj.states - y_eq, axis=1) <= 1e-8)


def test_rollout_deterministic():
    rng = np.random.default_rng(5)
    params = random_ren_params(4, 3, rng)
    mats = assemble(params, 1.0)
    proj = random_projection(2, 4, rng)
    stack = random_coupling_stack(2, 2, rng, final_std=0.2)
    y0 = rng.normal(size=2)
    cfg = SolverConfig.for_duration(horizon=10, method="rk4", substeps=3)
    a = rollout(mats, proj, stack, y0, cfg)
    b = rollout(mats, proj, stack, y0, cfg)
    assert np.array_equal(a.states, b.states)


def test_observation_distance_envelope():
    # identity output map and canonical projection: observation distance
    # inherits the latent envelope alpha * exp(-gamma t)
    rng = np.random.default_rng(6)
    gamma = 1.0
    params = random_ren_params(4, 3, rng, std_scale=0.8)
    mats = assemble(params, gamma)
    proj = canonical_projection(2, 4)
    stack = BijectionStack(dim=2)
    evals = np.linalg.eigvalsh(mats.P.data)
    alpha = float(np.sqrt(evals[-1] / evals[0]))
    cfg = SolverConfig.for_duration(horizon=21, method="rk4", substeps=2)
    y0 = rng.normal(size=2)
    ta = rollout(mats, proj, stack, y0, cfg)
    tb = rollout(mats, proj, stack, y0 + 0.01 * rng.normal(size=2), cfg)
    d = np.linalg.norm(ta.states - tb.states, axis=1)
    for k, t in enumerate(ta.times()):
        assert d[k] <= alpha * np.exp(-gamma * t) * d[0] * 1.05 + 1e-12


def test_gradient_through_rollout():
    rng = np.random.default_rng(7)
    params = random_ren_params(3, 2, rng, std_scale=0.6)
    proj = random_projection(2, 3, rng, noise=0.1)
    stack = random_coupling_stack(2, 2, rng, width=4, final_std=0.3)
    y0 = Tensor(rng.normal(size=(1, 2)))
    weights = Tensor(rng.normal(size=(1, 2)))
    cfg = SolverConfig.for_duration(horizon=5, method="euler")
    all_params = params.parameters() + proj.parameters() + stack.parameters()

    def loss_fn():
        mats = assemble(params, 1.0)
        Z0 = encode_initial_batch(proj, stack, y0)
        stored = integrate_batch(mats, Z0, cfg)
        Y_final = decode_states(proj, stack, stored[-1])
        return ad.vsum(ad.mul(Y_final, weights))

    grads = fd_param_grads(loss_fn, all_params, step=1e-5)
    for name, (analytic, numeric) in grads.items():
        assert np.allclose(analytic, numeric, rtol=1e-4, atol=1e-6), name


@pytest.mark.filterwarnings("ignore:overflow")
def test_integrate_reports_divergence_step():
    mats = direct_mats(A=np.array([[1e150]]), B1=np.zeros((1, 1)),
                       C1=np.zeros((1, 1)), D11=np.zeros((1, 1)))
    cfg = SolverConfig(method="euler", dt=1.0, horizon=6)
    with pytest.raises(RolloutError, match="step"):
        integrate(mats, np.array([1.0]), cfg)


def test_rollout_batch_matches_single():
    rng = np.random.default_rng(8)
    params = random_ren_params(5, 3, rng)
    mats = assemble(params, 1.0)
    proj = random_projection(3, 5, rng, noise=0.2)
    stack = random_coupling_stack(3, 2, rng, final_std=0.3)
    Y0 = rng.normal(size=(3, 3))
    cfg = SolverConfig.for_duration(horizon=7, method="rk4")
    batch = rollout_batch(mats, proj, stack, Y0, cfg)
    assert batch.shape == (3, 7, 3)
    for b in range(3):
        single = rollout(mats, proj, stack, Y0[b], cfg)
        assert np.allclose(batch[b], single.states, rtol=1e-10, atol=1e-10)
