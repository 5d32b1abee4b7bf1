import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from manifold_explore.diffusion import (
    DivergenceError,
    LinearEpsModel,
    SamplerConfig,
    ddpm_sample,
    init_model,
    linear_schedule,
    sample,
    step_coefficients,
    train_dsm,
)
from manifold_explore.finetune import (
    FinetuneConfig,
    RewardGradient,
    adjoint_matching_loss_grad,
    build_regression_set,
    constant_reward,
    lean_adjoint_solve,
    linear_finetune_solver,
    matching_scales,
    zero_reward,
)


def _net(seed=0, T=30, d=2):
    sched = linear_schedule(T, 1e-3, 0.3)
    return init_model(d, sched, seed, (8, 8), n_frequencies=3)


def _traj(model, n=5, steps=None, seed=0):
    return sample(model, SamplerConfig(eta=1.0, num_steps=steps, seed=seed), n)


def test_zero_reward_gives_zero_adjoints():
    model = _net()
    adj = lean_adjoint_solve(model, _traj(model), zero_reward())
    np.testing.assert_array_equal(adj.adjoints, 0.0)


def test_linear_model_adjoint_closed_form():
    sched = linear_schedule(20, 1e-3, 0.3)
    C = np.array([[0.3, -0.2], [0.1, 0.5]])
    model = LinearEpsModel(sched, C)
    traj = _traj(model, n=4, seed=2)
    g = np.array([1.5, -0.7])
    adj = lean_adjoint_solve(model, traj, constant_reward(g))
    a = np.broadcast_to(g, (4, 2))
    ts = traj.timesteps
    for j in range(len(ts) - 2, -1, -1):
        c_x, c_eps, _ = step_coefficients(sched.alpha_bars[ts[j]], sched.alpha_bars[ts[j + 1]], 1.0)
        a = a @ (c_x * np.eye(2) + c_eps * C)
        np.testing.assert_allclose(adj.adjoints[j], a, rtol=1e-10, atol=1e-14)
    np.testing.assert_array_equal(adj.adjoints[-1], np.broadcast_to(g, (4, 2)))


def test_one_step_adjoint_matches_finite_difference_jacobian():
    model = _net(3)
    traj = _traj(model, n=3, steps=1, seed=1)
    sched = model.schedule
    ts = traj.timesteps
    c_x, c_eps, _ = step_coefficients(sched.alpha_bars[ts[0]], sched.alpha_bars[ts[1]], 1.0)
    rng = np.random.default_rng(0)
    g = rng.standard_normal((3, 2))
    adj = lean_adjoint_solve(model, traj, RewardGradient(lambda x: g))

    def step(x):
        return c_x * x + c_eps * model.eps(x, ts[0] / sched.T)

    x0 = traj.states[0]
    for i in range(3):
        J = np.empty((2, 2))
        for k in range(2):
            e = np.zeros((1, 2))
            e[0, k] = 1e-6
            J[:, k] = (step(x0[i:i + 1] + e) - step(x0[i:i + 1] - e))[0] / 2e-6
        np.testing.assert_allclose(adj.adjoints[0][i], g[i] @ J, rtol=1e-5, atol=1e-8)


@given(st.integers(0, 2**31))
@settings(max_examples=20, deadline=None)
def test_adjoint_is_linear_in_terminal_condition(seed):
    model = _net(1)
    traj = _traj(model, n=3, seed=seed % 1000)
    rng = np.random.default_rng(seed)
    g1, g2 = rng.standard_normal((2, 3, 2))
    a1 = lean_adjoint_solve(model, traj, RewardGradient(lambda x: g1)).adjoints
    a2 = lean_adjoint_solve(model, traj, RewardGradient(lambda x: g2)).adjoints
    a12 = lean_adjoint_solve(model, traj, RewardGradient(lambda x: g1 + g2)).adjoints
    np.testing.assert_allclose(a12, a1 + a2, atol=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_adjoint_names_step():
    model = _net()
    traj = _traj(model)
    with pytest.raises(DivergenceError, match="step"):
        lean_adjoint_solve(model, traj, RewardGradient(lambda x: np.full(x.shape, np.inf)))


def test_matching_scales():
    sched = linear_schedule(10, 1e-2, 0.2)
    ts = np.arange(10, -1, -1)
    A, B, valid = matching_scales(sched, ts)
    assert valid[:-1].all() and not valid[-1]
    assert np.isinf(A[-1])
    ab = sched.alpha_bars
    a, an = ab[5], ab[4]
    assert A[5] == pytest.approx(np.sqrt(an / (a * (1 - an))) * (1 - a / an), rel=1e-14)
    assert B[5] == pytest.approx(np.sqrt((1 - an) / (1 - a)) * (1 - a / an), rel=1e-14)
    assert np.all(A[:-1] > 0) and np.all(B[:-1] > 0) and B[-1] == 0


def test_loss_zero_at_pretrained_with_zero_adjoint():
    model = _net()
    traj = _traj(model)
    adj = lean_adjoint_solve(model, traj, zero_reward())
    loss, grad = adjoint_matching_loss_grad(model, model, traj, adj)
    assert loss == 0.0
    np.testing.assert_array_equal(grad, 0.0)
    # any other network is strictly worse: the pre-trained one is the minimizer
    other = model.with_params(model.params + 0.05)
    assert adjoint_matching_loss_grad(other, model, traj, adj)[0] > 0


def test_loss_gradient_matches_finite_differences():
    pre = _net(0)
    ft = pre.with_params(pre.params + 0.05 * np.random.default_rng(1).standard_normal(pre.params.size))
    traj = _traj(ft, n=3, steps=6, seed=4)
    adj = lean_adjoint_solve(pre, traj, RewardGradient(lambda x: 0.3 * x))
    loss, grad = adjoint_matching_loss_grad(ft, pre, traj, adj)
    fd = np.empty_like(grad)
    for i in range(grad.size):
        e = np.zeros_like(grad)
        e[i] = 1e-6
        fd[i] = (adjoint_matching_loss_grad(ft.with_params(ft.params + e), pre, traj, adj)[0]
                 - adjoint_matching_loss_grad(ft.with_params(ft.params - e), pre, traj, adj)[0]) / 2e-6
    assert np.linalg.norm(grad - fd) / np.linalg.norm(fd) <= 1e-4


def test_stopgrad_on_pretrained_model():
    pre = _net(0)
    ft = pre.with_params(pre.params + 0.01)
    traj = _traj(ft, n=3, steps=6)
    adj = lean_adjoint_solve(pre, traj, RewardGradient(lambda x: x))
    reg = build_regression_set(pre, traj, adj)
    moved = pre.with_params(pre.params + 0.3)
    a = adjoint_matching_loss_grad(ft, pre, traj, adj, _regression=reg)
    b = adjoint_matching_loss_grad(ft, moved, traj, adj, _regression=reg)
    assert a[0] == b[0]
    np.testing.assert_array_equal(a[1], b[1])


def test_shape_mismatch_rejected():
    model = _net()
    traj = _traj(model, steps=5)
    adj = lean_adjoint_solve(model, _traj(model, steps=6), zero_reward())
    with pytest.raises(ValueError):
        adjoint_matching_loss_grad(model, model, traj, adj)


def test_config_validation():
    with pytest.raises(ValueError):
        FinetuneConfig(iterations=0)
    with pytest.raises(ValueError):
        FinetuneConfig(alpha=0.0)


def _cfg(**kw):
    base = dict(iterations=6, n_trajectories=6, traj_length=10, grad_steps=2, batch_size=32, lr=1e-3)
    return FinetuneConfig(**{**base, **kw})


def test_null_reward_is_fixed_point(tmp_path):
    pre = _net()
    ft, rows = linear_finetune_solver(pre, zero_reward(), _cfg(), seed=0, log_path=tmp_path / "log.csv")
    np.testing.assert_array_equal(ft.params, pre.params)
    assert all(r["loss"] == 0.0 for r in rows)
    log = list(csv.reader(open(tmp_path / "log.csv")))
    assert log[0] == ["iter", "loss", "mean_reward_grad_norm", "mean_control_norm", "seed"]
    assert len(log) == 7


def test_solver_deterministic_and_leaves_pretrained_untouched():
    pre = _net()
    before = pre.params.copy()
    a, _ = linear_finetune_solver(pre, constant_reward([1.0, 0.0]), _cfg(), seed=3)
    b, _ = linear_finetune_solver(pre, constant_reward([1.0, 0.0]), _cfg(), seed=3)
    assert a.params_hash() == b.params_hash()
    assert a.params_hash() != pre.params_hash()
    np.testing.assert_array_equal(pre.params, before)


def test_solver_divergence_aborts_with_state():
    pre = _net()
    with pytest.raises(DivergenceError) as info:
        linear_finetune_solver(pre, constant_reward([50.0, 50.0]), _cfg(max_loss=1e-12), seed=0)
    assert info.value.diagnostics["iteration"] == 0
    assert "param_norm" in info.value.diagnostics


def test_larger_alpha_gives_smaller_control():
    pre = _net()
    probe = _traj(pre, n=50, steps=10, seed=11)
    xs = probe.states[:-1].reshape(-1, 2)
    s = np.repeat(probe.timesteps[:-1] / pre.schedule.T, 50)
    surrogate = []
    for alpha in (0.5, 1.0, 2.0, 4.0):
        ft, _ = linear_finetune_solver(pre, constant_reward([1.0, -1.0]), _cfg(alpha=alpha, reward_scale=0.5), seed=2)
        surrogate.append(np.mean(np.sum((ft.eps(xs, s) - pre.eps(xs, s)) ** 2, axis=1)))
    assert np.all(np.diff(surrogate) <= 0)


@pytest.fixture(scope="module")
def gaussian_pre():
    sched = linear_schedule(50, 1e-3, 0.25)
    model = init_model(1, sched, 0, (16, 16), n_frequencies=3)
    w = lambda t: (1.0 - sched.alpha_bars[t]) ** -0.5
    model, _ = train_dsm(model, lambda n, r: r.standard_normal((n, 1)), 1500, 256, 4e-3, seed=0, weighting=w,
                         antithetic=True)
    return model


@pytest.mark.parametrize("c", [1.0, -1.0])
def test_constant_reward_tilts_mean_monotonically(gaussian_pre, c):
    def mean(m):
        return ddpm_sample(m, SamplerConfig(seed=9), 20_000).samples.mean()

    base = mean(gaussian_pre)
    shifts = []
    for lam in (0.05, 0.1, 0.2):
        cfg = FinetuneConfig(iterations=40, n_trajectories=32, traj_length=50, grad_steps=2, batch_size=512,
                             lr=2e-3, reward_scale=lam)
        ft, _ = linear_finetune_solver(gaussian_pre, constant_reward([c]), cfg, seed=1)
        shifts.append(c * (mean(ft) - base))
    assert shifts[0] > 0
    assert shifts[0] < shifts[1] < shifts[2]
    # exact tilt of N(0, 1) by exp(lam * c * x) shifts the mean by lam * c
    np.testing.assert_allclose(shifts, [0.05, 0.1, 0.2], atol=0.05)


def test_null_reward_samples_match_pretrained(gaussian_pre):
    cfg = FinetuneConfig(iterations=5, n_trajectories=8, traj_length=50, batch_size=64, reward_scale=0.0)
    ft, _ = linear_finetune_solver(gaussian_pre, constant_reward([1.0]), cfg, seed=0)
    a = ddpm_sample(gaussian_pre, SamplerConfig(seed=4), 20_000).samples
    b = ddpm_sample(ft, SamplerConfig(seed=5), 20_000).samples
    assert abs(a.mean() - b.mean()) < 3 * np.sqrt(2 / 20_000)
