"""KL-regularized fine-tuning against a reward gradient by adjoint matching.

One solver iteration samples ancestral trajectories from the current
fine-tuned model, propagates the scaled reward gradient backwards through
the *pre-trained* step maps (the lean adjoint), and regresses the
noise-prediction residual ``eps_ft - eps_pre`` onto the adjoint.

Sign convention: the regression target is ``eps_ft - eps_pre = -(B/A) a``,
which moves each ancestral mean along ``+a``, i.e. towards higher reward.

KL weight: fine-tuning with regularization ``alpha`` against reward
``lambda * f`` is solved as the unit-KL control problem with reward
gradient ``(lambda / alpha) * grad f``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nn_core
from .diffusion import DiffusionModel, DivergenceError, SamplerConfig, Trajectory, sample, step_coefficients
from .nn_core import AdamState


@dataclass(frozen=True, eq=False)
class RewardGradient:
    """Batched ``x (n, d) -> grad f(x) (n, d)`` with a provenance tag."""

    fn: Callable[[np.ndarray], np.ndarray]
    tag: str = "analytic"
    provenance: dict = field(default_factory=dict)

    def __call__(self, x):
        x = np.atleast_2d(x)
        g = np.asarray(self.fn(x), dtype=np.float64)
        if g.shape != x.shape:
            raise ValueError(f"reward gradient returned shape {g.shape} for input {x.shape}")
        return g

    def scaled(self, c: float) -> "RewardGradient":
        return RewardGradient(lambda x: c * self.fn(x), self.tag, {**self.provenance, "scale": c})


def zero_reward(dim=None) -> RewardGradient:
    return RewardGradient(lambda x: np.zeros_like(x), "zero")


def constant_reward(c) -> RewardGradient:
    c = np.asarray(c, dtype=np.float64)
    return RewardGradient(lambda x: np.broadcast_to(c, x.shape).copy(), "constant", {"c": c.tolist()})


@dataclass(frozen=True)
class FinetuneConfig:
    iterations: int = 100
    n_trajectories: int = 20
    traj_length: int = 400
    grad_steps: int = 2
    batch_size: int = 2048
    lr: float = 4e-4
    reward_scale: float = 0.1
    alpha: float = 1.0
    max_loss: float = 1e6

    def __post_init__(self):
        for name in ("iterations", "n_trajectories", "traj_length", "grad_steps", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.alpha <= 0 or self.reward_scale < 0:
            raise ValueError("lr and alpha must be positive, reward_scale nonnegative")


@dataclass(frozen=True, eq=False)
class AdjointTrace:
    """``adjoints[j]`` (shape ``(n, d)``) pairs with ``traj.states[j]``."""

    adjoints: np.ndarray
    timesteps: np.ndarray


def _step_maps(traj: Trajectory, schedule):
    ab = schedule.alpha_bars
    a_c = ab[traj.timesteps[:-1]]
    a_n = ab[traj.timesteps[1:]]
    c_x, c_eps, _ = step_coefficients(a_c, a_n, traj.eta)
    return np.broadcast_to(c_x, a_c.shape), np.broadcast_to(c_eps, a_c.shape)


def _eps_jacobians(model, traj: Trajectory):
    M, n, d = len(traj) - 1, traj.states.shape[1], traj.states.shape[2]
    xs = traj.states[:-1].reshape(M * n, d)
    s = np.repeat(traj.timesteps[:-1] / model.schedule.T, n)
    eps, jac = model.eps_and_jacobian(xs, s)
    return eps.reshape(M, n, d), jac.reshape(M, n, d, d)


def lean_adjoint_solve(model_pre, traj: Trajectory, reward_grad: RewardGradient,
                       _jacobians=None) -> AdjointTrace:
    """Backward recursion ``a_j = a_{j+1} + a_{j+1}^T d/dx (step_j(x) - x)`` with the pre-trained step map.

    States are treated as constants; ``a_M = grad f(X_M)``.
    """
    c_x, c_eps = _step_maps(traj, model_pre.schedule)
    if _jacobians is None:
        _, jac = _eps_jacobians(model_pre, traj)
    else:
        jac = _jacobians
    M = len(traj) - 1
    adj = np.empty_like(traj.states)
    adj[M] = reward_grad(traj.states[M])
    for j in range(M - 1, -1, -1):
        a = adj[j + 1]
        # a^T (c_x I + c_eps J) = a + a^T ((c_x - 1) I + c_eps J)
        adj[j] = a + (c_x[j] - 1.0) * a + c_eps[j] * np.einsum("ni,nij->nj", a, jac[j])
        if not np.all(np.isfinite(adj[j])):
            raise DivergenceError(f"non-finite lean adjoint at step {j} (t={traj.timesteps[j]})", step=j)
    return AdjointTrace(adj, traj.timesteps)


def matching_scales(schedule, timesteps):
    """Per-step ``(A_j, B_j)`` of the residual ``A (eps_ft - eps_pre) + B a``.

    ``A = sqrt(ab' / (ab (1 - ab'))) (1 - ab/ab')``,
    ``B = sqrt((1 - ab') / (1 - ab)) (1 - ab/ab')`` with ``ab'`` the next
    (less noisy) level. The final step into ``ab' = 1`` has ``A = inf``
    and ``B = 0``; it carries no control and is masked out.
    """
    ab = schedule.alpha_bars
    a_c = ab[timesteps[:-1]]
    a_n = ab[timesteps[1:]]
    r = 1.0 - a_c / a_n
    valid = a_n < 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        A = np.where(valid, np.sqrt(a_n / (a_c * (1.0 - a_n))) * r, np.inf)
    B = np.sqrt((1.0 - a_n) / (1.0 - a_c)) * r
    return A, B, valid


@dataclass
class RegressionSet:
    """Flattened ``(x, s, target, weight)`` rows of the adjoint-matching objective."""

    x: np.ndarray
    s: np.ndarray
    target: np.ndarray
    weight: np.ndarray
    eps_pre: np.ndarray
    terms_per_traj: int

    def __len__(self):
        return self.x.shape[0]


def build_regression_set(model_pre, traj: Trajectory, adj: AdjointTrace, eps_pre=None) -> RegressionSet:
    M, n, d = len(traj) - 1, traj.states.shape[1], traj.states.shape[2]
    if adj.adjoints.shape != traj.states.shape:
        raise ValueError("adjoint trace and trajectory are not aligned")
    A, B, valid = matching_scales(model_pre.schedule, traj.timesteps)
    if eps_pre is None:
        eps_pre, _ = _eps_jacobians(model_pre, traj)
    js = np.flatnonzero(valid)
    x = traj.states[js].reshape(-1, d)
    s = np.repeat(traj.timesteps[js] / model_pre.schedule.T, n)
    ratio = (B[js] / A[js])[:, None, None]
    target = (eps_pre[js] - ratio * adj.adjoints[js]).reshape(-1, d)
    weight = np.repeat(A[js] ** 2, n)
    return RegressionSet(x, s, target, weight, eps_pre[js].reshape(-1, d), len(js))


def adjoint_matching_loss_grad(model_ft: DiffusionModel, model_pre, traj: Trajectory, adj: AdjointTrace,
                               rows=None, _regression=None):
    """Sum over steps, mean over trajectories, of ``||A (eps_ft - eps_pre) + B a||^2``.

    The gradient is taken with respect to ``model_ft.params`` only;
    ``eps_pre`` and the adjoints enter as constants. ``rows`` restricts the
    objective to a subset of (step, trajectory) pairs, rescaled so that it is
    an unbiased estimate of the full objective.
    """
    reg = _regression if _regression is not None else build_regression_set(model_pre, traj, adj)
    idx = slice(None) if rows is None else rows
    loss, grad = nn_core.loss_and_grad(model_ft.params, model_ft.spec, reg.x[idx], reg.s[idx],
                                       reg.target[idx], reg.weight[idx])
    k = reg.terms_per_traj
    return loss * k, grad * k


def _write_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "loss", "mean_reward_grad_norm", "mean_control_norm", "seed"])
        for r in rows:
            w.writerow([r["iter"], repr(r["loss"]), repr(r["mean_reward_grad_norm"]),
                        repr(r["mean_control_norm"]), r["seed"]])


def linear_finetune_solver(model_pre: DiffusionModel, reward_grad: RewardGradient, cfg: FinetuneConfig,
                           seed=0, log_path=None):
    """Fine-tune a copy of ``model_pre`` towards ``(reward_scale / alpha) * reward_grad``.

    Returns ``(model_ft, log_rows)``; ``model_pre`` is not modified.
    """
    scale = cfg.reward_scale / cfg.alpha
    rng = np.random.default_rng(seed)
    params = model_pre.params.copy()
    state = AdamState.fresh(params.size, lr=cfg.lr)
    rows = []
    for it in range(cfg.iterations):
        current = model_pre.with_params(params)
        traj_seed = int(rng.integers(2 ** 63))
        traj = sample(current, SamplerConfig(eta=1.0, num_steps=cfg.traj_length, seed=traj_seed),
                      cfg.n_trajectories)
        eps_pre, jac = _eps_jacobians(model_pre, traj)
        terminal = reward_grad(traj.samples)
        adj = lean_adjoint_solve(model_pre, traj, RewardGradient(lambda x, g=terminal: scale * g),
                                 _jacobians=jac)
        reg = build_regression_set(model_pre, traj, adj, eps_pre)
        losses = []
        for _ in range(cfg.grad_steps):
            rows_idx = rng.choice(len(reg), size=min(cfg.batch_size, len(reg)), replace=False)
            loss, grad = adjoint_matching_loss_grad(current, model_pre, traj, adj, rows_idx, reg)
            if not np.isfinite(loss) or loss > cfg.max_loss:
                raise DivergenceError(
                    f"adjoint-matching loss {loss:.3e} exceeded {cfg.max_loss:.1e} at iteration {it}",
                    step=it, diagnostics={"iteration": it, "loss": float(loss),
                                          "param_norm": float(np.linalg.norm(params)), "seed": seed})
            params, state = nn_core.adam_step(state, params, grad)
            current = model_pre.with_params(params)
            losses.append(loss)
        ctrl = np.linalg.norm(nn_core.forward(params, model_pre.spec, reg.x, reg.s) - reg.eps_pre, axis=1)
        rows.append({"iter": it, "loss": float(np.mean(losses)),
                     "mean_reward_grad_norm": float(np.mean(np.linalg.norm(terminal, axis=1))),
                     "mean_control_norm": float(np.mean(ctrl)), "seed": traj_seed})
    if log_path is not None:
        _write_log(log_path, rows)
    model_ft = model_pre.with_params(params, finetune_iterations=cfg.iterations,
                                     reward_tag=reward_grad.tag, finetune_seed=int(seed) if np.isscalar(seed) else str(seed))
    return model_ft, rows
