"""Maximum-entropy manifold exploration by iterated score-reward fine-tuning.

Round ``k`` fine-tunes ``pi_{k-1}`` against the reward gradient
``-lambda * score_{k-1}(x, t_eval)``, the gradient of the entropy first
variation ``-log p_{k-1}``. With KL weight ``alpha_k`` the exact optimum of
one round is ``p_k ∝ p_{k-1}^{1 - lambda / alpha_k}``, a mirror-descent step
on the entropy.
"""

from __future__ import annotations

import configparser
import csv
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .diffusion import DiffusionModel, DivergenceError, flow_sample, write_samples_csv
from .evalx import EntropyEstimate
from .finetune import FinetuneConfig, RewardGradient, linear_finetune_solver


def default_eval_index(schedule, target: float = 1e-3) -> int:
    """Smallest-noise index ``t >= 1`` whose ``1 - alpha_bar_t`` is closest to ``target``."""
    gap = 1.0 - schedule.alpha_bars[1:]
    return int(np.argmin(np.abs(np.log(gap) - np.log(target)))) + 1


def score_reward_gradient(model_prev, lam: float, t_eval: int | None = None) -> RewardGradient:
    """``x -> -lam * score(x, t_eval) = lam * eps(x, t_eval) / sqrt(1 - alpha_bar)``.

    The field points away from high-density regions of ``model_prev``.
    """
    sched = model_prev.schedule
    t = default_eval_index(sched) if t_eval is None else int(t_eval)
    if not 1 <= t <= sched.T:
        raise ValueError(f"t_eval must lie in 1..{sched.T}")
    scale = lam / np.sqrt(1.0 - sched.alpha_bars[t])
    s = t / sched.T

    def fn(x):
        if lam == 0:
            return np.zeros_like(x)
        return scale * model_prev.eps(x, s)

    source = model_prev.params_hash() if hasattr(model_prev, "params_hash") else type(model_prev).__name__
    return RewardGradient(fn, "neg-score", {"source": source, "t_eval": t, "lambda": lam})


@dataclass(frozen=True)
class SmemeConfig:
    """Outer-loop settings.

    ``finetune`` describes one round; when ``total_grad_steps`` is set, the
    number of solver iterations per round is
    ``total_grad_steps / (K * finetune.grad_steps)``. ``reward_scale`` and the
    alpha schedule override the corresponding ``finetune`` fields.
    """

    K: int = 4
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    reward_scale: float = 0.1
    alpha_schedule: str = "constant"
    alpha0: float = 1.0
    gamma0: float = 1.0
    total_grad_steps: int | None = None
    t_eval: int | None = None
    evaluate: bool = True
    eval_samples: int = 2000
    eval_ode_steps: int = 50
    eval_sampler_steps: int | None = None
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.alpha_schedule not in ("constant", "robbins-monro"):
            raise ValueError(f"unknown alpha schedule {self.alpha_schedule!r}")
        if self.alpha0 <= 0 or self.gamma0 <= 0:
            raise ValueError("alpha0 and gamma0 must be positive")
        if self.reward_scale < 0:
            raise ValueError("reward_scale must be nonnegative")
        if self.total_grad_steps is not None and self.total_grad_steps < self.K * self.finetune.grad_steps:
            raise ValueError("total_grad_steps too small for K rounds")

    def alphas(self) -> list[float]:
        """``alpha_k`` for ``k = 1..K``; the Robbins-Monro preset uses ``alpha_k = k / gamma0``."""
        if self.alpha_schedule == "constant":
            return [self.alpha0] * self.K
        return [k / self.gamma0 for k in range(1, self.K + 1)]

    def round_config(self, k: int) -> FinetuneConfig:
        iters = self.finetune.iterations
        if self.total_grad_steps is not None:
            iters = self.total_grad_steps // (self.K * self.finetune.grad_steps)
        return replace(self.finetune, iterations=iters, reward_scale=self.reward_scale,
                       alpha=self.alphas()[k - 1])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["finetune"] = asdict(self.finetune)
        return d


@dataclass(eq=False)
class SmemeRun:
    """``models[k]`` is ``pi_k``; ``models[0]`` is the pre-trained model."""

    models: list
    entropies: list
    seeds: list
    logs: list
    config: SmemeConfig
    seed: int

    def entropy_values(self) -> np.ndarray:
        return np.array([e.value for e in self.entropies])

    def write_entropy_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "H_hat", "stderr", "n_samples"])
            for k, e in enumerate(self.entropies):
                if e is not None:
                    w.writerow([k, repr(e.value), repr(e.stderr), e.n_samples])


def write_run_cfg(path, cfg: SmemeConfig, seed, extra: dict | None = None) -> None:
    cp = configparser.ConfigParser()
    d = cfg.to_dict()
    ft = d.pop("finetune")
    cp["smeme"] = {k: str(v) for k, v in d.items()}
    cp["smeme"]["seed"] = str(seed)
    cp["finetune"] = {k: str(v) for k, v in ft.items()}
    for section, values in (extra or {}).items():
        cp[section] = {k: str(v) for k, v in values.items()}
    with open(path, "w") as fh:
        cp.write(fh)


def _evaluate(model, cfg: SmemeConfig, eval_seed, out_dir, k):
    x, logp = flow_sample(model, cfg.eval_samples, cfg.eval_ode_steps, seed=eval_seed)
    bad = np.flatnonzero(~np.isfinite(logp))
    if bad.size:
        raise FloatingPointError(f"log-density evaluation failed for sample index {int(bad[0])}")
    n = logp.size
    est = EntropyEstimate(float(np.sum(-logp) / n), float(np.std(logp, ddof=1) / np.sqrt(n)), n, "flow-ode")
    if out_dir is not None:
        write_samples_csv(os.path.join(out_dir, f"samples_{k}.csv"), x, eval_seed)
    return est, x


def smeme_run(model_pre: DiffusionModel, cfg: SmemeConfig, seed=0, extra_cfg: dict | None = None) -> SmemeRun:
    """Run ``K`` rounds; round ``k`` is fine-tuned from ``pi_{k-1}`` with the reward built from ``pi_{k-1}``.

    All models are evaluated with the same sampler seed (common random
    numbers), so differences between rounds are not masked by sampler noise.
    Raises :class:`DivergenceError` naming the failing round.
    """
    out_dir = cfg.checkpoint_dir
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_run_cfg(os.path.join(out_dir, "run.cfg"), cfg, seed, extra_cfg)
    ss = np.random.SeedSequence(seed)
    round_seeds = [int(s.generate_state(1, np.uint64)[0]) for s in ss.spawn(cfg.K + 1)]
    eval_seed = round_seeds[0]
    base = model_pre.with_params(model_pre.params, lineage={"k": 0, "parent": None, "reward_source": None})
    models, entropies, logs = [base], [], []
    if out_dir is not None:
        base.save(os.path.join(out_dir, "ckpt_0.bin"))
    if cfg.evaluate:
        entropies.append(_evaluate(base, cfg, eval_seed, out_dir, 0)[0])
    for k in range(1, cfg.K + 1):
        prev = models[-1]
        reward = score_reward_gradient(prev, 1.0, cfg.t_eval)
        try:
            ft, rows = linear_finetune_solver(prev, reward, cfg.round_config(k), seed=round_seeds[k])
        except DivergenceError as err:
            raise DivergenceError(f"round {k}: {err}", step=k, diagnostics={**err.diagnostics, "round": k}) from err
        lineage = {"k": k, "parent": prev.params_hash(), "reward_source": reward.provenance["source"],
                   "alpha": cfg.alphas()[k - 1], "lambda": cfg.reward_scale, "t_eval": reward.provenance["t_eval"],
                   "seed": round_seeds[k]}
        ft = ft.with_params(ft.params, lineage=lineage)
        models.append(ft)
        logs.append(rows)
        if out_dir is not None:
            ft.save(os.path.join(out_dir, f"ckpt_{k}.bin"))
        if cfg.evaluate:
            entropies.append(_evaluate(ft, cfg, eval_seed, out_dir, k)[0])
    run = SmemeRun(models, entropies, [eval_seed] + round_seeds[1:], logs, cfg, seed)
    if out_dir is not None and cfg.evaluate:
        run.write_entropy_csv(os.path.join(out_dir, "entropy.csv"))
    return run
