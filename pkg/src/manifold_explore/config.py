"""Experiment configuration: named presets plus an INI-style override file.

Example file::

    [dataset]
    preset = two-region
    n = 10000

    [smeme]
    K = 4
    reward_scale = 0.1

Keys absent from the file keep the preset value. Unknown sections or keys
are rejected so that typos cannot silently fall back to defaults.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields, replace

from .datasets import PRESETS as DATASET_PRESETS
from .datasets import two_region_support, wide_region
from .diffusion import linear_schedule
from .evalx import SupportRegion
from .finetune import FinetuneConfig
from .nn_core import NetworkSpec
from .smeme import SmemeConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSection:
    preset: str = "two-region"
    n: int = 10000
    high_weight: float = 0.9


@dataclass(frozen=True)
class ScheduleSection:
    T: int = 400
    beta_min: float = 1e-4
    beta_max: float = 0.04


@dataclass(frozen=True)
class NetworkSection:
    hidden_width: int = 64
    hidden_depth: int = 3
    activation: str = "silu"
    n_frequencies: int = 8


@dataclass(frozen=True)
class PretrainSection:
    steps: int = 30000
    batch_size: int = 512
    lr: float = 4e-3
    antithetic: bool = True
    noise_weighting: str = "inv-sigma"


@dataclass(frozen=True)
class FinetuneSection:
    n_trajectories: int = 20
    traj_length: int = 400
    grad_steps: int = 2
    batch_size: int = 2048
    lr: float = 4e-4


@dataclass(frozen=True)
class SmemeSection:
    K: int = 4
    total_grad_steps: int = 2000
    reward_scale: float = 0.1
    alpha_schedule: str = "constant"
    alpha0: float = 1.0
    gamma0: float = 1.0
    t_eval: int = 0


@dataclass(frozen=True)
class EvalSection:
    samples: int = 80000
    entropy_samples: int = 20000
    ode_steps: int = 50
    sampler_steps: int = 100
    grid_cell: float = 0.25


@dataclass(frozen=True)
class SupportSection:
    region: str = ""
    wide: str = ""


SECTIONS = {
    "dataset": DatasetSection, "schedule": ScheduleSection, "network": NetworkSection,
    "pretrain": PretrainSection, "finetune": FinetuneSection, "smeme": SmemeSection,
    "eval": EvalSection, "support": SupportSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection = DatasetSection()
    schedule: ScheduleSection = ScheduleSection()
    network: NetworkSection = NetworkSection()
    pretrain: PretrainSection = PretrainSection()
    finetune: FinetuneSection = FinetuneSection()
    smeme: SmemeSection = SmemeSection()
    eval: EvalSection = EvalSection()
    support: SupportSection = SupportSection()
    seed: int = 0
    preset: str = "reduced"

    def validate(self) -> "ExperimentConfig":
        if self.dataset.preset not in DATASET_PRESETS:
            raise ConfigError(f"unknown dataset preset {self.dataset.preset!r}")
        try:
            self.schedule_obj()
            self.network_spec()
            self.smeme_config(None)
            self.support_region()
            self.wide_region()
        except ConfigError:
            raise
        except (ValueError, TypeError) as err:
            raise ConfigError(str(err)) from err
        if self.pretrain.noise_weighting not in ("none", "inv-sigma"):
            raise ConfigError("pretrain.noise_weighting must be 'none' or 'inv-sigma'")
        for name in ("steps", "batch_size"):
            if getattr(self.pretrain, name) < 1:
                raise ConfigError(f"pretrain.{name} must be positive")
        if self.dataset.n < 1 or self.eval.samples < 1 or self.eval.entropy_samples < 1 or self.eval.ode_steps < 1:
            raise ConfigError("dataset and eval sizes must be positive")
        if not 0.0 < self.dataset.high_weight < 1.0:
            raise ConfigError("dataset.high_weight must lie in (0, 1)")
        return self

    def schedule_obj(self):
        return linear_schedule(self.schedule.T, self.schedule.beta_min, self.schedule.beta_max)

    def network_spec(self) -> NetworkSpec:
        n = self.network
        return NetworkSpec.for_state(2, (n.hidden_width,) * n.hidden_depth, n.activation,
                                     n_frequencies=n.n_frequencies)

    def finetune_config(self) -> FinetuneConfig:
        f = self.finetune
        return FinetuneConfig(n_trajectories=f.n_trajectories, traj_length=f.traj_length, grad_steps=f.grad_steps,
                              batch_size=f.batch_size, lr=f.lr, reward_scale=self.smeme.reward_scale)

    def smeme_config(self, checkpoint_dir, evaluate=True) -> SmemeConfig:
        s, e = self.smeme, self.eval
        return SmemeConfig(K=s.K, finetune=self.finetune_config(), reward_scale=s.reward_scale,
                           alpha_schedule=s.alpha_schedule, alpha0=s.alpha0, gamma0=s.gamma0,
                           total_grad_steps=s.total_grad_steps, t_eval=s.t_eval or None, evaluate=evaluate,
                           eval_samples=e.entropy_samples, eval_ode_steps=e.ode_steps,
                           eval_sampler_steps=e.sampler_steps or None, checkpoint_dir=checkpoint_dir)

    def support_region(self) -> SupportRegion | None:
        if self.support.region:
            return SupportRegion.parse(self.support.region)
        if self.dataset.preset == "two-region":
            return two_region_support()
        if self.dataset.preset == "ring":
            from .datasets import RING
            return SupportRegion(annuli=(RING,), label="ring")
        return None

    def wide_region(self) -> SupportRegion | None:
        if self.support.wide:
            return SupportRegion.parse(self.support.wide)
        return wide_region() if self.dataset.preset == "two-region" else None

    def to_sections(self) -> dict:
        out = {name: {f.name: getattr(getattr(self, name), f.name) for f in fields(cls)}
               for name, cls in SECTIONS.items()}
        out["run"] = {"seed": self.seed, "preset": self.preset}
        return out

    def write(self, path) -> None:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for name, values in self.to_sections().items():
            cp[name] = {k: str(v) for k, v in values.items()}
        with open(path, "w") as fh:
            cp.write(fh)


def _preset(name: str) -> ExperimentConfig:
    base = ExperimentConfig(preset=name)
    if name == "reduced":
        return base
    if name == "full":
        return replace(base, smeme=replace(base.smeme, total_grad_steps=6000),
                       eval=replace(base.eval, entropy_samples=80000))
    if name == "smoke":
        return replace(
            base,
            dataset=replace(base.dataset, n=2000),
            schedule=replace(base.schedule, T=50, beta_max=0.3),
            network=replace(base.network, hidden_width=16, hidden_depth=2),
            pretrain=replace(base.pretrain, steps=200, batch_size=128),
            finetune=replace(base.finetune, n_trajectories=4, traj_length=50, batch_size=64),
            smeme=replace(base.smeme, K=2, total_grad_steps=8),
            eval=replace(base.eval, samples=500, entropy_samples=200, ode_steps=10, sampler_steps=0),
        )
    raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")


PRESET_NAMES = ("smoke", "reduced", "full")


def _coerce(cls, key, raw: str):
    ftype = {f.name: f.type for f in fields(cls)}[key]
    try:
        if ftype in ("bool", bool):
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
        if ftype in ("int", int):
            return int(raw)
        if ftype in ("float", float):
            return float(raw)
        return raw.strip()
    except ValueError as err:
        raise ConfigError(f"bad value for {cls.__name__}.{key}: {raw!r}") from err


def load_config(path=None, preset: str | None = None, seed: int | None = None) -> ExperimentConfig:
    """Build the effective configuration: preset, then file overrides, then ``seed``.

    A ``[run]`` section in the file may name ``preset`` and ``seed``; the
    explicit arguments win over it.
    """
    cp = configparser.ConfigParser()
    cp.optionxform = str
    if path is not None:
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except configparser.Error as err:
            raise ConfigError(f"malformed config file: {err}".replace("\n", " ")) from err
    run = dict(cp["run"]) if cp.has_section("run") else {}
    unknown_run = set(run) - {"seed", "preset"}
    if unknown_run:
        raise ConfigError(f"unknown key(s) in [run]: {', '.join(sorted(unknown_run))}")
    cfg = _preset(preset or run.get("preset", "reduced"))
    for section in cp.sections():
        if section == "run":
            continue
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        cls = SECTIONS[section]
        known = {f.name for f in fields(cls)}
        updates = {}
        for key, raw in cp[section].items():
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            updates[key] = _coerce(cls, key, raw)
        cfg = replace(cfg, **{section: replace(getattr(cfg, section), **updates)})
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    elif "seed" in run:
        try:
            cfg = replace(cfg, seed=int(run["seed"]))
        except ValueError as err:
            raise ConfigError(f"bad seed {run['seed']!r}") from err
    return cfg.validate()
