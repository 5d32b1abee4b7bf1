"""End-to-end exploration experiment on a synthetic preset: pre-train, run the
outer loop, and compute the support and density diagnostics.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .datasets import make_dataset, write_points_csv
from .diffusion import DiffusionModel, SamplerConfig, ddpm_sample, init_model, train_dsm, write_samples_csv
from .evalx import Grid, cells_inside, density_grid, support_violation_rate
from .smeme import SmemeRun, smeme_run


def pretrain_model(cfg: ExperimentConfig, log_every: int = 0) -> tuple[DiffusionModel, np.ndarray]:
    """Train the pre-trained model for ``cfg``; returns ``(model, data)``."""
    sched = cfg.schedule_obj()
    data = make_dataset(cfg.dataset.preset, cfg.dataset.n, cfg.seed, cfg.dataset.high_weight).points
    net = cfg.network
    model = init_model(2, sched, cfg.seed, (net.hidden_width,) * net.hidden_depth, net.activation,
                       n_frequencies=net.n_frequencies)
    p = cfg.pretrain
    weighting = (lambda t: (1.0 - sched.alpha_bars[t]) ** -0.5) if p.noise_weighting == "inv-sigma" else None
    model, _ = train_dsm(model, data, p.steps, p.batch_size, p.lr, seed=cfg.seed, weighting=weighting,
                         antithetic=p.antithetic, log_every=log_every)
    model = model.with_params(model.params, role="pretrained", dataset=cfg.dataset.preset, seed=cfg.seed)
    return model, data


def report_grid(cfg: ExperimentConfig, points=None) -> Grid:
    """Grid aligned with the preset's support boxes, padded by two cells."""
    region = cfg.support_region()
    if region is not None and region.boxes:
        lo = np.min([b[0::2] for b in region.boxes], axis=0)
        hi = np.max([b[1::2] for b in region.boxes], axis=0)
    elif points is not None:
        lo, hi = np.floor(points.min(axis=0)), np.ceil(points.max(axis=0))
    else:
        lo, hi = np.full(2, -3.0), np.full(2, 3.0)
    pad = 2 * cfg.eval.grid_cell
    return Grid.regular(lo - pad, hi + pad, cfg.eval.grid_cell)


def grid_samples(model, cfg: ExperimentConfig, seed=None) -> np.ndarray:
    """Ancestral samples used for density grids and support diagnostics."""
    sampler = SamplerConfig(eta=1.0, num_steps=cfg.eval.sampler_steps or None,
                            seed=cfg.seed if seed is None else seed)
    return ddpm_sample(model, sampler, cfg.eval.samples).samples


@dataclass
class Diagnostics:
    """Per-model support and density statistics over a shared grid."""

    grid: Grid
    densities: list
    violation: list
    wide_mass: list
    wide_cells: np.ndarray | None
    uplift: list

    def rows(self) -> list[dict]:
        out = []
        for k in range(len(self.densities)):
            out.append({"k": k, "support_violation": self.violation[k], "wide_mass": self.wide_mass[k],
                        "wide_cells_uplifted": self.uplift[k]})
        return out


def diagnostics(samples: list, cfg: ExperimentConfig) -> Diagnostics:
    grid = report_grid(cfg, samples[0])
    region, wide = cfg.support_region(), cfg.wide_region()
    dens = [density_grid(x, grid) for x in samples]
    viol = [support_violation_rate(x, region) if region is not None else float("nan") for x in samples]
    wmask = cells_inside(grid, wide) if wide is not None else None
    wide_mass = [float(np.mean(wide.contains(x))) if wide is not None else float("nan") for x in samples]
    uplift = [float("nan")]
    for d in dens[1:]:
        uplift.append(float(np.mean(d[wmask] > dens[0][wmask])) if wmask is not None else float("nan"))
    return Diagnostics(grid, dens, viol, wide_mass, wmask, uplift)


def write_density_csv(path, diag: Diagnostics) -> None:
    centers = diag.grid.centers
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "x_center", "y_center", "density", "in_wide_region"])
        for k, dens in enumerate(diag.densities):
            for idx in np.ndindex(diag.grid.shape):
                inw = int(bool(diag.wide_cells[idx])) if diag.wide_cells is not None else 0
                w.writerow([k, repr(float(centers[idx][0])), repr(float(centers[idx][1])),
                            repr(float(dens[idx])), inw])


def write_summary_csv(path, diag: Diagnostics) -> None:
    rows = diag.rows()
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in r.items()})


@dataclass
class ExperimentResult:
    run: SmemeRun
    samples: list
    diag: Diagnostics


def run_experiment(cfg: ExperimentConfig, out_dir=None, model_pre: DiffusionModel | None = None) -> ExperimentResult:
    """Pre-train (unless ``model_pre`` is given), explore, and diagnose.

    With ``out_dir`` the run directory receives the outer-loop artifacts plus
    ``data.csv``, ``grid_samples_k.csv``, ``density_grid.csv`` and
    ``summary.csv``.
    """
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    if model_pre is None:
        model_pre, data = pretrain_model(cfg)
        if out_dir is not None:
            write_points_csv(os.path.join(out_dir, "data.csv"), data)
    run = smeme_run(model_pre, cfg.smeme_config(out_dir), cfg.seed, extra_cfg=cfg.to_sections())
    samples = [grid_samples(m, cfg) for m in run.models]
    diag = diagnostics(samples, cfg)
    if out_dir is not None:
        for k, x in enumerate(samples):
            write_samples_csv(os.path.join(out_dir, f"grid_samples_{k}.csv"), x, cfg.seed)
        write_density_csv(os.path.join(out_dir, "density_grid.csv"), diag)
        write_summary_csv(os.path.join(out_dir, "summary.csv"), diag)
    return ExperimentResult(run, samples, diag)
