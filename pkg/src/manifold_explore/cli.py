"""Command-line entry point: ``manifold-explore <subcommand> [flags]``.

Exit codes: 0 success, 1 oracle check failed, 2 config error, 3 numerical
divergence, 4 I/O error. Failures print one line to stderr of the form
``error kind=<config|divergence|io> message="..."``.
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import os
import re
import shutil
import sys
import time

import numpy as np

from . import __version__
from .config import PRESET_NAMES, ConfigError, ExperimentConfig, load_config
from .datasets import write_points_csv
from .diffusion import DiffusionModel, DivergenceError, read_samples_csv, write_samples_csv
from .evalx import mc_entropy
from .experiment import diagnostics, grid_samples, pretrain_model, write_density_csv, write_summary_csv
from .md_oracle import theory_suite

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO = 0, 1, 2, 3, 4


class CliIOError(OSError):
    pass


def _load_model(path) -> DiffusionModel:
    if not os.path.isfile(path):
        raise CliIOError(f"checkpoint not found: {path}")
    try:
        return DiffusionModel.load(path)
    except (ValueError, KeyError) as err:
        raise CliIOError(f"unreadable checkpoint {path}: {err}") from err


def _run_checkpoints(run_dir):
    paths = glob.glob(os.path.join(run_dir, "ckpt_*.bin"))
    if not paths:
        raise CliIOError(f"no ckpt_*.bin files in {run_dir}")
    return sorted(paths, key=lambda p: int(re.search(r"ckpt_(\d+)\.bin$", p).group(1)))


def cmd_pretrain(args, cfg: ExperimentConfig) -> int:
    os.makedirs(args.out, exist_ok=True)
    t0 = time.perf_counter()
    model, data = pretrain_model(cfg, log_every=args.log_every)
    write_points_csv(os.path.join(args.out, "data.csv"), data)
    path = os.path.join(args.out, "pretrained.bin")
    model.save(path)
    cfg.write(os.path.join(args.out, "run.cfg"))
    print(f"pretrained {path} params_sha256={model.params_hash()} seconds={time.perf_counter() - t0:.1f}")
    return EXIT_OK


def cmd_smeme(args, cfg: ExperimentConfig) -> int:
    from .smeme import smeme_run

    os.makedirs(args.out, exist_ok=True)
    if args.checkpoint:
        model = _load_model(args.checkpoint)
    else:
        model, data = pretrain_model(cfg)
        write_points_csv(os.path.join(args.out, "data.csv"), data)
    t0 = time.perf_counter()
    run = smeme_run(model, cfg.smeme_config(args.out), cfg.seed, extra_cfg=cfg.to_sections())
    for k, e in enumerate(run.entropies):
        print(f"k={k} H_hat={e.value:.6f} stderr={e.stderr:.6f} n={e.n_samples}")
    print(f"smeme run written to {args.out} seconds={time.perf_counter() - t0:.1f}")
    return EXIT_OK


def cmd_eval_entropy(args, cfg: ExperimentConfig) -> int:
    if args.run:
        paths = _run_checkpoints(args.run)
    elif args.checkpoint:
        paths = [args.checkpoint]
    else:
        raise ConfigError("eval-entropy needs --checkpoint or --run")
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for k, path in enumerate(paths):
        model = _load_model(path)
        est = mc_entropy(model, cfg.eval.entropy_samples, cfg.eval.ode_steps, seed=cfg.seed,
                         sampler_steps=cfg.eval.sampler_steps or None)
        rows.append((k, est))
        print(f"k={k} H_hat={est.value:.6f} stderr={est.stderr:.6f} n={est.n_samples} ({os.path.basename(path)})")
    with open(os.path.join(args.out, "entropy.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "H_hat", "stderr", "n_samples"])
        for k, est in rows:
            w.writerow([k, repr(est.value), repr(est.stderr), est.n_samples])
    return EXIT_OK


def cmd_oracle(args, cfg: ExperimentConfig) -> int:
    os.makedirs(args.out, exist_ok=True)
    results = theory_suite(seed=cfg.seed, out_dir=args.out, iterations=args.iterations)
    with open(os.path.join(args.out, "summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["check", "passed", "detail"])
        for r in results:
            w.writerow([r.name, int(r.passed), r.detail])
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


def cmd_report(args, cfg: ExperimentConfig) -> int:
    if not args.run:
        raise ConfigError("report needs --run DIR")
    paths = _run_checkpoints(args.run)
    os.makedirs(args.out, exist_ok=True)
    samples = []
    for k, path in enumerate(paths):
        spath = os.path.join(args.out, f"grid_samples_{k}.csv")
        if os.path.isfile(spath) and not args.resample:
            x = read_samples_csv(spath)
        else:
            x = grid_samples(_load_model(path), cfg)
            write_samples_csv(spath, x, cfg.seed)
        samples.append(x)
    diag = diagnostics(samples, cfg)
    write_density_csv(os.path.join(args.out, "density_grid.csv"), diag)
    write_summary_csv(os.path.join(args.out, "summary.csv"), diag)
    ent = os.path.join(args.run, "entropy.csv")
    if os.path.isfile(ent):
        shutil.copyfile(ent, os.path.join(args.out, "entropy_curve.csv"))
    for row in diag.rows():
        print(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="manifold-explore",
                                     description="Maximum-entropy exploration of a diffusion model's data manifold.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI file overriding preset values")
        p.add_argument("--preset", choices=PRESET_NAMES, help="base preset (default: reduced)")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--out", required=True, help="output directory")
        return p

    p = common(sub.add_parser("pretrain", help="train the pre-trained model on a synthetic dataset"))
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_pretrain)
    p = common(sub.add_parser("smeme", help="run the exploration loop; writes a run directory"))
    p.add_argument("--checkpoint", help="pre-trained checkpoint (default: pre-train first)")
    p.set_defaults(func=cmd_smeme)
    p = common(sub.add_parser("eval-entropy", help="Monte-Carlo entropy of checkpoints"))
    p.add_argument("--checkpoint")
    p.add_argument("--run", help="run directory; evaluates every ckpt_k.bin")
    p.set_defaults(func=cmd_eval_entropy)
    p = common(sub.add_parser("oracle", help="grid mirror-descent theory checks"))
    p.add_argument("--iterations", type=int, default=100_000)
    p.set_defaults(func=cmd_oracle)
    p = common(sub.add_parser("report", help="density grids, support and entropy tables for a run"))
    p.add_argument("--run")
    p.add_argument("--resample", action="store_true", help="ignore cached grid samples")
    p.set_defaults(func=cmd_report)
    return parser


def _fail(kind: str, message: str, code: int, extra: dict | None = None) -> int:
    fields = " ".join(f"{k}={json.dumps(v)}" for k, v in (extra or {}).items())
    msg = json.dumps(" ".join(str(message).split()))
    print(f"error kind={kind} message={msg}" + (f" {fields}" if fields else ""), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.preset, args.seed)
        return args.func(args, cfg)
    except ConfigError as err:
        return _fail("config", err, EXIT_CONFIG)
    except (DivergenceError, FloatingPointError) as err:
        diag = getattr(err, "diagnostics", None) or {}
        return _fail("divergence", err, EXIT_DIVERGENCE, {k: v for k, v in diag.items() if np.isscalar(v)})
    except OSError as err:
        return _fail("io", err, EXIT_IO)


if __name__ == "__main__":
    sys.exit(main())
