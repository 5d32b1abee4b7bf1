"""Entropy estimates and support diagnostics for generated samples.

All entropies are in nats. Reductions use ``np.sum`` (pairwise summation),
so estimates are independent of the order in which points are generated.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .diffusion import DivergenceError, SamplerConfig, ddpm_sample, flow_sample, log_density_flow, ode_sample


@dataclass(frozen=True)
class EntropyEstimate:
    value: float
    stderr: float
    n_samples: int
    method: str

    def __post_init__(self):
        if self.stderr < 0 or self.n_samples < 1:
            raise ValueError("invalid entropy estimate")


def _from_neg_log(neg_logp, method) -> EntropyEstimate:
    n = neg_logp.size
    value = float(np.sum(neg_logp) / n)
    constant = n == 1 or np.all(neg_logp == neg_logp[0])
    stderr = 0.0 if constant else float(np.std(neg_logp, ddof=1) / np.sqrt(n))
    return EntropyEstimate(value, stderr, n, method)


@dataclass(frozen=True)
class UniformBoxDensity:
    """Exact-density stub: uniform on an axis-aligned box."""

    low: np.ndarray
    high: np.ndarray

    def sample(self, n, rng):
        low, high = np.asarray(self.low, float), np.asarray(self.high, float)
        return low + (high - low) * rng.random((n, low.size))

    def log_density(self, x):
        low, high = np.asarray(self.low, float), np.asarray(self.high, float)
        inside = np.all((x >= low) & (x <= high), axis=1)
        return np.where(inside, -np.sum(np.log(high - low)), -np.inf)


def mc_entropy(model, n_samples: int, ode_steps: int = 100, seed=0, sampler_steps: int | None = None,
               divergence: str = "exact", samples=None, sampler: str = "flow") -> EntropyEstimate:
    """Monte-Carlo entropy ``-mean log p(x_i)`` over the model's own samples.

    ``sampler="flow"`` (default) draws each point and its log-density from
    one probability-flow integration (:func:`flow_sample`). ``"ode"`` and
    ``"ddpm"`` draw points with the discrete sampler and score them with
    :func:`log_density_flow`; with a sharp learned score, rare points then
    land where the flow density is vanishing and dominate the mean. Explicit
    ``samples`` are always scored with :func:`log_density_flow`. Objects
    exposing ``sample(n, rng)`` and ``log_density(x)`` (exact-density stubs)
    are used directly.

    Raises:
        FloatingPointError: a log-density is not finite; the message names
            the first offending sample index.
    """
    if hasattr(model, "log_density") and hasattr(model, "sample"):
        x = model.sample(n_samples, np.random.default_rng(seed)) if samples is None else samples
        return _from_neg_log(-model.log_density(x), "exact-density")
    try:
        if samples is None and sampler == "flow":
            _, logp = flow_sample(model, n_samples, ode_steps, seed=seed, divergence=divergence)
        else:
            if samples is None:
                if sampler == "ode":
                    samples = ode_sample(model, sampler_steps, n_samples, seed=seed)
                elif sampler == "ddpm":
                    cfg = SamplerConfig(eta=1.0, num_steps=sampler_steps, seed=seed)
                    samples = ddpm_sample(model, cfg, n_samples).samples
                else:
                    raise ValueError(f"unknown sampler {sampler!r}")
            logp = log_density_flow(model, samples, ode_steps, divergence, seed=seed)
    except DivergenceError as err:
        raise FloatingPointError(f"log-density evaluation failed: {err}") from err
    bad = np.flatnonzero(~np.isfinite(logp))
    if bad.size:
        raise FloatingPointError(f"log-density evaluation failed for sample index {int(bad[0])}")
    return _from_neg_log(-logp, "flow-ode")


@dataclass(frozen=True)
class Grid:
    """Rectangular grid given by per-axis bin edges."""

    edges: tuple

    @classmethod
    def regular(cls, low, high, cell):
        low, high = np.atleast_1d(low).astype(float), np.atleast_1d(high).astype(float)
        cell = np.broadcast_to(np.asarray(cell, float), low.shape)
        edges = []
        for lo, hi, c in zip(low, high, cell):
            k = int(round((hi - lo) / c))
            if k < 1:
                raise ValueError("degenerate grid")
            edges.append(np.linspace(lo, hi, k + 1))
        return cls(tuple(edges))

    def __post_init__(self):
        edges = tuple(np.asarray(e, dtype=np.float64) for e in self.edges)
        if not edges or any(e.ndim != 1 or e.size < 2 or np.any(np.diff(e) <= 0) for e in edges):
            raise ValueError("degenerate grid")
        object.__setattr__(self, "edges", edges)

    @property
    def shape(self):
        return tuple(e.size - 1 for e in self.edges)

    @property
    def cell_volumes(self) -> np.ndarray:
        widths = [np.diff(e) for e in self.edges]
        return np.prod(np.stack(np.meshgrid(*widths, indexing="ij")), axis=0)

    @property
    def centers(self) -> np.ndarray:
        cs = [0.5 * (e[1:] + e[:-1]) for e in self.edges]
        return np.stack(np.meshgrid(*cs, indexing="ij"), axis=-1)

    def counts(self, samples) -> np.ndarray:
        samples = np.atleast_2d(samples)
        return np.histogramdd(samples, bins=list(self.edges))[0]


def density_grid(samples, grid: Grid) -> np.ndarray:
    """Histogram density per cell, normalized by the total sample count."""
    samples = np.atleast_2d(samples)
    return grid.counts(samples) / (samples.shape[0] * grid.cell_volumes)


def histogram_entropy(samples, grid: Grid) -> EntropyEstimate:
    """Plug-in differential entropy ``-sum p_c log(p_c / vol_c)`` with ``0 log 0 = 0``.

    Samples outside the grid are dropped and the histogram renormalized over
    the rest. The standard error is the delta-method value
    ``std(-log density(cell(x_i))) / sqrt(n)``.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[0] < 1000:
        raise ValueError("histogram_entropy needs at least 1000 samples")
    counts = grid.counts(samples)
    n = counts.sum()
    if n == 0:
        raise ValueError("degenerate grid: no samples fall inside it")
    vol = grid.cell_volumes
    p = counts / n
    nz = p > 0
    dens = p[nz] / vol[nz]
    value = float(-np.sum(p[nz] * np.log(dens)))
    var = float(np.sum(p[nz] * np.log(dens) ** 2) - value ** 2)
    return EntropyEstimate(value, float(np.sqrt(max(var, 0.0) / n)), int(n), "histogram")


_SHAPE_RE = re.compile(r"\s*(-?)\s*(box|disc|annulus)\s*:\s*([^;]+)")


@dataclass(frozen=True)
class SupportRegion:
    """Union of axis-aligned boxes, discs and annuli minus a union of box/disc holes.

    Discs and annuli are 2-D. A point on a hole boundary counts as removed.
    """

    boxes: tuple = ()
    discs: tuple = ()
    annuli: tuple = ()
    hole_boxes: tuple = ()
    hole_discs: tuple = ()
    label: str = field(default="", compare=False)

    @classmethod
    def parse(cls, text: str) -> "SupportRegion":
        """Parse ``"box:x0lo,x0hi,x1lo,x1hi; disc:cx,cy,r; annulus:cx,cy,r_in,r_out; -box:..."``.

        A leading ``-`` marks a hole (boxes and discs only).
        """
        parts = {"box": [], "disc": [], "annulus": [], "-box": [], "-disc": []}
        for part in filter(None, (p.strip() for p in text.split(";"))):
            m = _SHAPE_RE.fullmatch(part)
            if not m:
                raise ValueError(f"cannot parse support component {part!r}")
            try:
                vals = tuple(float(v) for v in m.group(3).split(","))
            except ValueError as err:
                raise ValueError(f"non-numeric value in support component {part!r}") from err
            kind = m.group(2)
            if kind == "box" and (len(vals) % 2 or not vals):
                raise ValueError("box needs lo,hi pairs per axis")
            if kind == "disc" and len(vals) != 3:
                raise ValueError("disc needs cx,cy,r")
            if kind == "annulus":
                if m.group(1):
                    raise ValueError("annulus holes are not supported")
                if len(vals) != 4:
                    raise ValueError("annulus needs cx,cy,r_in,r_out")
            parts[m.group(1) + kind].append(vals)
        if not (parts["box"] or parts["disc"] or parts["annulus"]):
            raise ValueError("support region has no positive component")
        return cls(tuple(parts["box"]), tuple(parts["disc"]), tuple(parts["annulus"]),
                   tuple(parts["-box"]), tuple(parts["-disc"]), text)

    def describe(self) -> str:
        def fmt(prefix, vals):
            return [f"{prefix}:{','.join(repr(float(v)) for v in item)}" for item in vals]

        parts = fmt("box", self.boxes) + fmt("disc", self.discs) + fmt("annulus", self.annuli)
        parts += fmt("-box", self.hole_boxes) + fmt("-disc", self.hole_discs)
        return "; ".join(parts)

    @staticmethod
    def _in_boxes(x, boxes):
        inside = np.zeros(x.shape[0], dtype=bool)
        for b in boxes:
            lo, hi = np.asarray(b[0::2]), np.asarray(b[1::2])
            inside |= np.all((x >= lo) & (x <= hi), axis=1)
        return inside

    @staticmethod
    def _in_discs(x, discs):
        inside = np.zeros(x.shape[0], dtype=bool)
        for cx, cy, r in discs:
            inside |= (x[:, 0] - cx) ** 2 + (x[:, 1] - cy) ** 2 <= r * r
        return inside

    def contains(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        inside = self._in_boxes(x, self.boxes) | self._in_discs(x, self.discs)
        for cx, cy, r0, r1 in self.annuli:
            rr = (x[:, 0] - cx) ** 2 + (x[:, 1] - cy) ** 2
            inside |= (rr >= r0 * r0) & (rr <= r1 * r1)
        return inside & ~(self._in_boxes(x, self.hole_boxes) | self._in_discs(x, self.hole_discs))


def cells_inside(grid: Grid, region: SupportRegion, probes: int = 5) -> np.ndarray:
    """Boolean mask of grid cells lying inside ``region``.

    Each cell is tested at a ``probes x probes`` lattice of interior points
    (kept off the cell faces), so cells that only touch a region boundary
    are classified by their interior.
    """
    frac = (np.arange(probes) + 0.5) / probes
    inside = np.ones(grid.shape, dtype=bool)
    lows = [e[:-1] for e in grid.edges]
    widths = [np.diff(e) for e in grid.edges]
    for offs in np.ndindex(*(probes,) * len(grid.edges)):
        axes = [lo + frac[o] * w for lo, w, o in zip(lows, widths, offs)]
        pts = np.stack([a.ravel() for a in np.meshgrid(*axes, indexing="ij")], axis=1)
        inside &= region.contains(pts).reshape(grid.shape)
    return inside


def support_violation_rate(samples, support: SupportRegion) -> float:
    samples = np.atleast_2d(samples)
    if samples.shape[0] == 0:
        return 0.0
    return float(np.mean(~support.contains(samples)))
