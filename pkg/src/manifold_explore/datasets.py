"""Synthetic 2-D point clouds with analytically known supports."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .evalx import SupportRegion

# compact high-density box nested in the left part of a wide box; the
# low-density area is the wide box minus the high box
HIGH_BOX = (-1.0, 0.0, -0.5, 0.5)
WIDE_BOX = (-1.5, 2.5, -1.5, 1.5)
RING = (0.0, 0.0, 1.0, 1.5)

PRESETS = ("two-region", "gaussian", "ring")


@dataclass(frozen=True, eq=False)
class Dataset:
    points: np.ndarray
    support: SupportRegion | None
    preset: str
    seed: int
    high_weight: float = float("nan")


def _uniform_box(box, n, rng):
    lo = np.array(box[0::2])
    hi = np.array(box[1::2])
    return lo + (hi - lo) * rng.random((n, lo.size))


def two_region_support() -> SupportRegion:
    return SupportRegion(boxes=(WIDE_BOX,), label="two-region")


def high_region() -> SupportRegion:
    return SupportRegion(boxes=(HIGH_BOX,), label="high")


def wide_region() -> SupportRegion:
    """The low-density area: wide box with the high-density box removed."""
    return SupportRegion(boxes=(WIDE_BOX,), hole_boxes=(HIGH_BOX,), label="wide")


def _uniform_wide(n, rng):
    out = np.empty((0, 2))
    region = wide_region()
    while out.shape[0] < n:
        x = _uniform_box(WIDE_BOX, 2 * (n - out.shape[0]) + 8, rng)
        out = np.concatenate([out, x[region.contains(x)]])
    return out[:n]


def make_dataset(preset: str, n: int, seed: int, high_weight: float = 0.9) -> Dataset:
    """Draw ``n`` points from a named preset.

    ``two-region``: with probability ``high_weight`` uniform on the small box
    ``[-1, 0] x [-0.5, 0.5]``, otherwise uniform on the rest of the wide box
    ``[-1.5, 2.5] x [-1.5, 1.5]``. ``gaussian``: standard normal.
    ``ring``: uniform on the annulus ``1 <= r <= 1.5``.
    """
    rng = np.random.default_rng(seed)
    if preset == "two-region":
        high = rng.random(n) < high_weight
        pts = np.where(high[:, None], _uniform_box(HIGH_BOX, n, rng), _uniform_wide(n, rng))
        return Dataset(pts, two_region_support(), preset, seed, high_weight)
    if preset == "gaussian":
        return Dataset(rng.standard_normal((n, 2)), None, preset, seed)
    if preset == "ring":
        cx, cy, r0, r1 = RING
        r = np.sqrt(r0 ** 2 + (r1 ** 2 - r0 ** 2) * rng.random(n))
        th = 2 * np.pi * rng.random(n)
        pts = np.stack([cx + r * np.cos(th), cy + r * np.sin(th)], axis=1)
        return Dataset(pts, SupportRegion(annuli=(RING,), label="ring"), preset, seed)
    raise ValueError(f"unknown dataset preset {preset!r}; choose from {', '.join(PRESETS)}")


def write_points_csv(path, points) -> None:
    d = points.shape[1]
    np.savetxt(path, points, delimiter=",", header=",".join(f"x{i}" for i in range(d)), comments="", fmt="%.17g")
