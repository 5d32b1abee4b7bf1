"""Exact mirror descent and mirror flow for densities on a rectangular grid.

A :class:`GridMeasure` stores the dual variable ``h`` per cell; the density
is ``p = exp(h) / sum(exp(h) * vol)`` on the support and zero elsewhere
(``h = -inf`` off the support). For the entropy ``H(p) = -sum p log p vol``
the first variation is ``-log p`` and the Bregman divergence of ``-H`` is
the KL divergence, so the entropy-ascent mirror step has the closed form
``p_next ∝ p ** (1 - gamma)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import kernels


class SupportError(ValueError):
    """Raised when a KL or Bregman term needs ``supp(m1) ⊆ supp(m2)`` and it fails."""


@dataclass(frozen=True, eq=False)
class GridMeasure:
    h: np.ndarray
    vol: np.ndarray
    shape: tuple = ()

    def __post_init__(self):
        h = np.asarray(self.h, dtype=np.float64).ravel()
        vol = np.broadcast_to(np.asarray(self.vol, dtype=np.float64), h.shape).copy()
        if np.any(vol <= 0):
            raise ValueError("cell volumes must be positive")
        if np.any(np.isnan(h)) or np.any(h == np.inf):
            raise ValueError("dual variable must be finite on the support")
        if not np.any(np.isfinite(h)):
            raise ValueError("empty support")
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "vol", vol)
        object.__setattr__(self, "shape", tuple(self.shape) or h.shape)

    @classmethod
    def from_density(cls, p, vol=1.0, shape=()):
        p = np.asarray(p, dtype=np.float64)
        if np.any(p < 0):
            raise ValueError("density must be nonnegative")
        with np.errstate(divide="ignore"):
            h = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), -np.inf)
        return cls(h, vol, shape or p.shape)

    @classmethod
    def uniform(cls, n_or_mask, vol=1.0, shape=()):
        mask = (np.ones(n_or_mask, dtype=bool) if np.isscalar(n_or_mask)
                else np.asarray(n_or_mask, dtype=bool))
        return cls(np.where(mask.ravel(), 0.0, -np.inf), vol, shape or mask.shape)

    @property
    def mask(self) -> np.ndarray:
        return np.isfinite(self.h)

    @property
    def n_cells(self) -> int:
        return self.h.size

    def _support_arrays(self):
        m = self.mask
        p = np.empty(int(m.sum()))
        logp = kernels.normalize_dual(np.ascontiguousarray(self.h[m]), np.ascontiguousarray(self.vol[m]), p)
        return m, p, np.asarray(logp)

    @property
    def p(self) -> np.ndarray:
        m, p_s, _ = self._support_arrays()
        out = np.zeros(self.n_cells)
        out[m] = p_s
        return out

    @property
    def log_p(self) -> np.ndarray:
        m, _, lp = self._support_arrays()
        out = np.full(self.n_cells, -np.inf)
        out[m] = lp
        return out

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.p * self.vol))

    def integrate(self, f) -> float:
        """``<p, f> = sum p f vol`` over the support."""
        m, p_s, _ = self._support_arrays()
        return float(np.sum(p_s * np.asarray(f, dtype=np.float64).ravel()[m] * self.vol[m]))


def random_measure(n, rng, spread=1.0, vol=1.0, mask=None) -> GridMeasure:
    """Full-support (or ``mask``-supported) measure with ``log p`` spread ``~ N(0, spread^2)``."""
    h = spread * rng.standard_normal(n)
    if mask is not None:
        h = np.where(np.asarray(mask, dtype=bool).ravel(), h, -np.inf)
    return GridMeasure(h, vol)


def first_variation(m: GridMeasure) -> np.ndarray:
    """``delta H(p) = -log p`` on the support (``nan`` elsewhere)."""
    lp = m.log_p
    return np.where(m.mask, -lp, np.nan)


def uniform_like(m: GridMeasure) -> GridMeasure:
    return GridMeasure.uniform(m.mask, m.vol, m.shape)


def entropy_grid(m: GridMeasure) -> float:
    mk, p_s, lp = m._support_arrays()
    return float(-np.sum(p_s * lp * m.vol[mk]))


def _check_support(m1, m2):
    if m1.n_cells != m2.n_cells or not np.allclose(m1.vol, m2.vol):
        raise SupportError("measures live on different grids")
    if np.any(m1.mask & ~m2.mask):
        raise SupportError("supp(m1) is not contained in supp(m2)")


def kl_grid(m1: GridMeasure, m2: GridMeasure) -> float:
    _check_support(m1, m2)
    s = m1.mask
    p1, p2 = m1.p[s], m2.p[s]
    return float(np.sum(p1 * (m1.log_p[s] - m2.log_p[s]) * m1.vol[s]))


def bregman_neg_entropy(m1: GridMeasure, m2: GridMeasure) -> float:
    """``D_{-H}(m1, m2) = -H(m1) + H(m2) - <delta(-H)(m2), m1 - m2>`` with ``delta(-H)(m2) = log p2``."""
    _check_support(m1, m2)
    s2 = m2.mask
    inner = np.sum(m2.log_p[s2] * (m1.p[s2] - m2.p[s2]) * m1.vol[s2])
    return float(-entropy_grid(m1) + entropy_grid(m2) - inner)


def exact_md_step(m: GridMeasure, gamma: float) -> GridMeasure:
    """One exact mirror step for entropy ascent: ``h <- h + gamma * (-log p)``."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    h = m.h.copy()
    s = m.mask
    h[s] = h[s] - gamma * m.log_p[s]
    return GridMeasure(h, m.vol, m.shape)


@dataclass(frozen=True)
class SmoothnessCheck:
    lhs: float
    expansion: float
    bregman: float

    @property
    def residual(self) -> float:
        """``F(nu) - [F(mu) + <dF(mu), nu - mu> + D(nu, mu)]``; zero when L = l = 1 holds tightly."""
        return self.lhs - (self.expansion + self.bregman)


def relative_smoothness_check(mu: GridMeasure, nu: GridMeasure) -> SmoothnessCheck:
    """Both relative-smoothness and relative-strong-convexity bounds for ``F = Q = -H``.

    With constants ``L = l = 1`` the two inequalities sandwich ``F(nu)``
    between the same expression, so the residual must vanish.
    """
    _check_support(nu, mu)
    if not np.array_equal(mu.mask, nu.mask):
        raise SupportError("relative smoothness needs a common support")
    s = mu.mask
    dF = np.zeros(mu.n_cells)
    dF[s] = mu.log_p[s]  # delta(-H)(mu) = log mu, up to a constant that integrates to zero
    expansion = -entropy_grid(mu) + float(np.sum(dF[s] * (nu.p[s] - mu.p[s]) * mu.vol[s]))
    return SmoothnessCheck(-entropy_grid(nu), expansion, kl_grid(nu, mu))


@dataclass
class MirrorFlowResult:
    times: np.ndarray
    entropy: np.ndarray
    var_logp: np.ndarray
    final: GridMeasure

    def entropy_rate(self) -> np.ndarray:
        """Forward-difference ``dH/dt`` at ``times[:-1]``."""
        return np.diff(self.entropy) / np.diff(self.times)


def mirror_flow_integrate(m0: GridMeasure, dt: float, steps: int) -> MirrorFlowResult:
    """Explicit Euler on the dual flow ``dh/dt = -log p_t`` (support held fixed)."""
    s = m0.mask
    h = np.ascontiguousarray(m0.h[s])
    vol = np.ascontiguousarray(m0.vol[s])
    ent = np.empty(steps + 1)
    var = np.empty(steps + 1)
    h = np.asarray(kernels.mirror_flow_euler(h, vol, float(dt), int(steps), ent, var))
    hf = np.full(m0.n_cells, -np.inf)
    hf[s] = h
    return MirrorFlowResult(dt * np.arange(steps + 1), ent, var, GridMeasure(hf, m0.vol, m0.shape))


def default_bias_shape(n: int) -> np.ndarray:
    """Smooth non-constant field with sup norm 1 used as the bias direction."""
    return np.cos(2.0 * np.pi * np.arange(n) / n)


@dataclass(frozen=True)
class OracleNoiseModel:
    """Step sizes ``gamma_k = gamma0 / k**step_power`` and perturbations.

    bias ``b_k = bias0 * bias_shape`` (``bias_decay="constant"``) or
    ``bias0 / k * bias_shape`` (``"harmonic"``); noise ``U_k`` i.i.d.
    uniform on ``[-noise_amp, noise_amp]`` per cell.
    """

    gamma0: float = 1.0
    step_power: float = 1.0
    bias0: float = 0.0
    bias_decay: str = "harmonic"
    noise_amp: float = 0.0
    bias_shape: np.ndarray | None = field(default=None, compare=False)

    def gammas(self, k0, k1):
        k = np.arange(k0, k1, dtype=np.float64)
        return self.gamma0 / k ** self.step_power

    def bias_scales(self, k0, k1):
        k = np.arange(k0, k1, dtype=np.float64)
        if self.bias_decay == "constant":
            return np.full(k.shape, self.bias0)
        if self.bias_decay == "harmonic":
            return self.bias0 / k
        raise ValueError(f"unknown bias decay {self.bias_decay!r}")


@dataclass
class MDRunResult:
    gamma: np.ndarray
    entropy: np.ndarray
    kl_to_uniform: np.ndarray
    bias_sup: np.ndarray
    noise_sup: np.ndarray
    final: GridMeasure

    @property
    def partial_sum_gb(self) -> np.ndarray:
        """Running ``sum_k gamma_k ||b_k||_inf``."""
        return np.cumsum(self.gamma * self.bias_sup)

    @property
    def partial_sum_g2(self) -> np.ndarray:
        """Running ``sum_k gamma_k^2 (||b_k||^2 + ||U_k||^2)``."""
        return np.cumsum(self.gamma ** 2 * (self.bias_sup ** 2 + self.noise_sup ** 2))

    def write_csv(self, path, every: int = 1) -> None:
        gb = self.partial_sum_gb
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "gamma", "entropy", "kl_to_uniform", "bias_sup", "noise_sup", "partial_sum_gb"])
            for i in range(0, len(self.gamma), every):
                w.writerow([i + 1] + [repr(float(col[i])) for col in
                                      (self.gamma, self.entropy, self.kl_to_uniform, self.bias_sup, self.noise_sup, gb)])


def stochastic_md_run(m0: GridMeasure, noise: OracleNoiseModel, K: int, seed=0,
                      chunk: int = 8192) -> MDRunResult:
    """Iterate ``h_{k+1} = h_k + gamma_k (delta H(p_k) + b_k + U_k)`` for ``k = 1..K``."""
    s = m0.mask
    n = int(s.sum())
    h = np.ascontiguousarray(m0.h[s])
    vol = np.ascontiguousarray(m0.vol[s])
    shape = default_bias_shape(n) if noise.bias_shape is None else np.asarray(noise.bias_shape, dtype=np.float64).ravel()[s]
    shape = np.ascontiguousarray(shape, dtype=np.float64)
    uniform_log = np.full(n, -np.log(vol.sum()))
    rng = np.random.default_rng(seed)
    out = {name: np.empty(K) for name in ("entropy", "kl", "bias_sup", "noise_sup")}
    gam = noise.gammas(1, K + 1)
    for k0 in range(0, K, chunk):
        k1 = min(k0 + chunk, K)
        if noise.noise_amp > 0:
            U = rng.uniform(-noise.noise_amp, noise.noise_amp, size=(k1 - k0, n))
        else:
            U = np.empty((0, n))
        h = np.asarray(kernels.md_dual_run(
            h, vol, np.ascontiguousarray(gam[k0:k1]), np.ascontiguousarray(noise.bias_scales(k0 + 1, k1 + 1)),
            shape, U, uniform_log, out["entropy"][k0:k1], out["kl"][k0:k1],
            out["bias_sup"][k0:k1], out["noise_sup"][k0:k1]))
    hf = np.full(m0.n_cells, -np.inf)
    hf[s] = h
    return MDRunResult(gam, out["entropy"], out["kl"], out["bias_sup"], out["noise_sup"],
                       GridMeasure(hf, m0.vol, m0.shape))


def probe_functions(n: int, count: int = 4) -> np.ndarray:
    """Smooth test functions on a 1-D cell index, one per row."""
    x = (np.arange(n) + 0.5) / n
    return np.stack([np.cos(np.pi * (j + 1) * x) for j in range(count)])


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{self.name}: {'PASS' if self.passed else 'FAIL'} ({self.detail})"


def theory_suite(seed: int = 0, out_dir=None, iterations: int = 100_000) -> list[CheckResult]:
    """Run every grid-level certificate and return one result per claim."""
    rng = np.random.default_rng(seed)
    results = []

    worst = 0.0
    for n in (16, 64, 256):
        for _ in range(100):
            m = random_measure(n, rng, spread=2.0)
            worst = max(worst, kl_grid(exact_md_step(m, 1.0), uniform_like(m)))
    results.append(CheckResult("THEOREM3", worst < 1e-12, f"max one-step KL to uniform {worst:.3e}"))

    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 257))
        a, b = random_measure(n, rng, 2.0), random_measure(n, rng, 2.0)
        worst = max(worst, abs(relative_smoothness_check(a, b).residual))
    results.append(CheckResult("RELATIVE_SMOOTHNESS", worst < 1e-10, f"max residual {worst:.3e}"))

    dt = 1e-3
    m0 = GridMeasure(np.sin(2 * np.pi * np.arange(64) / 64) + 0.5 * np.cos(6 * np.pi * np.arange(64) / 64), 1.0)
    flow = mirror_flow_integrate(m0, dt, 5000)
    err = float(np.max(np.abs(flow.entropy_rate() - flow.var_logp[:-1])))
    mono = bool(np.all(np.diff(flow.entropy) >= -1e-15))
    results.append(CheckResult("LYAPUNOV", err < 5 * dt and mono,
                               f"max |dH/dt - Var(log p)| {err:.3e}, entropy non-decreasing: {mono}"))

    kls = []
    for s in range(5):
        m = random_measure(64, np.random.default_rng(seed + 100 + s), spread=1.0)
        run = stochastic_md_run(m, OracleNoiseModel(bias0=1.0, bias_decay="harmonic", noise_amp=1.0),
                                iterations, seed=seed + s)
        kls.append(run.kl_to_uniform[-1])
        if out_dir is not None and s == 0:
            run.write_csv(f"{out_dir}/oracle_noisy_md.csv", every=max(iterations // 1000, 1))
    results.append(CheckResult("NOISY_CONVERGENCE", max(kls) < 1e-2, f"final KL per seed {', '.join(f'{v:.2e}' for v in kls)}"))

    m = random_measure(64, np.random.default_rng(seed + 200), spread=1.0)
    run = stochastic_md_run(m, OracleNoiseModel(bias0=0.5, bias_decay="constant", noise_amp=1.0),
                            iterations, seed=seed + 7)
    if out_dir is not None:
        run.write_csv(f"{out_dir}/oracle_persistent_bias.csv", every=max(iterations // 1000, 1))
    tail = float(np.min(run.kl_to_uniform[len(run.kl_to_uniform) // 2:]))
    results.append(CheckResult("BIAS_NECESSITY", tail > 1e-2,
                               f"min KL over second half {tail:.3e} with constant bias 0.5"))
    return results
