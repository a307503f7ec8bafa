"""
Small-time iterated-logarithm experiment on geometric grids and the
exponential tail-decay check for the sup of a Gaussian path.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .covariance import CovarianceMatrix, cov_at, cov_matrix, variance
from .hilbert import TimeGrid
from .kernels import KernelSpec, eval_kernel
from .rng import as_seed
from .simulate import iter_exact, iter_volterra

INV_E = math.exp(-1.0)


def h_envelope(spec: KernelSpec, t) -> np.ndarray | float:
    """h(t) = sqrt(2 sigma^2(t) log log(1/t)) for 0 < t < 1/e."""
    ta = np.atleast_1d(np.asarray(t, float))
    if np.any((ta <= 0) | (ta >= INV_E)):
        raise ValueError("h_envelope needs 0 < t < 1/e")
    out = np.sqrt(2.0 * variance(spec, ta) * np.log(np.log(1.0 / ta)))
    return out if np.ndim(t) else float(out[0])


@dataclass(frozen=True)
class LilConfig:
    q: float = 0.5
    n_min: int = 3
    n_max: int = 30
    n_paths: int = 2000
    seed: int = 0
    eps_levels: tuple = (0.5,)

    def __post_init__(self):
        if not 0 < self.q < 1:
            raise ValueError("q must lie in (0, 1)")
        if self.n_min > self.n_max:
            raise ValueError("n_min must not exceed n_max")
        if not self.q**self.n_min < INV_E:
            raise ValueError("q^n_min must be below 1/e so that log log(1/t) > 0")
        if self.n_paths < 1:
            raise ValueError("n_paths must be positive")
        if any(e < 0 for e in self.eps_levels):
            raise ValueError("eps levels must be nonnegative")

    @property
    def ns(self) -> np.ndarray:
        return np.arange(self.n_min, self.n_max + 1)

    @property
    def times(self) -> np.ndarray:
        return self.q ** self.ns.astype(float)


@dataclass
class LilResult:
    ns: np.ndarray
    times: np.ndarray
    envelope: np.ndarray
    per_path_max_ratio: np.ndarray
    exceedance: dict  # eps -> frequency per n
    warnings: list = field(default_factory=list)

    @property
    def median(self) -> float:
        return float(np.median(self.per_path_max_ratio))

    def quantiles(self, qs=(0.05, 0.25, 0.5, 0.75, 0.95)) -> dict:
        return {f"{q:g}": float(np.quantile(self.per_path_max_ratio, q)) for q in qs}

    def envelope_csv(self) -> str:
        eps = sorted(self.exceedance)
        buf = io.StringIO()
        buf.write("n,t,h," + ",".join(f"exceed_freq_eps{e:g}" for e in eps) + "\n")
        for i, (n, t, h) in enumerate(zip(self.ns, self.times, self.envelope)):
            cols = [f"{self.exceedance[e][i]:.17g}" for e in eps]
            buf.write(f"{n},{t:.17g},{h:.17g}," + ",".join(cols) + "\n")
        return buf.getvalue()

    def ratios_csv(self) -> str:
        buf = io.StringIO()
        buf.write("path_id,max_ratio\n")
        for p, r in enumerate(self.per_path_max_ratio):
            buf.write(f"{p},{r:.17g}\n")
        return buf.getvalue()


def lil_ratios(spec: KernelSpec, cfg: LilConfig, cov_values: np.ndarray | None = None) -> LilResult:
    """Sample X exactly at t_n = q^n and compare with h(t_n).

    ``cov_values`` may supply the covariance at the ascending times
    q^{n_max}, ..., q^{n_min} (e.g. a closed form used for calibration).
    """
    warnings = []
    if abs(float(eval_kernel(spec, 0.0, 0.0))) < 1e-9:
        warnings.append("K(0,0) = 0: the iterated-logarithm theorem does not apply")
    times_desc = cfg.times
    asc = times_desc[::-1]
    R = cov_at(spec, asc) if cov_values is None else np.asarray(cov_values, float)
    grid = TimeGrid.from_nodes(np.concatenate([[0.0], asc, [1.0]]))
    full = np.zeros((asc.size + 2, asc.size + 2))
    full[1:-1, 1:-1] = R
    cov = CovarianceMatrix(grid, full, spec.digest())
    sig2 = np.clip(np.diag(R), 0.0, None)
    env_asc = np.sqrt(2.0 * sig2 * np.log(np.log(1.0 / asc)))
    X = np.concatenate([p for _, p in iter_exact(cov, cfg.n_paths, cfg.seed)])[:, 1:-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(env_asc > 0, X / env_asc, 0.0)
    max_ratio = ratio.max(axis=1)
    exceed = {}
    for e in cfg.eps_levels:
        freq = np.mean(X > (1 + e) * env_asc, axis=0) if np.any(env_asc > 0) else np.zeros(asc.size)
        exceed[e] = freq[::-1]
    return LilResult(cfg.ns, times_desc, env_asc[::-1], max_ratio, exceed, warnings)


def gaussian_exceedance_bound(q: float, n: int, eps: float) -> float:
    """P(Z > (1 + eps) sqrt(2 log log q^{-n})) for standard normal Z."""
    return float(stats.norm.sf((1 + eps) * math.sqrt(2 * math.log(n * math.log(1 / q)))))


@dataclass
class TailDecay:
    lambdas: np.ndarray
    prob: np.ndarray
    std_err: np.ndarray
    counts: np.ndarray
    used: np.ndarray
    slope: float
    sigma2: float
    threshold: float
    passed: bool
    notes: list = field(default_factory=list)

    def csv(self) -> str:
        buf = io.StringIO()
        buf.write("lambda,prob,stderr,count,used\n")
        for l, p, s, c, u in zip(self.lambdas, self.prob, self.std_err, self.counts, self.used):
            buf.write(f"{l:.17g},{p:.17g},{s:.17g},{int(c)},{str(bool(u)).lower()}\n")
        return buf.getvalue()


def tail_decay_check(
    spec: KernelSpec, grid: TimeGrid, lambdas, n: int, seed, delta: float = 0.2,
    sampler: str = "volterra", min_count: int = 10,
) -> TailDecay:
    """Empirical P(sup_grid X >= lambda) and the fitted slope of log P in lambda^2.

    Passes when slope <= -(1 - delta) / (2 sigma^2) with sigma^2 the
    largest grid variance. Levels with fewer than ``min_count``
    exceedances are reported but left out of the fit.
    """
    lam = np.asarray(lambdas, float)
    if lam.size < 2 or np.any(np.diff(lam) <= 0):
        raise ValueError("need at least two increasing lambdas")
    if n < 10_000:
        raise ValueError("tail check needs n >= 10^4 paths")
    counts = np.zeros(lam.size, dtype=np.int64)
    if sampler == "volterra":
        chunks = ((x,) for _, x, _ in iter_volterra(spec, grid, n, seed, chunk=128))
    elif sampler == "exact":
        chunks = ((x,) for _, x in iter_exact(cov_matrix(spec, grid), n, seed))
    else:
        raise ValueError(f"unknown sampler {sampler!r}")
    for (x,) in chunks:
        sup = x.max(axis=1)
        counts += (sup[:, None] >= lam[None, :]).sum(axis=0)
    p = counts / n
    se = np.sqrt(p * (1 - p) / n)
    sigma2 = float(np.max(variance(spec, grid.nodes[1:])))
    used = counts >= min_count
    notes = [f"lambda={l:g} dropped from fit ({c} exceedances)" for l, c, u in zip(lam, counts, used) if not u]
    if used.sum() >= 2:
        slope = float(np.polyfit(lam[used] ** 2, np.log(p[used]), 1)[0])
    else:
        slope = math.nan
        notes.append("fewer than two usable levels; no slope fitted")
    thr = -(1 - delta) / (2 * sigma2)
    return TailDecay(lam, p, se, counts, used, slope, sigma2, thr, bool(slope <= thr), notes)
