"""
Mollified local times l_eps(t, y) = int_0^t f_{eps,y}(X(s)) ds, their
Gaussian expectations, the L2 moment integral and the kernel-continuity
experiment.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .covariance import BandedIntegral, _interval_rule, _uses_fbm, pair_moments, variance
from .hilbert import TimeGrid
from .kernels import KernelSpec, eval_kernel

# Density factor per ordered time pair in E int l(1,y)^2 dy. The default
# 1/(2 pi) gives the (1/pi) int over the simplex form; the exact
# one-dimensional Gaussian density at 0 has 1/sqrt(2 pi) instead.
PAIR_DENSITY = 1.0 / (2.0 * math.pi)
GAUSSIAN_PAIR_DENSITY = 1.0 / math.sqrt(2.0 * math.pi)


class DegenerateVarianceError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Mollifier:
    epsilon: float
    y: float = 0.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    def __call__(self, x):
        x = np.asarray(x, float)
        return np.exp(-((x - self.y) ** 2) / (2 * self.epsilon)) / math.sqrt(2 * math.pi * self.epsilon)

    @property
    def peak(self) -> float:
        return 1.0 / math.sqrt(2 * math.pi * self.epsilon)


@dataclass(frozen=True, eq=False)
class LocalTimeCurve:
    grid: TimeGrid
    values: np.ndarray
    epsilon: float
    y: float

    def at_end(self) -> float:
        return float(self.values[-1])


def _cumtrap(f: np.ndarray, dt: np.ndarray) -> np.ndarray:
    out = np.zeros(f.shape)
    out[..., 1:] = np.cumsum(0.5 * (f[..., 1:] + f[..., :-1]) * dt, axis=-1)
    return out


def mollified_local_time(path, grid: TimeGrid, eps: float, y: float = 0.0) -> LocalTimeCurve:
    """Trapezoid rule in time of f_{eps,y}(X(t)) along one path."""
    moll = Mollifier(eps, y)
    path = np.asarray(path, float)
    return LocalTimeCurve(grid, _cumtrap(moll(path), grid.cells), eps, y)


def local_time_end(paths: np.ndarray, grid: TimeGrid, eps: float, y: float = 0.0) -> np.ndarray:
    """l_eps(1, y) for every row of ``paths``."""
    f = Mollifier(eps, y)(paths)
    return f @ grid.weights


def occupation_integral(path, grid: TimeGrid, eps: float, t_index: int | None = None) -> float:
    """int l_eps(t, y) dy over a y-grid covering the path range +- 8 sqrt(eps).

    Spacing sqrt(eps)/8 makes the trapezoid rule in y exact to rounding for
    the Gaussian profile, so the result equals t (unit mollifier mass).
    """
    path = np.asarray(path, float)
    sd = math.sqrt(eps)
    lo, hi = path.min() - 8 * sd, path.max() + 8 * sd
    n = int(math.ceil((hi - lo) / (sd / 8))) + 1
    ys = np.linspace(lo, hi, n)
    dy = ys[1] - ys[0]
    f = np.exp(-((path[:, None] - ys[None, :]) ** 2) / (2 * eps)) / math.sqrt(2 * math.pi * eps)
    # integrate over y first (trapezoid), then time
    fy = dy * (f.sum(axis=1) - 0.5 * (f[:, 0] + f[:, -1]))
    l = _cumtrap(fy, grid.cells)
    return float(l[-1] if t_index is None else l[t_index])


def expected_local_time(spec: KernelSpec, t: float, y: float, eps: float) -> float:
    """int_0^t (2 pi (sigma^2(s) + eps))^{-1/2} exp(-y^2 / (2 (sigma^2(s) + eps))) ds."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")

    def integrand(u):
        # s = u^2 removes the s^{-1/2} singularity when eps = 0
        s = u * u
        v = float(variance(spec, s)[0]) + eps if s > 0 else eps
        if v <= 0:
            raise DegenerateVarianceError(f"variance vanishes at s = {s:.3g} with eps = 0")
        return 2 * u * math.exp(-y * y / (2 * v)) / math.sqrt(2 * math.pi * v)

    if eps == 0 and float(variance(spec, t)[0]) <= 0:
        raise DegenerateVarianceError("variance vanishes with eps = 0")
    val, _ = integrate.quad(integrand, 0.0, math.sqrt(t), epsrel=1e-8, epsabs=1e-12, limit=200)
    return val


def l2_moment_formula(
    spec: KernelSpec, grid: TimeGrid, prefactor: float = 2 * PAIR_DENSITY, tol: float = 0.01, n: int = 32
) -> BandedIntegral:
    """prefactor * int over {s < t} of incVar(s, t)^{-1/2}.

    The band t - s < h (h one grid cell) is excluded; with t - s = v^2 the
    off-band integrand is bounded. The band is bounded via
    incVar >= c (t - s), c = (1 - tol) min K^2 over diagonal and
    first-off-diagonal grid pairs.
    """
    h = float(grid.cells.max())
    x, w = np.polynomial.legendre.leggauss(n)
    edges = np.unique(np.concatenate([[math.sqrt(h)], np.linspace(math.sqrt(h), 1.0, 5)]))
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        v = 0.5 * (lo + hi) + 0.5 * (hi - lo) * x
        wv = 0.5 * (hi - lo) * w
        top = 1.0 - v**2
        s = top[:, None] * (0.5 * (x + 1))[None, :]
        ws = top[:, None] * (0.5 * w)[None, :]
        t = s + (v**2)[:, None]
        inc = pair_moments(spec, s.ravel(), t.ravel())["incVar"].reshape(s.shape)
        if np.any(~(inc > 0)):
            k = np.unravel_index(np.argmin(inc), inc.shape)
            raise DegenerateVarianceError(
                f"increment variance vanishes at (s, t) = ({s[k]:.6g}, {t[k]:.6g})"
            )
        total += float(np.sum(wv[:, None] * ws * 2 * v[:, None] / np.sqrt(inc)))
    nodes = grid.nodes
    K_diag = eval_kernel(spec, nodes, nodes)
    K_off = eval_kernel(spec, nodes[1:], nodes[:-1])
    m2 = float(min(np.min(K_diag**2), np.min(K_off**2)))
    c = (1 - tol) * m2
    band = 2 * math.sqrt(h) - (2.0 / 3.0) * h**1.5
    bound = prefactor * band / math.sqrt(c) if c > 0 else math.inf
    return BandedIntegral(prefactor * total, bound, c)


# kernel continuity ----------------------------------------------------------------

def joint_increment_variance(K1: KernelSpec, t1, K2: KernelSpec, t2) -> np.ndarray:
    """E(X1(t1) - X2(t2))^2 where X1, X2 are driven by the same W."""
    t1 = np.asarray(t1, float).ravel()
    t2 = np.asarray(t2, float).ravel()
    lo, hi = np.minimum(t1, t2), np.maximum(t1, t2)
    fb = _uses_fbm(K1) or _uses_fbm(K2)
    total = np.zeros(t1.shape)
    for a, b in ((np.zeros_like(lo), lo), (lo, hi)):
        r, w = _interval_rule(a, b, fb)
        d = eval_kernel(K1, t1[:, None], r) - eval_kernel(K2, t2[:, None], r)
        total += np.sum(w * d**2, axis=1)
    return total


def _pair_rule(n: int = 8):
    """Nodes on {0 <= x, 0 <= v, x + v^2 <= 1} for (earlier, later) = (x, x + v^2).

    Geometric panels in v and in x resolve the small scales that appear
    when two nearly equal processes are compared.
    """
    gx, gw = np.polynomial.legendre.leggauss(n)
    br = np.concatenate([[0.0], np.geomspace(2.0**-17, 1.0, 18)])
    fx = np.concatenate([[0.0], np.geomspace(2.0**-12, 1.0, 13)])

    def panels(edges):
        lo, hi = edges[:-1], edges[1:]
        nodes = (0.5 * (lo + hi))[:, None] + 0.5 * (hi - lo)[:, None] * gx[None, :]
        weights = 0.5 * (hi - lo)[:, None] * gw[None, :]
        return nodes.ravel(), weights.ravel()

    v, wv = panels(br)
    f, wf = panels(fx)
    top = 1.0 - v**2
    x = top[:, None] * f[None, :]
    wx = top[:, None] * wf[None, :]
    later = x + (v**2)[:, None]
    weight = wv[:, None] * wx * 2 * v[:, None]
    return x.ravel(), later.ravel(), weight.ravel()


def _square_integral(K1: KernelSpec, K2: KernelSpec, rule) -> float:
    """int int over [0,1]^2 of E(X1(t) - X2(s))^{-1/2} ds dt."""
    x, later, wt = rule
    total = 0.0
    # t later than s, then s later than t
    for t1, t2 in ((later, x), (x, later)):
        V = joint_increment_variance(K1, t1, K2, t2)
        if np.any(~(V > 0)):
            k = int(np.argmin(V))
            raise DegenerateVarianceError(
                f"joint increment variance vanishes at (t, s) = ({t1[k]:.6g}, {t2[k]:.6g})"
            )
        total += float(np.sum(wt / np.sqrt(V)))
    return total


@dataclass
class ContinuityRow:
    amplitude: float
    sup_diff: float
    max_var_gap: float
    l2_gap: float


def kernel_continuity_experiment(
    base: KernelSpec, amplitudes, grid: TimeGrid, shape: str = "smooth",
    pair_density: float = PAIR_DENSITY,
) -> list[ContinuityRow]:
    """Rows (a, sup |K_a - K|, max_t E(X_a(t) - X(t))^2, E int (l_a - l)^2 dy).

    The last column uses the three-term expansion with shared driving
    noise; every term is integrated on the same nodes so that their
    discretization errors cancel in the difference.
    """
    amps = [float(a) for a in amplitudes]
    if any(a < 0 for a in amps) or any(b > a for a, b in zip(amps, amps[1:])):
        raise ValueError("amplitudes must be nonnegative and decreasing")
    rule = _pair_rule()
    s00 = _square_integral(base, base, rule)
    t = grid.nodes
    T, S = np.meshgrid(t, t, indexing="ij")
    low = S <= T
    K0 = eval_kernel(base, T, S)
    rows = []
    for a in amps:
        Ka = KernelSpec.perturbed(base, a, shape)
        sup_diff = float(np.max(np.abs(eval_kernel(Ka, T, S) - K0)[low]))
        gap = joint_increment_variance(Ka, t, base, t)
        saa = _square_integral(Ka, Ka, rule)
        sa0 = _square_integral(Ka, base, rule)
        l2 = pair_density * (saa + s00 - 2 * sa0)
        rows.append(ContinuityRow(a, sup_diff, float(gap.max()), l2))
    return rows


def continuity_table_csv(rows) -> str:
    buf = io.StringIO()
    buf.write("amplitude,supDiff,maxVarGap,L2gap\n")
    for r in rows:
        buf.write(f"{r.amplitude:.17g},{r.sup_diff:.17g},{r.max_var_gap:.17g},{r.l2_gap:.17g}\n")
    return buf.getvalue()


def curves_csv(records) -> str:
    """Records (epsilon, y, t, mean, stderr)."""
    buf = io.StringIO()
    buf.write("epsilon,y,t,mean,stderr\n")
    for r in records:
        buf.write(",".join(f"{v:.17g}" for v in r) + "\n")
    return buf.getvalue()
