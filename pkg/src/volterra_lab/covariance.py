"""
Second-order structure of X(t) = int_0^t K(t, s) dW(s), computed by
quadrature only (no simulation): covariance matrices, pair statistics,
the Rudenko double integral, local-nondeterminism ratios and the
integrator constant.
"""
from __future__ import annotations

import hashlib
import io
import math
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .hilbert import TimeGrid, gram, ldl_determinant
from .kernels import KernelSpec, eval_kernel, kernel_slice
from .rng import Seed, as_seed, generator

GL4 = np.polynomial.legendre.leggauss(4)
JITTER_BUDGET = 1e-10


class FactorizationError(ArithmeticError):
    pass


class DegenerateProcessError(ArithmeticError):
    pass


def _uses_fbm(spec: KernelSpec) -> bool:
    if spec.family == "fbm":
        return True
    return spec.family == "perturbed" and _uses_fbm(spec.base)


# quadrature helpers ---------------------------------------------------------

def _cell_rule(breaks: np.ndarray, first_panels: int = 16):
    """Composite 4-point Gauss--Legendre on consecutive ``breaks``.

    The first cell is split geometrically into ``first_panels`` panels so
    that it carries at least 64 nodes however small it is.
    """
    x, w = GL4
    edges = [breaks[0] + (breaks[1] - breaks[0]) * 2.0 ** -np.arange(first_panels - 1, 0, -1)]
    edges = np.concatenate([[breaks[0]], edges[0], breaks[1:]])
    a, b = edges[:-1], edges[1:]
    half = 0.5 * (b - a)
    nodes = (0.5 * (a + b))[:, None] + half[:, None] * x[None, :]
    weights = half[:, None] * w[None, :]
    return nodes.ravel(), weights.ravel()


def _interval_rule(a, b, fbm_like: bool, n: int = 12):
    """Gauss--Legendre nodes/weights for each interval [a_k, b_k].

    Returns arrays of shape (K, P) where P is the total node count per
    interval. Panels are graded toward both ends for fbm-type kernels.
    """
    a = np.asarray(a, float)[:, None]
    b = np.asarray(b, float)[:, None]
    if fbm_like:
        g = 2.0 ** -np.arange(1, 13)
        frac = np.unique(np.concatenate([[0.0, 1.0], g, 1.0 - g]))
    else:
        frac = np.linspace(0.0, 1.0, 3)
    x, w = np.polynomial.legendre.leggauss(n)
    lo, hi = frac[:-1], frac[1:]
    f_nodes = (0.5 * (lo + hi))[:, None] + 0.5 * (hi - lo)[:, None] * x[None, :]
    f_w = 0.5 * (hi - lo)[:, None] * w[None, :]
    f_nodes, f_w = f_nodes.ravel(), f_w.ravel()
    return a + (b - a) * f_nodes[None, :], (b - a) * f_w[None, :]


def pair_moments(spec: KernelSpec, s, t) -> dict:
    """Vectorized second moments of (X(s), X(t)) for arrays with s < t.

    Keys: varS, varT, cov, incVar, det2. ``det2`` is formed as
    varS * incVar - Cov(X(s), X(t) - X(s))^2, which avoids the
    cancellation in varS * varT - cov^2 when t is close to s.
    """
    s = np.atleast_1d(np.asarray(s, float))
    t = np.atleast_1d(np.asarray(t, float))
    s, t = np.broadcast_arrays(s, t)
    fb = _uses_fbm(spec)
    r1, w1 = _interval_rule(np.zeros_like(s), s, fb)
    Ks = eval_kernel(spec, s[:, None], r1)
    Kt = eval_kernel(spec, t[:, None], r1)
    r2, w2 = _interval_rule(s, t, fb)
    Kt2 = eval_kernel(spec, t[:, None], r2)
    varS = np.sum(w1 * Ks**2, axis=1)
    cov = np.sum(w1 * Ks * Kt, axis=1)
    dk = Kt - Ks
    cross = np.sum(w1 * Ks * dk, axis=1)
    tail = np.sum(w2 * Kt2**2, axis=1)
    inc = tail + np.sum(w1 * dk**2, axis=1)
    varT = tail + np.sum(w1 * Kt**2, axis=1)
    det2 = varS * inc - cross**2
    return {"varS": varS, "varT": varT, "cov": cov, "incVar": inc, "det2": det2, "tail": tail}


def pair_stats(spec: KernelSpec, s: float, t: float) -> dict:
    """Scalar pair statistics for 0 <= s < t <= 1."""
    if not 0 <= s < t <= 1:
        raise ValueError("pair_stats needs 0 <= s < t <= 1")
    m = pair_moments(spec, s, t)
    return {k: float(m[k][0]) for k in ("varS", "varT", "cov", "incVar", "det2")}


def variance(spec: KernelSpec, t) -> np.ndarray:
    """sigma^2(t) = int_0^t K(t, r)^2 dr."""
    t = np.atleast_1d(np.asarray(t, float))
    r, w = _interval_rule(np.zeros_like(t), t, _uses_fbm(spec))
    return np.sum(w * eval_kernel(spec, t[:, None], r) ** 2, axis=1)


# covariance matrix ----------------------------------------------------------

class CovarianceMatrix:
    """R(t_i, t_j) on a grid with a lazily computed, cached factor."""

    def __init__(self, grid: TimeGrid, values: np.ndarray, kernel_id: str = ""):
        v = np.array(values, dtype=float)
        v = 0.5 * (v + v.T)
        v.setflags(write=False)
        self.grid = grid
        self.values = v
        self.kernel_id = kernel_id
        self._lock = threading.Lock()
        self._factor: np.ndarray | None = None
        self.jitter = 0.0  # absolute diagonal jitter used, relative to each variance

    @property
    def factor(self) -> np.ndarray:
        with self._lock:
            if self._factor is None:
                self._factor = self._factorize()
            return self._factor

    def _factorize(self) -> np.ndarray:
        R = self.values
        n = R.shape[0]
        if not np.all(np.isfinite(R)):
            raise FactorizationError("covariance has non-finite entries (kernel overflow?)")
        d = np.sqrt(np.clip(np.diag(R), 0.0, None))
        live = d > 0
        L = np.zeros((n, n))
        if not live.any():
            return L
        idx = np.flatnonzero(live)
        C = R[np.ix_(idx, idx)] / np.outer(d[idx], d[idx])
        jitter = 0.0
        while True:
            try:
                Lc = linalg.cholesky(C + jitter * np.eye(idx.size), lower=True)
                break
            except linalg.LinAlgError:
                jitter = 1e-16 if jitter == 0 else jitter * 10
                if jitter > JITTER_BUDGET:
                    raise FactorizationError(
                        "covariance not positive semidefinite within the jitter budget"
                    ) from None
        self.jitter = jitter
        L[np.ix_(idx, idx)] = d[idx, None] * Lc
        return L

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(f"{t:.17g}" for t in self.grid.nodes) + "\n")
        np.savetxt(buf, self.values, fmt="%.17g", delimiter=",")
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.values).tobytes()).hexdigest()


def cov_at(spec: KernelSpec, times) -> np.ndarray:
    """Covariance at sorted times, 4-point Gauss rule on each cell."""
    times = np.asarray(times, float)
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    breaks = times if times[0] == 0 else np.concatenate([[0.0], times])
    r, w = _cell_rule(breaks)
    K = eval_kernel(spec, times[:, None], r[None, :])
    return (K * w) @ K.T


def cov_matrix(spec: KernelSpec, grid: TimeGrid) -> CovarianceMatrix:
    return CovarianceMatrix(grid, cov_at(spec, grid.nodes), spec.digest())


# Rudenko integral ---------------------------------------------------------

@dataclass
class BandedIntegral:
    estimate: float
    band_bound: float
    c: float

    @property
    def upper(self) -> float:
        return self.estimate + self.band_bound


def _band_constant(spec: KernelSpec, grid: TimeGrid) -> float:
    t = grid.nodes
    T, S = np.meshgrid(t, t, indexing="ij")
    K = np.abs(eval_kernel(spec, T, S))
    low = S <= T
    return float(np.min(K[low])) if low.any() else 0.0


def rudenko_integral(spec: KernelSpec, grid: TimeGrid, n: int = 48) -> BandedIntegral:
    """int int det Cov(X(s), X(t))^{-1/2} ds dt over [0, 1]^2.

    Off-band part: on {s < t} write s = r^2 cos^2(th), t = r^2, which
    maps the band {s < h} U {t - s < h} (h one grid cell) onto
    r < sqrt(h) / min(cos th, sin th) and removes both square-root
    singularities. The band contribution is bounded through
    det2 >= c s (t - s) with c = (min |K|)^4 over the lower triangle,
    using the exact band integral of the minorant.
    """
    h = float(grid.cells.max())
    sb = math.sqrt(h)
    th0 = math.asin(sb)
    x, w = np.polynomial.legendre.leggauss(n)
    total = 0.0
    for lo, hi, trig in ((th0, math.pi / 4, np.sin), (math.pi / 4, math.acos(sb), np.cos)):
        th = 0.5 * (lo + hi) + 0.5 * (hi - lo) * x
        wth = 0.5 * (hi - lo) * w
        rmin = sb / trig(th)
        r = 0.5 * (rmin + 1)[:, None] + 0.5 * (1 - rmin)[:, None] * x[None, :]
        wr = 0.5 * (1 - rmin)[:, None] * w[None, :]
        a = r * np.cos(th)[:, None]
        v = r * np.sin(th)[:, None]
        s, t = (a**2).ravel(), (r**2).ravel()
        det2 = pair_moments(spec, s, t)["det2"]
        bad = ~(det2 > 0)
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            raise DegenerateProcessError(
                f"det Cov(X(s), X(t)) = {det2[k]:.3g} <= 0 at (s, t) = ({s[k]:.6g}, {t[k]:.6g})"
            )
        jac = (4 * a * v * r).ravel()
        total += float(np.sum((wth[:, None] * wr).ravel() * jac / np.sqrt(det2)))
    estimate = 2.0 * total
    # band integral of (s (t - s))^{-1/2} over {s < t}, exact
    band = 4 * th0 + 4 * math.sqrt(h * (1 - h)) - 4 * h
    m = _band_constant(spec, grid)
    c = m**4
    bound = 2.0 * band / math.sqrt(c) if c > 0 else math.inf
    return BandedIntegral(estimate, bound, c)


# local nondeterminism -------------------------------------------------------

@dataclass
class LndReport:
    zeta: float
    berman: list = field(default_factory=list)  # (window, ratio)
    zeta_liminf: list = field(default_factory=list)  # (t, value)
    strong: dict = field(default_factory=dict)  # k -> [(window, ratio)]
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "zeta": self.zeta,
            "bermanRatio": [list(r) for r in self.berman],
            "zetaLiminf": [list(r) for r in self.zeta_liminf],
            "strongLndRatio": {str(k): [list(r) for r in v] for k, v in self.strong.items()},
            "warnings": list(self.warnings),
        }


def strong_lnd_ratio(spec: KernelSpec, grid: TimeGrid, k: int, window: float, anchor: float = 0.25) -> float:
    """G(dg(t_1), ..., dg(t_{k-1})) / prod ||dg(t_i)||^2 for equally spaced t_i."""
    ts = anchor + window * np.arange(k)
    if ts[-1] > 1 + 1e-12:
        raise ValueError("configuration does not fit in [0, 1]")
    g = [kernel_slice(spec, float(min(t, 1.0)), grid) for t in ts]
    inc = [g[i + 1] - g[i] for i in range(k - 1)]
    res = gram(inc)
    norms = np.prod(np.diag(res.matrix))
    return float(res.determinant / norms) if norms > 0 else 0.0


def lnd_diagnostics(
    spec: KernelSpec, grid: TimeGrid, zeta: float, j_min: int = 2, j_max: int | None = None,
    ks=(3, 4), max_pairs: int = 4096,
) -> LndReport:
    if not 0 < zeta < 2:
        raise ValueError("zeta must lie in (0, 2)")
    h = float(grid.cells.max())
    if j_max is None:
        j_max = int(math.floor(math.log2(1 / (4 * h))))
    rep = LndReport(zeta)
    nodes = grid.nodes
    for j in range(j_min, j_max + 1):
        c = 2.0**-j
        if c < 4 * h:
            rep.warnings.append(f"window 2^-{j} is below four grid cells; skipped")
            continue

        # Berman ratio over a subsample of grid pairs with 0 < t - s <= c
        lags = np.unique(np.round(np.geomspace(1, c / h, 12)).astype(int))
        stride = max(1, int(math.ceil(nodes.size * lags.size / max_pairs)))
        base = np.arange(1, nodes.size, stride)
        S = (base[:, None] + 0 * lags[None, :]).ravel()
        T = (base[:, None] + lags[None, :]).ravel()
        keep = T < nodes.size
        s, t = nodes[S[keep]], nodes[T[keep]]
        pm = pair_moments(spec, s, t)
        num, den = pm["tail"], pm["incVar"] - pm["tail"]
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(den > 1e-15 * np.maximum(num, 1e-300), num / den, np.inf)
        rep.berman.append((c, float(np.min(ratio))))

        # zeta liminf at t = c over grid s in (0, t)
        i_t = grid.nearest(c)
        t_val = nodes[i_t]
        s_all = nodes[1:i_t]
        if s_all.size:
            r, w = _interval_rule(s_all, np.full_like(s_all, t_val), _uses_fbm(spec))
            tail = np.sum(w * eval_kernel(spec, t_val, r) ** 2, axis=1)
            rep.zeta_liminf.append((t_val, float(np.min(tail / (t_val - s_all) ** zeta))))

        for k in ks:
            if 0.25 + (k - 1) * c <= 1 + 1e-12:
                rep.strong.setdefault(k, []).append((c, strong_lnd_ratio(spec, grid, k, c)))
    return rep


# integrator constant ----------------------------------------------------------

def _increment_cov(R: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Covariance of X(t_{idx[k+1]}) - X(t_{idx[k]})."""
    sub = R[np.ix_(idx, idx)]
    D = np.diff(np.eye(idx.size), axis=0)
    return D @ sub @ D.T


def integrator_constant(spec_or_cov, grid: TimeGrid | None = None, trials: int = 1000, seed=0,
                        return_ratios: bool = False):
    """Max over random partitions of E(sum a_k dX_k)^2 / sum a_k^2 dt_k.

    Each trial picks 2..32 distinct grid nodes uniformly and normal
    coefficients; the ratio is exact from the covariance matrix.
    """
    cov = spec_or_cov if isinstance(spec_or_cov, CovarianceMatrix) else cov_matrix(spec_or_cov, grid)
    R = cov.values
    nodes = cov.grid.nodes
    rng = generator(as_seed(seed), 0)
    ratios = np.empty(trials)
    top = min(32, nodes.size)
    for i in range(trials):
        m = int(rng.integers(2, top + 1))
        idx = np.sort(rng.choice(nodes.size, size=m, replace=False))
        a = rng.standard_normal(m - 1)
        C = _increment_cov(R, idx)
        ratios[i] = a @ C @ a / np.sum(a**2 * np.diff(nodes[idx]))
    c_hat = float(np.max(ratios))
    return (c_hat, ratios) if return_ratios else c_hat


def integrator_oracle(spec_or_cov, grid: TimeGrid | None = None) -> float:
    """Largest generalized eigenvalue of (increment covariance, diag dt) on the full grid.

    Every partition made of grid nodes is a coarsening of the full grid, so
    this bounds every ratio the random search can produce.
    """
    cov = spec_or_cov if isinstance(spec_or_cov, CovarianceMatrix) else cov_matrix(spec_or_cov, grid)
    C = _increment_cov(cov.values, np.arange(cov.grid.nodes.size))
    d = 1.0 / np.sqrt(cov.grid.cells)
    return float(np.linalg.eigvalsh(d[:, None] * C * d[None, :])[-1])


def integrator_sweep(spec: KernelSpec, Ms, trials: int, seed=0) -> list[tuple[int, float, float]]:
    """Rows (M, c_hat, oracle) over uniform grids."""
    rows = []
    for M in Ms:
        cov = cov_matrix(spec, TimeGrid.uniform(M))
        rows.append((M, integrator_constant(cov, trials=trials, seed=seed), integrator_oracle(cov)))
    return rows
