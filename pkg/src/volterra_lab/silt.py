"""
Planar self-intersection local times.

    T_{eps,k} = int_{Delta_k} prod_i f_eps(Y(t_{i+1}) - Y(t_i)) dt
    L_{eps,k} = same with each factor centered by E f_eps(Y(t) - Y(s))
              = 1 / (2 pi (v(s, t) + eps)),  v = E(X(t) - X(s))^2

plus the analytic mean for k = 2, the regularized Fourier--Wiener
integral of the renormalized SILT and a Monte Carlo Fourier--Wiener
transform using the stochastic exponential. Stationary kernels only.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .covariance import pair_moments
from .hilbert import GridFunction, TimeGrid, gram, gram_schmidt, inner_product
from .kernels import KernelSpec, kernel_slice
from .rng import as_seed, chunked, generator
from .simulate import PlanarEnsemble


class NonStationaryKernelError(ValueError):
    pass


def require_stationary(spec: KernelSpec | None):
    if spec is None:
        raise ValueError("ensemble does not record its kernel")
    if not spec.stationary:
        raise NonStationaryKernelError(
            f"silt requires stationary kernel (K(t,s) = K(t-s)); got {spec.label}"
        )


@dataclass(frozen=True)
class SimplexConfig:
    k: int = 2
    mode: str = "grid"  # "grid" (nested sums, k = 2, 3) or "mc"
    samples: int = 10_000
    seed: int = 0
    cutoff: float = 0.0

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("multiplicity k must be at least 2")
        if self.mode not in ("grid", "mc"):
            raise ValueError("mode must be 'grid' or 'mc'")
        if self.mode == "grid" and self.k not in (2, 3):
            raise ValueError("nested grid sums are implemented for k = 2, 3")
        if self.mode == "mc" and self.samples < 1000:
            raise ValueError("Monte Carlo simplex needs at least 1000 samples")
        if self.cutoff < 0:
            raise ValueError("cutoff must be nonnegative")


@dataclass(frozen=True, eq=False)
class SiltEstimate:
    per_path: np.ndarray
    epsilon: float
    k: int
    renormalized: bool
    grid_M: int = 0
    cutoff: float = 0.0

    @property
    def n(self) -> int:
        return self.per_path.size

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_path))

    @property
    def variance(self) -> float:
        return float(np.var(self.per_path, ddof=1)) if self.n > 1 else 0.0

    @property
    def std_err(self) -> float:
        return math.sqrt(self.variance / self.n)


def mollifier2(eps: float, d2):
    """Planar Gaussian mollifier f_eps evaluated at squared distance d2."""
    return np.exp(-d2 / (2 * eps)) / (2 * math.pi * eps)


def increment_variance_matrix(spec: KernelSpec, nodes: np.ndarray) -> np.ndarray:
    """v(t_i, t_j) = E(X(t_j) - X(t_i))^2, symmetric, zero diagonal."""
    n = nodes.size
    i, j = np.triu_indices(n, 1)
    V = np.zeros((n, n))
    V[i, j] = pair_moments(spec, nodes[i], nodes[j])["incVar"]
    return V + V.T


def centering_matrix(spec: KernelSpec, nodes: np.ndarray, eps: float) -> np.ndarray:
    return 1.0 / (2 * math.pi * (increment_variance_matrix(spec, nodes) + eps))


def simplex_weights(grid: TimeGrid) -> np.ndarray:
    """W[i, j] = w_i w_j for i < j, w_j^2 / 2 on the diagonal, 0 below.

    Sum of pair weights approximates vol(Delta_2) = 1/2.
    """
    w = grid.weights
    W = np.triu(np.outer(w, w), 1)
    W[np.diag_indices_from(W)] = 0.5 * w**2
    return W


def _nested(F: np.ndarray, W2: np.ndarray, w: np.ndarray, k: int) -> np.ndarray:
    """Nested simplex sums for a batch of factor matrices F[p, i, j] (i <= j)."""
    if k == 2:
        return np.einsum("pij,ij->p", F, W2)
    # k = 3: sum_j w_j A_j B_j with A_j from earlier times, B_j from later times
    wh = w / 2
    Fu = np.triu(np.ones(F.shape[1:]), 1)
    A = np.einsum("pij,i,ij->pj", F, w, Fu) + wh * np.einsum("pjj->pj", F)
    B = np.einsum("pjl,l,jl->pj", F, w, Fu) + wh * np.einsum("pjj->pj", F)
    return np.einsum("pj,j,pj->p", A, w, B)


def _simplex_nodes(grid: TimeGrid, k: int, samples: int, seed) -> np.ndarray:
    """Sorted uniform points of Delta_k snapped to nearest grid nodes."""
    rng = generator(as_seed(seed), 0)
    u = np.sort(rng.random((samples, k)), axis=1)
    return np.clip(np.searchsorted(grid.midpoints, u), 0, grid.M)


def _silt(ens: PlanarEnsemble, eps: float, cfg: SimplexConfig, renormalized: bool) -> SiltEstimate:
    if not eps > 0:
        raise ValueError("eps must be positive")
    spec = ens.kernel
    require_stationary(spec)
    grid = ens.grid
    Y1, Y2 = ens.first.paths, ens.second.paths
    C = centering_matrix(spec, grid.nodes, eps) if renormalized else None
    if cfg.mode == "grid" and cfg.k == 2 and renormalized:
        # the centering is deterministic, so for k = 2 it is one constant
        plain = _silt(ens, eps, cfg, renormalized=False).per_path
        per = plain - float(np.sum(simplex_weights(grid) * C))
        return SiltEstimate(per, eps, cfg.k, True, grid.M, cfg.cutoff)
    if cfg.mode == "grid":
        W2 = simplex_weights(grid)
        w = grid.weights

        def block(a, b):
            d1 = Y1[a:b, None, :] - Y1[a:b, :, None]
            d2 = Y2[a:b, None, :] - Y2[a:b, :, None]
            F = mollifier2(eps, d1 * d1 + d2 * d2)
            if C is not None:
                F -= C
            return _nested(F, W2, w, cfg.k)

        per = np.concatenate(chunked(ens.n, block, chunk=16))
    else:
        idx = _simplex_nodes(grid, cfg.k, cfg.samples, cfg.seed)
        a_idx, b_idx = idx[:, :-1], idx[:, 1:]
        vol = 1.0 / math.factorial(cfg.k)

        def block(a, b):
            d1 = Y1[a:b][:, b_idx] - Y1[a:b][:, a_idx]
            d2 = Y2[a:b][:, b_idx] - Y2[a:b][:, a_idx]
            F = mollifier2(eps, d1 * d1 + d2 * d2)
            if C is not None:
                F -= C[a_idx, b_idx]
            return vol * np.mean(np.prod(F, axis=2), axis=1)

        per = np.concatenate(chunked(ens.n, block, chunk=64))
    return SiltEstimate(per, eps, cfg.k, renormalized, grid.M, cfg.cutoff)


def silt_plain(ens: PlanarEnsemble, eps: float, cfg: SimplexConfig = SimplexConfig()) -> SiltEstimate:
    return _silt(ens, eps, cfg, renormalized=False)


def silt_rosen(ens: PlanarEnsemble, eps: float, cfg: SimplexConfig = SimplexConfig()) -> SiltEstimate:
    return _silt(ens, eps, cfg, renormalized=True)


def expected_silt2(spec: KernelSpec, eps: float, n_inner: int = 32) -> float:
    """int over {s < t} of 1 / (2 pi (v(s, t) + eps)).

    Outer adaptive quadrature over the lag u = t - s (rtol 1e-8, with a
    breakpoint at u = eps), inner Gauss--Legendre over s in [0, 1 - u].
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    x, w = np.polynomial.legendre.leggauss(n_inner)

    def inner(u):
        if u >= 1.0:
            return 0.0
        s = 0.5 * (1 - u) * (x + 1)
        v = pair_moments(spec, s, s + u)["incVar"]
        return 0.5 * (1 - u) * float(np.sum(w / (2 * math.pi * (v + eps))))

    pts = [p for p in (eps, 10 * eps) if p < 1]
    val, _ = integrate.quad(inner, 0.0, 1.0, points=pts, epsrel=1e-8, epsabs=1e-13, limit=200)
    return val


def expected_silt2_discrete(spec: KernelSpec, grid: TimeGrid, eps: float) -> float:
    """Exact mean of the nested-sum estimator on ``grid`` (sampler law exact)."""
    return float(np.sum(simplex_weights(grid) * centering_matrix(spec, grid.nodes, eps)))


def doubling_bias(spec: KernelSpec, M: int, eps: float) -> float:
    """|E_M - E_2M| for the nested k = 2 estimator on uniform grids."""
    return abs(
        expected_silt2_discrete(spec, TimeGrid.uniform(M), eps)
        - expected_silt2_discrete(spec, TimeGrid.uniform(2 * M), eps)
    )


# regularized Fourier--Wiener integral ------------------------------------------------

def slice_matrix(spec: KernelSpec, grid: TimeGrid) -> np.ndarray:
    """Rows g(t_n) for every node t_n."""
    return np.stack([kernel_slice(spec, float(t), grid).values for t in grid.nodes])


def _batched_ldl(A: np.ndarray):
    """Unit-lower L and pivots d for a batch of small SPD matrices."""
    n = A.shape[-1]
    L = np.zeros_like(A)
    d = np.zeros(A.shape[:-1])
    for j in range(n):
        d[:, j] = A[:, j, j] - np.einsum("bk,bk,bk->b", L[:, j, :j], L[:, j, :j], d[:, :j])
        L[:, j, j] = 1.0
        for i in range(j + 1, n):
            L[:, i, j] = (A[:, i, j] - np.einsum("bk,bk,bk->b", L[:, i, :j], L[:, j, :j], d[:, :j])) / d[:, j]
    return L, d


def _fw_integrand(G: np.ndarray, Hs, idx: np.ndarray, rel_tol: float = 1e-12) -> np.ndarray:
    """prod_i (exp(-|<h, e~_i>|^2 / (2 |e~_i|^2)) - 1) / |e~_i|^2 for node tuples idx.

    e~_i is the Gram--Schmidt system of dg(t_i) = g(t_{i+1}) - g(t_i); its
    norms are the LDL pivots of the Gram matrix and <h, e~> = L^{-1} u.
    """
    k = idx.shape[1]
    D = np.diff(np.eye(k), axis=0)
    Gs = G[idx[:, :, None], idx[:, None, :]]
    A = np.einsum("ij,bjk,lk->bil", D, Gs, D)
    L, d = _batched_ldl(A)
    scale = np.einsum("bii->b", A)
    if np.any(d <= rel_tol * scale[:, None]):
        bad = int(np.argmax(np.any(d <= rel_tol * scale[:, None], axis=1)))
        raise ArithmeticError(f"Gram-Schmidt failure: coincident times at node tuple {idx[bad].tolist()}")
    q = np.zeros(d.shape)
    for H in Hs:
        u = np.einsum("ij,bj->bi", D, H[idx])
        p = np.linalg.solve(L, u[..., None])[..., 0]
        q += p**2
    return np.prod((np.exp(-0.5 * q / d) - 1.0) / d, axis=1)


def fw_integrand_reference(spec: KernelSpec, grid: TimeGrid, h1: GridFunction, h2: GridFunction, times) -> float:
    """Same integrand built literally from slices and Gram--Schmidt (slow)."""
    g = [kernel_slice(spec, float(t), grid) for t in times]
    e = gram_schmidt([g[i + 1] - g[i] for i in range(len(g) - 1)])
    out = 1.0
    for ei in e:
        n2 = ei.norm_sq()
        x = inner_product(h1, ei) ** 2 + inner_product(h2, ei) ** 2
        out *= (math.exp(-0.5 * x / n2) - 1.0) / n2
    return out


@dataclass
class RegularizedFW:
    cutoffs: list
    estimates: list
    std_errs: list

    @property
    def estimate(self) -> float:
        return self.estimates[0]

    @property
    def std_err(self) -> float:
        return self.std_errs[0]

    @property
    def sensitivities(self) -> list:
        """|I(delta_m) - I(delta_{m+1})| for consecutive cutoffs."""
        return [abs(a - b) for a, b in zip(self.estimates, self.estimates[1:])]

    @property
    def cutoff_sensitivity(self) -> float:
        return self.sensitivities[0]


def regularized_fw_integral(
    spec: KernelSpec, grid: TimeGrid, h1: GridFunction, h2: GridFunction, cfg: SimplexConfig,
    levels: int = 2,
) -> RegularizedFW:
    """MC estimate of int over {consecutive gaps >= delta} of the FW integrand.

    Cutoffs delta, delta/2, ... (``levels`` of them) share one sample set
    drawn uniformly on the smallest cutoff's region, so the differences
    between levels carry little Monte Carlo noise.
    """
    require_stationary(spec)
    k = cfg.k
    delta = cfg.cutoff if cfg.cutoff > 0 else 0.01
    cutoffs = [delta / 2**m for m in range(levels)]
    dmin = cutoffs[-1]
    span = 1.0 - (k - 1) * dmin
    if span <= 0:
        raise ValueError("cutoff too large for multiplicity k")
    S = slice_matrix(spec, grid)
    G = (S * grid.weights) @ S.T
    Hs = [S @ (grid.weights * h.values) for h in (h1, h2)]
    rng = generator(as_seed(cfg.seed), 0)
    u = np.sort(rng.random((cfg.samples, k)), axis=1) * span
    t = u + dmin * np.arange(k)
    gaps = np.diff(t, axis=1)
    idx = np.clip(np.searchsorted(grid.midpoints, t), 0, grid.M)
    ok = np.all(np.diff(idx, axis=1) > 0, axis=1)
    if not ok.all():
        raise ArithmeticError("cutoff below grid resolution: coincident nodes in a sample")
    f = _fw_integrand(G, Hs, idx)
    vol = span**k / math.factorial(k)
    est, se = [], []
    for c in cutoffs:
        vals = vol * f * np.all(gaps >= c, axis=1)
        est.append(float(vals.mean()))
        se.append(float(vals.std(ddof=1) / math.sqrt(vals.size)))
    return RegularizedFW(cutoffs, est, se)


def wiener_fw_oracle(delta: float) -> float:
    """int_delta^1 (1 - u)(e^{-u} - 1)/u du: k = 2, Wiener, h1 = h2 = 1."""
    val, _ = integrate.quad(lambda u: (1 - u) * math.expm1(-u) / u, delta, 1.0, epsabs=1e-13, epsrel=1e-12)
    return val


# Monte Carlo Fourier--Wiener transform --------------------------------------------

@dataclass
class FWTransform:
    estimate: float
    std_err: float
    analytic: float
    times: tuple
    exp_mean: float
    exp_std_err: float


def _midpoint_values(h: GridFunction, grid: TimeGrid) -> np.ndarray:
    return np.interp(grid.midpoints, h.grid.nodes, h.values)


def fw_analytic(spec: KernelSpec, grid: TimeGrid, times, eps: float, h1: GridFunction, h2: GridFunction) -> float:
    """(2 pi)^{-(k-1)} det(A + eps)^{-1} exp(-1/2 sum_c u_c^T (A + eps)^{-1} u_c)."""
    g = [kernel_slice(spec, float(t), grid) for t in times]
    inc = [g[i + 1] - g[i] for i in range(len(g) - 1)]
    A = gram(inc).matrix + eps * np.eye(len(inc))
    sign, logdet = np.linalg.slogdet(A)
    if sign <= 0:
        raise ArithmeticError("A + eps I is singular")
    q = 0.0
    for h in (h1, h2):
        u = np.array([inner_product(e, h) for e in inc])
        q += float(u @ np.linalg.solve(A, u))
    return float((2 * math.pi) ** -(len(inc)) * math.exp(-logdet - 0.5 * q))


def fw_transform_mc(ens: PlanarEnsemble, times, eps: float, h1: GridFunction, h2: GridFunction) -> FWTransform:
    if not eps > 0:
        raise ValueError("eps must be positive")
    if not (ens.first.has_noise and ens.second.has_noise):
        raise ValueError("Fourier-Wiener weighting needs the driving noise (use the Volterra sampler)")
    spec = ens.kernel
    require_stationary(spec)
    grid = ens.grid
    idx = [grid.nearest(t) for t in times]
    if any(b <= a for a, b in zip(idx, idx[1:])):
        raise ValueError("fixed times must be increasing and distinct on the grid")
    snapped = tuple(float(grid.nodes[i]) for i in idx)
    alpha = np.ones(ens.n)
    for a, b in zip(idx, idx[1:]):
        d1 = ens.first.paths[:, b] - ens.first.paths[:, a]
        d2 = ens.second.paths[:, b] - ens.second.paths[:, a]
        alpha *= mollifier2(eps, d1 * d1 + d2 * d2)
    dt = grid.cells
    m1, m2 = _midpoint_values(h1, grid), _midpoint_values(h2, grid)
    log_e = ens.first.noise @ m1 + ens.second.noise @ m2 - 0.5 * (np.sum(m1**2 * dt) + np.sum(m2**2 * dt))
    stoch = np.exp(log_e)
    vals = alpha * stoch
    n = ens.n
    return FWTransform(
        float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n)),
        fw_analytic(spec, grid, snapped, eps, h1, h2), snapped,
        float(stoch.mean()), float(stoch.std(ddof=1) / math.sqrt(n)),
    )


# CSV --------------------------------------------------------------------------------

def silt_csv(estimates) -> str:
    buf = io.StringIO()
    buf.write("epsilon,k,renormalized,mean,variance,stderr,n_paths,grid_M,cutoff\n")
    for e in estimates:
        buf.write(
            f"{e.epsilon:.17g},{e.k},{str(e.renormalized).lower()},{e.mean:.17g},{e.variance:.17g},"
            f"{e.std_err:.17g},{e.n},{e.grid_M},{e.cutoff:.17g}\n"
        )
    return buf.getvalue()


def fw_csv(rows) -> str:
    """Rows (k, epsilon, FWTransform)."""
    buf = io.StringIO()
    buf.write("k,epsilon,estimate,stderr,analytic\n")
    for k, eps, r in rows:
        buf.write(f"{k},{eps:.17g},{r.estimate:.17g},{r.std_err:.17g},{r.analytic:.17g}\n")
    return buf.getvalue()
