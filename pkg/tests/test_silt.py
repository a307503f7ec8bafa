import math

import numpy as np
import pytest

from volterra_lab.hilbert import GridFunction, TimeGrid
from volterra_lab.kernels import KernelSpec
from volterra_lab.silt import (
    NonStationaryKernelError, SimplexConfig, _fw_integrand, doubling_bias, expected_silt2, fw_csv,
    fw_integrand_reference, fw_transform_mc, regularized_fw_integral, silt_csv, silt_plain, silt_rosen,
    slice_matrix, wiener_fw_oracle,
)
from volterra_lab.simulate import sample_exact, sample_planar, PlanarEnsemble
from volterra_lab.covariance import cov_matrix


def wiener_silt2(eps):
    return ((1 + eps) * math.log((1 + eps) / eps) - 1) / (2 * math.pi)


@pytest.fixture(scope="module")
def wiener_ens():
    return sample_planar(KernelSpec.wiener(), TimeGrid.uniform(128), 3000, 21)


# configuration and gate -----------------------------------------------------------

def test_simplex_config_validation():
    with pytest.raises(ValueError):
        SimplexConfig(k=1)
    with pytest.raises(ValueError):
        SimplexConfig(k=4, mode="grid")
    with pytest.raises(ValueError):
        SimplexConfig(mode="mc", samples=10)
    SimplexConfig(k=4, mode="mc")


def test_stationarity_gate():
    ens = sample_planar(KernelSpec.bridge(), TimeGrid.uniform(16), 10, 0)
    with pytest.raises(NonStationaryKernelError, match="silt requires stationary kernel"):
        silt_plain(ens, 0.1)
    one = GridFunction.constant(TimeGrid.uniform(16))
    with pytest.raises(NonStationaryKernelError):
        regularized_fw_integral(KernelSpec.fbm(0.7), one.grid, one, one, SimplexConfig())


def test_eps_must_be_positive(wiener_ens):
    with pytest.raises(ValueError):
        silt_plain(wiener_ens, 0.0)


# expected_silt2 ---------------------------------------------------------------------

@pytest.mark.parametrize("eps", [0.1, 0.01, 0.001])
def test_expected_silt2_closed_form(eps):
    assert expected_silt2(KernelSpec.wiener(), eps) == pytest.approx(wiener_silt2(eps), rel=1e-8)


def test_expected_silt2_large_eps():
    eps = 1e4
    assert expected_silt2(KernelSpec.ou(), eps) * 4 * math.pi * eps == pytest.approx(1.0, rel=1e-3)


# plain and renormalized -----------------------------------------------------------------

def test_plain_nonnegative_and_moments(wiener_ens):
    est = silt_plain(wiener_ens, 0.05)
    assert np.all(est.per_path >= 0)
    assert est.std_err == pytest.approx(math.sqrt(est.variance / est.n))
    assert not est.renormalized and est.k == 2


@pytest.mark.parametrize("spec", [KernelSpec.wiener(), KernelSpec.ou(1.0)], ids=lambda s: s.label)
def test_plain_mean_matches_expected(spec):
    M = 128
    ens = sample_planar(spec, TimeGrid.uniform(M), 3000, 5)
    for eps in (0.1, 0.01):
        est = silt_plain(ens, eps)
        tol = 3 * est.std_err + doubling_bias(spec, M, eps)
        assert abs(est.mean - expected_silt2(spec, eps)) <= tol


def test_rosen_mean_zero_and_shared_variance(wiener_ens):
    for eps in (0.1, 0.01):
        plain, rosen = silt_plain(wiener_ens, eps), silt_rosen(wiener_ens, eps)
        assert abs(rosen.mean) <= 3 * rosen.std_err
        assert np.any(rosen.per_path < 0)
        # deterministic centering: k = 2 variances coincide
        assert rosen.variance == pytest.approx(plain.variance, rel=1e-9)


def test_k3_sup_bound_and_grid_vs_mc():
    g = TimeGrid.uniform(48)
    ens = sample_planar(KernelSpec.ou(), g, 300, 2)
    eps = 0.1
    grid3 = silt_plain(ens, eps, SimplexConfig(k=3))
    assert np.all(grid3.per_path <= (2 * math.pi * eps) ** -2 / 6 * (1 + 3.0 / g.M))
    mc3 = silt_plain(ens, eps, SimplexConfig(k=3, mode="mc", samples=20000, seed=3))
    diff = grid3.per_path - mc3.per_path
    assert abs(diff.mean()) <= 4 * diff.std(ddof=1) / math.sqrt(diff.size) + 3.0 / g.M * grid3.mean


def test_k3_rosen_mean():
    g = TimeGrid.uniform(48)
    eps = 0.1
    # independent increments: centered factors on disjoint intervals have mean zero
    w = sample_planar(KernelSpec.wiener(), g, 3000, 2)
    r = silt_rosen(w, eps, SimplexConfig(k=3))
    assert abs(r.mean) <= 3 * r.std_err
    # correlated OU increments leave a small positive mean, far below the plain level
    o = sample_planar(KernelSpec.ou(), g, 3000, 2)
    r, p = silt_rosen(o, eps, SimplexConfig(k=3)), silt_plain(o, eps, SimplexConfig(k=3))
    assert 0 < r.mean < 0.02 * p.mean


def test_k2_grid_vs_mc(wiener_ens):
    eps = 0.1
    a = silt_plain(wiener_ens, eps)
    b = silt_plain(wiener_ens, eps, SimplexConfig(k=2, mode="mc", samples=20000, seed=1))
    assert abs(a.mean - b.mean) <= 4 * math.hypot(a.std_err, b.std_err) + 2.0 / 128


def rosen_variance_oracle(eps, n=2_000_000, seed=0):
    """Continuum Var(L_eps,2) for planar Wiener by MC over Delta_2 x Delta_2."""
    rng = np.random.default_rng(seed)
    I = np.sort(rng.random((n, 2)), axis=1)
    J = np.sort(rng.random((n, 2)), axis=1)
    v1, v2 = I[:, 1] - I[:, 0], J[:, 1] - J[:, 0]
    c = np.clip(np.minimum(I[:, 1], J[:, 1]) - np.maximum(I[:, 0], J[:, 0]), 0, None)
    a, b = v1 + eps, v2 + eps
    vals = (1 / (a * b - c * c) - 1 / (a * b)) / (4 * math.pi**2) / 4
    return vals.mean(), vals.std(ddof=1) / math.sqrt(n)


def test_rosen_variance_matches_continuum_oracle():
    g = TimeGrid.uniform(256)
    ens = sample_planar(KernelSpec.wiener(), g, 2000, 77)
    for eps in (0.1, 0.03):
        est = silt_rosen(ens, eps)
        x = est.per_path - est.mean
        kurt = np.mean(x**4) / np.mean(x**2) ** 2
        se_var = est.variance * math.sqrt((kurt - 1) / est.n)
        ref, ref_se = rosen_variance_oracle(eps)
        assert abs(est.variance - ref) <= 4 * math.hypot(se_var, ref_se)


def test_rosen_variance_oracle_converges():
    vals = [rosen_variance_oracle(e, n=400_000)[0] for e in (0.1, 0.01, 0.001, 0.0003)]
    steps = np.diff(vals)
    assert np.all(steps > 0)
    # bounded: successive increments shrink
    assert steps[2] < steps[1] < steps[0]


def test_silt_csv_header(wiener_ens):
    text = silt_csv([silt_plain(wiener_ens, 0.1)])
    assert text.splitlines()[0] == "epsilon,k,renormalized,mean,variance,stderr,n_paths,grid_M,cutoff"


# regularized FW integral --------------------------------------------------------------

def test_fw_integrand_batched_equals_reference():
    g = TimeGrid.uniform(64)
    h1 = GridFunction.indicator(g, 0.0, 1.0)
    h2 = GridFunction.from_callable(g, lambda t: np.sin(3 * t))
    rng = np.random.default_rng(0)
    for spec in (KernelSpec.wiener(), KernelSpec.ou(2.0)):
        S = slice_matrix(spec, g)
        G = (S * g.weights) @ S.T
        Hs = [S @ (g.weights * h.values) for h in (h1, h2)]
        for k in (2, 3):
            idx = np.sort(rng.choice(np.arange(1, g.M + 1), size=(5, k), replace=False), axis=1)
            fast = _fw_integrand(G, Hs, idx)
            slow = [fw_integrand_reference(spec, g, h1, h2, g.nodes[row]) for row in idx]
            assert np.allclose(fast, slow, rtol=1e-9, atol=1e-12)


def test_regularized_fw_zero_h():
    g = TimeGrid.uniform(512)
    z = GridFunction.constant(g, 0.0)
    res = regularized_fw_integral(KernelSpec.ou(), g, z, z, SimplexConfig(mode="mc", samples=2000))
    assert res.estimates == [0.0, 0.0]


def test_regularized_fw_wiener_oracle_and_signs():
    g = TimeGrid.uniform(1024)
    one = GridFunction.indicator(g, 0.0, 1.0)
    res = regularized_fw_integral(KernelSpec.wiener(), g, one, one,
                                  SimplexConfig(k=2, mode="mc", samples=100_000, seed=4, cutoff=0.02), levels=3)
    for c, e, s in zip(res.cutoffs, res.estimates, res.std_errs):
        assert abs(e - wiener_fw_oracle(c)) <= 3 * s
        assert e <= 0
    assert res.sensitivities[1] < res.sensitivities[0]
    g3 = TimeGrid.uniform(256)
    r3 = regularized_fw_integral(KernelSpec.ou(), g3, GridFunction.indicator(g3, 0, 1), GridFunction.constant(g3, 0.5),
                                 SimplexConfig(k=3, mode="mc", samples=20_000, seed=2, cutoff=0.04))
    assert r3.estimate >= 0


def test_regularized_fw_cutoff_below_grid():
    g = TimeGrid.uniform(64)
    one = GridFunction.constant(g)
    with pytest.raises(ArithmeticError, match="grid resolution"):
        regularized_fw_integral(KernelSpec.ou(), g, one, one, SimplexConfig(mode="mc", samples=2000, cutoff=0.01))


# Fourier-Wiener transform ------------------------------------------------------------

@pytest.fixture(scope="module")
def fw_ens():
    return sample_planar(KernelSpec.wiener(), TimeGrid.uniform(200), 20_000, 3)


def test_fw_zero_h_and_unit_exponential(fw_ens):
    g = fw_ens.grid
    z = GridFunction.constant(g, 0.0)
    res = fw_transform_mc(fw_ens, (0.3, 0.7), 0.05, z, z)
    assert res.exp_mean == 1.0
    assert abs(res.estimate - res.analytic) <= 3 * res.std_err
    assert res.analytic == pytest.approx(1 / (2 * math.pi * 0.45), rel=1e-12)


def test_fw_indicator_h(fw_ens):
    g = fw_ens.grid
    one = GridFunction.indicator(g, 0.0, 1.0)
    res = fw_transform_mc(fw_ens, (0.3, 0.7), 0.05, one, one)
    assert res.analytic == pytest.approx(math.exp(-0.16 / 0.45) / (2 * math.pi * 0.45), rel=1e-10)
    assert abs(res.estimate - res.analytic) <= 3 * res.std_err
    assert abs(res.exp_mean - 1) <= 3 * res.exp_std_err


def test_fw_k3_and_ou():
    g = TimeGrid.uniform(100)
    h1 = GridFunction.indicator(g, 0.0, 0.5)
    h2 = GridFunction.constant(g, 0.3)
    for spec in (KernelSpec.wiener(), KernelSpec.ou(1.0)):
        ens = sample_planar(spec, g, 20_000, 8)
        res = fw_transform_mc(ens, (0.2, 0.5, 0.9), 0.1, h1, h2)
        assert abs(res.estimate - res.analytic) <= 3 * res.std_err
    text = fw_csv([(3, 0.1, res)])
    assert text.splitlines()[0] == "k,epsilon,estimate,stderr,analytic"


def test_fw_requires_noise():
    g = TimeGrid.uniform(16)
    spec = KernelSpec.wiener()
    cov = cov_matrix(spec, g)
    a = sample_exact(cov, 10, 1, kernel=spec)
    b = sample_exact(cov, 10, 2, kernel=spec)
    z = GridFunction.constant(g, 0.0)
    with pytest.raises(ValueError, match="driving noise"):
        fw_transform_mc(PlanarEnsemble(a, b), (0.25, 0.75), 0.1, z, z)
