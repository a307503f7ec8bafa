import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from volterra_lab.covariance import (
    DegenerateProcessError, cov_matrix, integrator_constant, integrator_oracle, integrator_sweep, lnd_diagnostics,
    pair_stats, rudenko_integral, strong_lnd_ratio, variance,
)
from volterra_lab.hilbert import TimeGrid
from volterra_lab.kernels import KernelSpec


def lower_pairs(grid):
    T, S = np.meshgrid(grid.nodes, grid.nodes, indexing="ij")
    return T, S


def test_wiener_covariance_exact():
    g = TimeGrid.uniform(64)
    T, S = lower_pairs(g)
    R = cov_matrix(KernelSpec.wiener(), g).values
    assert np.max(np.abs(R - np.minimum(T, S))) < 1e-10


def test_ou_and_bridge_covariance():
    g = TimeGrid.uniform(256)
    T, S = lower_pairs(g)
    hi, lo = np.maximum(T, S), np.minimum(T, S)
    R = cov_matrix(KernelSpec.ou(1.0), g).values
    assert np.max(np.abs(R - (np.exp(-(hi - lo)) - np.exp(-(hi + lo))) / 2)) < 1e-6
    R = cov_matrix(KernelSpec.bridge(), g).values
    assert np.max(np.abs(R - lo * (1 - hi))) < 1e-6


def test_fbm_covariance_matches_fbm_law():
    g = TimeGrid.uniform(32)
    T, S = lower_pairs(g)
    H = 0.7
    R = cov_matrix(KernelSpec.fbm(H), g).values
    oracle = 0.5 * (T ** (2 * H) + S ** (2 * H) - np.abs(T - S) ** (2 * H))
    assert np.max(np.abs(R - oracle)) < 1e-4


def test_covariance_structure():
    g = TimeGrid.uniform(48)
    for spec in (KernelSpec.ou(2.0), KernelSpec.bridge(), KernelSpec.perturbed(KernelSpec.wiener(), 0.2)):
        cov = cov_matrix(spec, g)
        R = cov.values
        assert np.allclose(R, R.T, atol=1e-12)
        assert np.all(np.diag(R) >= 0) and R[0, 0] == 0.0
        L = cov.factor
        assert cov.jitter <= 1e-10
        assert np.allclose(L @ L.T, R, atol=1e-9 * np.max(np.diag(R)))


def test_covariance_csv_header():
    g = TimeGrid.uniform(8)
    text = cov_matrix(KernelSpec.wiener(), g).to_csv()
    head = text.splitlines()[0].split(",")
    assert [float(x) for x in head] == list(g.nodes)


# pair statistics -------------------------------------------------------------------

def test_pair_stats_wiener():
    p = pair_stats(KernelSpec.wiener(), 0.3, 0.7)
    assert p["incVar"] == pytest.approx(0.4, abs=1e-14)
    assert p["det2"] == pytest.approx(0.12, abs=1e-14)


def test_pair_stats_ou_closed_form():
    s, t = 0.3, 0.7
    p = pair_stats(KernelSpec.ou(1.0), s, t)
    d = t - s
    oracle = (1 - math.exp(-2 * d)) / 2 + (math.exp(-d) - 1) ** 2 * (1 - math.exp(-2 * s)) / 2
    assert p["incVar"] == pytest.approx(oracle, abs=1e-6)
    varS = (1 - math.exp(-2 * s)) / 2
    varT = (1 - math.exp(-2 * t)) / 2
    cov = (math.exp(-d) - math.exp(-(t + s))) / 2
    assert p["det2"] == pytest.approx(varS * varT - cov**2, abs=1e-6)


def test_pair_stats_rejects_bad_order():
    with pytest.raises(ValueError):
        pair_stats(KernelSpec.wiener(), 0.7, 0.3)


@pytest.mark.parametrize("spec", [KernelSpec.ou(1.0), KernelSpec.bridge(), KernelSpec.fbm(0.7)], ids=lambda s: s.label)
def test_incvar_decreases_to_zero(spec):
    s = 0.4
    vals = [pair_stats(spec, s, s + d)["incVar"] for d in (0.3, 0.1, 0.03, 0.01, 0.001)]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-2


# Rudenko ------------------------------------------------------------------------

def test_rudenko_wiener_beta_oracle():
    res = rudenko_integral(KernelSpec.wiener(), TimeGrid.uniform(512))
    # full square = 2 * int_0^1 B(1/2, 1/2) dt = 2 pi
    assert res.estimate <= 2 * math.pi <= res.upper + 1e-9
    assert abs(res.upper - 2 * math.pi) <= 0.05 * 2 * math.pi


def test_rudenko_ou_finite_and_refines():
    a = rudenko_integral(KernelSpec.ou(1.0), TimeGrid.uniform(128))
    b = rudenko_integral(KernelSpec.ou(1.0), TimeGrid.uniform(512))
    assert np.isfinite(a.estimate) and np.isfinite(a.band_bound)
    assert a.estimate <= b.estimate <= a.estimate + a.band_bound


def test_rudenko_degenerate_kernel_names_pair():
    spec = KernelSpec.tabulated(np.linspace(0, 1, 3), np.zeros((3, 3)))
    with pytest.raises(DegenerateProcessError, match=r"\(s, t\)"):
        rudenko_integral(spec, TimeGrid.uniform(16))


# local nondeterminism ---------------------------------------------------------------

def test_lnd_wiener_exact():
    rep = lnd_diagnostics(KernelSpec.wiener(), TimeGrid.uniform(256), zeta=1.0)
    assert all(r == math.inf for _, r in rep.berman)
    assert all(v == pytest.approx(1.0, abs=1e-12) for _, v in rep.zeta_liminf)
    for k in (3, 4):
        assert all(r == 1.0 for _, r in rep.strong[k])


def test_lnd_small_window_warns():
    rep = lnd_diagnostics(KernelSpec.ou(), TimeGrid.uniform(64), zeta=1.0, j_max=6)
    assert any("below four grid cells" in w for w in rep.warnings)


def test_zeta_liminf_against_analytic():
    g = TimeGrid.uniform(512)
    rep = lnd_diagnostics(KernelSpec.ou(1.0), g, zeta=0.5)
    for t, v in rep.zeta_liminf:
        s = g.nodes[1:g.nearest(t)]
        exact = np.min((1 - np.exp(-2 * (t - s))) / 2 / (t - s) ** 0.5)
        assert v == pytest.approx(exact, rel=1e-6)


def test_strong_lnd_ou_slope():
    g = TimeGrid.uniform(2048)
    js = np.arange(4, 10)
    gaps = [abs(strong_lnd_ratio(KernelSpec.ou(1.0), g, 3, 2.0**-j) - 1) for j in js]
    slope = np.polyfit(-js * math.log(2), np.log(gaps), 1)[0]
    # |ratio - 1| <= C window: slope at least one
    assert slope >= 0.9


@settings(max_examples=25, deadline=None)
@given(st.floats(0.2, 5.0), st.integers(3, 4), st.integers(2, 5))
def test_hadamard_bound(rate, k, j):
    g = TimeGrid.uniform(128)
    for spec in (KernelSpec.ou(rate), KernelSpec.perturbed(KernelSpec.ou(rate), 0.3)):
        r = strong_lnd_ratio(spec, g, k, 2.0**-j)
        assert 0 <= r <= 1 + 1e-9


# integrator constant ---------------------------------------------------------------

def test_integrator_wiener_all_ratios_one():
    c, ratios = integrator_constant(KernelSpec.wiener(), TimeGrid.uniform(128), trials=2000, seed=3,
                                    return_ratios=True)
    assert np.max(np.abs(np.asarray(ratios) - 1)) < 1e-10
    assert c == pytest.approx(1.0, abs=1e-10)


def test_integrator_ou_below_oracle_and_deterministic():
    g = TimeGrid.uniform(64)
    cov = cov_matrix(KernelSpec.ou(1.0), g)
    c1 = integrator_constant(cov, trials=500, seed=5)
    c2 = integrator_constant(cov, trials=500, seed=5)
    assert c1 == c2
    assert c1 <= integrator_oracle(cov) + 1e-12


def test_integrator_jump_kernel_grows():
    nodes = np.linspace(0, 1, 2049)
    T, S = np.meshgrid(nodes, nodes, indexing="ij")
    vals = np.where(S <= T, np.where(T >= 0.5, 2.0, 1.0), 0.0)
    spec = KernelSpec.tabulated(nodes, vals)
    table = integrator_sweep(spec, [16, 32, 64], trials=300, seed=1)
    oracles = [row[2] for row in table]
    assert oracles[0] < oracles[1] < oracles[2]
    assert all(row[1] <= row[2] + 1e-9 for row in table)


def test_variance_wiener():
    t = np.array([0.0, 0.25, 1.0])
    assert np.allclose(variance(KernelSpec.wiener(), t), t, atol=1e-14)
