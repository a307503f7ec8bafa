import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from volterra_lab.covariance import cov_matrix
from volterra_lab.hilbert import TimeGrid
from volterra_lab.kernels import KernelSpec
from volterra_lab.localtime import (
    GAUSSIAN_PAIR_DENSITY, DegenerateVarianceError, Mollifier, continuity_table_csv, expected_local_time,
    kernel_continuity_experiment, l2_moment_formula, local_time_end, mollified_local_time, occupation_integral,
)
from volterra_lab.simulate import sample_exact, sample_volterra

G256 = TimeGrid.uniform(256)


def test_mollifier_mass_and_peak():
    m = Mollifier(0.04, 0.3)
    x = np.linspace(-3, 3, 20001)
    assert integrate.trapezoid(m(x), x) == pytest.approx(1.0, abs=1e-10)
    assert m(x).max() <= m.peak
    with pytest.raises(ValueError):
        Mollifier(0.0)


def test_zero_path():
    g = TimeGrid.uniform(50)
    curve = mollified_local_time(np.zeros(51), g, 0.01, 0.0)
    assert np.allclose(curve.values, g.nodes / math.sqrt(2 * math.pi * 0.01), rtol=0, atol=1e-15)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.16, 0.04, 0.01, 0.0025]))
def test_occupation_identity_and_monotone(seed, eps):
    g = TimeGrid.uniform(64)
    path = sample_volterra(KernelSpec.ou(1.5), g, 1, seed).paths[0]
    assert abs(occupation_integral(path, g, eps) - 1.0) <= 1e-8
    assert abs(occupation_integral(path, g, eps, t_index=32) - 0.5) <= 1e-8
    c = mollified_local_time(path, g, eps, 0.1)
    assert c.values[0] == 0.0
    assert np.all(np.diff(c.values) >= 0)
    assert c.at_end() <= Mollifier(eps).peak + 1e-12


def test_expected_local_time_closed_forms():
    w = KernelSpec.wiener()
    assert expected_local_time(w, 1.0, 0.0, 0.0) == pytest.approx(math.sqrt(2 / math.pi), rel=1e-8)
    assert expected_local_time(w, 1.0, 0.0, 0.04) == pytest.approx(
        math.sqrt(2 / math.pi) * (math.sqrt(1.04) - 0.2), rel=1e-8
    )
    vals = [expected_local_time(KernelSpec.ou(), 1.0, y, 0.01) for y in (0.0, 0.5, 1.0, 2.0, 4.0)]
    assert all(b < a for a, b in zip(vals, vals[1:])) and vals[-1] < 1e-3


def test_expected_local_time_degenerate():
    zero = KernelSpec.tabulated(np.linspace(0, 1, 3), np.zeros((3, 3)))
    with pytest.raises(DegenerateVarianceError):
        expected_local_time(zero, 1.0, 0.0, 0.0)


@pytest.mark.parametrize(
    "spec,sampler",
    [
        (KernelSpec.wiener(), "volterra"), (KernelSpec.ou(1.0), "volterra"), (KernelSpec.bridge(), "volterra"),
        (KernelSpec.fbm(0.7), "exact"), (KernelSpec.fbm(0.3), "exact"),
    ],
    ids=lambda v: v.label if isinstance(v, KernelSpec) else v,
)
def test_ensemble_mean_matches_expected(spec, sampler):
    n = 10_000
    if sampler == "exact":
        ens = sample_exact(cov_matrix(spec, G256), n, 31, kernel=spec)
    else:
        ens = sample_volterra(spec, G256, n, 31)
    for eps in (0.04, 0.01):
        l = local_time_end(ens.paths, G256, eps, 0.0)
        se = l.std(ddof=1) / math.sqrt(n)
        assert abs(l.mean() - expected_local_time(spec, 1.0, 0.0, eps)) <= 3 * se


def test_epsilon_cauchy_trend():
    ens = sample_volterra(KernelSpec.wiener(), G256, 4000, 8)
    gaps = []
    for eps in (0.16, 0.04, 0.01):
        d = local_time_end(ens.paths, G256, eps) - local_time_end(ens.paths, G256, eps / 4)
        gaps.append(np.mean(d**2))
    assert gaps[0] > gaps[1] > gaps[2]


# L2 moment ------------------------------------------------------------------------

def test_l2_moment_wiener_bracket():
    res = l2_moment_formula(KernelSpec.wiener(), TimeGrid.uniform(512))
    target = 4 / (3 * math.pi)
    assert res.estimate <= target <= res.upper + 1e-12


def test_l2_moment_homogeneity():
    g = TimeGrid.uniform(256)
    for spec in (KernelSpec.wiener(), KernelSpec.ou(1.0)):
        a = l2_moment_formula(spec, g)
        b = l2_moment_formula(spec.scaled(2.0), g)
        assert b.estimate == pytest.approx(a.estimate / 2, rel=1e-10)


def test_l2_moment_ou_band_halving():
    a = l2_moment_formula(KernelSpec.ou(1.0), TimeGrid.uniform(256))
    b = l2_moment_formula(KernelSpec.ou(1.0), TimeGrid.uniform(512))
    assert a.estimate <= b.estimate <= a.estimate + a.band_bound


def test_gaussian_pair_density_matches_simulation():
    # E int l_eps(1,y)^2 dy for Wiener in closed form: mollifiers convolve to variance 2 eps
    eps = 0.01
    a = 2 * eps
    exact = 4 / math.sqrt(2 * math.pi) * ((2 / 3) * ((1 + a) ** 1.5 - a**1.5) - math.sqrt(a))
    g = TimeGrid.uniform(256)
    ens = sample_volterra(KernelSpec.wiener(), g, 3000, 4)
    X, w = ens.paths, g.weights
    D = X[:, :, None] - X[:, None, :]
    vals = np.einsum("i,pij,j->p", w, np.exp(-D**2 / (2 * a)) / math.sqrt(2 * math.pi * a), w)
    se = vals.std(ddof=1) / math.sqrt(vals.size)
    assert abs(vals.mean() - exact) <= 3 * se
    # the eps -> 0 limit of the closed form is the Gaussian-constant formula, not the 1/pi one
    limit = l2_moment_formula(KernelSpec.wiener(), TimeGrid.uniform(512), prefactor=2 * GAUSSIAN_PAIR_DENSITY)
    g_limit = 4 / math.sqrt(2 * math.pi) * (2 / 3)
    assert limit.estimate <= g_limit <= limit.upper
    assert abs(g_limit - 4 / (3 * math.pi)) > 0.5


# continuity ------------------------------------------------------------------------

def test_continuity_zero_amplitude():
    rows = kernel_continuity_experiment(KernelSpec.wiener(), [0.0], TimeGrid.uniform(64))
    r = rows[0]
    assert r.sup_diff == 0 and r.max_var_gap == 0 and abs(r.l2_gap) <= 1e-10


def test_continuity_var_gap_bound():
    g = TimeGrid.uniform(128)
    r = kernel_continuity_experiment(KernelSpec.wiener(), [0.1], g)[0]
    assert r.sup_diff <= 0.1 + 1e-12
    assert r.max_var_gap <= 0.01


def test_continuity_exp_shape_local_slopes_rise():
    amps = [0.2, 0.1, 0.05, 0.025]
    rows = kernel_continuity_experiment(KernelSpec.wiener(), amps, TimeGrid.uniform(64), shape="exp")
    gaps = np.array([r.l2_gap for r in rows])
    assert np.all(np.diff(gaps) < 0)
    local = np.diff(np.log(gaps)) / np.diff(np.log(amps))
    assert np.all(np.diff(local) > 0)
    text = continuity_table_csv(rows)
    assert text.splitlines()[0] == "amplitude,supDiff,maxVarGap,L2gap"


def test_continuity_rejects_increasing_amplitudes():
    with pytest.raises(ValueError):
        kernel_continuity_experiment(KernelSpec.wiener(), [0.1, 0.2], TimeGrid.uniform(16))
