import math

import numpy as np
import pytest
from scipy import integrate, stats

from errquant.core import ConfigError, DomainError
from errquant.toy1d import (
    MixtureSpec,
    cell_probabilities,
    error_given_z,
    exact_bin_cdf,
    exact_bin_quantile,
    joint_st_density,
    posterior_moments,
    toy_model,
    toy_pipeline_check,
)

SPEC = MixtureSpec.reference()


def quad_moments(spec, z):
    # brute-force posterior moments straight from the joint density
    f = lambda x, k: x**k * spec.joint_pdf(x, z)
    m0 = integrate.quad(f, -4, 4, args=(0,), points=spec.centers, epsabs=1e-14, epsrel=1e-13, limit=400)[0]
    m1 = integrate.quad(f, -4, 4, args=(1,), points=spec.centers, epsabs=1e-14, epsrel=1e-13, limit=400)[0]
    m2 = integrate.quad(f, -4, 4, args=(2,), points=spec.centers, epsabs=1e-14, epsrel=1e-13, limit=400)[0]
    return m1 / m0, m2 / m0 - (m1 / m0) ** 2


def test_spec_validation():
    with pytest.raises(ConfigError):
        MixtureSpec((0.0, 1.0), (1.0,), (1.0,), 1.0)
    with pytest.raises(ConfigError):
        MixtureSpec((0.0,), (1.0,), (0.9,), 1.0)
    with pytest.raises(ConfigError):
        MixtureSpec((0.0,), (1.0,), (1.0,), 0.0)


def test_conjugate_single_component():
    spec = MixtureSpec((0.3,), (0.5,), (1.0,), 0.2)
    pm = posterior_moments(spec, np.array([-1.0, 0.0, 2.5]))
    post_var = 0.5 * 0.2 / 0.7
    np.testing.assert_allclose(pm.var, post_var, rtol=1e-12)
    np.testing.assert_allclose(pm.mean, post_var * (0.3 / 0.5 + np.array([-1.0, 0.0, 2.5]) / 0.2), rtol=1e-12)
    d = error_given_z(spec, 0.7)
    # S / post_var is chi-square with one degree of freedom
    assert d.quantile(0.9) == pytest.approx(post_var * stats.chi2.ppf(0.9, 1), rel=1e-10)


@pytest.mark.parametrize("z", [-2.0, -0.5, 0.0, 0.37, 1.2])
def test_moments_match_quadrature(z):
    pm = posterior_moments(SPEC, z)
    mean, var = quad_moments(SPEC, z)
    assert abs(pm.mean - mean) < 1e-8
    assert abs(pm.var - var) < 1e-8


def test_moments_symmetry():
    z = np.linspace(0.01, 3, 50)
    a, b = posterior_moments(SPEC, z), posterior_moments(SPEC, -z)
    np.testing.assert_allclose(a.mean, -b.mean, atol=1e-14)
    np.testing.assert_allclose(a.var, b.var, rtol=1e-12)


@pytest.mark.parametrize("z,q", [(0.0, 0.9), (0.5, 0.5), (-1.3, 0.95)])
def test_error_quantile_inverts_cdf(z, q):
    d = error_given_z(SPEC, z)
    assert abs(d.cdf(d.quantile(q)) - q) < 1e-9


@pytest.mark.parametrize("z", [0.0, 0.5, -1.1])
def test_error_quantile_monte_carlo(z):
    d = error_given_z(SPEC, z)
    pm = posterior_moments(SPEC, z)
    rng = np.random.Generator(np.random.PCG64(7))
    k = rng.choice(len(pm.weights), size=400_000, p=pm.weights)
    x = pm.comp_means[k] + np.sqrt(pm.comp_vars[k]) * rng.standard_normal(k.size)
    s = (x - d.center) ** 2
    for q in (0.5, 0.9):
        assert d.quantile(q) == pytest.approx(np.quantile(s, q), rel=0.01)


def test_error_pdf_is_cdf_derivative():
    d = error_given_z(SPEC, 0.3)
    s = np.array([1e-4, 1e-3, 5e-3, 2e-2])
    h = s * 1e-5
    fd = (d.cdf(s + h) - d.cdf(s - h)) / (2 * h)
    np.testing.assert_allclose(d.pdf(s), fd, rtol=1e-6)


def test_critical_t_values():
    crit = toy_model(SPEC).critical_t()
    np.testing.assert_allclose(crit, [0.0024324324324325, 0.0108620782805597, 0.2391206395862087], rtol=1e-9)
    t_lo, t_hi = toy_model(SPEC).t_range
    assert crit[0] == t_lo and crit[-1] == t_hi


def test_density_nonnegative_and_domain():
    s = np.geomspace(1e-8, 1.0, 200)
    for t in np.linspace(0.003, 0.23, 30):
        assert np.all(joint_st_density(SPEC, s, t) >= 0)
    with pytest.raises(DomainError):
        joint_st_density(SPEC, 0.0, 0.05)


@pytest.mark.parametrize("t", [0.004, 0.02, 0.1, 0.2])
def test_density_marginal_matches_t_density(t):
    model = toy_model(SPEC)
    # substitute s = r^2 to remove the 1/sqrt(s) endpoint singularity
    g = lambda r: 2 * r * model.density(r * r, t)
    total = integrate.quad(g, 1e-12, 4.0, limit=400, epsrel=1e-10)[0]
    assert total == pytest.approx(model.t_density(t), rel=1e-6)


def test_t_density_matches_monte_carlo():
    rng = np.random.Generator(np.random.PCG64(11))
    _, z = SPEC.sample(1_000_000, rng)
    t = posterior_moments(SPEC, z).var
    model = toy_model(SPEC)
    for lo, hi in [(0.02, 0.04), (0.1, 0.15), (0.18, 0.22)]:
        # intervals avoid the critical values, so the density is smooth there
        ts = np.linspace(lo, hi, 2001)
        mass = integrate.trapezoid([model.t_density(v) for v in ts], ts)
        frac = np.mean((t >= lo) & (t < hi))
        assert abs(frac - mass) < 4 * math.sqrt(mass * (1 - mass) / t.size)


def test_cell_probabilities_sum():
    t_lo, t_hi = toy_model(SPEC).t_range
    s_edges = np.concatenate([[0.0], np.geomspace(1e-8, 10.0, 20)])
    p = cell_probabilities(SPEC, s_edges, [t_lo, 0.05, t_hi])
    assert p.shape == (20, 2)
    assert np.all(p >= 0)
    assert p.sum() == pytest.approx(1.0, abs=1e-3)


def test_exact_bin_quantile_full_range_is_marginal():
    # one bin holding everything: compare with a Monte Carlo marginal quantile
    rng = np.random.Generator(np.random.PCG64(5))
    x, z = SPEC.sample(500_000, rng)
    s = (posterior_moments(SPEC, z).mean - x) ** 2
    assert exact_bin_quantile(SPEC, 0.0, math.inf, 0.9) == pytest.approx(np.quantile(s, 0.9), rel=0.01)
    assert math.isnan(exact_bin_quantile(SPEC, 10.0, 20.0, 0.9))


@pytest.fixture(scope="module")
def pipeline_q90():
    return toy_pipeline_check(SPEC, 200_000, 10_000, 0.9, seed=0)


def test_pipeline_coverage(pipeline_q90):
    assert 0.89 <= pipeline_q90.coverage <= 0.92


@pytest.mark.xfail(
    strict=True,
    reason="bin [0.0795, 0.0955) has a flat conditional CDF at 0.9; a 0.4% probability gap moves the quantile by 25%",
)
def test_pipeline_bin_quantiles(pipeline_q90):
    rows = [b for b in pipeline_q90.bins if b.n_cal >= 1000 and math.isfinite(b.exact_q)]
    assert len(rows) >= 10
    bad = [(b.bin_lo, b.conformal_q, b.exact_q) for b in rows if abs(b.conformal_q / b.exact_q - 1) > 0.05]
    assert not bad, bad


def test_pipeline_bin_levels(pipeline_q90):
    # same comparison in probability space, where it is well conditioned
    for b in pipeline_q90.bins:
        if b.n_cal >= 1000:
            cdf, _ = exact_bin_cdf(SPEC, b.bin_lo, b.bin_hi)
            assert abs(cdf(b.conformal_q) - 0.9) < 4 * math.sqrt(0.09 / b.n_cal)


def test_pipeline_csv(tmp_path):
    res = toy_pipeline_check(SPEC, 2000, 500, 0.9, seed=1, n_bins=5)
    res.to_csv(tmp_path / "b.csv", header="# h")
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "# h" and len(lines) == 2 + len(res.bins)


def test_pipeline_rejects_tiny_sets():
    with pytest.raises(ConfigError):
        toy_pipeline_check(SPEC, 10, 10, 0.9)
