import numpy as np
import pytest
from scipy import stats

from aisil.rng import RngStream
from aisil.ssm import ConfigError, init_cloud, log_tempered_target
from aisil.sv import SvModel, SvPrior

from conftest import ConstantLikelihoodModel


def sv_model(T=5, seed=0):
    return SvModel(np.random.default_rng(seed).standard_normal(T))


def test_two_particles_weigh_half():
    cloud = init_cloud(sv_model(), 2, RngStream(1))
    assert np.allclose(cloud.weights, [0.5, 0.5])
    assert cloud.normalized


def test_sv_cloud_inside_prior_support():
    cloud = init_cloud(sv_model(), 560, RngStream(2))
    th = cloud.thetas
    assert th["mu"].shape == (560,)
    assert np.all((th["mu"] > -10) & (th["mu"] < 10))
    assert np.all((th["phi"] > -1) & (th["phi"] < 1))
    assert np.all(th["tau2"] > 0)
    assert abs(cloud.weights.sum() - 1) < 1e-12
    assert cloud.states["x"].shape == (560, 5)


def test_init_cloud_deterministic():
    a = init_cloud(sv_model(), 50, RngStream(3))
    b = init_cloud(sv_model(), 50, RngStream(3))
    for k in a.thetas:
        assert np.array_equal(a.thetas[k], b.thetas[k])
    assert np.array_equal(a.states["x"], b.states["x"])


def test_init_cloud_rejects_tiny_cloud():
    with pytest.raises(ConfigError):
        init_cloud(sv_model(), 1, RngStream(0))


def test_series_shorter_than_two_rejected():
    with pytest.raises(ConfigError):
        SvModel(np.array([0.1]))


def test_prior_draws_match_marginals():
    # 20 independent clouds of 10,000: KS on the pooled draws, and the
    # per-cloud KS p-values must themselves look uniform
    p = SvPrior()
    cdfs = {
        "mu": stats.uniform(p.mu_low, p.mu_high - p.mu_low).cdf,
        "phi": lambda v: stats.beta(p.a0, p.b0).cdf((v + 1) / 2),
        "tau2": stats.invgamma(p.v0 / 2, scale=p.s0 / 2).cdf,
    }
    clouds = [init_cloud(sv_model(T=2), 10_000, RngStream(4, (r,))).thetas for r in range(20)]
    pvals = []
    for k, cdf in cdfs.items():
        pooled = np.concatenate([c[k] for c in clouds])
        assert stats.kstest(pooled, cdf).pvalue > 0.01, k
        pvals += [stats.kstest(c[k], cdf).pvalue for c in clouds]
    assert stats.kstest(pvals, "uniform").pvalue > 0.01


def _point(model, M=4, seed=5):
    cloud = init_cloud(model, M, RngStream(seed))
    return cloud.thetas, cloud.states


def test_tempered_target_prior_only_at_zero():
    model = sv_model()
    th, x = _point(model)
    expect = model.state_logdensity(th, x) + model.prior_logdensity(th)
    assert np.array_equal(log_tempered_target(model, th, x, 0.0), expect)


def test_tempered_target_full_joint_at_one():
    model = sv_model()
    th, x = _point(model)
    expect = model.loglikelihood(th, x) + model.state_logdensity(th, x) + model.prior_logdensity(th)
    assert np.allclose(log_tempered_target(model, th, x, 1.0), expect, rtol=0, atol=1e-12)


def test_tempered_target_half_with_known_loglik():
    model = ConstantLikelihoodModel(log_c=-2.0)
    th, x = _point(model)
    prior_part = log_tempered_target(model, th, x, 0.0)
    assert np.allclose(log_tempered_target(model, th, x, 0.5), prior_part - 1.0, rtol=0, atol=1e-12)


def test_tempered_target_affine_in_a():
    model = sv_model(T=8)
    th, x = _point(model, M=6)
    grid = np.linspace(0, 1, 11)
    vals = np.array([log_tempered_target(model, th, x, a) for a in grid])
    slope = vals[-1] - vals[0]
    assert np.allclose(vals, vals[0] + grid[:, None] * slope, rtol=0, atol=1e-9)


def test_out_of_support_gives_minus_inf():
    model = sv_model()
    th, x = _point(model, M=3)
    th["phi"] = np.array([0.5, 1.2, -0.3])
    th["mu"] = np.array([0.0, 0.0, 11.0])
    out = log_tempered_target(model, th, x, 0.7)
    assert np.isfinite(out[0]) and out[1] == -np.inf and out[2] == -np.inf


def test_temperature_outside_unit_interval_rejected():
    model = sv_model()
    th, x = _point(model)
    with pytest.raises(ValueError):
        log_tempered_target(model, th, x, 1.5)


def test_sv_transition_density_integrates_to_one():
    from aisil.sv import ar1_transition_logpdf
    grid = np.linspace(-15, 15, 30001)
    dens = np.exp(ar1_transition_logpdf(grid, 0.7, -0.5, 0.95, 0.3))
    assert abs(np.trapezoid(dens, grid) - 1) < 1e-8
