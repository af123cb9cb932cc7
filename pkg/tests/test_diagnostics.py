import numpy as np
import pytest
from scipy import stats

from aisil.diagnostics import (RunSummary, ToyGridModel, aggregate_runs, identity_kernel, kde_export,
                               kernel_invariance_harness, pf_variance_harness, silverman_bandwidth, summarize_cloud,
                               toy_pg_kernel, uniformity_test, write_density_csv)
from aisil.lgssm import LgssmFilter, LgssmParams, simulate_lgssm
from aisil.rng import RngStream
from aisil.ssm import ParticleCloud

from conftest import ConstantObservationFilter

# -- toy enumeration harness ---------------------------------------------------------------


def test_toy_target_normalised_and_matches_brute_force():
    m = ToyGridModel()
    p = m.target_probs(0.6)
    assert p.shape == (2, 8) and abs(p.sum() - 1) < 1e-14
    # one cell by hand: theta = 1, path (0, 0, 1)
    s = m.stay[1]
    lik = np.prod([stats.norm.pdf(m.y[t], [0, 0, 1][t], m.noise_sd) for t in range(3)])
    raw = 0.25 * s * (1 - s) * lik**0.6
    assert m.log_target(0.6)[1, 1] == pytest.approx(np.log(raw), abs=1e-12)


@pytest.mark.parametrize("a", [0.0, 0.5, 1.0])
def test_pg_kernel_leaves_toy_target_invariant(a):
    res = kernel_invariance_harness(toy_pg_kernel(ToyGridModel()), ToyGridModel(), a, 100_000, RngStream(1, (a,)),
                                    sweeps=2)
    assert res.passed, (res.pvalue, res.details)


def test_broken_kernel_detected():
    res = kernel_invariance_harness(toy_pg_kernel(ToyGridModel(), broken=True), ToyGridModel(), 1.0, 100_000,
                                    RngStream(2))
    assert res.pvalue < 1e-3 and not res.passed


def test_identity_kernel_passes():
    res = kernel_invariance_harness(identity_kernel, ToyGridModel(), 1.0, 50_000, RngStream(3))
    assert res.passed and res.dof == 15


def test_uniformity_test_bonferroni():
    gen = np.random.default_rng(0)
    ok = uniformity_test({"a": gen.random(5000), "b": gen.random(5000)})
    bad = uniformity_test({"a": gen.random(5000), "b": gen.random(5000) ** 2})
    assert ok.passed and not bad.passed


# -- particle-filter variance harness ---------------------------------------------------------


def test_constant_observation_gives_zero_variance():
    rep = pf_variance_harness(lambda b: ConstantObservationFilter(-1.3, 6, b), [10, 50], 30, 1.0, RngStream(4))
    assert np.allclose(rep.variances(), 0.0, atol=1e-20)
    assert all(r.n_valid == 30 for r in rep.rows)


def test_variance_drops_with_particle_count():
    params = LgssmParams()
    ratios = []
    for seed in range(50):
        y, _ = simulate_lgssm(params, 5, np.random.default_rng(seed))
        rep = pf_variance_harness(lambda b: LgssmFilter(y, params, b), [100, 1000], 30, 1.0, RngStream(5, (seed,)))
        v = rep.variances()
        ratios.append(v[1] / v[0])
    assert 0 < np.median(ratios) < 0.5


def test_variance_harness_needs_thirty_reps():
    with pytest.raises(ValueError):
        pf_variance_harness(lambda b: ConstantObservationFilter(0.0, 3, b), [10], 29, 1.0, RngStream(0))


def test_variance_report_csv(tmp_path):
    rep = pf_variance_harness(lambda b: ConstantObservationFilter(0.0, 3, b), [10, 20], 30, 1.0, RngStream(0))
    rep.to_csv(tmp_path / "v.csv")
    lines = (tmp_path / "v.csv").read_text().splitlines()
    assert lines[0].startswith("n_particles,variance") and len(lines) == 3


# -- summaries and aggregation -------------------------------------------------------------


def _summary(seed, logz=-10.0, mu=0.5, sd=0.2):
    return RunSummary(seed, logz, 12, {"mu": [mu]}, {"mu": [sd]})


def test_single_run_aggregate_passes_through():
    agg = aggregate_runs([_summary(1)])
    assert agg["posterior_mean"]["mu"] == [0.5]
    assert agg["posterior_sd"]["mu"] == [pytest.approx(0.2)]
    assert agg["log_evidence_sd"] == 0.0


def test_identical_runs_have_zero_spread():
    agg = aggregate_runs([_summary(s) for s in range(4)])
    assert agg["between_run_sd"]["mu"] == [0.0]
    assert agg["log_evidence_sd"] == 0.0
    assert agg["seeds"] == [0, 1, 2, 3]


def test_aggregate_rejects_empty():
    with pytest.raises(ValueError):
        aggregate_runs([])


def test_summary_json_round_trip():
    s = _summary(3, logz=-1.5)
    assert RunSummary.from_json(s.to_json()) == s


def test_summarize_cloud_weighted_moments():
    v = np.array([0.0, 1.0, 2.0])
    w = np.array([0.25, 0.5, 0.25])
    cloud = ParticleCloud({"mu": v}, {"x": np.zeros((3, 2))}, np.log(w), np.zeros(3))
    s = summarize_cloud(cloud, 7, -3.0, 5)
    assert s.posterior_mean["mu"] == [pytest.approx(1.0)]
    assert s.posterior_sd["mu"] == [pytest.approx(np.sqrt(0.5))]


# -- kernel density export ---------------------------------------------------------------------


def test_single_draw_density_integrates_to_one():
    grid, dens = kde_export([0.3])
    assert abs(np.trapezoid(dens, grid) - 1) < 1e-3
    assert np.all(dens >= 0)


def test_kde_recovers_standard_normal():
    draws = np.random.default_rng(0).standard_normal(100_000)
    grid = np.linspace(-3, 3, 121)
    _, dens = kde_export(draws, grid=grid)
    assert np.max(np.abs(dens - stats.norm.pdf(grid))) < 0.02


def test_weighted_kde_normalised():
    gen = np.random.default_rng(1)
    x, w = gen.standard_normal(500), gen.random(500)
    grid, dens = kde_export(x, weights=w, n_grid=2000)
    assert abs(np.trapezoid(dens, grid) - 1) < 1e-3


def test_bandwidth_degenerate_input_positive():
    assert silverman_bandwidth(np.full(10, 2.0)) > 0


def test_density_csv(tmp_path):
    write_density_csv(tmp_path / "d.csv", [0.0, 1.0], [0.5, 0.25])
    assert (tmp_path / "d.csv").read_text().splitlines() == ["x,density", "0.0,0.5", "1.0,0.25"]
